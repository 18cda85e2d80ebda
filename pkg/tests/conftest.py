from pathlib import Path

import numpy as np
import pytest
import torch

from skelrep.config import TrainConfig
from skelrep.model import ModelConfig
from skelrep.skeleton import SyntheticSpec, generate_synthetic, normalize

DATA = Path(__file__).parent / "data"


def tiny_config(**kw) -> TrainConfig:
    model = ModelConfig(num_joints=25, hidden=16, layers=1, embed_dim=8, queue_size=32)
    base = dict(epochs_joint=2, epochs_post=1, batch_size=8, lr=0.05, model=model, out_dir="unused")
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def small_dataset():
    manifest = generate_synthetic(SyntheticSpec(num_classes=4, samples_per_class=10, num_frames=32, seed=3))
    return [normalize(s) for s in manifest.samples]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
