"""Pre-training engine: view construction, loss assembly, staging and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as A
from .config import TrainConfig, config_hash
from .losses import LossWeights, Stage, info_nce, kd_loss, mask_loss, total_loss
from .model import EncoderBundle, add_prompt, compose_prediction, momentum_update
from .skeleton import SkeletonSequence

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "skelrep-checkpoint"
CHECKPOINT_VERSION = 1
CHECKPOINT_SECTIONS = ("format", "version", "epoch", "global_step", "stage", "config", "config_hash",
                       "model", "prompts", "queue", "optimizer")


class NumericalError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ViewBundle:
    """Key/query views of one batch and their embeddings.

    ``pairs`` lists the positive ``(tag, z_query, z_key)`` triples.
    """

    s: torch.Tensor
    s_key: torch.Tensor
    z_key: torch.Tensor
    z_inter_key: torch.Tensor
    views: dict[str, torch.Tensor]
    z_query: dict[str, torch.Tensor]
    s_hat: torch.Tensor
    mask: torch.Tensor
    lam: torch.Tensor
    partner: np.ndarray
    clip_windows: list[tuple[int, int]] = field(default_factory=list)

    @property
    def pairs(self) -> list[tuple[str, torch.Tensor, torch.Tensor]]:
        out = []
        for tag in A.DOMAIN_TAGS:
            if tag in self.z_query:
                out.append((tag, self.z_query[tag], self.z_inter_key if tag == "inter" else self.z_key))
        return out


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation without fixed points (a single random cycle)."""
    if n < 2:
        raise ValueError("need at least 2 samples to pair")
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    return partner


def mixed_key_target(z_key: torch.Tensor, partner, lam: torch.Tensor) -> torch.Tensor:
    """Re-normalised ``(1 - lam) * z_a + lam * z_b`` with ``b = partner[a]``."""
    mixed = (1.0 - lam)[:, None] * z_key + lam[:, None] * z_key[torch.as_tensor(partner)]
    return F.normalize(mixed, dim=-1)


def _encode_q(bundle: EncoderBundle, x: torch.Tensor, tag: Optional[str], use_prompts: bool):
    if use_prompts and tag is not None:
        x = add_prompt(x, bundle.prompts, tag)
    pooled, frames = bundle.encoder_q(x)
    return F.normalize(bundle.projector_q(pooled), dim=-1), frames


def build_views(
    batch: np.ndarray,
    params: A.AugmentParams,
    bundle: EncoderBundle,
    rng: np.random.Generator,
    clip_contrast: bool = True,
    semantic_guidance: bool = True,
    use_prompts: bool = True,
) -> ViewBundle:
    """Construct every positive pair for a ``B x T x V x C`` batch.

    The key view is embedded without gradient. Query views are decorated with
    their domain prompt and encoded by the query branch; the predicted view
    keeps its graph back into the decoder unless ``semantic_guidance`` is off.
    """
    B, T, V, _ = batch.shape
    if B < 2:
        raise ValueError("mixing needs a batch of at least 2 sequences")

    s_key = np.stack([A.intra_augment(x, params, rng) for x in batch])
    s_intra = np.stack([A.intra_augment(x, params, rng) for x in batch])
    partner = derangement(B, rng)
    lam = rng.beta(params.mix_alpha, params.mix_alpha, size=B)
    s_inter = np.stack([A.mix(batch[i], batch[partner[i]], lam[i]) for i in range(B)])
    clips, windows = [], []
    for x in s_key:
        clip, win = A.sample_clip(x, rng, params.clip_ratio_range, return_window=True)
        clips.append(clip)
        windows.append(win)
    masks = np.stack([A.make_mask(T, V, params, rng) for _ in range(B)])
    s_mask = batch * masks[..., None]

    dtype = next(bundle.parameters()).dtype
    tt = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
    s = tt(batch)
    s_key_t = tt(s_key)
    mask_t = tt(masks)
    lam_t = tt(lam)

    with torch.no_grad():
        key_in = add_prompt(s_key_t, bundle.prompts, "intra") if use_prompts else s_key_t
        pooled, _ = bundle.encoder_k(key_in)
        z_key = F.normalize(bundle.projector_k(pooled), dim=-1)
        z_inter_key = mixed_key_target(z_key, partner, lam_t)

    views = {"intra": tt(s_intra), "inter": tt(s_inter), "mask": tt(s_mask)}
    if clip_contrast:
        views["clip"] = tt(np.stack(clips))
    tags = [t for t in A.DOMAIN_TAGS if t in views]
    # one recurrent pass over all non-predicted query views
    stacked = torch.cat([add_prompt(views[t], bundle.prompts, t) if use_prompts else views[t] for t in tags])
    pooled, frames = bundle.encoder_q(stacked)
    z_all = F.normalize(bundle.projector_q(pooled), dim=-1)
    z_query = {t: z_all[i * B:(i + 1) * B] for i, t in enumerate(tags)}
    mask_frames = frames[tags.index("mask") * B:(tags.index("mask") + 1) * B]

    s_hat = bundle.decoder(mask_frames)
    fill = s_hat if semantic_guidance else s_hat.detach()
    s_predict = compose_prediction(s, fill, mask_t)
    views["predict"] = s_predict
    z_query["predict"], _ = _encode_q(bundle, s_predict, "predict", use_prompts)

    return ViewBundle(s=s, s_key=s_key_t, z_key=z_key, z_inter_key=z_inter_key, views=views, z_query=z_query,
                      s_hat=s_hat, mask=mask_t, lam=lam_t, partner=partner, clip_windows=windows)


def compute_losses(views: ViewBundle, queue: torch.Tensor, weights: LossWeights, stage: Stage):
    """Per-term losses and the staged total for one view bundle."""
    info, kd = {}, {}
    for tag, z_q, z_k in views.pairs:
        info[tag] = info_nce(z_q, z_k, queue, weights.tau)
        kd[tag] = kd_loss(z_q, z_k, queue, weights.tau_q, weights.tau_k)
    m = mask_loss(views.s, views.s_hat, views.mask)
    return info, kd, m, total_loss(info, kd, m, weights, stage)


def train_step(
    bundle: EncoderBundle,
    views: ViewBundle,
    weights: LossWeights,
    stage: Stage,
    optimizer: torch.optim.Optimizer,
) -> dict[str, float]:
    """One optimisation step, then momentum update, then enqueue the key batch."""
    stage = Stage(stage)
    queue = bundle.queue.negatives().to(views.z_key.dtype)
    info, kd, m, loss = compute_losses(views, queue, weights, stage)

    terms = {f"info_{t}": v for t, v in info.items()}
    terms.update({f"kd_{t}": v for t, v in kd.items()})
    terms["mask"] = m
    terms["total"] = loss
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericalError(f"non-finite loss term {name!r}: {value.item()}")

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    momentum_update(bundle)
    bundle.queue.enqueue(views.z_key)
    out = {name: float(value.detach()) for name, value in terms.items()}
    out["info_all"] = float(sum(info.values()).detach()) if stage is Stage.JOINT else 0.0
    out["kd_all"] = float(sum(kd.values()).detach())
    return out


def stage_for_epoch(epoch: int, cfg: TrainConfig) -> Stage:
    """Stage of 1-based ``epoch``."""
    return Stage.JOINT if epoch <= cfg.epochs_joint else Stage.POST


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


def make_optimizer(bundle: EncoderBundle, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(bundle.trainable_parameters(), lr=cfg.lr, momentum=cfg.sgd_momentum,
                           weight_decay=cfg.weight_decay)


def build_bundle(cfg: TrainConfig) -> EncoderBundle:
    torch.manual_seed(cfg.seed)
    bundle = EncoderBundle(cfg.model)
    if cfg.queue_init == "random":
        bundle.queue.fill_random(torch.Generator().manual_seed(cfg.seed + 1))
    return bundle


@torch.no_grad()
def warm_queue(bundle: EncoderBundle, data: np.ndarray, use_prompts: bool = True, batch_size: int = 256):
    """Fill the queue with key embeddings of un-augmented training samples."""
    dtype = next(bundle.parameters()).dtype
    room = bundle.queue.capacity - len(bundle.queue)
    for start in range(0, min(room, len(data)), batch_size):
        x = torch.as_tensor(data[start:min(start + batch_size, room)], dtype=dtype)
        if use_prompts:
            x = add_prompt(x, bundle.prompts, "intra")
        pooled, _ = bundle.encoder_k(x)
        bundle.queue.enqueue(F.normalize(bundle.projector_k(pooled), dim=-1))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Union[str, Path], bundle: EncoderBundle, optimizer, cfg: TrainConfig,
                    epoch: int, global_step: int, stage: Stage) -> Path:
    path = Path(path)
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "global_step": global_step,
        "stage": Stage(stage).value,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "model": bundle.state_dict(),
        "prompts": {k: v.detach().clone() for k, v in bundle.prompts.prompts.items()},
        "queue": bundle.queue.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: integrity error, cannot decode archive ({exc.__class__.__name__}: {exc})") from exc
    if not isinstance(state, dict):
        raise CheckpointError(f"{path}: integrity error, not a checkpoint container")
    for section in CHECKPOINT_SECTIONS:
        if section not in state:
            raise CheckpointError(f"{path}: missing section {section!r}")
    if state["format"] != CHECKPOINT_FORMAT or state["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {state['format']!r} v{state['version']}")
    return state


def load_checkpoint(path: Union[str, Path]):
    """Rebuild ``(config, bundle, optimizer, state)`` from a checkpoint file."""
    state = read_checkpoint(path)
    cfg = TrainConfig.from_dict(state["config"])
    bundle = EncoderBundle(cfg.model)
    bundle.load_state_dict(state["model"])
    bundle.queue.load_state_dict(state["queue"])
    optimizer = make_optimizer(bundle, cfg)
    if state["optimizer"]:
        optimizer.load_state_dict(state["optimizer"])
    return cfg, bundle, optimizer, state


# ---------------------------------------------------------------------------
# training loop


class Trainer:
    """Owns model, optimizer and queue for one pre-training run."""

    def __init__(self, cfg: TrainConfig, bundle: Optional[EncoderBundle] = None):
        cfg.validate()
        self.cfg = cfg
        self.bundle = bundle if bundle is not None else build_bundle(cfg)
        self.optimizer = make_optimizer(self.bundle, cfg)
        self.epoch = 0
        self.global_step = 0
        self.hash = config_hash(cfg)

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], cfg: Optional[TrainConfig] = None) -> "Trainer":
        stored_cfg, bundle, optimizer, state = load_checkpoint(path)
        trainer = cls(cfg or stored_cfg, bundle)
        trainer.optimizer = optimizer
        trainer.epoch = int(state["epoch"])
        trainer.global_step = int(state["global_step"])
        return trainer

    @property
    def total_epochs(self) -> int:
        return self.cfg.epochs_joint + self.cfg.epochs_post

    def steps_per_epoch(self, n: int) -> int:
        full, rest = divmod(n, self.cfg.batch_size)
        return full + (1 if rest >= 2 else 0)

    def stage(self) -> Stage:
        return stage_for_epoch(max(self.epoch, 1), self.cfg)

    def step(self, batch: np.ndarray, rng: np.random.Generator, stage: Stage, lr: float) -> dict[str, float]:
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.bundle.train()
        views = build_views(batch, self.cfg.augment, self.bundle, rng, clip_contrast=self.cfg.clip_contrast,
                            semantic_guidance=self.cfg.semantic_guidance, use_prompts=self.cfg.use_prompts)
        return train_step(self.bundle, views, self.cfg.loss, stage, self.optimizer)

    def checkpoint_path(self, out_dir: Path, epoch: int) -> Path:
        return out_dir / f"epoch_{epoch:03d}.pt"

    def run(self, data: np.ndarray, out_dir: Union[str, Path, None] = None, max_epochs: Optional[int] = None) -> Path:
        """Train from the current epoch to the end of the schedule.

        Writes ``epoch_XXX.pt`` after every epoch (``epoch_000.pt`` for the
        fresh model) and appends one JSON line per step to ``metrics.jsonl``.
        """
        cfg = self.cfg
        out = Path(out_dir if out_dir is not None else cfg.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write run directory {out}: {exc}") from exc
        metrics_path = out / "metrics.jsonl"
        _truncate_metrics(metrics_path, self.epoch)

        if self.epoch == 0:
            if len(self.bundle.queue) == 0:
                warm_queue(self.bundle, data[np.random.default_rng([cfg.seed, 100, 0]).permutation(len(data))],
                           cfg.use_prompts)
            last = save_checkpoint(self.checkpoint_path(out, 0), self.bundle, self.optimizer, cfg, 0, 0, Stage.JOINT)
        else:
            last = self.checkpoint_path(out, self.epoch)

        n = data.shape[0]
        total_steps = self.total_epochs * self.steps_per_epoch(n)
        end = self.total_epochs if max_epochs is None else min(self.total_epochs, self.epoch + max_epochs)
        with open(metrics_path, "a") as log_fh:
            while self.epoch < end:
                epoch = self.epoch + 1
                stage = stage_for_epoch(epoch, cfg)
                order_rng = np.random.default_rng([cfg.seed, 100, epoch])
                for idx in _batches(n, cfg.batch_size, order_rng):
                    rng = np.random.default_rng([cfg.seed, 200, self.global_step])
                    lr = cosine_lr(cfg.lr, self.global_step, total_steps)
                    metrics = self.step(data[idx], rng, stage, lr)
                    self.global_step += 1
                    record = {"step": self.global_step, "epoch": epoch, "stage": stage.value, "lr": lr,
                              "config_hash": self.hash, **metrics}
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
                self.epoch = epoch
                last = save_checkpoint(self.checkpoint_path(out, epoch), self.bundle, self.optimizer, cfg,
                                       epoch, self.global_step, stage)
                log.info("epoch %d (%s) done", epoch, stage.value)
        return last


def _truncate_metrics(path: Path, epoch: int):
    """Drop log lines past ``epoch`` so a resumed run does not duplicate steps."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["epoch"] <= epoch]
    path.write_text("".join(line + "\n" for line in keep))


def dataset_tensor(samples: list[SkeletonSequence]) -> np.ndarray:
    return np.stack([s.data for s in samples])


def run_pretraining(cfg: TrainConfig, dataset: Union[np.ndarray, list[SkeletonSequence]],
                    out_dir: Union[str, Path, None] = None, resume: Union[str, Path, None] = None) -> Path:
    """Run (or resume) the full two-stage schedule; returns the last checkpoint path."""
    data = dataset if isinstance(dataset, np.ndarray) else dataset_tensor(dataset)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    trainer = Trainer.from_checkpoint(resume, cfg) if resume is not None else Trainer(cfg)
    return trainer.run(data, out_dir)


def read_metrics(path: Union[str, Path]) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
