"""Acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (shown in the pytest terminal
summary, or printed directly when this file is run as a script) and then
asserts. Runtime budgets are checked alongside the numerical tolerances.
"""

import collections
import statistics
import time

import numpy as np
import pytest
import torch

import oracles
from conftest import ACCEPTANCE_RESULTS, tiny_config
from desk import desk_config, desk_data, desk_untrimmed
from skelrep import evaluation as E
from skelrep.losses import LossWeights, Stage, info_nce, kd_loss, mask_loss
from skelrep.model import MemoryQueue, momentum_update
from skelrep.trainer import Trainer, build_bundle, build_views, compute_losses, dataset_tensor, read_metrics, \
    train_step, warm_queue


def report(n: int, title: str, checks: dict, elapsed: float, budget: float):
    checks = dict(checks)
    checks[f"runtime {elapsed:.1f}s < {budget:g}s"] = elapsed < budget
    ok = all(bool(v) for v in checks.values())
    detail = "; ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items())
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title} | {detail}"
    ACCEPTANCE_RESULTS[n] = line
    print(line)
    assert ok, line


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _t(x, grad=False):
    return torch.tensor(np.asarray(x), dtype=torch.float64, requires_grad=grad)


# ---------------------------------------------------------------------------


def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"info_nce": 0.0, "kd_loss": 0.0, "mask_loss": 0.0}
    n_inputs = 25
    for _ in range(n_inputs):
        d, n = int(rng.integers(2, 9)), int(rng.integers(1, 12))
        zq, zk, q = _unit(rng, d), _unit(rng, d), _unit(rng, n, d)
        tau, tau_q, tau_k = rng.uniform(0.05, 1.0, size=3)
        worst["info_nce"] = max(worst["info_nce"],
                                abs(info_nce(_t(zq), _t(zk), _t(q), tau).item() - oracles.info_nce(zq, zk, q, tau)))
        worst["kd_loss"] = max(worst["kd_loss"], abs(kd_loss(_t(zq), _t(zk), _t(q), tau_q, tau_k).item()
                                                     - oracles.kd_loss(zq, zk, q, tau_q, tau_k)))
        T_, V, C = int(rng.integers(1, 6)), int(rng.integers(1, 6)), 3
        s, s_hat = rng.normal(size=(T_, V, C)), rng.normal(size=(T_, V, C))
        m = (rng.random((T_, V)) > 0.5).astype(float)
        m.flat[rng.integers(m.size)] = 0.0
        worst["mask_loss"] = max(worst["mask_loss"], abs(mask_loss(_t(s), _t(s_hat), _t(m)).item()
                                                         - oracles.mask_loss(s.tolist(), s_hat.tolist(), m.tolist())))
    checks = {f"{k} max |err| {v:.1e} <= 1e-10 over {n_inputs} inputs": v <= 1e-10 for k, v in worst.items()}
    report(1, "loss-math oracles", checks, time.perf_counter() - t0, 5)


def _fd_rel_error(fn, x: torch.Tensor, step: float = 1e-5) -> float:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(x)
    flat, nflat = x.detach().view(-1), numeric.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn(x.detach()).item()
        flat[i] = orig - step
        lo = fn(x.detach()).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * step)
    return ((analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)).item()


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    d = 8
    zq, zk, q = _t(_unit(rng, d)), _t(_unit(rng, d)), _t(_unit(rng, 6, d))
    s, s_hat = _t(rng.normal(size=(4, 2, 1))), _t(rng.normal(size=(4, 2, 1)))  # 8 entries
    m = _t((rng.random((4, 2)) > 0.5).astype(float))
    m[0, 0] = 0.0
    errors = {
        "info_nce wrt z_q": _fd_rel_error(lambda x: info_nce(x, zk, q, 0.2), zq),
        "info_nce wrt z_k": _fd_rel_error(lambda x: info_nce(zq, x, q, 0.2), zk),
        "info_nce wrt queue": _fd_rel_error(lambda x: info_nce(zq, zk, x, 0.2), q),
        "kd_loss wrt z_q": _fd_rel_error(lambda x: kd_loss(x, zk, q, 0.1, 0.05), zq),
        "mask_loss wrt s_hat": _fd_rel_error(lambda x: mask_loss(s, x, m), s_hat),
        "mask_loss wrt s": _fd_rel_error(lambda x: mask_loss(x, s_hat, m), s),
    }
    checks = {f"{k} rel err {v:.1e} < 1e-4": v < 1e-4 for k, v in errors.items()}
    report(2, "finite-difference gradients", checks, time.perf_counter() - t0, 30)


def test_criterion_3_structural_invariants(small_dataset):
    t0 = time.perf_counter()
    checks = {}
    cfg = tiny_config()
    batch = dataset_tensor(small_dataset[:8])
    bundle = build_bundle(cfg)
    warm_queue(bundle, batch)
    rng = np.random.default_rng(0)

    views = build_views(batch, cfg.augment, bundle, rng)
    checks["five positive pairs"] = [t for t, _, _ in views.pairs] == ["intra", "inter", "clip", "mask", "predict"]

    opt = torch.optim.SGD(bundle.trainable_parameters(), lr=0.1)
    k_before = [p.detach().clone() for p in bundle.key_parameters()]
    train_step(bundle, views, cfg.loss, Stage.JOINT, opt)
    checks["zero key-branch gradients"] = all(p.grad is None or not p.grad.any() for p in bundle.key_parameters())
    m = bundle.momentum
    checks["key params follow EMA of query"] = all(
        torch.allclose(ka, m * kb + (1 - m) * q.detach(), atol=1e-7, rtol=0)
        for kb, ka, q in zip(k_before, bundle.key_parameters(), bundle.query_parameters()))

    queue = MemoryQueue(4, 2)
    keys = torch.nn.functional.normalize(torch.arange(1.0, 13.0).view(6, 2), dim=1)
    queue.enqueue(keys[:3])
    queue.enqueue(keys[3:])
    checks["FIFO queue keeps newest in arrival order"] = torch.equal(queue.contents(), keys[2:])

    exact = True
    for mom in (0.0, 1.0, 0.999):
        b = build_bundle(tiny_config())
        b.momentum = mom
        with torch.no_grad():
            for p in b.query_parameters():
                p.add_(torch.randn_like(p))
        kb = [p.detach().clone() for p in b.key_parameters()]
        qs = [p.detach().clone() for p in b.query_parameters()]
        with torch.no_grad():
            momentum_update(b)
        for before, after, q in zip(kb, b.key_parameters(), qs):
            expected = q if mom == 0 else before if mom == 1 else before * mom + q * (1 - mom)
            exact &= torch.equal(after, expected)
    checks["momentum update exact for m in {0, 1, 0.999}"] = exact

    views = build_views(batch, cfg.augment, bundle, np.random.default_rng(1))
    w = LossWeights(lambda_m=0.7, lambda_kd=1.3)
    _, kd, mterm, post = compute_losses(views, bundle.queue.negatives(), w, Stage.POST)
    gap = abs(post.item() - (w.lambda_m * mterm + w.lambda_kd * sum(kd.values())).item())
    checks[f"post-stage loss identity gap {gap:.1e} <= 1e-12"] = gap <= 1e-12

    g = torch.Generator().manual_seed(0)
    s, s_hat = torch.randn(2, 6, 5, 3, generator=g, dtype=torch.float64), torch.randn(2, 6, 5, 3, generator=g,
                                                                                       dtype=torch.float64)
    mask = (torch.rand(2, 6, 5, generator=g) > 0.5).double()
    mask[0, 0, 0] = 0.0
    noisy = s + mask[..., None] * torch.randn(s.shape, generator=g, dtype=torch.float64) * 10
    checks["mask loss ignores visible entries"] = mask_loss(noisy, s_hat, mask).item() == mask_loss(s, s_hat, mask).item()
    report(3, "structural invariants", checks, time.perf_counter() - t0, 60)


def _decoder_grad_norm(guidance: bool, batch) -> float:
    cfg = tiny_config()
    bundle = build_bundle(cfg)
    warm_queue(bundle, batch)
    views = build_views(batch, cfg.augment, bundle, np.random.default_rng(0), semantic_guidance=guidance)
    # contrastive branch only: switch the reconstruction term off
    *_, loss = compute_losses(views, bundle.queue.negatives(), LossWeights(lambda_m=0.0), Stage.JOINT)
    loss.backward()
    grads = [p.grad for p in bundle.decoder.parameters() if p.grad is not None]
    return float(torch.sqrt(sum((g ** 2).sum() for g in grads))) if grads else 0.0


def test_criterion_4_semantic_guidance(small_dataset):
    t0 = time.perf_counter()
    batch = dataset_tensor(small_dataset[:8])
    torch.manual_seed(0)
    detached = _decoder_grad_norm(False, batch)
    torch.manual_seed(0)
    guided = _decoder_grad_norm(True, batch)
    checks = {f"detached decoder grad norm {detached:.2e} == 0": detached == 0.0,
              f"guided decoder grad norm {guided:.2e} > 0": guided > 0.0}
    report(4, "semantic-guidance gradient path", checks, time.perf_counter() - t0, 60)


# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    train, test, held = desk_data()
    cfg = desk_config()
    out = tmp_path_factory.mktemp("desk")
    torch.use_deterministic_algorithms(True)
    t0 = time.perf_counter()
    trainer = Trainer(cfg)
    trainer.run(dataset_tensor(train), out)
    return dict(trainer=trainer, train=train, test=test, held=held, out=out,
                elapsed=time.perf_counter() - t0, cfg=cfg)


def test_criterion_5_desk_end_to_end(desk):
    t0 = time.perf_counter()
    train, test, held = desk["train"], desk["test"], desk["held"]
    cfg = desk["cfg"]
    by_epoch = collections.defaultdict(list)
    for row in read_metrics(desk["out"] / "metrics.jsonl"):
        by_epoch[row["epoch"]].append(row["total"])
    last = cfg.epochs_joint + cfg.epochs_post
    ratio = np.mean(by_epoch[last]) / np.mean(by_epoch[1])

    enc = E.FrozenEncoder(desk["trainer"].bundle)
    linear = E.linear_eval(enc, train, test)
    knn = E.knn_retrieval(enc, train, test)
    knn_raw = E.knn_retrieval(E.raw_features, train, test)
    occluded = E.occluded_eval(enc, train, E.build_occluded_set(test, "temporal", seed=0), "temporal")
    fewshot, _ = E.fewshot_eval(enc, held, n_way=2, k_shot=1, episodes=100, seed=0)

    checks = {
        f"(a) final/first epoch loss {ratio:.3f} < 0.5": ratio < 0.5,
        f"(b) linear probe {linear:.3f} >= 0.90": linear >= 0.90,
        f"(c) 1-NN {knn:.3f} >= raw 1-NN {knn_raw:.3f}": knn >= knn_raw,
        f"(d) temporal occluded {occluded:.3f} within 0.15 of clean {linear:.3f}": linear - occluded <= 0.15,
        f"(e) 2-way 1-shot {fewshot:.3f} >= 0.75": fewshot >= 0.75,
    }
    elapsed = desk["elapsed"] + time.perf_counter() - t0
    report(5, f"desk end-to-end ({len(train)} train / {len(test)} test, {cfg.epochs_joint}+{cfg.epochs_post} epochs)",
           checks, elapsed, 600)


# ---------------------------------------------------------------------------


CLIP_SEEDS = (0, 1, 2)


def _detection_map(clip_contrast: bool, seed: int, train, untrimmed, out_dir) -> float:
    trainer = Trainer(desk_config(seed=seed, clip_contrast=clip_contrast))
    trainer.run(dataset_tensor(train), out_dir / f"clip{int(clip_contrast)}_seed{seed}")
    det_train, det_test = untrimmed
    return E.detect(E.FrozenEncoder(trainer.bundle).frames, det_train, det_test, tious=(0.1,))[0.1]


def test_criterion_6_clip_contrast_trend(tmp_path):
    t0 = time.perf_counter()
    train, _, _ = desk_data()
    untrimmed = desk_untrimmed()
    with_clip = [_detection_map(True, s, train, untrimmed, tmp_path) for s in CLIP_SEEDS]
    without = [_detection_map(False, s, train, untrimmed, tmp_path) for s in CLIP_SEEDS]
    med_on, med_off = statistics.median(with_clip), statistics.median(without)
    paired = sum(a > b for a, b in zip(with_clip, without))
    checks = {f"median mAP@0.1 with clip {med_on:.3f} >= without {med_off:.3f} "
              f"(on {np.round(with_clip, 3).tolist()}, off {np.round(without, 3).tolist()}, "
              f"clip ahead in {paired}/{len(CLIP_SEEDS)} paired seeds)": med_on >= med_off}
    report(6, "clip-contrast detection trend", checks, time.perf_counter() - t0, 1800)


def test_criterion_7_determinism(tmp_path):
    t0 = time.perf_counter()
    train, _, _ = desk_data()
    data = dataset_tensor(train)
    cfg = desk_config()
    steps_per_epoch = Trainer(cfg).steps_per_epoch(len(data))
    epochs = -(-100 // steps_per_epoch)
    torch.use_deterministic_algorithms(True)
    logs = []
    for name in ("a", "b"):
        Trainer(cfg).run(data, tmp_path / name, max_epochs=epochs)
        logs.append(read_metrics(tmp_path / name / "metrics.jsonl")[:100])
    a, b = logs
    worst = 0.0
    for ra, rb in zip(a, b):
        for key, va in ra.items():
            if isinstance(va, float):
                worst = max(worst, abs(va - rb[key]) / max(abs(va), 1e-12))
    checks = {"100 steps logged in both runs": len(a) == len(b) == 100,
              f"max per-step relative difference {worst:.1e} <= 1e-5": worst <= 1e-5}
    report(7, "determinism over the first 100 steps", checks, time.perf_counter() - t0, 600)


def test_criterion_8_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(50):
        n_gt, n_prop = int(rng.integers(1, 6)), int(rng.integers(0, 10))
        gts = []
        for _ in range(n_gt):
            s = int(rng.integers(0, 90))
            gts.append((s, s + int(rng.integers(1, 20))))
        props = []
        for _ in range(n_prop):
            s = int(rng.integers(0, 90))
            props.append((s, s + int(rng.integers(1, 20))))
        conf = rng.random(n_prop)
        order = np.argsort(-conf, kind="stable")
        ranked = [props[i] for i in order]
        thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        got = E.interval_ap([E.Proposal(a, b, 0, float(conf[i])) for (a, b), i in zip(ranked, order)],
                            [E.Proposal(a, b, 0) for a, b in gts], thr)
        mismatches += got != oracles.brute_force_ap(ranked, gts, thr)
    hand = E.tiou((0, 10), (5, 15))
    p, g = [E.Proposal(0, 10, 0)], [E.Proposal(5, 15, 0)]
    checks = {
        f"interval_ap == brute force on 50 instances ({mismatches} mismatches)": mismatches == 0,
        "tIoU([0,10),[5,15)) == 5/15": hand == 5 / 15,
        "hit at 0.1, miss at 0.5": E.interval_ap(p, g, 0.1) == 1.0 and E.interval_ap(p, g, 0.5) == 0.0,
    }
    report(8, "metric-engine oracles", checks, time.perf_counter() - t0, 60)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
