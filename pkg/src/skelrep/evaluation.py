"""Frozen-encoder downstream protocols and the temporal detection metric.

Protocols take a *featurizer*: a callable mapping an ``N x T x V x C``
array to ``N x H`` features. ``FrozenEncoder`` wraps a trained bundle;
``raw_features`` is the flattened-coordinate baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from . import augment as A
from .model import EncoderBundle
from .skeleton import BACKGROUND, SkeletonSequence, UntrimmedSequence

Featurizer = Callable[[np.ndarray], np.ndarray]
DEFAULT_TIOUS = (0.1, 0.2, 0.3, 0.4, 0.5)


class EvalError(ValueError):
    pass


class FrozenEncoder:
    """Read-only view of a bundle's query encoder."""

    def __init__(self, bundle: EncoderBundle, batch_size: int = 256):
        self.encoder = bundle.encoder_q
        self.batch_size = batch_size
        self.dtype = next(self.encoder.parameters()).dtype

    @torch.no_grad()
    def __call__(self, x: np.ndarray) -> np.ndarray:
        was_training = self.encoder.training
        self.encoder.eval()
        out = []
        for start in range(0, len(x), self.batch_size):
            chunk = torch.as_tensor(np.asarray(x[start:start + self.batch_size]), dtype=self.dtype)
            pooled, _ = self.encoder(chunk)
            out.append(pooled.numpy().astype(np.float64))
        self.encoder.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.encoder.out_dim))

    @torch.no_grad()
    def frames(self, seq: np.ndarray) -> np.ndarray:
        """Per-timestep hidden states ``T x H`` for one (possibly long) sequence."""
        was_training = self.encoder.training
        self.encoder.eval()
        _, frames = self.encoder(torch.as_tensor(seq[None], dtype=self.dtype))
        self.encoder.train(was_training)
        return frames[0].numpy().astype(np.float64)


def raw_features(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(len(x), -1)


def _xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x), np.asarray(y)
    x = np.stack([s.data for s in data])
    y = np.array([-1 if s.label is None else s.label for s in data])
    return x, y


# ---------------------------------------------------------------------------
# linear probe and retrieval


@dataclass
class LinearConfig:
    C: float = 1.0
    max_iter: int = 2000
    seed: int = 0


def fit_linear(features: np.ndarray, labels: np.ndarray, config: Optional[LinearConfig] = None):
    config = config or LinearConfig()
    clf = make_pipeline(StandardScaler(),
                        LogisticRegression(C=config.C, max_iter=config.max_iter, random_state=config.seed))
    if len(np.unique(labels)) < 2:
        raise EvalError("linear probe needs at least two classes in the training split")
    clf.fit(features, labels)
    return clf


def linear_eval_features(train_feats, train_labels, test_feats, test_labels, config: Optional[LinearConfig] = None) -> float:
    missing = set(np.unique(test_labels)) - set(np.unique(train_labels))
    if missing:
        raise EvalError(f"test classes {sorted(int(c) for c in missing)} absent from the training split")
    clf = fit_linear(train_feats, train_labels, config)
    return float(np.mean(clf.predict(test_feats) == test_labels))


def linear_eval(featurizer: Featurizer, train_set, test_set, config: Optional[LinearConfig] = None) -> float:
    """Top-1 accuracy of a linear classifier on frozen features."""
    xtr, ytr = _xy(train_set)
    xte, yte = _xy(test_set)
    return linear_eval_features(featurizer(xtr), ytr, featurizer(xte), yte, config)


def _unit(f: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.where(n == 0, 1.0, n)


def knn_features(gallery_feats, gallery_labels, query_feats, query_labels, k: int = 1) -> float:
    if len(gallery_feats) == 0:
        raise EvalError("retrieval gallery is empty")
    sim = _unit(query_feats) @ _unit(gallery_feats).T
    # stable ordering: highest similarity first, lowest gallery index on ties
    nearest = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    votes = gallery_labels[nearest]
    pred = np.array([np.bincount(v - v.min()).argmax() + v.min() for v in votes])
    return float(np.mean(pred == query_labels))


def knn_retrieval(featurizer: Featurizer, gallery, queries, k: int = 1) -> float:
    """Precision@k (majority label for k > 1) under cosine similarity."""
    xg, yg = _xy(gallery)
    xq, yq = _xy(queries)
    if len(xg) == 0:
        raise EvalError("retrieval gallery is empty")
    return knn_features(featurizer(xg), yg, featurizer(xq), yq, k)


# ---------------------------------------------------------------------------
# occlusion


@dataclass
class OccludedSet:
    samples: list[SkeletonSequence]
    mode: str
    seed: int
    ratio: Optional[float] = None


def build_occluded_set(samples: Sequence[SkeletonSequence], mode: str, seed: int,
                       ratio: Optional[float] = None) -> OccludedSet:
    """Occlude each sample with its own seeded stream; same seed, same masks."""
    out = []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([seed, i])
        out.append(s.with_data(A.synth_occlusion(s.data, mode, rng, ratio=ratio)))
    return OccludedSet(out, mode, seed, ratio)


def occluded_eval(featurizer: Featurizer, clean_train, occluded_test: OccludedSet, mode: str,
                  config: Optional[LinearConfig] = None) -> float:
    if occluded_test.mode != mode:
        raise EvalError(f"occluded set was built for mode {occluded_test.mode!r}, not {mode!r}")
    return linear_eval(featurizer, clean_train, occluded_test.samples, config)


# ---------------------------------------------------------------------------
# few-shot


def episode_accuracy(support_feats, support_labels, query_feats, query_labels, C: float = 1.0) -> float:
    clf = SVC(kernel="linear", C=C)
    clf.fit(support_feats, support_labels)
    return float(np.mean(clf.predict(query_feats) == query_labels))


def fewshot_features(features: np.ndarray, labels: np.ndarray, n_way: int = 5, k_shot: int = 1,
                     episodes: int = 200, n_query: int = 15, seed: int = 0) -> tuple[float, float]:
    classes = np.unique(labels)
    if len(classes) < n_way:
        raise EvalError(f"{n_way}-way episodes need {n_way} held-out classes, found {len(classes)}")
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    for c, idx in by_class.items():
        if len(idx) <= k_shot:
            raise EvalError(f"class {c} has {len(idx)} samples, need more than {k_shot}")
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(episodes):
        chosen = rng.choice(classes, size=n_way, replace=False)
        s_idx, s_lab, q_idx, q_lab = [], [], [], []
        for c in chosen:
            perm = rng.permutation(by_class[c])
            nq = min(n_query, len(perm) - k_shot)
            s_idx.extend(perm[:k_shot])
            s_lab.extend([c] * k_shot)
            q_idx.extend(perm[k_shot:k_shot + nq])
            q_lab.extend([c] * nq)
        accs.append(episode_accuracy(features[s_idx], np.array(s_lab), features[q_idx], np.array(q_lab)))
    return float(np.mean(accs)), float(np.std(accs))


def fewshot_eval(featurizer: Featurizer, heldout_set, n_way: int = 5, k_shot: int = 1, episodes: int = 200,
                 seed: int = 0, n_query: int = 15) -> tuple[float, float]:
    """Mean and std of query accuracy over episodes of a linear SVM fit on support features."""
    x, y = _xy(heldout_set)
    return fewshot_features(featurizer(x), y, n_way, k_shot, episodes, n_query, seed)


# ---------------------------------------------------------------------------
# temporal detection


@dataclass
class Proposal:
    start: int
    end: int
    label: int
    confidence: float = 1.0
    video: int = 0

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"empty interval [{self.start}, {self.end})")
        if not np.isfinite(self.confidence):
            raise ValueError("confidence must be finite")


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def match_proposals(proposals: Sequence[Proposal], ground_truth: Sequence[Proposal], threshold: float) -> np.ndarray:
    """Greedy one-to-one matching in the given order; returns a hit flag per proposal."""
    used = [False] * len(ground_truth)
    hits = np.zeros(len(proposals), dtype=bool)
    for i, p in enumerate(proposals):
        best, best_j = -1.0, -1
        for j, g in enumerate(ground_truth):
            if used[j] or g.video != p.video:
                continue
            iou = tiou((p.start, p.end), (g.start, g.end))
            if iou >= threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            hits[i] = True
    return hits


def interval_ap(proposals: Sequence[Proposal], ground_truth: Sequence[Proposal], threshold: float) -> float:
    """Non-interpolated AP, sum over ranks of recall increment times precision.

    ``proposals`` must already be sorted by descending confidence.
    """
    if not ground_truth:
        return 0.0
    hits = match_proposals(proposals, ground_truth, threshold)
    if not len(hits):
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / len(ground_truth)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def segments(labels: np.ndarray, background: int = BACKGROUND) -> list[tuple[int, int, int]]:
    """Runs of equal non-background labels as ``(start, end, label)``."""
    out = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            if labels[start] != background:
                out.append((start, t, int(labels[start])))
            start = t
    return out


def proposals_from_probs(probs: np.ndarray, classes: np.ndarray, video: int = 0,
                         min_len: int = 2) -> list[Proposal]:
    """Merge consecutive same-class frames; confidence is the mean class probability."""
    pred = classes[np.argmax(probs, axis=1)]
    col = {int(c): i for i, c in enumerate(classes)}
    out = []
    for start, end, label in segments(pred):
        if end - start < min_len:
            continue
        out.append(Proposal(start, end, label, float(probs[start:end, col[label]].mean()), video))
    return out


def mean_ap(proposals: Sequence[Proposal], ground_truth: Sequence[Proposal],
            tious: Sequence[float] = DEFAULT_TIOUS) -> dict[float, float]:
    """mAP over the classes present in the ground truth, one value per threshold."""
    classes = sorted({g.label for g in ground_truth})
    result = {}
    for thr in tious:
        aps = []
        for c in classes:
            props = sorted((p for p in proposals if p.label == c), key=lambda p: -p.confidence)
            gts = [g for g in ground_truth if g.label == c]
            aps.append(interval_ap(props, gts, thr))
        result[float(thr)] = float(np.mean(aps)) if aps else 0.0
    return result


def ground_truth_of(sequences: Sequence[UntrimmedSequence]) -> list[Proposal]:
    return [Proposal(s, e, c, 1.0, v) for v, seq in enumerate(sequences) for s, e, c in segments(seq.frame_labels)]


def detect(frame_featurizer: Callable[[np.ndarray], np.ndarray], train_set: Sequence[UntrimmedSequence],
           test_set: Sequence[UntrimmedSequence], tious: Sequence[float] = DEFAULT_TIOUS,
           config: Optional[LinearConfig] = None) -> dict[float, float]:
    """Frame-level linear classification turned into proposals, scored by mAP@tIoU.

    Background is an explicit extra class; no smoothing and no NMS.
    """
    train_labels = np.concatenate([s.frame_labels for s in train_set])
    if not np.any(train_labels != BACKGROUND):
        raise EvalError("detection training split has no foreground frames")
    train_feats = np.concatenate([frame_featurizer(s.data) for s in train_set])
    clf = fit_linear(train_feats, train_labels, config)
    classes = clf.classes_
    proposals = []
    for v, seq in enumerate(test_set):
        probs = clf.predict_proba(frame_featurizer(seq.data))
        proposals.extend(proposals_from_probs(probs, classes, video=v))
    return mean_ap(proposals, ground_truth_of(test_set), tious)
