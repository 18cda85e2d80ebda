"""Stochastic view constructors operating on ``T x V x C`` numpy arrays.

Every function takes an explicit ``numpy.random.Generator``; nothing here
touches global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .skeleton import default_parts

DOMAIN_TAGS = ("intra", "inter", "clip", "mask", "predict")


@dataclass
class AugmentParams:
    shear_beta: float = 0.5
    jitter_sigma: float = 0.05
    jitter_joint_fraction: float = 0.15
    crop_ratio_range: tuple[float, float] = (0.5, 1.0)
    mix_alpha: float = 1.0
    clip_ratio_range: tuple[float, float] = (0.10, 0.40)
    mask_ratio: float = 0.5
    # None means T // 8
    segment_len: Optional[int] = None
    # None means the default body-part table for V
    part_partition: Optional[list[list[int]]] = None

    def validate(self, num_joints: Optional[int] = None):
        if self.shear_beta < 0 or self.jitter_sigma < 0:
            raise ValueError("shear_beta and jitter_sigma must be non-negative")
        if not 0 <= self.jitter_joint_fraction <= 1:
            raise ValueError("jitter_joint_fraction must lie in [0, 1]")
        lo, hi = self.crop_ratio_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_ratio_range {self.crop_ratio_range} must be ordered inside (0, 1]")
        lo, hi = self.clip_ratio_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"clip_ratio_range {self.clip_ratio_range} must be ordered inside (0, 1]")
        if self.mix_alpha <= 0:
            raise ValueError("mix_alpha must be positive")
        if not 0 <= self.mask_ratio <= 1:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.segment_len is not None and self.segment_len < 1:
            raise ValueError("segment_len must be >= 1")
        if num_joints is not None:
            self.parts(num_joints)

    def parts(self, num_joints: int) -> list[list[int]]:
        parts = default_parts(num_joints) if self.part_partition is None else [list(p) for p in self.part_partition]
        flat = sorted(j for p in parts for j in p)
        if flat != list(range(num_joints)) or any(len(p) == 0 for p in parts):
            raise ValueError("part_partition must be disjoint, non-empty and cover every joint")
        return parts

    def segment_length(self, num_frames: int) -> int:
        return self.segment_len if self.segment_len is not None else max(1, num_frames // 8)


def _resize(window: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of ``window`` (W x ...) onto ``length`` evenly spaced points."""
    w = window.shape[0]
    if w == length:
        return window.copy()
    pos = np.linspace(0.0, w - 1, length)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, w - 1)
    frac = (pos - lo).reshape(-1, *([1] * (window.ndim - 1)))
    return window[lo] * (1.0 - frac) + window[hi] * frac


def crop_window(num_frames: int, ratio: float, rng: np.random.Generator) -> tuple[int, int]:
    length = math.ceil(ratio * num_frames - 1e-9)
    if length < 2:
        raise ValueError(f"ratio {ratio} leaves fewer than 2 of {num_frames} frames")
    length = min(length, num_frames)
    start = int(rng.integers(0, num_frames - length + 1))
    return start, start + length


def temporal_crop_resize(seq: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < ratio <= 1:
        raise ValueError(f"crop ratio {ratio} outside (0, 1]")
    start, end = crop_window(seq.shape[0], ratio, rng)
    return _resize(seq[start:end], seq.shape[0])


def shear_matrix(beta: float, rng: np.random.Generator) -> np.ndarray:
    a = np.eye(3)
    off = ~np.eye(3, dtype=bool)
    a[off] = rng.uniform(-beta, beta, size=6)
    return a


def shear(seq: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    if beta < 0:
        raise ValueError("shear beta must be non-negative")
    a = shear_matrix(beta, rng)
    return seq @ a.T


def joint_jitter(seq: np.ndarray, sigma: float, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("jitter sigma must be non-negative")
    out = seq.copy()
    V = seq.shape[1]
    count = math.ceil(fraction * V - 1e-9)
    if count == 0 or sigma == 0:
        return out
    joints = rng.choice(V, size=count, replace=False)
    out[:, joints] += rng.normal(0.0, sigma, size=(seq.shape[0], count, seq.shape[2]))
    return out


def intra_augment(seq: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Temporal crop-resize, then shear, then joint jittering."""
    lo, hi = params.crop_ratio_range
    out = temporal_crop_resize(seq, rng.uniform(lo, hi), rng)
    out = shear(out, params.shear_beta, rng)
    return joint_jitter(out, params.jitter_sigma, params.jitter_joint_fraction, rng)


def mix(seq1: np.ndarray, seq2: np.ndarray, lam: float) -> np.ndarray:
    if seq1.shape != seq2.shape:
        raise ValueError(f"cannot mix shapes {seq1.shape} and {seq2.shape}")
    if not 0 <= lam <= 1:
        raise ValueError(f"mixing coefficient {lam} outside [0, 1]")
    return (1.0 - lam) * seq1 + lam * seq2


def sample_clip(
    anchor_seq: np.ndarray,
    rng: np.random.Generator,
    ratio_range: Sequence[float] = (0.10, 0.40),
    return_window: bool = False,
):
    """Short contiguous clip of the anchor, resized to the anchor length.

    With ``return_window`` also returns the ``(start, end)`` frame window.
    """
    T = anchor_seq.shape[0]
    ratio = rng.uniform(*ratio_range)
    length = max(2, math.ceil(ratio * T - 1e-9))
    if length > T:
        raise ValueError(f"sequence of {T} frames too short for a 2-frame clip")
    start = int(rng.integers(0, T - length + 1))
    clip = _resize(anchor_seq[start:start + length], T)
    if return_window:
        return clip, (start, start + length)
    return clip


def mask_block(T: int, V: int, part: Sequence[int], start: int, length: int) -> np.ndarray:
    m = np.ones((T, V), dtype=np.float64)
    m[start:start + length, list(part)] = 0.0
    return m


def make_mask(T: int, V: int, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Body-part x temporal-segment mask; 1 = visible, 0 = masked.

    Blocks are drawn until the masked fraction reaches ``params.mask_ratio``.
    """
    m = np.ones((T, V), dtype=np.float64)
    target = params.mask_ratio
    if target <= 0:
        return m
    if target >= 1:
        return np.zeros_like(m)
    parts = params.parts(V)
    seg = min(params.segment_length(T), T)
    total = T * V
    masked = 0
    while masked < target * total - 1e-12:
        part = parts[int(rng.integers(len(parts)))]
        start = int(rng.integers(0, T - seg + 1))
        m[start:start + seg, part] = 0.0
        masked = total - int(m.sum())
    return m


def apply_mask(seq: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask.shape != seq.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match sequence {seq.shape[:2]}")
    return seq * mask[..., None]


@dataclass
class Occlusion:
    mode: str
    ratio: float
    mask: np.ndarray = field(repr=False)


def synth_occlusion(
    seq: np.ndarray,
    mode: str,
    rng: np.random.Generator,
    ratio: Optional[float] = None,
    parts: Optional[list[list[int]]] = None,
    return_mask: bool = False,
):
    """Occlude whole body parts (``spatial``) or one frame block (``temporal``).

    ``ratio`` defaults to a Uniform[0.3, 0.7] draw.
    """
    if mode not in ("spatial", "temporal"):
        raise ValueError(f"unknown occlusion mode {mode!r}")
    T, V = seq.shape[:2]
    if ratio is None:
        ratio = rng.uniform(0.3, 0.7)
    m = np.ones((T, V))
    if mode == "temporal":
        length = math.ceil(ratio * T - 1e-9)
        if length > 0:
            start = int(rng.integers(0, T - length + 1))
            m[start:start + length] = 0.0
    else:
        parts = default_parts(V) if parts is None else parts
        order = rng.permutation(len(parts))
        hidden = 0
        for p in order:
            if hidden >= ratio * V - 1e-12:
                break
            m[:, parts[p]] = 0.0
            hidden += len(parts[p])
    out = apply_mask(seq, m)
    if return_mask:
        return out, Occlusion(mode, float(ratio), m)
    return out
