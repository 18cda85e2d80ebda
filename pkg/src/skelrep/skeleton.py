"""Skeleton data model, NTU text ingestion, modality views and synthetic data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NUM_NTU_JOINTS = 25

# (child, parent) pairs of the NTU RGB+D kinematic tree, 0-based, rooted at SpineBase.
NTU_EDGES: tuple[tuple[int, int], ...] = (
    (1, 0), (20, 1), (2, 20), (3, 2),
    (4, 20), (5, 4), (6, 5), (7, 6), (21, 7), (22, 7),
    (8, 20), (9, 8), (10, 9), (11, 10), (23, 11), (24, 11),
    (12, 0), (13, 12), (14, 13), (15, 14),
    (16, 0), (17, 16), (18, 17), (19, 18),
)
NTU_ROOT = 0

# torso+head, left arm, right arm, left leg, right leg
NTU_BODY_PARTS: tuple[tuple[int, ...], ...] = (
    (0, 1, 2, 3, 20),
    (4, 5, 6, 7, 21, 22),
    (8, 9, 10, 11, 23, 24),
    (12, 13, 14, 15),
    (16, 17, 18, 19),
)


class ParseError(ValueError):
    """Malformed NTU skeleton text; carries the 1-based offending line."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class SkeletonSequence:
    data: np.ndarray
    label: Optional[int] = None
    sample_id: str = ""
    split_tag: Optional[str] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"expected T x V x 3 tensor, got shape {self.data.shape}")
        if self.data.shape[0] < 2 or self.data.shape[1] < 1:
            raise ValueError(f"need T >= 2 and V >= 1, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("skeleton sequence contains non-finite values")
        if self.label is not None and self.label < 0:
            raise ValueError(f"negative label {self.label}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_joints(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(data, self.label, self.sample_id, self.split_tag)


@dataclass
class ModalityView:
    kind: str
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in ("joint", "bone", "motion"):
            raise ValueError(f"unknown modality {self.kind!r}")


@dataclass
class DatasetManifest:
    """A labelled sample collection plus named partition schemes.

    ``splits`` maps a scheme name (e.g. ``"default"``, ``"xsub"``) to a
    mapping of split name to sample indices.
    """

    samples: list[SkeletonSequence]
    num_classes: int
    splits: dict[str, dict[str, list[int]]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.samples)
        for scheme, parts in self.splits.items():
            seen = sorted(i for idx in parts.values() for i in idx)
            if seen != list(range(n)):
                raise ValueError(f"partition {scheme!r} is not a disjoint cover of the samples")
        for s in self.samples:
            if s.label is not None and not 0 <= s.label < self.num_classes:
                raise ValueError(f"label {s.label} outside [0, {self.num_classes})")

    def subset(self, scheme: str, name: str) -> list[SkeletonSequence]:
        return [self.samples[i] for i in self.splits[scheme][name]]


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 40
    num_frames: int = 64
    num_joints: int = NUM_NTU_JOINTS
    noise_sigma: float = 0.01
    seed: int = 0
    amplitude: float = 0.3
    phase_jitter: float = 0.3
    class_offset: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("synthetic dataset needs at least 2 classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.samples_per_class < 1 or self.num_frames < 2 or self.num_joints < 1:
            raise ValueError("samples_per_class, num_frames and num_joints must be positive (T >= 2)")


# ---------------------------------------------------------------------------
# NTU .skeleton text format


def _floats(line: str, lineno: int, minimum: int) -> list[float]:
    parts = line.split()
    if len(parts) < minimum:
        raise ParseError(f"expected at least {minimum} values, got {len(parts)}", lineno)
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ParseError(f"non-numeric value in {line.strip()!r}", lineno) from None


def _int(line: Optional[str], lineno: int, what: str) -> int:
    if line is None:
        raise ParseError(f"unexpected end of file, expected {what}", lineno)
    try:
        return int(line.strip())
    except ValueError:
        raise ParseError(f"expected integer {what}, got {line.strip()!r}", lineno) from None


def parse_ntu_skeleton(raw_text: str, sample_id: str = "") -> SkeletonSequence:
    """Parse NTU RGB+D ``.skeleton`` text, keeping the first tracked body.

    Frames that report zero bodies are zero-filled.
    """
    lines = raw_text.splitlines()
    pos = 0

    def next_line(what: str) -> tuple[str, int]:
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, expected {what}", pos + 1)
        pos += 1
        return lines[pos - 1], pos

    line, no = next_line("frame count")
    num_frames = _int(line, no, "frame count")
    if num_frames < 1:
        raise ParseError(f"invalid frame count {num_frames}", no)

    frames = np.zeros((num_frames, NUM_NTU_JOINTS, 3), dtype=np.float64)
    for t in range(num_frames):
        line, no = next_line(f"body count of frame {t}")
        num_bodies = _int(line, no, "body count")
        if num_bodies < 0:
            raise ParseError(f"negative body count {num_bodies}", no)
        for b in range(num_bodies):
            line, no = next_line("body metadata")
            if len(line.split()) != 10:
                raise ParseError(f"body metadata must have 10 fields, got {len(line.split())}", no)
            line, no = next_line("joint count")
            num_joints = _int(line, no, "joint count")
            if num_joints != NUM_NTU_JOINTS:
                raise ParseError(f"expected {NUM_NTU_JOINTS} joints, got {num_joints}", no)
            for j in range(num_joints):
                line, no = next_line(f"joint {j}")
                values = _floats(line, no, 3)
                if b == 0:
                    frames[t, j] = values[:3]
    return SkeletonSequence(frames, sample_id=sample_id)


def serialize_ntu_skeleton(seq: SkeletonSequence) -> str:
    """Write a single-body NTU ``.skeleton`` text with zeroed auxiliary fields."""
    if seq.num_joints != NUM_NTU_JOINTS:
        raise ValueError(f"NTU layout needs {NUM_NTU_JOINTS} joints")
    out = [str(seq.num_frames)]
    for frame in seq.data:
        out.append("1")
        out.append("0 0 0 0 0 0 0 0 0 2")
        out.append(str(NUM_NTU_JOINTS))
        for x, y, z in frame:
            out.append(f"{float(x)!r} {float(y)!r} {float(z)!r} 0 0 0 0 0 0 0 0 2")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# modality views and preprocessing


def default_edges(num_joints: int) -> list[tuple[int, int]]:
    if num_joints == NUM_NTU_JOINTS:
        return list(NTU_EDGES)
    return [(j, j - 1) for j in range(1, num_joints)]


def default_parts(num_joints: int) -> list[list[int]]:
    if num_joints == NUM_NTU_JOINTS:
        return [list(p) for p in NTU_BODY_PARTS]
    chunks = np.array_split(np.arange(num_joints), min(5, num_joints))
    return [c.tolist() for c in chunks]


def _check_edges(edges: Sequence[tuple[int, int]], num_joints: int) -> int:
    children = [c for c, _ in edges]
    for c, p in edges:
        if not (0 <= c < num_joints and 0 <= p < num_joints):
            raise ValueError(f"edge ({c}, {p}) references a joint outside [0, {num_joints})")
    if len(set(children)) != len(children):
        raise ValueError("a joint appears more than once as child")
    roots = set(range(num_joints)) - set(children)
    if len(roots) != 1:
        raise ValueError(f"edges must leave exactly one root, found {sorted(roots)}")
    return roots.pop()


def to_bone(seq: SkeletonSequence, edges: Optional[Sequence[tuple[int, int]]] = None) -> ModalityView:
    joints = seq.data
    edges = default_edges(seq.num_joints) if edges is None else edges
    _check_edges(edges, seq.num_joints)
    bone = np.zeros_like(joints)
    for child, parent in edges:
        bone[:, child] = joints[:, child] - joints[:, parent]
    return ModalityView("bone", bone)


def to_motion(seq: SkeletonSequence) -> ModalityView:
    joints = seq.data
    if joints.shape[0] < 2:
        raise ValueError("motion needs at least 2 frames")
    motion = np.zeros_like(joints)
    motion[1:] = joints[1:] - joints[:-1]
    return ModalityView("motion", motion)


def to_joint(seq: SkeletonSequence) -> ModalityView:
    return ModalityView("joint", seq.data.copy())


def normalize(seq: SkeletonSequence, root_joint: int = NTU_ROOT) -> SkeletonSequence:
    """Translate so the root joint of frame 0 sits at the origin."""
    return seq.with_data(seq.data - seq.data[0, root_joint])


# ---------------------------------------------------------------------------
# synthetic data


def _class_pattern(spec: SyntheticSpec, k: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1, k])
    freq = rng.integers(1, 4, size=(spec.num_joints, 3)).astype(np.float64)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=(spec.num_joints, 3))
    return freq, phase


def synth_class_motion(spec: SyntheticSpec, k: int, jitter: float, t: np.ndarray) -> np.ndarray:
    """Noise-free class-``k`` trajectory sampled at (possibly fractional) frame times ``t``."""
    freq, phase = _class_pattern(spec, k)
    arg = 2.0 * math.pi * freq[None] * t[:, None, None] / spec.num_frames + phase[None] + jitter
    return spec.amplitude * np.sin(arg)


def generate_synthetic(spec: SyntheticSpec) -> DatasetManifest:
    """Class-coded sinusoid dataset; a pure function of ``spec``.

    Class ``k`` (global index ``class_offset + k``) drives every joint channel
    with its own integer frequency and phase. Each sample adds a scalar phase
    jitter and Gaussian noise. The first 80% of each class (rounded) goes to
    the ``train`` split. Patterns and samples depend only on the global class
    index, so a larger ``num_classes`` extends a smaller dataset.
    """
    spec.validate()
    t = np.arange(spec.num_frames, dtype=np.float64)
    samples, train, test = [], [], []
    n_train = int(round(0.8 * spec.samples_per_class))
    if spec.samples_per_class >= 2:
        n_train = min(max(n_train, 1), spec.samples_per_class - 1)
    for k in range(spec.num_classes):
        gk = spec.class_offset + k
        for i in range(spec.samples_per_class):
            rng = np.random.default_rng([spec.seed, 2, gk, i])
            jitter = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
            data = synth_class_motion(spec, gk, jitter, t)
            if spec.noise_sigma > 0:
                data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
            split = "train" if i < n_train else "test"
            (train if split == "train" else test).append(len(samples))
            samples.append(SkeletonSequence(data, label=k, sample_id=f"c{gk:03d}_s{i:04d}", split_tag=split))
    return DatasetManifest(samples, spec.num_classes, {"default": {"train": train, "test": test}})


BACKGROUND = -1


@dataclass
class UntrimmedSequence:
    """A long sequence with one label per frame; ``BACKGROUND`` marks no action."""

    data: np.ndarray
    frame_labels: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
        if self.frame_labels.shape != (self.data.shape[0],):
            raise ValueError("need one label per frame")


def generate_untrimmed(
    spec: SyntheticSpec,
    num_sequences: int,
    segments_per_sequence: int = 4,
    segment_range: tuple[int, int] = (24, 48),
    background_range: tuple[int, int] = (8, 24),
    seed: Optional[int] = None,
) -> list[UntrimmedSequence]:
    """Concatenate labelled class segments separated by near-static background."""
    spec.validate()
    seed = spec.seed if seed is None else seed
    out = []
    for n in range(num_sequences):
        rng = np.random.default_rng([seed, 3, n])
        chunks, labels = [], []

        def background():
            length = int(rng.integers(background_range[0], background_range[1] + 1))
            chunks.append(rng.normal(0.0, spec.noise_sigma, size=(length, spec.num_joints, 3)))
            labels.extend([BACKGROUND] * length)

        background()
        for _ in range(segments_per_sequence):
            k = int(rng.integers(spec.num_classes))
            length = int(rng.integers(segment_range[0], segment_range[1] + 1))
            start = rng.uniform(0, spec.num_frames)
            t = start + np.arange(length, dtype=np.float64)
            seg = synth_class_motion(spec, spec.class_offset + k, rng.uniform(-spec.phase_jitter, spec.phase_jitter), t)
            chunks.append(seg + rng.normal(0.0, spec.noise_sigma, size=seg.shape))
            labels.extend([k] * length)
            background()
        out.append(UntrimmedSequence(np.concatenate(chunks), np.asarray(labels), sample_id=f"u{n:04d}"))
    return out
