"""Binary dataset archive (``SKL1``), one file per split.

Layout, all little-endian:

    magic     4 bytes  b"SKL1"
    version   uint32   1
    T V C N   uint32 x4   (T = 0 for variable-length archives)
    flags     uint32   bit 0: per-frame labels, bit 1: variable length
    lengths   int32[N]                       only if variable length
    data      float32[sum(lengths) or N*T, V, C]
    labels    int32[N]                       -1 = unlabelled
    frame_lb  int32[sum(lengths)]            only if per-frame labels
    meta_len  uint32
    meta      UTF-8 JSON (sorted keys): sample_ids, split_tags, num_classes, extra
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .skeleton import SkeletonSequence, UntrimmedSequence

MAGIC = b"SKL1"
VERSION = 1
FLAG_FRAME_LABELS = 1
FLAG_VARLEN = 2
_HEADER = struct.Struct("<4s6I")


class ArchiveError(ValueError):
    pass


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_archive(
    path: Union[str, Path],
    samples: list[SkeletonSequence],
    num_classes: int,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    """Write fixed-length sequences; all samples must share T, V, C."""
    path = Path(path)
    if not samples:
        raise ArchiveError("refusing to write an empty archive")
    shape = samples[0].data.shape
    if any(s.data.shape != shape for s in samples):
        raise ArchiveError("all samples in a fixed-length archive must share one shape")
    T, V, C = shape
    data = np.stack([s.data for s in samples]).astype("<f4")
    labels = np.array([-1 if s.label is None else s.label for s in samples], dtype="<i4")
    meta = {
        "sample_ids": [s.sample_id for s in samples],
        "split_tags": [s.split_tag for s in samples],
        "num_classes": num_classes,
        "extra": extra or {},
    }
    mb = _meta_bytes(meta)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, V, C, len(samples), 0))
        fh.write(data.tobytes())
        fh.write(labels.tobytes())
        fh.write(struct.pack("<I", len(mb)))
        fh.write(mb)
    return path


def write_untrimmed_archive(
    path: Union[str, Path],
    sequences: list[UntrimmedSequence],
    num_classes: int,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    if not sequences:
        raise ArchiveError("refusing to write an empty archive")
    V, C = sequences[0].data.shape[1:]
    lengths = np.array([s.data.shape[0] for s in sequences], dtype="<i4")
    data = np.concatenate([s.data for s in sequences]).astype("<f4")
    frame_labels = np.concatenate([s.frame_labels for s in sequences]).astype("<i4")
    meta = {
        "sample_ids": [s.sample_id for s in sequences],
        "split_tags": [None] * len(sequences),
        "num_classes": num_classes,
        "extra": extra or {},
    }
    mb = _meta_bytes(meta)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, V, C, len(sequences), FLAG_FRAME_LABELS | FLAG_VARLEN))
        fh.write(lengths.tobytes())
        fh.write(data.tobytes())
        fh.write(np.full(len(sequences), -1, dtype="<i4").tobytes())
        fh.write(frame_labels.tobytes())
        fh.write(struct.pack("<I", len(mb)))
        fh.write(mb)
    return path


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).copy()


def read_archive(path: Union[str, Path]) -> dict[str, Any]:
    """Read any SKL1 archive.

    Returns a dict with ``samples`` (SkeletonSequence or UntrimmedSequence
    list), ``num_classes`` and ``extra`` metadata.
    """
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    magic, version, T, V, C, N, flags = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise ArchiveError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    if flags & FLAG_VARLEN:
        lengths = r.array("<i4", N, "length table").astype(np.int64)
    else:
        lengths = np.full(N, T, dtype=np.int64)
    total = int(lengths.sum())
    data = r.array("<f4", total * V * C, "data").reshape(total, V, C).astype(np.float64)
    labels = r.array("<i4", N, "label table")
    frame_labels = r.array("<i4", total, "frame labels") if flags & FLAG_FRAME_LABELS else None
    (meta_len,) = struct.unpack("<I", r.take(4, "metadata length"))
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    if r.pos != len(r.buf):
        raise ArchiveError(f"{path}: {len(r.buf) - r.pos} trailing bytes")

    offsets = np.concatenate([[0], np.cumsum(lengths)])
    samples = []
    for i in range(N):
        chunk = data[offsets[i]:offsets[i + 1]]
        if frame_labels is not None:
            samples.append(UntrimmedSequence(chunk, frame_labels[offsets[i]:offsets[i + 1]], meta["sample_ids"][i]))
        else:
            label = None if labels[i] < 0 else int(labels[i])
            samples.append(SkeletonSequence(chunk, label, meta["sample_ids"][i], meta["split_tags"][i]))
    return {"samples": samples, "num_classes": meta["num_classes"], "extra": meta.get("extra", {})}


def stack(samples: list[SkeletonSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Batch tensor ``N x T x V x C`` and label vector (-1 where unlabelled)."""
    x = np.stack([s.data for s in samples])
    y = np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64)
    return x, y
