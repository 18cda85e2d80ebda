"""Recurrent encoder/decoder, momentum key branch, memory queue and prompts."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import DOMAIN_TAGS


@dataclass
class ModelConfig:
    num_joints: int = 25
    channels: int = 3
    hidden: int = 64
    layers: int = 2
    bidirectional: bool = True
    embed_dim: int = 128
    momentum: float = 0.999
    queue_size: int = 8192

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        return cls(hidden=1024, queue_size=32768, **kw)

    def validate(self):
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")
        if self.bidirectional and self.hidden % 2:
            raise ValueError("bidirectional encoder needs an even hidden size")
        if min(self.num_joints, self.channels, self.hidden, self.layers, self.embed_dim, self.queue_size) < 1:
            raise ValueError("model sizes must be positive")


class GRUEncoder(nn.Module):
    """Stacked GRU over flattened joints; mean-over-time pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_joints = cfg.num_joints
        self.channels = cfg.channels
        per_dir = cfg.hidden // 2 if cfg.bidirectional else cfg.hidden
        self.rnn = nn.GRU(cfg.num_joints * cfg.channels, per_dir, num_layers=cfg.layers,
                          batch_first=True, bidirectional=cfg.bidirectional)
        self.out_dim = cfg.hidden

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or x.shape[2] != self.num_joints or x.shape[3] != self.channels:
            raise ValueError(f"expected B x T x {self.num_joints} x {self.channels}, got {tuple(x.shape)}")
        frames, _ = self.rnn(x.flatten(2))
        return frames.mean(dim=1), frames


class Projector(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.ReLU(inplace=True), nn.Linear(in_dim, out_dim))

    def forward(self, x):
        return self.net(x)


class GRUDecoder(nn.Module):
    """Maps per-frame encoder states back to ``T x V x C`` coordinates."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_joints = cfg.num_joints
        self.channels = cfg.channels
        self.rnn = nn.GRU(cfg.hidden, cfg.hidden, num_layers=cfg.layers, batch_first=True)
        self.head = nn.Linear(cfg.hidden, cfg.num_joints * cfg.channels)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        h, _ = self.rnn(frames)
        out = self.head(h)
        return out.view(*out.shape[:2], self.num_joints, self.channels)


class PromptBank(nn.Module):
    """One learnable additive ``V x C`` field per domain tag, zero-initialised."""

    def __init__(self, num_joints: int, channels: int, tags=DOMAIN_TAGS):
        super().__init__()
        self.prompts = nn.ParameterDict({t: nn.Parameter(torch.zeros(num_joints, channels)) for t in tags})

    def __getitem__(self, tag: str) -> torch.Tensor:
        if tag not in self.prompts:
            raise KeyError(f"unknown domain tag {tag!r}; expected one of {sorted(self.prompts)}")
        return self.prompts[tag]


def add_prompt(seq: torch.Tensor, bank: PromptBank, tag: str) -> torch.Tensor:
    p = bank[tag]
    if seq.shape[-2:] != p.shape:
        raise ValueError(f"prompt shape {tuple(p.shape)} does not match sequence {tuple(seq.shape[-2:])}")
    return seq + p


class MemoryQueue:
    """Fixed-capacity FIFO of unit-norm key embeddings."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        self.capacity = capacity
        self.dim = dim
        self.storage = torch.zeros(capacity, dim, dtype=dtype)
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def fill_random(self, generator: Optional[torch.Generator] = None):
        """Warm start with random unit vectors, as momentum-contrast training usually does."""
        x = torch.randn(self.capacity, self.dim, generator=generator, dtype=self.storage.dtype)
        self.storage = F.normalize(x, dim=1)
        self.ptr = 0
        self.size = self.capacity

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor):
        keys = keys.detach()
        if keys.dim() == 1:
            keys = keys.unsqueeze(0)
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dimension {keys.shape[1]} != queue dimension {self.dim}")
        norms = keys.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("queue entries must be unit-norm")
        keys = keys.to(self.storage.dtype)
        if keys.shape[0] >= self.capacity:
            keys = keys[-self.capacity:]
        n = keys.shape[0]
        idx = (self.ptr + torch.arange(n)) % self.capacity
        self.storage[idx] = keys
        self.ptr = (self.ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def contents(self) -> torch.Tensor:
        """Entries oldest first."""
        if self.size < self.capacity:
            return self.storage[:self.size].clone()
        return torch.roll(self.storage, -self.ptr, dims=0).clone()

    def negatives(self) -> torch.Tensor:
        return self.storage[:self.size] if self.size < self.capacity else self.storage

    def state_dict(self) -> dict:
        return {"storage": self.storage.clone(), "ptr": self.ptr, "size": self.size, "capacity": self.capacity}

    def load_state_dict(self, state: dict):
        if state["storage"].shape != self.storage.shape:
            raise ValueError("queue shape mismatch")
        self.storage = state["storage"].clone()
        self.ptr = int(state["ptr"])
        self.size = int(state["size"])


class EncoderBundle(nn.Module):
    """Query/key encoders and projectors, decoder, prompts and the negative queue."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.momentum = cfg.momentum
        self.encoder_q = GRUEncoder(cfg)
        self.projector_q = Projector(cfg.hidden, cfg.embed_dim)
        self.decoder = GRUDecoder(cfg)
        self.prompts = PromptBank(cfg.num_joints, cfg.channels)
        self.encoder_k = copy.deepcopy(self.encoder_q)
        self.projector_k = copy.deepcopy(self.projector_q)
        for p in self.key_parameters():
            p.requires_grad_(False)
        self.queue = MemoryQueue(cfg.queue_size, cfg.embed_dim)

    def key_parameters(self):
        yield from self.encoder_k.parameters()
        yield from self.projector_k.parameters()

    def query_parameters(self):
        yield from self.encoder_q.parameters()
        yield from self.projector_q.parameters()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def encode(encoder: GRUEncoder, projector: Optional[nn.Module], seq: torch.Tensor):
    """Return ``(z, frames)``.

    ``z`` is the unit-norm projected embedding when a projector is given,
    otherwise the pooled encoder feature. Accepts ``T x V x C`` or a batch.
    """
    single = seq.dim() == 3
    x = seq.unsqueeze(0) if single else seq
    pooled, frames = encoder(x)
    z = F.normalize(projector(pooled), dim=-1) if projector is not None else pooled
    if single:
        return z[0], frames[0]
    return z, frames


@torch.no_grad()
def momentum_update(bundle: EncoderBundle):
    """theta_k <- m * theta_k + (1 - m) * theta_q for encoder and projector."""
    m = bundle.momentum
    q_params = list(bundle.query_parameters())
    k_params = list(bundle.key_parameters())
    if len(q_params) != len(k_params):
        raise ValueError("query and key branches have different parameter counts")
    for pq, pk in zip(q_params, k_params):
        if pq.shape != pk.shape:
            raise ValueError(f"parameter shape mismatch {tuple(pq.shape)} vs {tuple(pk.shape)}")
        if m == 0:
            pk.copy_(pq)
        elif m != 1:
            # spelled out (no fused add) so the arithmetic is reproducible bit for bit
            pk.copy_(pk * m + pq * (1.0 - m))


def compose_prediction(s: torch.Tensor, s_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Visible joints from ``s``, masked joints from the decoder output ``s_hat``."""
    if s.shape != s_hat.shape or mask.shape != s.shape[:-1]:
        raise ValueError(f"incompatible shapes {tuple(s.shape)}, {tuple(s_hat.shape)}, mask {tuple(mask.shape)}")
    m = mask.unsqueeze(-1)
    return s * m + s_hat * (1.0 - m)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
