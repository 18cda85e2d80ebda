"""Contrastive, distillation and masked-reconstruction objectives.

Embeddings may be a single ``D`` vector or a batch ``B x D``; batched
losses are averaged over the batch. The queue is ``N x D``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F


class Stage(str, enum.Enum):
    JOINT = "joint_training"
    POST = "post_distillation"


@dataclass
class LossWeights:
    lambda_m: float = 1.0
    lambda_kd: float = 1.0
    tau: float = 0.07
    tau_q: float = 0.1
    tau_k: float = 0.05

    def validate(self):
        if self.lambda_m < 0 or self.lambda_kd < 0:
            raise ValueError("loss weights must be non-negative")
        if min(self.tau, self.tau_q, self.tau_k) <= 0:
            raise ValueError("temperatures must be positive")
        if self.tau_k > self.tau_q:
            raise ValueError("teacher temperature tau_k must not exceed tau_q")


def _batched(z: torch.Tensor) -> torch.Tensor:
    return z.unsqueeze(0) if z.dim() == 1 else z


def _check(queue: torch.Tensor, tau: float):
    if queue.numel() == 0 or queue.shape[0] == 0:
        raise ValueError("memory queue is empty")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def info_nce(z_q: torch.Tensor, z_k: torch.Tensor, queue: torch.Tensor, tau: float) -> torch.Tensor:
    _check(queue, tau)
    q, k = _batched(z_q), _batched(z_k)
    pos = (q * k).sum(dim=1, keepdim=True)
    neg = q @ queue.t()
    logits = torch.cat([pos, neg], dim=1) / tau
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def kd_distribution(z: torch.Tensor, queue: torch.Tensor, tau: float) -> torch.Tensor:
    _check(queue, tau)
    p = torch.softmax(_batched(z) @ queue.t() / tau, dim=1)
    return p[0] if z.dim() == 1 else p


def kd_loss(z_q: torch.Tensor, z_k: torch.Tensor, queue: torch.Tensor, tau_q: float, tau_k: float) -> torch.Tensor:
    """Cross-entropy of the student similarity distribution against the teacher's.

    The teacher (``z_k``) is detached.
    """
    _check(queue, tau_q)
    _check(queue, tau_k)
    teacher = torch.softmax(_batched(z_k).detach() @ queue.t() / tau_k, dim=1)
    log_student = F.log_softmax(_batched(z_q) @ queue.t() / tau_q, dim=1)
    return -(teacher * log_student).sum(dim=1).mean()


def contrastive_loss(z_q: torch.Tensor, z_k: torch.Tensor, queue: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return info_nce(z_q, z_k, queue, weights.tau) + kd_loss(z_q, z_k, queue, weights.tau_q, weights.tau_k)


def mask_loss(s: torch.Tensor, s_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared residual over masked (mask == 0) joints, all channels.

    ``s``/``s_hat`` are ``[B x] T x V x C``, ``mask`` is ``[B x] T x V``.
    """
    if s.shape != s_hat.shape:
        raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if mask.shape != s.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match {tuple(s.shape[:-1])}")
    hidden = (1.0 - mask).unsqueeze(-1)
    count = hidden.sum() * s.shape[-1]
    if count.item() == 0:
        raise ValueError("mask hides no entry")
    return (((s - s_hat) ** 2) * hidden).sum() / count


def total_loss(
    info_terms: dict[str, torch.Tensor],
    kd_terms: dict[str, torch.Tensor],
    mask_term: torch.Tensor,
    weights: LossWeights,
    stage: Stage,
) -> torch.Tensor:
    kd_all = sum(kd_terms.values())
    loss = weights.lambda_m * mask_term + weights.lambda_kd * kd_all
    if Stage(stage) is Stage.JOINT:
        loss = sum(info_terms.values()) + loss
    return loss
