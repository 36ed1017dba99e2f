"""Classification and knowledge-distillation losses.

The teacher is the small network the data was distilled with and the student
is the larger test network, so the KL term pulls a high-capacity model toward
a low-capacity one.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class KDConfig:
    alpha: float = 0.5
    tau: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class Targets:
    """Training targets: class indices, or label logits softened by ``temperature``."""

    values: Tensor
    kind: str = "hard_index"
    temperature: float | None = None

    def __post_init__(self):
        if self.kind not in ("hard_index", "soft_logits"):
            raise ConfigError(f"unknown target kind {self.kind!r}")
        if self.kind == "soft_logits":
            if self.temperature is None or not self.temperature > 0:
                raise ConfigError(f"soft targets need a positive temperature, got {self.temperature}")

    @classmethod
    def hard(cls, indices) -> "Targets":
        return cls(torch.as_tensor(indices, dtype=torch.long), "hard_index")

    @classmethod
    def soft(cls, logits, temperature: float) -> "Targets":
        return cls(torch.as_tensor(logits), "soft_logits", temperature)

    def probabilities(self, num_classes: int) -> Tensor:
        if self.kind == "hard_index":
            return F.one_hot(self.values, num_classes).float()
        return F.softmax(self.values / self.temperature, dim=-1)

    def __getitem__(self, idx) -> "Targets":
        return Targets(self.values[idx], self.kind, self.temperature)


def ce_loss(y_s: Tensor, target: Targets) -> Tensor:
    if target.kind == "hard_index":
        n = y_s.shape[-1]
        if target.values.numel() and (target.values.min() < 0 or target.values.max() >= n):
            raise ConfigError(f"hard targets must lie in [0, {n})")
        return F.cross_entropy(y_s, target.values)
    if target.values.shape != y_s.shape:
        raise ShapeError(f"soft targets {tuple(target.values.shape)} do not match logits {tuple(y_s.shape)}")
    q = F.softmax(target.values.to(y_s.dtype) / target.temperature, dim=-1)
    return -(q * F.log_softmax(y_s, dim=-1)).sum(dim=-1).mean()


def kl_term(y_s: Tensor, y_t: Tensor, tau: float) -> Tensor:
    """Batch-mean KL(softmax(y_t/tau) || softmax(y_s/tau)). Gradient flows through y_s only."""
    log_q = F.log_softmax(y_t.detach() / tau, dim=-1)
    log_p = F.log_softmax(y_s / tau, dim=-1)
    return (log_q.exp() * (log_q - log_p)).sum(dim=-1).mean()


def kd_loss(y_s: Tensor, y_t: Tensor, target: Targets, cfg: KDConfig) -> Tensor:
    if y_s.shape != y_t.shape:
        raise ShapeError(f"student logits {tuple(y_s.shape)} and teacher logits {tuple(y_t.shape)} differ")
    kl = kl_term(y_s, y_t, cfg.tau)
    return kl * cfg.alpha * cfg.tau**2 + ce_loss(y_s, target) * (1.0 - cfg.alpha)
