"""Epoch-indexed schedules for the DropPath keep rate and the learning rate.

Both schedules are pure functions of ``(config, epoch)`` so a resumed run
reproduces the exact same trajectory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class KeepRateConfig:
    """Three-phase keep rate: warmup at 1, stepwise decay, then a fixed final rate."""

    gamma: float = 0.1
    p_min: float = 0.5
    p_final: float = 0.8
    T: int = 500
    W: int = 50
    S: int = 3000
    N: int = 4000

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.p_min <= 1.0:
            raise ConfigError(f"p_min must lie in (0, 1], got {self.p_min}")
        if not 0.0 < self.p_final <= 1.0:
            raise ConfigError(f"p_final must lie in (0, 1], got {self.p_final}")
        if self.T <= 0:
            raise ConfigError(f"decay period T must be positive, got {self.T}")
        if self.W < 0:
            raise ConfigError(f"warmup period W must be non-negative, got {self.W}")
        if not self.W < self.S <= self.N:
            raise ConfigError(f"need W < S <= N, got W={self.W}, S={self.S}, N={self.N}")


@dataclass(frozen=True)
class LRConfig:
    """Periodic warmup + cosine learning rate with per-period multiplicative decay."""

    lr_max: float = 5e-5
    lam: float = 0.8
    T_max: int = 1000
    T_warm: int = 50
    T: int = 500
    S: int = 3000

    def __post_init__(self):
        if not self.lr_max > 0:
            raise ConfigError(f"lr_max must be positive, got {self.lr_max}")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"lam must lie in (0, 1], got {self.lam}")
        if not 0 <= self.T_warm < self.T_max:
            raise ConfigError(f"need 0 <= T_warm < T_max, got T_warm={self.T_warm}, T_max={self.T_max}")
        if self.T <= 0 or self.S <= 0:
            raise ConfigError(f"T and S must be positive, got T={self.T}, S={self.S}")


def keep_rate(cfg: KeepRateConfig, i: int) -> float:
    if not 0 <= i < cfg.N:
        raise IndexError(f"epoch {i} outside [0, {cfg.N})")
    if i < cfg.W:
        return 1.0
    if i < cfg.S:
        # integer ceil avoids float error in (i - W) / T
        steps = -(-(i - cfg.W) // cfg.T)
        return max(cfg.p_min, 1.0 - cfg.gamma * steps)
    return cfg.p_final


def learning_rate(cfg: LRConfig, i: int) -> float:
    """Learning rate at epoch ``i``.

    Within each reset period the rate warms up linearly for ``T_warm`` epochs
    and then follows a cosine of period ``T_max``; the peak shrinks by ``lam``
    every ``T`` epochs until the stabilization epoch ``S``. ``T_warm == 0``
    with a zero phase gives 0 rather than 0/0.
    """
    if i < 0:
        raise IndexError(f"epoch must be non-negative, got {i}")
    t = cfg.T if i < cfg.S else cfg.S
    decay = cfg.lam ** (min(i, cfg.S) // cfg.T)
    phase = i % t
    if phase <= cfg.T_warm:
        warm = phase / cfg.T_warm if cfg.T_warm > 0 else 0.0
        return decay * warm * cfg.lr_max
    progress = (phase - cfg.T_warm) / (cfg.T_max - cfg.T_warm)
    return 0.5 * decay * (1.0 + math.cos(math.pi * progress)) * cfg.lr_max


def cosine_annealing_lr(lr_max: float, i: int, n_epochs: int) -> float:
    """Single-period cosine annealing from ``lr_max`` to 0 over ``n_epochs``.

    This is the comparator used when the periodic schedule is switched off.
    """
    if not 0 <= i < max(n_epochs, 1):
        raise IndexError(f"epoch {i} outside [0, {n_epochs})")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * i / n_epochs))


def schedule_table(kr: KeepRateConfig, lr: LRConfig, n_epochs: int | None = None):
    """Rows of ``(epoch, keep_rate, lr)`` for every epoch of the run."""
    n = kr.N if n_epochs is None else n_epochs
    return [(i, keep_rate(kr, i), learning_rate(lr, i)) for i in range(n)]
