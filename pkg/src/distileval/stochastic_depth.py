"""DropPath and the block constructions built around it.

One Bernoulli mask ``m`` is drawn per block per forward call and shared by the
whole batch. In inference mode no mask is drawn and the random source is left
untouched.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError

Subnetwork = Callable[[Tensor], Tensor]

BLOCK_KINDS = ("residual", "virtual_shortcut", "plain")
SHORTCUT_KINDS = ("identity", "original_projection", "improved_projection")
NORM_KINDS = ("batch", "instance", "none")


@dataclass(frozen=True)
class DropPathState:
    p: float
    training: bool

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"keep rate must lie in (0, 1], got {self.p}")


@dataclass(frozen=True)
class BlockKind:
    kind: str
    shortcut: str = "identity"

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.shortcut not in SHORTCUT_KINDS:
            raise ConfigError(f"unknown shortcut kind {self.shortcut!r}")


def sample_mask(p: float, rng: np.random.Generator) -> int:
    """Bernoulli(p) draw. ``p == 1`` is resolved without touching ``rng``."""
    if p >= 1.0:
        return 1
    return int(rng.random() < p)


def drop_path(x: Tensor, state: DropPathState, rng: np.random.Generator) -> Tensor:
    if not state.training:
        return x
    m = sample_mask(state.p, rng)
    if state.p >= 1.0:
        return x
    return x * (m / state.p)


def _check_same_shape(a: Tensor, b: Tensor, name: str | None, what: str):
    if a.shape != b.shape:
        label = f"block {name!r}" if name else "block"
        raise ShapeError(f"{label}: {what} shape {tuple(b.shape)} != main path shape {tuple(a.shape)}")


def residual_block_forward(
    x: Tensor,
    main_path: Subnetwork,
    shortcut: Subnetwork,
    state: DropPathState,
    rng: np.random.Generator,
    name: str | None = None,
) -> Tensor:
    """``shortcut(x) + (m/p) * main_path(x)``; the shortcut is never blocked.

    When ``m == 0`` the main path is not evaluated at all.
    """
    identity = shortcut(x)
    if state.training:
        m = sample_mask(state.p, rng)
        if m == 0:
            return identity
        out = main_path(x)
        _check_same_shape(out, identity, name, "shortcut")
        if state.p < 1.0:
            out = out / state.p
        return identity + out
    out = main_path(x)
    _check_same_shape(out, identity, name, "shortcut")
    return identity + out


def virtual_block_forward(
    x: Tensor,
    main_path: Subnetwork,
    virtual_shortcut: Subnetwork,
    state: DropPathState,
    rng: np.random.Generator,
    name: str | None = None,
) -> Tensor:
    """Single-branch DropPath: the shortcut exists only while the main path is pruned.

    Training returns ``main_path(x) / p`` when kept and ``virtual_shortcut(x)``
    when pruned, never a mixture. Inference returns ``main_path(x)``.
    """
    if not state.training:
        return main_path(x)
    m = sample_mask(state.p, rng)
    if m == 1:
        out = main_path(x)
        return out / state.p if state.p < 1.0 else out
    # shape agreement with the skipped main path is checked at build time
    return virtual_shortcut(x)


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "instance":
        # GroupNorm with one channel per group == instance norm with affine params
        return nn.GroupNorm(channels, channels, affine=True)
    if kind == "none":
        return nn.Identity()
    raise ConfigError(f"unknown norm {kind!r}; expected one of {NORM_KINDS}")


def improved_shortcut_forward(x: Tensor, conv: nn.Conv2d, norm: nn.Module, stride: int) -> Tensor:
    """s x s max pooling (stride s), then a stride-1 1x1 conv, then the norm."""
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by stride {stride}")
    if stride > 1:
        x = F.max_pool2d(x, kernel_size=stride, stride=stride)
    return norm(conv(x))


class ImprovedShortcut(nn.Module):
    """Downsampling shortcut that pools before projecting instead of subsampling."""

    kind = "improved_projection"

    def __init__(self, in_channels: int, out_channels: int, stride: int, norm: str):
        super().__init__()
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=1, bias=False)
        self.norm = make_norm(norm, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return improved_shortcut_forward(x, self.conv, self.norm, self.stride)


class OriginalShortcut(nn.Module):
    """Strided 1x1 conv + norm; keeps only the top-left entry of each s x s cell."""

    kind = "original_projection"

    def __init__(self, in_channels: int, out_channels: int, stride: int, norm: str):
        super().__init__()
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False)
        self.norm = make_norm(norm, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


def make_shortcut(kind: str, in_channels: int, out_channels: int, stride: int, norm: str) -> nn.Module:
    if kind == "identity" or (stride == 1 and in_channels == out_channels):
        return nn.Identity()
    if kind == "improved_projection":
        return ImprovedShortcut(in_channels, out_channels, stride, norm)
    if kind == "original_projection":
        return OriginalShortcut(in_channels, out_channels, stride, norm)
    raise ConfigError(f"unknown shortcut kind {kind!r}")


class DropPathController:
    """Shared keep rate and per-block random streams for one model.

    The stream for a block at a given step is seeded from
    ``(seed, block_index, step)``, so masks do not depend on how many other
    blocks drew before it. ``step`` advances once per training forward.
    """

    def __init__(self, seed: int = 0, p: float = 1.0):
        self.seed = int(seed)
        self.p = float(p)
        self.step = 0
        self.draws = 0

    def stream(self, block_index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, block_index, self.step])

    def state(self, training: bool) -> DropPathState:
        return DropPathState(p=self.p, training=training)

    def draw(self, block_index: int, training: bool) -> tuple[DropPathState, np.random.Generator]:
        state = self.state(training)
        if not training or state.p >= 1.0:
            return state, None
        self.draws += 1
        return state, self.stream(block_index)


class ResidualBlock(nn.Module):
    """Residual block whose main path is subject to DropPath."""

    def __init__(self, main: nn.Module, shortcut: nn.Module, droppath: bool = True, name: str = ""):
        super().__init__()
        self.main = main
        self.shortcut = shortcut
        self.droppath = droppath
        self.block_name = name
        self.block_index = -1
        self.controller: DropPathController | None = None
        shortcut_kind = getattr(shortcut, "kind", "identity")
        self.block_kind = BlockKind("residual" if droppath else "plain", shortcut_kind)

    def forward(self, x: Tensor) -> Tensor:
        if self.droppath and self.controller is not None:
            state, rng = self.controller.draw(self.block_index, self.training)
        else:
            state, rng = DropPathState(1.0, self.training), None
        return residual_block_forward(x, self.main, self.shortcut, state, rng, name=self.block_name)


class VirtualShortcutBlock(nn.Module):
    """Two paired layers of a single-branch network with a train-time-only shortcut."""

    def __init__(self, main: nn.Module, virtual_shortcut: nn.Module, name: str = ""):
        super().__init__()
        self.main = main
        self.virtual_shortcut = virtual_shortcut
        self.block_name = name
        self.block_index = -1
        self.controller: DropPathController | None = None
        self.block_kind = BlockKind("virtual_shortcut", getattr(virtual_shortcut, "kind", "identity"))

    def forward(self, x: Tensor) -> Tensor:
        if self.controller is None:
            return self.main(x)
        state, rng = self.controller.draw(self.block_index, self.training)
        return virtual_block_forward(x, self.main, self.virtual_shortcut, state, rng, name=self.block_name)


def check_virtual_shapes(block: VirtualShortcutBlock, x: Tensor):
    """Verify a virtual shortcut produces the main path's shape on input ``x``."""
    with torch.no_grad():
        a, b = block.main(x), block.virtual_shortcut(x)
    _check_same_shape(a, b, block.block_name, "virtual shortcut")
