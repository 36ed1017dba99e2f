"""Hessian spectrum and loss-landscape slices around a trained minimum.

Everything operates on a flat float64 parameter vector ``theta`` and a
function ``loss_at(theta) -> scalar tensor``. :func:`model_loss_fn` builds that
function for a network on a fixed batch, with DropPath off.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .errors import NumericError
from .objectives import Targets, ce_loss

LossFn = Callable[[Tensor], Tensor]


@dataclass
class SpectrumResult:
    eigenvalues: list[float]
    eigenvectors: list[Tensor]
    residuals: list[float]
    converged: list[bool] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues,
            "residuals": self.residuals,
            "converged": self.converged,
            "iterations": self.iterations,
        }


@dataclass
class LandscapeGrid:
    alphas1: np.ndarray
    alphas2: np.ndarray
    losses: np.ndarray  # losses[i, j] at alphas1[i], alphas2[j]

    def rows(self):
        for i, a1 in enumerate(self.alphas1):
            for j, a2 in enumerate(self.alphas2):
                yield float(a1), float(a2), float(self.losses[i, j])


def gradient(loss_at: LossFn, theta: Tensor) -> Tensor:
    th = theta.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(loss_at(th), th)
    return g.detach()


def _hvp_autograd(loss_at: LossFn, theta: Tensor, v: Tensor) -> Tensor | None:
    th = theta.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(loss_at(th), th, create_graph=True)
    if not g.requires_grad:
        return None
    (hv,) = torch.autograd.grad(g @ v, th, allow_unused=True)
    return None if hv is None else hv.detach()


def hvp_finite_difference(loss_at: LossFn, theta: Tensor, v: Tensor) -> Tensor:
    """Central difference of gradients along ``v``."""
    norm = v.norm()
    u = v / norm
    h = 1e-3 * theta.abs().max().item() + 1e-6
    gp = gradient(loss_at, theta + h * u)
    gm = gradient(loss_at, theta - h * u)
    return (gp - gm) / (2 * h) * norm


def hvp(loss_at: LossFn, theta: Tensor, v: Tensor, method: str = "auto") -> Tensor:
    """Hessian-vector product at ``theta``.

    ``method='auto'`` uses second-order autograd and falls back to finite
    differences of gradients when the graph is not twice differentiable.
    """
    if v.norm().item() < 1e-12:
        raise ValueError("hvp direction must have norm >= 1e-12")
    out = None
    if method in ("auto", "autograd"):
        try:
            out = _hvp_autograd(loss_at, theta, v)
        except RuntimeError:
            if method == "autograd":
                raise
        if out is None and method == "autograd":
            raise RuntimeError("loss is not twice differentiable by autograd")
    if out is None:
        out = hvp_finite_difference(loss_at, theta, v)
    if not torch.isfinite(out).all():
        raise NumericError("Hessian-vector product is not finite")
    return out


def _project_out(w: Tensor, basis: list[Tensor]) -> Tensor:
    # two Gram-Schmidt passes keep the iterate orthogonal to ~machine precision
    for _ in range(2):
        for q in basis:
            w = w - (q @ w) * q
    return w


def top_eigenpairs(
    loss_at: LossFn,
    theta: Tensor,
    k: int = 20,
    iters: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
    method: str = "auto",
) -> SpectrumResult:
    """Top-``k`` Hessian eigenpairs by power iteration with deflation.

    Each round converges toward the largest-magnitude eigenvalue of the Hessian
    restricted to the complement of the vectors already found; the sign comes
    from the Rayleigh quotient. A round stops once consecutive Rayleigh
    quotients agree to ``tol`` relative, or after ``iters`` products.
    Non-converged pairs are returned with ``converged=False``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    theta = theta.detach().clone()
    gen = torch.Generator().manual_seed(seed)
    found: list[Tensor] = []
    values, residuals, converged, counts = [], [], [], []
    for _ in range(min(k, theta.numel())):
        v = torch.randn(theta.shape, generator=gen, dtype=theta.dtype)
        v = _project_out(v, found)
        v = v / v.norm()
        prev = None
        ok = False
        rq = 0.0
        res = float("inf")
        for it in range(1, iters + 1):
            w = _project_out(hvp(loss_at, theta, v, method), found)
            rq = (v @ w).item()
            res = (w - rq * v).norm().item()
            if prev is not None and abs(rq - prev) < tol * max(abs(rq), 1e-30):
                ok = True
                break
            wn = w.norm()
            if wn.item() == 0.0:
                ok = True
                break
            if it == iters:
                break
            prev = rq
            v = w / wn
        found.append(v)
        values.append(rq)
        residuals.append(res)
        converged.append(ok)
        counts.append(it)
    order = sorted(range(len(values)), key=lambda i: -abs(values[i]))
    return SpectrumResult(
        eigenvalues=[values[i] for i in order],
        eigenvectors=[found[i] for i in order],
        residuals=[residuals[i] for i in order],
        converged=[converged[i] for i in order],
        iterations=[counts[i] for i in order],
    )


def landscape_slice(
    loss_at: LossFn,
    theta: Tensor,
    v1: Tensor,
    v2: Tensor,
    radius: float,
    grid_n: int,
) -> LandscapeGrid:
    """Loss on the plane ``theta + a1*v1 + a2*v2`` for ``a1, a2`` in ``linspace(-radius, radius, grid_n)``."""
    if grid_n < 1 or grid_n % 2 == 0:
        raise ValueError(f"grid_n must be odd so the grid contains 0, got {grid_n}")
    for name, v in (("v1", v1), ("v2", v2)):
        if abs(v.norm().item() - 1.0) > 1e-6:
            raise ValueError(f"{name} must be unit norm")
    base = theta.detach().clone()
    alphas = np.linspace(-radius, radius, grid_n)
    alphas[grid_n // 2] = 0.0
    losses = np.empty((grid_n, grid_n))
    with torch.no_grad():
        center = float(loss_at(base))
        for i, a1 in enumerate(alphas):
            for j, a2 in enumerate(alphas):
                if a1 == 0.0 and a2 == 0.0:
                    losses[i, j] = center
                    continue
                value = float(loss_at(base + float(a1) * v1 + float(a2) * v2))
                losses[i, j] = value
    if not np.isfinite(losses).all():
        raise NumericError("non-finite loss on the landscape grid")
    return LandscapeGrid(alphas.copy(), alphas.copy(), losses)


def model_loss_fn(model: torch.nn.Module, images: Tensor, targets: Targets) -> tuple[LossFn, Tensor]:
    """Cross-entropy of ``model`` on a fixed batch as a function of its flat parameters.

    Works on a float64 inference-mode copy; the caller's model is not modified.
    Returns ``(loss_at, theta0)``.
    """
    net = copy.deepcopy(model).double().eval()
    names = [n for n, _ in net.named_parameters()]
    shapes = [p.shape for _, p in net.named_parameters()]
    sizes = [p.numel() for _, p in net.named_parameters()]
    buffers = dict(net.named_buffers())
    theta0 = torch.cat([p.detach().reshape(-1) for _, p in net.named_parameters()])
    x = images.double()
    if targets.kind == "soft_logits":
        targets = Targets(targets.values.double(), targets.kind, targets.temperature)

    def loss_at(theta: Tensor) -> Tensor:
        params = {n: t.view(s) for n, t, s in zip(names, torch.split(theta, sizes), shapes)}
        logits = torch.func.functional_call(net, {**params, **buffers}, (x,))
        return ce_loss(logits, targets)

    return loss_at, theta0
