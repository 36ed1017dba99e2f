"""Lion: sign-of-interpolated-momentum updates with decoupled weight decay.

For a parameter ``theta`` with gradient ``g`` and momentum ``m``::

    c      = beta1 * m + (1 - beta1) * g
    theta <- theta - lr * (sign(c) + weight_decay * theta)
    m     <- beta2 * m + (1 - beta2) * g

``sign(0) == 0``, so a zero gradient with zero momentum leaves a parameter
fixed up to weight decay. Decay applies to every parameter, norm scales
and biases included.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, MutableMapping

import torch
from torch import Tensor

from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class LionConfig:
    beta1: float = 0.95
    beta2: float = 0.98
    weight_decay: float = 5e-3

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"beta2 must lie in [0, 1), got {self.beta2}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")


def init_state(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {name: torch.zeros_like(p) for name, p in params.items()}


def _update(theta: Tensor, g: Tensor, m: Tensor, cfg: LionConfig, lr: float):
    c = m * cfg.beta1 + g * (1.0 - cfg.beta1)
    theta.sub_((torch.sign(c) + theta * cfg.weight_decay) * lr)
    m.mul_(cfg.beta2).add_(g, alpha=1.0 - cfg.beta2)


def lion_step(
    params: MutableMapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: MutableMapping[str, Tensor],
    cfg: LionConfig,
    lr: float,
):
    """Apply one Lion update in place and return ``(params, state)``.

    ``state`` maps each parameter name to its momentum buffer; missing buffers
    are created as zeros.
    """
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(theta.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.get(name)
        if m is None:
            m = state[name] = torch.zeros_like(theta)
        elif m.shape != theta.shape:
            raise ShapeError(f"momentum for {name!r} has shape {tuple(m.shape)}, parameter {tuple(theta.shape)}")
        _update(theta, g, m, cfg, lr)
    return params, state


class Lion(torch.optim.Optimizer):
    """``torch.optim`` front end over :func:`lion_step`'s update rule."""

    def __init__(self, params, lr: float = 5e-5, betas=(0.95, 0.98), weight_decay: float = 5e-3):
        if lr < 0:
            raise ConfigError(f"lr must be non-negative, got {lr}")
        LionConfig(betas[0], betas[1], weight_decay)
        super().__init__(params, dict(lr=lr, betas=tuple(betas), weight_decay=weight_decay))
        self._names = {}

    def name_parameters(self, named_params):
        """Register names so numeric errors can point at the offending parameter."""
        self._names = {id(p): n for n, p in named_params}

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            cfg = LionConfig(group["betas"][0], group["betas"][1], group["weight_decay"])
            for p in group["params"]:
                if p.grad is None:
                    continue
                if not torch.isfinite(p.grad).all():
                    name = self._names.get(id(p), f"<param {tuple(p.shape)}>")
                    raise NumericError(f"non-finite gradient for parameter {name!r}")
                state = self.state[p]
                if "exp_avg" not in state:
                    state["exp_avg"] = torch.zeros_like(p)
                _update(p, p.grad, state["exp_avg"], cfg, group["lr"])
        return loss
