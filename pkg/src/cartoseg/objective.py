"""Training objective and optimization: focal + dice loss, AdamW, one-cycle LR.

The combined loss is ``alpha * focal + beta * dice`` with alpha=10, beta=1
by default. Reduction convention everywhere: mean over pixels within a
sample, then mean over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, DimensionError, TrainingError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    beta: float = 1.0
    focal_gamma: float = 2.0
    focal_balance: float = 0.25
    dice_eps: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha/beta must be non-negative")
        if self.dice_eps <= 0:
            raise ConfigError("dice_eps must be positive")
        if not 0.0 <= self.focal_balance <= 1.0:
            raise ConfigError("focal_balance must be a probability weight in [0, 1]")


@dataclass(frozen=True)
class OptimizerConfig:
    lr_init: float = 1e-4
    lr_max: float = 1e-3
    lr_final: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    total_steps: int = 2
    peak_fraction: float = 0.3

    def __post_init__(self):
        if not self.lr_init < self.lr_max:
            raise ConfigError(f"lr_init {self.lr_init} must be below lr_max {self.lr_max}")
        if not self.lr_final < self.lr_init:
            raise ConfigError(f"lr_final {self.lr_final} must be below lr_init {self.lr_init}")
        if self.total_steps < 2:
            raise ConfigError("total_steps must be at least 2")
        if not 0.0 < self.peak_fraction < 1.0:
            raise ConfigError("peak_fraction must lie strictly inside (0, 1)")


def _check_pair(probabilities: torch.Tensor, target: torch.Tensor):
    if probabilities.shape != target.shape:
        raise DimensionError(
            f"probability shape {tuple(probabilities.shape)} does not match "
            f"target shape {tuple(target.shape)}"
        )
    if probabilities.ndim < 2:
        raise DimensionError("expected at least (H, W) inputs")


def _prob_floor(dtype: torch.dtype) -> float:
    return 1e-12 if dtype == torch.float64 else 1e-7


def focal_loss(
    probabilities: torch.Tensor,
    target: torch.Tensor,
    gamma: float = 2.0,
    balance: float = 0.25,
) -> torch.Tensor:
    """Mean of -balance_t * (1 - p_t)^gamma * log(p_t).

    p_t is the probability of the true class; balance applies on foreground
    and (1 - balance) on background. gamma=0, balance=0.5 reduces to half
    the binary cross-entropy.
    """
    _check_pair(probabilities, target)
    t = target.to(probabilities.dtype)
    eps = _prob_floor(probabilities.dtype)
    p = probabilities.clamp(eps, 1.0 - eps)
    p_t = torch.where(t > 0, p, 1.0 - p)
    bal = torch.where(t > 0, torch.as_tensor(balance, dtype=p.dtype), torch.as_tensor(1.0 - balance, dtype=p.dtype))
    per_pixel = -bal * (1.0 - p_t) ** gamma * torch.log(p_t)
    return per_pixel.mean(dim=(-2, -1)).mean()


def dice_loss(probabilities: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft dice: 1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps), per sample."""
    _check_pair(probabilities, target)
    t = target.to(probabilities.dtype)
    inter = (probabilities * t).sum(dim=(-2, -1))
    denom = probabilities.sum(dim=(-2, -1)) + t.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def total_loss(
    probabilities: torch.Tensor, target: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    focal = focal_loss(probabilities, target, config.focal_gamma, config.focal_balance)
    dice = dice_loss(probabilities, target, config.dice_eps)
    return config.alpha * focal + config.beta * dice


def gradients(loss: torch.Tensor, params: list[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for each trainable tensor."""
    if not torch.isfinite(loss):
        raise TrainingError(f"loss is not finite: {loss.item()!r}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]


@dataclass
class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0

    @classmethod
    def init(cls, params: list[torch.Tensor]) -> "AdamWState":
        return cls(
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
        )


@torch.no_grad()
def adamw_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state must align")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


def onecycle_lr(step: int, config: OptimizerConfig) -> float:
    """Learning rate at ``step`` of the one-cycle schedule.

    Cosine warm-up from lr_init to lr_max at ``peak_fraction`` of the total
    steps, then cosine annealing down to lr_final. Endpoint values are
    returned exactly.
    """
    total = config.total_steps
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside schedule range [0, {total}]")
    peak = max(1, round(config.peak_fraction * total))
    peak = min(peak, total - 1)
    if step == 0:
        return config.lr_init
    if step == peak:
        return config.lr_max
    if step == total:
        return config.lr_final
    if step < peak:
        u = step / peak
        lo, hi = config.lr_init, config.lr_max
    else:
        u = (step - peak) / (total - peak)
        lo, hi = config.lr_max, config.lr_final
    return lo + (hi - lo) * (1.0 - math.cos(math.pi * u)) / 2.0
