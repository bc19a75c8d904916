"""Pixel losses and the balance-coefficient schedules."""
import math
import warnings
from dataclasses import dataclass

import torch

from .config import ConfigError, ScheduleSpec, UalSpec

EPS = 1e-7


@dataclass
class LossBreakdown:
    bcel: torch.Tensor
    ual: torch.Tensor
    lam: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {"lambda": self.lam, "bcel": float(self.bcel.detach()), "ual": float(self.ual.detach()),
                "total": float(self.total.detach())}


def _check_shapes(p, g):
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != mask shape {tuple(g.shape)}")


def bce_map(p, g):
    p = p.clamp(EPS, 1 - EPS)
    return -g * torch.log(p) - (1 - g) * torch.log(1 - p)


def bcel(p, g, weight=None):
    _check_shapes(p, g)
    loss = bce_map(p, g)
    if weight is not None:
        loss = weight * loss
    return loss.mean()


def pow_ambiguity(p, alpha=2.0):
    """``1 - |2p - 1|^alpha``: 1 at p = 0.5, 0 at p in {0, 1}."""
    return 1 - (2 * p - 1).abs().pow(alpha)


def exp_ambiguity(p, alpha=2.0):
    return torch.exp(-(alpha * (p - 0.5)).pow(2))


def _check_spec(spec: UalSpec):
    if spec.alpha <= 0:
        raise ConfigError(f"UAL exponent must be positive, got {spec.alpha}")
    if spec.form == "pow" and spec.alpha < 1:
        warnings.warn(f"pow-form UAL with alpha={spec.alpha} < 1 is known not to converge", stacklevel=3)


def ual_map(p, spec: UalSpec):
    if spec.form == "pow":
        return pow_ambiguity(p, spec.alpha)
    if spec.form == "exp":
        return exp_ambiguity(p, spec.alpha)
    if spec.form in ("none", "weighted_bce"):
        return torch.zeros_like(p)
    raise ConfigError(f"unknown UAL form {spec.form!r}")


def ual(p, spec: UalSpec = UalSpec()):
    _check_spec(spec)
    return ual_map(p, spec).mean()


def lambda_value(spec: ScheduleSpec, t, T) -> float:
    if T <= 0 or not 0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T with T > 0, got t={t}, T={T}")
    lo, hi = spec.lambda_min, spec.lambda_max
    if spec.kind == "cosine":
        return lo + 0.5 * (1 - math.cos(t / T * math.pi)) * (hi - lo)
    if spec.kind == "linear":
        if spec.t_end <= spec.t_start:
            raise ConfigError("linear schedule needs t_end > t_start")
        t0, t1 = spec.t_start * T, spec.t_end * T
        return min(max(lo + (t - t0) / (t1 - t0) * (hi - lo), lo), hi)
    if spec.kind == "constant":
        return spec.constant
    raise ConfigError(f"unknown schedule kind {spec.kind!r}")


def total_loss(p, g, ual_spec: UalSpec, schedule: ScheduleSpec, t, T) -> LossBreakdown:
    _check_spec(ual_spec)
    lam = lambda_value(schedule, t, T)
    if ual_spec.form == "weighted_bce":
        # the weight acts as a per-pixel constant, not a loss term of its own
        weight = 1 + pow_ambiguity(p.detach(), ual_spec.alpha)
        b = bcel(p, g, weight)
        return LossBreakdown(b, torch.zeros((), dtype=p.dtype), lam, b)
    b = bcel(p, g)
    if ual_spec.form == "none":
        u = torch.zeros((), dtype=p.dtype)
        return LossBreakdown(b, u, lam, b)
    u = ual_map(p, ual_spec).mean()
    return LossBreakdown(b, u, lam, b + lam * u)
