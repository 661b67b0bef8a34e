"""Training losses: the half-window waypoint consistency loss, the base
imitation loss, their weighted combination, and the finite-difference
gradient-check oracle shared by the test suites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .domain import ConfigurationError, Trajectory, ValidationError


class GradCheckError(RuntimeError):
    """The function under check produced a non-finite value."""


@dataclass(frozen=True)
class LossWeights:
    """alpha weighs the first-half consistency term, beta the second-half term,
    lambda_tg the consistency loss against the imitation loss."""

    alpha: float = 0.4
    beta: float = 0.6
    lambda_tg: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_tg"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


def _points(traj) -> torch.Tensor:
    if isinstance(traj, Trajectory):
        return traj.points
    if torch.is_tensor(traj):
        return traj
    return torch.as_tensor(traj, dtype=torch.float64)


def _check_equal_lengths(*trajs) -> int:
    ks = [int(_points(t).shape[0]) for t in trajs]
    if len(set(ks)) != 1:
        raise ValidationError(f"trajectory lengths differ: {ks}")
    return ks[0]


def temporal_guidance_loss(y_first, y_second, y_full, w: LossWeights) -> torch.Tensor:
    """Weighted squared-L2 consistency between half-window predictions and the
    corresponding halves of the full prediction."""
    if w.alpha + w.beta <= 0:
        raise ConfigurationError("alpha + beta must be positive when the consistency loss is enabled")
    k = _check_equal_lengths(y_first, y_second, y_full)
    if k % 2 != 0:
        raise ValidationError(f"length parity: K={k} must be even")
    first, second, full = _points(y_first), _points(y_second), _points(y_full)
    half = k // 2
    loss_first = ((first[:half] - full[:half]) ** 2).sum()
    loss_second = ((second[half:] - full[half:]) ** 2).sum()
    return w.alpha * loss_first + w.beta * loss_second


def imitation_loss(pred, gt) -> torch.Tensor:
    """Mean per-waypoint L1 distance."""
    k = _check_equal_lengths(pred, gt)
    return (_points(pred) - _points(gt)).abs().sum() / k


def total_loss(pred_full, pred_first, pred_second, gt, w: LossWeights) -> torch.Tensor:
    """Imitation loss plus lambda_tg times the consistency loss."""
    _check_equal_lengths(pred_full, pred_first, pred_second, gt)
    base = imitation_loss(pred_full, gt)
    if w.lambda_tg == 0.0:
        return base
    return base + w.lambda_tg * temporal_guidance_loss(pred_first, pred_second, pred_full, w)


def batch_mean(values: Iterable[float]) -> float:
    """Order-independent mean of per-sample scalars (exactly rounded sum)."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValidationError("cannot average an empty batch")
    return math.fsum(vals) / len(vals)


def gradcheck(f, params: Sequence[torch.Tensor], eps: float = 1e-6) -> float:
    """Compare autograd gradients of ``f(*params)`` against central differences.

    Returns the max over coordinates of |analytic - numeric| / max(1e-8,
    |analytic| + |numeric|). ``params`` must be float64 leaf tensors.
    """
    params = list(params)
    for p in params:
        p.requires_grad_(True)
    value = f(*params)
    if not bool(torch.isfinite(value)):
        raise GradCheckError(f"function value is non-finite: {value}")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            gflat = torch.zeros_like(flat) if g is None else g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(f(*params))
                flat[i] = orig - eps
                lo = float(f(*params))
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise GradCheckError("perturbed function value is non-finite")
                numeric = (hi - lo) / (2 * eps)
                analytic = float(gflat[i])
                err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
                worst = max(worst, err)
    return worst
