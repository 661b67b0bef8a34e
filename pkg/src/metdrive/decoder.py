"""GRU waypoint decoder over concatenated geometric + time-series features,
conditioned on the target point. Supports half-window feature masking for the
consistency comparisons used during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .domain import (
    FUSED,
    GEOMETRIC,
    TIME_SERIES,
    ConfigurationError,
    FeatureBlock,
    Trajectory,
    ValidationError,
)

FIRST = "first"
SECOND = "second"


@dataclass(frozen=True)
class FusedFeatures:
    """Fused feature block plus per-time-step keep flags."""

    data: FeatureBlock
    mask: torch.Tensor

    def __post_init__(self):
        mask = self.mask
        if not torch.is_tensor(mask):
            mask = torch.as_tensor(mask, dtype=torch.bool)
            object.__setattr__(self, "mask", mask)
        if mask.dtype != torch.bool:
            object.__setattr__(self, "mask", mask.to(torch.bool))
            mask = self.mask
        if self.data.role != FUSED:
            raise ValidationError(f"fused features require role 'fused', got {self.data.role!r}")
        if mask.shape != (self.data.time,):
            raise ValidationError(
                f"mask length {tuple(mask.shape)} does not match time axis {self.data.time}")
        if not bool(mask.any()):
            raise ValidationError("mask keeps no time steps")

    @property
    def length(self) -> int:
        return self.data.time


def concat_features(f_g: FeatureBlock, f_t: FeatureBlock) -> FusedFeatures:
    """Channel-axis concatenation of geometric and time-series features."""
    if f_g.role != GEOMETRIC or f_t.role != TIME_SERIES:
        raise ValidationError(
            f"expected roles (geometric, time_series), got ({f_g.role!r}, {f_t.role!r})")
    if f_g.time != f_t.time:
        raise ValidationError(f"time lengths differ: {f_g.time} vs {f_t.time}")
    data = FeatureBlock(data=torch.cat([f_g.data, f_t.data], dim=1), role=FUSED)
    return FusedFeatures(data=data, mask=torch.ones(data.time, dtype=torch.bool))


def half_mask(length: int, half: str) -> torch.Tensor:
    if length % 2 != 0:
        raise ConfigurationError(f"length parity: L={length} must be even to split in halves")
    mask = torch.zeros(length, dtype=torch.bool)
    if half == FIRST:
        mask[: length // 2] = True
    elif half == SECOND:
        mask[length // 2:] = True
    else:
        raise ConfigurationError(f"unknown half {half!r}; expected 'first' or 'second'")
    return mask


def mask_half(f: FusedFeatures, half: str) -> FusedFeatures:
    """Restrict the keep-mask to the first or second half of the time window."""
    return FusedFeatures(data=f.data, mask=half_mask(f.length, half))


class WaypointDecoder(nn.Module):
    """Autoregressive GRU decoder emitting cumulative 2-D waypoint deltas.

    The unmasked fused steps are mean-pooled into a context vector that seeds
    the GRU hidden state; each unroll step consumes the previous cumulative
    waypoint concatenated with the target point.
    """

    def __init__(self, feature_dim: int, hidden_size: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden_size = hidden_size
        self.context = nn.Linear(feature_dim, hidden_size, dtype=torch.float64)
        self.cell = nn.GRUCell(4, hidden_size, dtype=torch.float64)
        self.out = nn.Linear(hidden_size, 2, dtype=torch.float64)

    def pool(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # (B, L, C), (B, L) -> (B, C); masked steps contribute exact zeros
        m = mask.to(features.dtype).unsqueeze(-1)
        total = (features * m).sum(dim=1)
        count = m.sum(dim=1)
        return total / count

    def forward(self, features: torch.Tensor, mask: torch.Tensor, target: torch.Tensor,
                n_waypoints: int, return_deltas: bool = False):
        # (B, L, C), (B, L), (B, 2) -> (B, K, 2)
        if features.shape[-1] != self.feature_dim:
            raise ConfigurationError(
                f"feature dim {features.shape[-1]} does not match decoder dim {self.feature_dim}")
        if n_waypoints < 2 or n_waypoints % 2 != 0:
            raise ConfigurationError(f"waypoint count must be even and >= 2, got {n_waypoints}")
        h = self.context(self.pool(features, mask))
        wp = torch.zeros(features.shape[0], 2, dtype=features.dtype)
        waypoints, deltas = [], []
        for _ in range(n_waypoints):
            h = self.cell(torch.cat([wp, target], dim=1), h)
            delta = self.out(h)
            wp = wp + delta
            waypoints.append(wp)
            deltas.append(delta)
        stacked = torch.stack(waypoints, dim=1)
        if return_deltas:
            return stacked, torch.stack(deltas, dim=1)
        return stacked


def decode(f: FusedFeatures, target_point, n_waypoints: int, decoder: WaypointDecoder) -> Trajectory:
    """Decode a full-length trajectory from (possibly masked) fused features."""
    target = target_point if torch.is_tensor(target_point) else torch.tensor(
        [float(target_point[0]), float(target_point[1])], dtype=torch.float64)
    out = decoder(f.data.data.unsqueeze(0), f.mask.unsqueeze(0),
                  target.reshape(1, 2), n_waypoints)
    return Trajectory(points=out.squeeze(0))
