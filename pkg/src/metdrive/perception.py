"""Perception branch: small strided-conv backbones over the camera raster and
the BEV occupancy raster, fused by cross-attention into per-frame geometric
features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .domain import GEOMETRIC, ConfigurationError, FeatureBlock, ValidationError


@dataclass(frozen=True)
class ObservationFrame:
    """One synthetic sensor frame: grayscale camera sweep + top-down occupancy."""

    camera: np.ndarray
    bev: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        for name in ("camera", "bev"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValidationError(f"{name} raster must be 2-D, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValidationError(f"{name} raster values must lie in [0, 1]")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


class ConvBackbone(nn.Module):
    """Three stride-2 conv stages followed by a flatten to a fixed descriptor."""

    def __init__(self, resolution: tuple[int, int], desc_dim: int, base_channels: int = 8):
        super().__init__()
        self.resolution = tuple(int(v) for v in resolution)
        c = base_channels
        self.stages = nn.Sequential(
            nn.Conv2d(1, c, 3, stride=2, padding=1, dtype=torch.float64), nn.GELU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, dtype=torch.float64), nn.GELU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1, dtype=torch.float64), nn.GELU(),
        )
        h, w = self.resolution
        for _ in range(3):
            h, w = (h + 1) // 2, (w + 1) // 2
        self.head = nn.Linear(4 * c * h * w, desc_dim, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, 1, H, W) -> (B, desc_dim)
        if tuple(x.shape[-2:]) != self.resolution:
            raise ConfigurationError(
                f"raster resolution {tuple(x.shape[-2:])} does not match configured {self.resolution}")
        y = self.stages(x)
        return self.head(y.flatten(1))


class PerceptionBranch(nn.Module):
    """Camera and BEV backbones with an attention-based fusion block."""

    def __init__(self, camera_hw: tuple[int, int] = (16, 32), bev_hw: tuple[int, int] = (32, 32),
                 out_dim: int = 64, desc_dim: int = 32, base_channels: int = 8,
                 heads: int = 4, window_len: int = 8):
        super().__init__()
        self.out_dim = out_dim
        self.window_len = window_len
        self.camera_backbone = ConvBackbone(camera_hw, desc_dim, base_channels)
        self.bev_backbone = ConvBackbone(bev_hw, desc_dim, base_channels)
        self.fusion_attn = nn.MultiheadAttention(desc_dim, heads, batch_first=True, dtype=torch.float64)
        self.head = nn.Sequential(
            nn.Linear(2 * desc_dim, out_dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(out_dim, out_dim, dtype=torch.float64),
        )

    def descriptors(self, camera: torch.Tensor, bev: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-modality flat descriptors entering fusion, each (B, desc_dim)."""
        return self.camera_backbone(camera), self.bev_backbone(bev)

    def fuse(self, cam_desc: torch.Tensor, bev_desc: torch.Tensor, return_weights: bool = False):
        tokens = torch.stack([cam_desc, bev_desc], dim=1)      # (B, 2, desc)
        attn_out, weights = self.fusion_attn(tokens, tokens, tokens,
                                             need_weights=True, average_attn_weights=True)
        fused = self.head((tokens + attn_out).flatten(1))
        if return_weights:
            return fused, weights
        return fused

    def forward(self, camera: torch.Tensor, bev: torch.Tensor) -> torch.Tensor:
        # (B, 1, Hc, Wc), (B, 1, Hb, Wb) -> (B, out_dim)
        cam_desc, bev_desc = self.descriptors(camera, bev)
        return self.fuse(cam_desc, bev_desc)


def _frame_tensors(frame: ObservationFrame) -> tuple[torch.Tensor, torch.Tensor]:
    cam = torch.tensor(frame.camera, dtype=torch.float64).unsqueeze(0)
    bev = torch.tensor(frame.bev, dtype=torch.float64).unsqueeze(0)
    return cam, bev


def encode_frame(frame: ObservationFrame, branch: PerceptionBranch) -> FeatureBlock:
    """Encode one frame to geometric features of shape (1, out_dim)."""
    cam, bev = _frame_tensors(frame)
    out = branch(cam.unsqueeze(0), bev.unsqueeze(0))
    return FeatureBlock(data=out, role=GEOMETRIC)


def encode_sequence(frames: Sequence[ObservationFrame], branch: PerceptionBranch) -> FeatureBlock:
    """Encode an oldest-first window of exactly ``branch.window_len`` frames,
    stacked along the time axis."""
    if len(frames) != branch.window_len:
        raise ValidationError(f"expected {branch.window_len} frames, got {len(frames)}")
    cams = torch.stack([torch.tensor(f.camera, dtype=torch.float64) for f in frames]).unsqueeze(1)
    bevs = torch.stack([torch.tensor(f.bev, dtype=torch.float64) for f in frames]).unsqueeze(1)
    out = branch(cams, bevs)
    return FeatureBlock(data=out, role=GEOMETRIC)
