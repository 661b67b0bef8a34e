"""Assembled driving network (perception + temporal branches + waypoint
decoder) and the single-file binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .decoder import FIRST, SECOND, WaypointDecoder, half_mask
from .domain import ConfigurationError, ValidationError
from .ego_temporal import TemporalBranch, input_streams
from .perception import PerceptionBranch

MODE_DECOMPOSED = "decomposed"
MODE_PAIRED = "paired_undecomposed"
MODE_RAW = "raw_theta_u_psi"
INPUT_MODES = (MODE_DECOMPOSED, MODE_PAIRED, MODE_RAW)

# (horizontal, vertical) stream counts fed to the tokenizers per input mode
STREAM_COUNTS = {MODE_DECOMPOSED: (3, 3), MODE_PAIRED: (3, 2), MODE_RAW: (3, 0)}

CHECKPOINT_MAGIC = b"METD1"


@dataclass(frozen=True)
class ModelDims:
    window_len: int = 8
    waypoints: int = 8
    embed_dim: int = 32
    temporal_dim: int = 64
    geometric_dim: int = 64
    gru_hidden: int = 64
    heads: int = 4
    depth: int = 1
    kernel_width: int = 3
    desc_dim: int = 32
    base_channels: int = 8
    camera_hw: tuple[int, int] = (16, 32)
    bev_hw: tuple[int, int] = (32, 32)
    input_mode: str = MODE_DECOMPOSED

    def __post_init__(self):
        for name in ("window_len", "waypoints", "embed_dim", "temporal_dim", "geometric_dim",
                     "gru_hidden", "heads", "depth", "kernel_width", "desc_dim", "base_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.window_len % 2 != 0 or self.waypoints % 2 != 0:
            raise ConfigurationError("window_len and waypoints must be even")
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"unknown input mode {self.input_mode!r}")


class DrivingModel(nn.Module):
    """End-to-end waypoint predictor over sensor windows and ego-state streams."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        n_x, n_y = STREAM_COUNTS[dims.input_mode]
        self.temporal = TemporalBranch(
            n_streams_x=n_x, n_streams_y=n_y, embed_dim=dims.embed_dim,
            out_dim=dims.temporal_dim, heads=dims.heads, depth=dims.depth,
            kernel_width=dims.kernel_width)
        self.perception = PerceptionBranch(
            camera_hw=dims.camera_hw, bev_hw=dims.bev_hw, out_dim=dims.geometric_dim,
            desc_dim=dims.desc_dim, base_channels=dims.base_channels,
            heads=dims.heads, window_len=dims.window_len)
        self.decoder = WaypointDecoder(
            feature_dim=dims.geometric_dim + dims.temporal_dim, hidden_size=dims.gru_hidden)

    def encode_geometric(self, camera: torch.Tensor, bev: torch.Tensor) -> torch.Tensor:
        # (B, L, H, W) rasters -> (B, L, D_g)
        b, length = camera.shape[0], camera.shape[1]
        cam = camera.reshape(b * length, 1, *camera.shape[2:])
        occ = bev.reshape(b * length, 1, *bev.shape[2:])
        return self.perception(cam, occ).reshape(b, length, -1)

    def encode_temporal(self, streams_x: torch.Tensor, streams_y: torch.Tensor | None) -> torch.Tensor:
        return self.temporal(streams_x, streams_y)

    def decode_masked(self, fused: torch.Tensor, mask: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        b = fused.shape[0]
        return self.decoder(fused, mask.unsqueeze(0).expand(b, -1), target, self.dims.waypoints)

    def forward(self, camera, bev, streams_x, streams_y, target, with_halves: bool = False):
        """Returns (full, first, second) waypoint tensors of shape (B, K, 2);
        first/second are None unless ``with_halves``."""
        f_g = self.encode_geometric(camera, bev)
        f_t = self.encode_temporal(streams_x, streams_y)
        if f_g.shape[1] != f_t.shape[1]:
            raise ValidationError(f"time axes differ: {f_g.shape[1]} vs {f_t.shape[1]}")
        fused = torch.cat([f_g, f_t], dim=2)
        length = fused.shape[1]
        full = self.decode_masked(fused, torch.ones(length, dtype=torch.bool), target)
        if not with_halves:
            return full, None, None
        first = self.decode_masked(fused, half_mask(length, FIRST), target)
        second = self.decode_masked(fused, half_mask(length, SECOND), target)
        return full, first, second


def model_config(cfg: dict) -> ModelDims:
    """Build model dimensions from a flat configuration mapping."""
    g = cfg.get
    return ModelDims(
        window_len=int(g("model.window_len", 8)),
        waypoints=int(g("model.waypoints", 8)),
        embed_dim=int(g("model.embed_dim", 32)),
        temporal_dim=int(g("model.temporal_dim", 64)),
        geometric_dim=int(g("model.geometric_dim", 64)),
        gru_hidden=int(g("model.gru_hidden", 64)),
        heads=int(g("model.heads", 4)),
        depth=int(g("model.depth", 1)),
        kernel_width=int(g("model.kernel_width", 3)),
        desc_dim=int(g("model.desc_dim", 32)),
        base_channels=int(g("model.base_channels", 8)),
        camera_hw=(int(g("model.camera_h", 16)), int(g("model.camera_w", 32))),
        bev_hw=(int(g("model.bev_h", 32)), int(g("model.bev_w", 32))),
        input_mode=str(g("model.input_mode", MODE_DECOMPOSED)),
    )


def build_model(cfg: dict, seed: int | None = None) -> DrivingModel:
    """Construct a model from a flat configuration; seeding makes init reproducible."""
    if seed is not None:
        torch.manual_seed(int(seed))
    return DrivingModel(model_config(cfg))


def samples_to_tensors(samples, input_mode: str) -> dict:
    """Stack dataset samples into batched model inputs."""
    cams = np.stack([[f.camera for f in s.frames] for s in samples])
    bevs = np.stack([[f.bev for f in s.frames] for s in samples])
    xs, ys = [], []
    for s in samples:
        sx, sy = input_streams(s.ego, input_mode)
        xs.append(sx)
        ys.append(sy)
    return {
        "camera": torch.tensor(cams, dtype=torch.float64),
        "bev": torch.tensor(bevs, dtype=torch.float64),
        "streams_x": torch.tensor(np.stack(xs), dtype=torch.float64),
        "streams_y": (torch.tensor(np.stack(ys), dtype=torch.float64)
                      if ys[0] is not None else None),
        "target": torch.tensor(np.stack([np.asarray(s.target, dtype=np.float64)
                                         for s in samples]), dtype=torch.float64),
        "gt": torch.stack([s.gt.points for s in samples]).to(torch.float64),
    }


def save_checkpoint(path, model: DrivingModel, config: dict, epoch: int,
                    rng_state: bytes = b"") -> None:
    """Single-file binary checkpoint: magic, JSON header, raw float64 buffers."""
    names, blobs = [], []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f8")
        names.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {"v": 1, "epoch": int(epoch), "config": config, "params": names,
              "rng": rng_state.hex()}
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[DrivingModel, dict, int, bytes]:
    """Rebuild the model from a checkpoint file; forward outputs are
    bit-identical to the saved model's."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = header["config"]
        model = DrivingModel(model_config(config))
        state = {}
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            state[meta["name"]] = torch.from_numpy(
                np.frombuffer(buf, dtype="<f8").copy().reshape(shape))
        model.load_state_dict(state)
    return model, config, int(header["epoch"]), bytes.fromhex(header["rng"])
