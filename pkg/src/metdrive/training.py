"""One-stage training of the full model, the flat experiment configuration
format, and the sequence-input ablation switches.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np
import torch

from . import losses
from .domain import ConfigurationError, ValidationError, write_records
from .ego_temporal import input_streams
from .model import (
    INPUT_MODES,
    DrivingModel,
    build_model,
    samples_to_tensors,
    save_checkpoint,
)
from .synthworld import load_dataset

LOSS_CURVE_FILE = "loss_curve.jsonl"


class NonFiniteLossError(RuntimeError):
    """Training aborted on a non-finite loss value."""


def _to_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# dotted config key -> (attribute, converter)
CONFIG_KEYS = {
    "model.window_len": ("window_len", int),
    "model.waypoints": ("waypoints", int),
    "model.embed_dim": ("embed_dim", int),
    "model.temporal_dim": ("temporal_dim", int),
    "model.geometric_dim": ("geometric_dim", int),
    "model.gru_hidden": ("gru_hidden", int),
    "model.heads": ("heads", int),
    "model.depth": ("depth", int),
    "model.kernel_width": ("kernel_width", int),
    "model.desc_dim": ("desc_dim", int),
    "model.base_channels": ("base_channels", int),
    "model.camera_h": ("camera_h", int),
    "model.camera_w": ("camera_w", int),
    "model.bev_h": ("bev_h", int),
    "model.bev_w": ("bev_w", int),
    "model.input_mode": ("input_mode", str),
    "loss.alpha": ("alpha", float),
    "loss.beta": ("beta", float),
    "loss.lambda_tg": ("lambda_tg", float),
    "loss.temporal_loss_on": ("temporal_loss_on", _to_bool),
    "train.lr": ("lr", float),
    "train.batch_size": ("batch_size", int),
    "train.epochs": ("epochs", int),
    "train.seed": ("seed", int),
    "train.dataset_dir": ("dataset_dir", str),
    "train.checkpoint": ("checkpoint", str),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Typed view over the flat key-value experiment configuration."""

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
    camera_h: int = 16
    camera_w: int = 32
    bev_h: int = 32
    bev_w: int = 32
    input_mode: str = "decomposed"
    alpha: float = 0.4
    beta: float = 0.6
    lambda_tg: float = 0.5
    temporal_loss_on: bool = True
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    dataset_dir: str = "dataset"
    checkpoint: str = "model.ckpt"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("window_len", "waypoints", "embed_dim", "temporal_dim", "geometric_dim",
                     "gru_hidden", "heads", "depth", "kernel_width", "batch_size", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"unknown input mode {self.input_mode!r}; "
                                     f"expected one of {INPUT_MODES}")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        kwargs = {}
        extra = {}
        for key, value in flat.items():
            if key in CONFIG_KEYS:
                attr, conv = CONFIG_KEYS[key]
                try:
                    kwargs[attr] = conv(value)
                except (TypeError, ValueError) as exc:
                    raise ConfigurationError(f"bad value for {key}: {value!r} ({exc})") from None
            else:
                extra[key] = value
        return cls(extra=extra, **kwargs)

    def to_flat(self) -> dict:
        out = dict(self.extra)
        for key, (attr, _) in CONFIG_KEYS.items():
            out[key] = getattr(self, attr)
        return out

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(alpha=self.alpha, beta=self.beta, lambda_tg=self.lambda_tg)


def parse_config_file(path) -> dict:
    """Read a flat ``key = value`` configuration file; '#' lines are comments."""
    flat: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            flat[key.strip()] = value.strip()
    return flat


def apply_overrides(flat: dict, overrides: Sequence[str]) -> dict:
    out = dict(flat)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def ablation_inputs(mode: str, seq):
    """Tokenizer stream groups for one sequence under the given input mode."""
    return input_streams(seq, mode)


@dataclass
class TrainResult:
    model: DrivingModel
    curve: list
    checkpoint_path: str | None = None


def _batched_losses(model, batch, weights, temporal_loss_on: bool):
    """Per-sample losses over one batch; returns (mean, per-sample floats)."""
    pred_full, pred_first, pred_second = model(
        batch["camera"], batch["bev"], batch["streams_x"], batch["streams_y"],
        batch["target"], with_halves=temporal_loss_on)
    per_sample = []
    for i in range(pred_full.shape[0]):
        if temporal_loss_on:
            per_sample.append(losses.total_loss(
                pred_full[i], pred_first[i], pred_second[i], batch["gt"][i], weights))
        else:
            per_sample.append(losses.imitation_loss(pred_full[i], batch["gt"][i]))
    return torch.stack(per_sample).mean(), [float(v.detach()) for v in per_sample]


def evaluate_imitation(model: DrivingModel, samples, batch_size: int = 64) -> float:
    """Mean per-sample imitation loss over a sample set."""
    model.eval()
    vals = []
    with torch.no_grad():
        for k in range(0, len(samples), batch_size):
            batch = samples_to_tensors(samples[k:k + batch_size], model.dims.input_mode)
            pred, _, _ = model(batch["camera"], batch["bev"], batch["streams_x"],
                               batch["streams_y"], batch["target"])
            for i in range(pred.shape[0]):
                vals.append(float(losses.imitation_loss(pred[i], batch["gt"][i])))
    return losses.batch_mean(vals)


def train(cfg: ExperimentConfig, samples=None, out_dir=None) -> TrainResult:
    """Minimize the combined loss with Adam over seeded shuffled batches.

    Deterministic given (config, dataset): same seed twice yields bit-identical
    parameters. Writes the checkpoint and loss curve when ``out_dir`` is set.
    """
    if samples is None:
        samples, _ = load_dataset(cfg.dataset_dir)
    if not samples:
        raise ValidationError("training dataset is empty")
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.to_flat())
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    weights = cfg.loss_weights()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5AFE]))
    curve = []
    global_step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(samples))
        epoch_losses = []
        for b0 in range(0, len(samples), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            batch = samples_to_tensors([samples[i] for i in idx], cfg.input_mode)
            optimizer.zero_grad()
            loss, per_sample = _batched_losses(model, batch, weights, cfg.temporal_loss_on)
            if not bool(torch.isfinite(loss)):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}")
            loss.backward()
            optimizer.step()
            epoch_losses.extend(per_sample)
            global_step += 1
        curve.append({"v": 1, "kind": "loss", "epoch": epoch, "step": global_step,
                      "loss": losses.batch_mean(epoch_losses)})
    checkpoint_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, cfg.checkpoint)
        rng_state = bytes(torch.get_rng_state().numpy().tobytes())
        save_checkpoint(checkpoint_path, model, cfg.to_flat(), cfg.epochs, rng_state)
        write_records(os.path.join(out_dir, LOSS_CURVE_FILE), curve)
    return TrainResult(model=model, curve=curve, checkpoint_path=checkpoint_path)
