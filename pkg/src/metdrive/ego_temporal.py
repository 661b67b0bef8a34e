"""Temporal branch: split ego-state sequences into horizontal and vertical
scalar streams, embed each stream (sinusoidal position + 1-D conv tokens),
encode the streams with self-attention over time, and fuse everything into
per-step time-series features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .domain import (
    TIME_SERIES,
    ConfigurationError,
    EgoStateSequence,
    FeatureBlock,
    validate_sequence,
)

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class TokenBlock:
    """Three embedded token streams of one orientation, each (L, D)."""

    streams: torch.Tensor
    orientation: str

    def __post_init__(self):
        streams = self.streams
        if not torch.is_tensor(streams):
            streams = torch.tensor(np.asarray(streams), dtype=torch.float64)
            object.__setattr__(self, "streams", streams)
        if streams.ndim != 3 or streams.shape[0] != 3:
            raise ConfigurationError(
                f"token block needs exactly 3 streams of shape (L, D), got {tuple(streams.shape)}")
        if not bool(torch.isfinite(streams).all()):
            raise ConfigurationError("token block contains a non-finite value")
        if self.orientation not in (HORIZONTAL, VERTICAL):
            raise ConfigurationError(f"unknown orientation {self.orientation!r}")


def decompose(seq: EgoStateSequence) -> tuple[np.ndarray, np.ndarray]:
    """Split a validated sequence into horizontal (cos theta, steer, delta_x)
    and vertical (sin theta, throttle, delta_y) scalar streams, each (3, L)."""
    seq = validate_sequence(seq)
    horizontal = np.stack([np.cos(seq.theta), seq.steer, seq.delta[:, 0]])
    vertical = np.stack([np.sin(seq.theta), seq.throttle, seq.delta[:, 1]])
    return horizontal, vertical


def input_streams(seq: EgoStateSequence, mode: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Tokenizer input stream groups for a given input mode.

    ``decomposed`` applies the cos/sin split; ``paired_undecomposed`` passes the
    raw fields through unchanged; ``raw_theta_u_psi`` drops the target-point
    vectors and disables the vertical group.
    """
    if mode == "decomposed":
        return decompose(seq)
    seq = validate_sequence(seq)
    if mode == "paired_undecomposed":
        x = np.stack([seq.theta, seq.steer, seq.delta[:, 0]])
        y = np.stack([seq.throttle, seq.delta[:, 1]])
        return x, y
    if mode == "raw_theta_u_psi":
        return np.stack([seq.theta, seq.throttle, seq.steer]), None
    raise ConfigurationError(f"unknown input mode {mode!r}")


def positional_embedding(length: int, dim: int) -> torch.Tensor:
    """Deterministic sinusoidal position matrix of shape (length, dim).

    Entry (p, 2i) is sin(p / 10000^(2i/dim)) and (p, 2i+1) the matching cos.
    """
    if length < 1:
        raise ConfigurationError(f"positional embedding needs length >= 1, got {length}")
    if dim < 2 or dim % 2 != 0:
        raise ConfigurationError(f"positional embedding needs an even dim >= 2, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i2 / dim)
    out = np.empty((length, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return torch.from_numpy(out)


class TokenEmbedding(nn.Module):
    """1-D convolution over time mapping one scalar stream to ``dim`` channels."""

    def __init__(self, dim: int, kernel_width: int = 3):
        super().__init__()
        if kernel_width < 1 or kernel_width % 2 == 0:
            raise ConfigurationError(f"kernel width must be odd and >= 1, got {kernel_width}")
        self.kernel_width = kernel_width
        self.conv = nn.Conv1d(1, dim, kernel_width, padding=kernel_width // 2, dtype=torch.float64)

    def forward(self, stream: torch.Tensor) -> torch.Tensor:
        # (..., L) -> (..., L, dim); time length preserved by symmetric zero padding
        if stream.shape[-1] < self.kernel_width:
            raise ConfigurationError(
                f"stream length {stream.shape[-1]} shorter than kernel width {self.kernel_width}")
        lead = stream.shape[:-1]
        x = stream.reshape(-1, 1, stream.shape[-1])
        y = self.conv(x).transpose(1, 2)
        return y.reshape(*lead, y.shape[-2], y.shape[-1])


class StreamEmbedder(nn.Module):
    """Position + token embedding for a fixed-size group of scalar streams."""

    def __init__(self, n_streams: int, dim: int, kernel_width: int = 3):
        super().__init__()
        self.n_streams = n_streams
        self.dim = dim
        self.tokens = nn.ModuleList(TokenEmbedding(dim, kernel_width) for _ in range(n_streams))

    def forward(self, streams: torch.Tensor) -> torch.Tensor:
        # (B, S, L) -> (B, S, L, D)
        if streams.shape[-2] != self.n_streams:
            raise ConfigurationError(
                f"expected {self.n_streams} streams, got {streams.shape[-2]}")
        pos = positional_embedding(streams.shape[-1], self.dim)
        out = [self.tokens[i](streams[..., i, :]) + pos for i in range(self.n_streams)]
        return torch.stack(out, dim=-3)


def _encoder_stack(dim: int, heads: int, depth: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=dim, nhead=heads, dim_feedforward=2 * dim,
        dropout=0.0, activation="gelu", batch_first=True, dtype=torch.float64)
    return nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)


class TemporalBranch(nn.Module):
    """Full temporal branch: embed both stream groups, self-attend over time
    per stream, concatenate the encoded streams channel-wise per step, and map
    them to ``out_dim`` channels.

    ``n_streams_y = 0`` disables the vertical group (reduced-input variants).
    """

    def __init__(self, n_streams_x: int = 3, n_streams_y: int = 3, embed_dim: int = 32,
                 out_dim: int = 64, heads: int = 4, depth: int = 1, kernel_width: int = 3):
        super().__init__()
        if embed_dim % heads != 0:
            raise ConfigurationError(f"embed dim {embed_dim} not divisible by {heads} heads")
        self.embed_dim = embed_dim
        self.out_dim = out_dim
        self.embed_x = StreamEmbedder(n_streams_x, embed_dim, kernel_width)
        self.encoder_x = _encoder_stack(embed_dim, heads, depth)
        if n_streams_y > 0:
            self.embed_y = StreamEmbedder(n_streams_y, embed_dim, kernel_width)
            self.encoder_y = _encoder_stack(embed_dim, heads, depth)
        else:
            self.embed_y = None
            self.encoder_y = None
        fused_in = (n_streams_x + n_streams_y) * embed_dim
        self.fuse = nn.Sequential(
            nn.Linear(fused_in, out_dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(out_dim, out_dim, dtype=torch.float64),
        )

    def _run_encoder(self, encoder: nn.TransformerEncoder, tokens: torch.Tensor) -> torch.Tensor:
        # (B, S, L, D): streams attend over time independently
        b, s, length, dim = tokens.shape
        flat = tokens.reshape(b * s, length, dim)
        enc = encoder(flat)
        return enc.reshape(b, s, length, dim)

    def encode_tokens(self, tokens_x: torch.Tensor, tokens_y: torch.Tensor | None) -> torch.Tensor:
        """(B, Sx, L, D) [+ (B, Sy, L, D)] -> (B, L, out_dim)."""
        enc = self._run_encoder(self.encoder_x, tokens_x)
        parts = [enc]
        if tokens_y is not None:
            if self.encoder_y is None:
                raise ConfigurationError("vertical stream group is disabled in this branch")
            if tokens_y.shape[-2:] != tokens_x.shape[-2:]:
                raise ConfigurationError(
                    f"token blocks disagree on (L, D): {tuple(tokens_x.shape[-2:])} "
                    f"vs {tuple(tokens_y.shape[-2:])}")
            parts.append(self._run_encoder(self.encoder_y, tokens_y))
        elif self.encoder_y is not None:
            raise ConfigurationError("vertical token block is required by this branch")
        cat = torch.cat(parts, dim=1)                      # (B, S_total, L, D)
        b, s, length, dim = cat.shape
        per_step = cat.permute(0, 2, 1, 3).reshape(b, length, s * dim)
        return self.fuse(per_step)

    def forward(self, streams_x: torch.Tensor, streams_y: torch.Tensor | None) -> torch.Tensor:
        tokens_x = self.embed_x(streams_x)
        tokens_y = self.embed_y(streams_y) if streams_y is not None and self.embed_y is not None else None
        return self.encode_tokens(tokens_x, tokens_y)


def embed(streams: np.ndarray, embedder: StreamEmbedder, orientation: str) -> TokenBlock:
    """Embed one (3, L) stream group into a :class:`TokenBlock`."""
    arr = torch.tensor(np.asarray(streams, dtype=np.float64), dtype=torch.float64)
    if arr.ndim != 2 or arr.shape[0] != 3:
        raise ConfigurationError(f"expected (3, L) streams, got {tuple(arr.shape)}")
    out = embedder(arr.unsqueeze(0)).squeeze(0)
    return TokenBlock(streams=out, orientation=orientation)


def encode(t_x: TokenBlock, t_y: TokenBlock, branch: TemporalBranch) -> FeatureBlock:
    """Encode a horizontal and a vertical token block into time-series features."""
    if t_x.streams.shape != t_y.streams.shape:
        raise ConfigurationError(
            f"token blocks disagree on shape: {tuple(t_x.streams.shape)} vs {tuple(t_y.streams.shape)}")
    out = branch.encode_tokens(t_x.streams.unsqueeze(0), t_y.streams.unsqueeze(0)).squeeze(0)
    return FeatureBlock(data=out, role=TIME_SERIES)
