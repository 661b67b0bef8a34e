"""Shared domain types, the planar coordinate conventions, and the line-record
serialization format used by dataset, episode, and report files.

Ego frame convention: x forward, y left, right-handed; headings in radians,
world frame. All value objects are immutable after construction.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

RECORD_VERSION = 1

GEOMETRIC = "geometric"
TIME_SERIES = "time_series"
FUSED = "fused"
FEATURE_ROLES = (GEOMETRIC, TIME_SERIES, FUSED)


class ValidationError(ValueError):
    """A value violates a domain invariant."""


class ConfigurationError(ValueError):
    """A configuration value is inconsistent or unsupported."""


def _readonly(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        idx = int(np.flatnonzero(~np.isfinite(np.asarray(arr).ravel()))[0])
        raise ValidationError(f"{name} contains a non-finite value (flat index {idx})")


# ---------------------------------------------------------------------------
# coordinate transforms
# ---------------------------------------------------------------------------

def ego_frame_transform(world_points, pose):
    """Map world-frame point(s) into the ego frame at ``pose = (x, y, heading)``.

    Rigid transform: translate by -(x, y), then rotate by -heading.
    Accepts a single point ``(2,)`` or an array ``(N, 2)``; returns the same shape.
    """
    x, y, heading = (float(v) for v in pose)
    if not all(math.isfinite(v) for v in (x, y, heading)):
        raise ValidationError("pose contains a non-finite value")
    pts = np.asarray(world_points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 2:
        raise ValidationError(f"expected 2-D points, got shape {pts.shape}")
    _check_finite("points", pts)
    c, s = math.cos(heading), math.sin(heading)
    shifted = pts - np.array([x, y])
    # rows of R(-heading)
    out = np.stack([c * shifted[:, 0] + s * shifted[:, 1],
                    -s * shifted[:, 0] + c * shifted[:, 1]], axis=1)
    return out[0] if single else out


def ego_frame_inverse(ego_points, pose):
    """Inverse of :func:`ego_frame_transform`: ego-frame points back to world frame."""
    x, y, heading = (float(v) for v in pose)
    if not all(math.isfinite(v) for v in (x, y, heading)):
        raise ValidationError("pose contains a non-finite value")
    pts = np.asarray(ego_points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    _check_finite("points", pts)
    c, s = math.cos(heading), math.sin(heading)
    out = np.stack([c * pts[:, 0] - s * pts[:, 1] + x,
                    s * pts[:, 0] + c * pts[:, 1] + y], axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# ego state sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EgoStateSequence:
    """Past ego states, oldest first; index L-1 is the most recent step.

    theta: heading per step (rad, world frame); steer in [-1, 1]; throttle in
    [0, 1]; delta: unit (or zero) vector per step from ego toward the current
    target point; timestamps in seconds, strictly increasing.
    """

    theta: np.ndarray
    steer: np.ndarray
    throttle: np.ndarray
    delta: np.ndarray
    timestamps: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, EgoStateSequence):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("theta", "steer", "throttle", "delta", "timestamps"))

    def __post_init__(self):
        for name in ("theta", "steer", "throttle", "timestamps"):
            object.__setattr__(self, name, _readonly(np.atleast_1d(getattr(self, name))))
        object.__setattr__(self, "delta", _readonly(np.atleast_2d(self.delta)))

    @property
    def length(self) -> int:
        return int(self.theta.shape[0])

    def to_record(self) -> dict:
        return {
            "v": RECORD_VERSION,
            "kind": "ego_sequence",
            "theta": self.theta.tolist(),
            "steer": self.steer.tolist(),
            "throttle": self.throttle.tolist(),
            "delta_x": self.delta[:, 0].tolist(),
            "delta_y": self.delta[:, 1].tolist(),
            "timestamps": self.timestamps.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EgoStateSequence":
        return cls(
            theta=rec["theta"],
            steer=rec["steer"],
            throttle=rec["throttle"],
            delta=np.stack([rec["delta_x"], rec["delta_y"]], axis=1),
            timestamps=rec["timestamps"],
        )


def validate_sequence(seq: EgoStateSequence) -> EgoStateSequence:
    """Return ``seq`` unchanged iff every invariant holds, else raise naming the
    offending field and index."""
    L = seq.length
    for name in ("steer", "throttle", "timestamps"):
        arr = getattr(seq, name)
        if arr.shape != (L,):
            raise ValidationError(f"{name} has length {arr.shape[0]}, expected {L}")
    if seq.delta.shape != (L, 2):
        raise ValidationError(f"delta has shape {seq.delta.shape}, expected ({L}, 2)")
    if L < 2 or L % 2 != 0:
        raise ValidationError(f"length parity: L={L}; an even length of at least 2 is required")
    for name in ("theta", "steer", "throttle", "delta", "timestamps"):
        _check_finite(name, getattr(seq, name))
    for i, v in enumerate(seq.steer):
        if not (-1.0 <= v <= 1.0):
            raise ValidationError(f"steer[{i}] = {v} outside [-1, 1]")
    for i, v in enumerate(seq.throttle):
        if not (0.0 <= v <= 1.0):
            raise ValidationError(f"throttle[{i}] = {v} outside [0, 1]")
    norms = np.linalg.norm(seq.delta, axis=1)
    for i, n in enumerate(norms):
        if not (abs(n) <= 1e-6 or abs(n - 1.0) <= 1e-6):
            raise ValidationError(f"delta[{i}] has norm {n}; expected 0 or 1")
    dts = np.diff(seq.timestamps)
    bad = np.flatnonzero(dts <= 0)
    if bad.size:
        i = int(bad[0]) + 1
        raise ValidationError(f"timestamps[{i}] does not increase over timestamps[{i - 1}]")
    return seq


# ---------------------------------------------------------------------------
# trajectories and feature blocks
# ---------------------------------------------------------------------------

def _as_tensor(points) -> torch.Tensor:
    if torch.is_tensor(points):
        return points
    return torch.tensor(np.asarray(points, dtype=np.float64), dtype=torch.float64)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """K ordered 2-D waypoints in the ego frame at the current time.

    ``points`` may be a torch tensor so that predictions stay differentiable.
    """

    points: torch.Tensor

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.numpy(), other.numpy())

    def __post_init__(self):
        pts = _as_tensor(self.points)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError(f"trajectory points have shape {tuple(pts.shape)}, expected (K, 2)")
        k = pts.shape[0]
        if k < 2 or k % 2 != 0:
            raise ValidationError(f"length parity: K={k}; an even count of at least 2 is required")
        if not bool(torch.isfinite(pts).all()):
            raise ValidationError("trajectory points contain a non-finite value")
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return int(self.points.shape[0])

    def numpy(self) -> np.ndarray:
        return self.points.detach().cpu().numpy()

    def to_record(self) -> dict:
        pts = self.numpy()
        return {"v": RECORD_VERSION, "kind": "trajectory",
                "x": pts[:, 0].tolist(), "y": pts[:, 1].tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(np.stack([rec["x"], rec["y"]], axis=1))


@dataclass(frozen=True, eq=False)
class FeatureBlock:
    """Dense feature tensor with (time, channel) axes and a role tag."""

    data: torch.Tensor
    role: str

    def __eq__(self, other):
        if not isinstance(other, FeatureBlock):
            return NotImplemented
        return self.role == other.role and np.array_equal(
            self.data.detach().cpu().numpy(), other.data.detach().cpu().numpy())

    def __post_init__(self):
        data = _as_tensor(self.data)
        if data.ndim != 2:
            raise ValidationError(f"feature block must be 2-D (time, channel), got shape {tuple(data.shape)}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"feature block axes must be positive, got {tuple(data.shape)}")
        if not bool(torch.isfinite(data).all()):
            raise ValidationError("feature block contains a non-finite value")
        if self.role not in FEATURE_ROLES:
            raise ValidationError(f"unknown feature role {self.role!r}")
        object.__setattr__(self, "data", data)

    @property
    def time(self) -> int:
        return int(self.data.shape[0])

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])

    def to_record(self) -> dict:
        return {"v": RECORD_VERSION, "kind": "feature_block", "role": self.role,
                "time": self.time, "channel": self.channels,
                "data": self.data.detach().cpu().numpy().ravel().tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "FeatureBlock":
        data = np.asarray(rec["data"], dtype=np.float64).reshape(rec["time"], rec["channel"])
        return cls(data=data, role=rec["role"])


# ---------------------------------------------------------------------------
# routes
# ---------------------------------------------------------------------------

def polyline_length(points: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


@dataclass(frozen=True, eq=False)
class RouteSpec:
    """Polyline of world-frame target points with a per-segment speed limit."""

    targets: np.ndarray
    speed_limit: np.ndarray
    total_length: float

    def __eq__(self, other):
        if not isinstance(other, RouteSpec):
            return NotImplemented
        return (np.array_equal(self.targets, other.targets)
                and np.array_equal(self.speed_limit, other.speed_limit)
                and self.total_length == other.total_length)

    def __post_init__(self):
        targets = _readonly(np.atleast_2d(self.targets))
        limits = _readonly(np.atleast_1d(self.speed_limit))
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "speed_limit", limits)
        object.__setattr__(self, "total_length", float(self.total_length))
        if targets.ndim != 2 or targets.shape[1] != 2 or targets.shape[0] < 2:
            raise ValidationError(f"route needs at least 2 targets of dim 2, got shape {targets.shape}")
        _check_finite("targets", targets)
        seg = np.diff(targets, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len == 0):
            i = int(np.flatnonzero(seg_len == 0)[0])
            raise ValidationError(f"targets[{i}] and targets[{i + 1}] coincide")
        if limits.shape != (targets.shape[0] - 1,):
            raise ValidationError(
                f"speed_limit has length {limits.shape[0]}, expected {targets.shape[0] - 1}")
        if np.any(limits <= 0):
            raise ValidationError("speed limits must be positive")
        if abs(self.total_length - float(np.sum(seg_len))) > 1e-9:
            raise ValidationError(
                f"total_length {self.total_length} does not match polyline arc length {np.sum(seg_len)}")
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        object.__setattr__(self, "_seg_len", _readonly(seg_len))
        object.__setattr__(self, "_cum", _readonly(cum))

    @classmethod
    def from_targets(cls, targets, speed_limit) -> "RouteSpec":
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        speed_limit = np.atleast_1d(np.asarray(speed_limit, dtype=np.float64))
        if speed_limit.shape == (1,) and targets.shape[0] > 2:
            speed_limit = np.full(targets.shape[0] - 1, speed_limit[0])
        return cls(targets=targets, speed_limit=speed_limit,
                   total_length=polyline_length(targets))

    def project(self, point) -> tuple[float, float]:
        """Project a point onto the polyline.

        Returns ``(arc_length, distance)`` of the nearest polyline point;
        ties resolve to the earliest segment.
        """
        p = np.asarray(point, dtype=np.float64)
        a = self.targets[:-1]
        d = np.diff(self.targets, axis=0)
        t = np.einsum("ij,ij->i", p - a, d) / (self._seg_len ** 2)
        t = np.clip(t, 0.0, 1.0)
        proj = a + t[:, None] * d
        dist2 = np.sum((proj - p) ** 2, axis=1)
        i = int(np.argmin(dist2))
        s = float(self._cum[i] + t[i] * self._seg_len[i])
        return s, float(math.sqrt(dist2[i]))

    def point_at(self, s: float) -> np.ndarray:
        """Point on the polyline at arc length ``s`` (clamped to the ends)."""
        s = min(max(float(s), 0.0), self.total_length)
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        frac = (s - self._cum[i]) / self._seg_len[i]
        return self.targets[i] + frac * (self.targets[i + 1] - self.targets[i])

    def limit_at(self, s: float) -> float:
        """Speed limit of the segment containing arc length ``s``."""
        s = min(max(float(s), 0.0), self.total_length)
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(max(i, 0), len(self._seg_len) - 1)
        return float(self.speed_limit[i])

    def to_record(self) -> dict:
        return {"v": RECORD_VERSION, "kind": "route",
                "x": self.targets[:, 0].tolist(), "y": self.targets[:, 1].tolist(),
                "speed_limit": self.speed_limit.tolist(),
                "total_length": self.total_length}

    @classmethod
    def from_record(cls, rec: dict) -> "RouteSpec":
        return cls(targets=np.stack([rec["x"], rec["y"]], axis=1),
                   speed_limit=rec["speed_limit"], total_length=rec["total_length"])


# ---------------------------------------------------------------------------
# episode logs
# ---------------------------------------------------------------------------

INFRACTION_COLLISION = "collision"
INFRACTION_RED_SIGNAL = "red_signal"
INFRACTION_ROUTE_DEVIATION = "route_deviation"


@dataclass(frozen=True)
class InfractionEvent:
    kind: str
    ident: str = ""

    def encode(self) -> str:
        return f"{self.kind}:{self.ident}" if self.ident else self.kind

    @classmethod
    def decode(cls, s: str) -> "InfractionEvent":
        kind, _, ident = s.partition(":")
        return cls(kind=kind, ident=ident)


@dataclass(frozen=True)
class LogStep:
    t: float
    x: float
    y: float
    theta: float
    speed: float
    steer: float
    throttle: float
    infractions: tuple[InfractionEvent, ...] = ()

    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class EpisodeLog:
    """Per-step record of one closed-loop rollout."""

    steps: tuple[LogStep, ...]
    route: RouteSpec
    completed_length: float
    complete: bool = True

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "completed_length", float(self.completed_length))
        if not self.steps:
            raise ValidationError("episode log has no steps")
        times = np.array([s.t for s in self.steps])
        bad = np.flatnonzero(np.diff(times) <= 0)
        if bad.size:
            i = int(bad[0]) + 1
            raise ValidationError(f"step timestamps not strictly increasing at index {i}")
        for i, s in enumerate(self.steps):
            if s.speed < 0:
                raise ValidationError(f"speed[{i}] = {s.speed} is negative")
        if self.completed_length > self.route.total_length + 1e-9:
            raise ValidationError("completed_length exceeds route length")

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.steps])

    def speeds(self) -> np.ndarray:
        return np.array([s.speed for s in self.steps])

    def poses(self) -> np.ndarray:
        return np.array([[s.x, s.y, s.theta] for s in self.steps])

    def all_infractions(self) -> list[InfractionEvent]:
        out: list[InfractionEvent] = []
        for s in self.steps:
            out.extend(s.infractions)
        return out

    def to_records(self) -> list[dict]:
        head = {"v": RECORD_VERSION, "kind": "episode",
                "complete": self.complete, "completed_length": self.completed_length,
                "route_x": self.route.targets[:, 0].tolist(),
                "route_y": self.route.targets[:, 1].tolist(),
                "route_speed_limit": self.route.speed_limit.tolist(),
                "route_total_length": self.route.total_length}
        out = [head]
        for s in self.steps:
            out.append({"v": RECORD_VERSION, "kind": "step", "t": s.t,
                        "x": s.x, "y": s.y, "theta": s.theta, "speed": s.speed,
                        "steer": s.steer, "throttle": s.throttle,
                        "infractions": [e.encode() for e in s.infractions]})
        return out

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "EpisodeLog":
        head = records[0]
        if head.get("kind") != "episode":
            raise ValidationError("episode records must start with an episode header")
        route = RouteSpec(targets=np.stack([head["route_x"], head["route_y"]], axis=1),
                          speed_limit=head["route_speed_limit"],
                          total_length=head["route_total_length"])
        steps = []
        for rec in records[1:]:
            steps.append(LogStep(
                t=rec["t"], x=rec["x"], y=rec["y"], theta=rec["theta"],
                speed=rec["speed"], steer=rec["steer"], throttle=rec["throttle"],
                infractions=tuple(InfractionEvent.decode(s) for s in rec["infractions"])))
        return cls(steps=tuple(steps), route=route,
                   completed_length=head["completed_length"], complete=head["complete"])


# ---------------------------------------------------------------------------
# line-record serialization
# ---------------------------------------------------------------------------

def format_float(v: float) -> str:
    """17-significant-digit decimal form; round-trips to the identical double."""
    s = format(float(v), ".17g")
    if not any(c in s for c in ".eE"):
        s += ".0"
    return s


def _encode_value(v) -> str:
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        items = v.tolist() if isinstance(v, np.ndarray) else v
        return "[" + ",".join(_encode_value(x) for x in items) + "]"
    raise ValidationError(f"unsupported record value type {type(v).__name__}")


def record_dumps(rec: dict) -> str:
    """Serialize a flat key-value record to one line of text."""
    parts = [f"{json.dumps(k)}:{_encode_value(v)}" for k, v in rec.items()]
    return "{" + ",".join(parts) + "}"


def record_loads(line: str) -> dict:
    return json.loads(line)


def write_records(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_dumps(rec))
            fh.write("\n")


def read_records(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [record_loads(line) for line in fh if line.strip()]


def encode_raster(arr: np.ndarray) -> str:
    """Base64 of a uint8 raster scaled from [0, 1]; values must be multiples of 1/255."""
    q = np.asarray(np.rint(np.asarray(arr) * 255.0), dtype=np.uint8)
    return base64.b64encode(q.tobytes()).decode("ascii")


def decode_raster(s: str, shape: tuple[int, int]) -> np.ndarray:
    q = np.frombuffer(base64.b64decode(s.encode("ascii")), dtype=np.uint8)
    arr = (q.astype(np.float64) / 255.0).reshape(shape)
    arr.setflags(write=False)
    return arr
