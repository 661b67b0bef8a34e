"""Desk-scale driving world: kinematic bicycle vehicle, procedural routes with
static obstacles and timed signals, a pure-pursuit expert with actuation noise,
sensor rasterization, control smoothing, and dataset emission.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .domain import (
    INFRACTION_COLLISION,
    INFRACTION_RED_SIGNAL,
    INFRACTION_ROUTE_DEVIATION,
    EgoStateSequence,
    EpisodeLog,
    InfractionEvent,
    LogStep,
    RouteSpec,
    Trajectory,
    ValidationError,
    decode_raster,
    ego_frame_transform,
    encode_raster,
    read_records,
    write_records,
)
from .perception import ObservationFrame

DATASET_META_FILE = "meta.jsonl"
DATASET_SHARD_PATTERN = "shard-{:03d}.jsonl"
DATASET_SHARD_SIZE = 512


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.theta, self.v)
        if not all(math.isfinite(float(u)) for u in vals):
            raise ValidationError("vehicle state contains a non-finite value")
        if self.v < 0:
            raise ValidationError(f"speed {self.v} is negative")

    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Obstacle:
    x: float
    y: float
    radius: float

    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class TrafficSignal:
    x: float
    y: float
    radius: float = 2.2
    period: float = 12.0
    red_fraction: float = 0.4
    phase: float = 0.0

    def is_red(self, t: float) -> bool:
        return (t / self.period + self.phase) % 1.0 < self.red_fraction

    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class WorldConfig:
    """Physics, sensor geometry, and scenario contents of the world."""

    wheelbase: float = 2.5
    dt: float = 0.1
    max_speed: float = 10.0
    max_steer_angle: float = 0.6
    accel_max: float = 3.0
    brake_max: float = 6.0
    speed_base: float = 6.0
    obstacles: tuple[Obstacle, ...] = ()
    signals: tuple[TrafficSignal, ...] = ()
    camera_hw: tuple[int, int] = (16, 32)
    bev_hw: tuple[int, int] = (32, 32)
    camera_fov: float = 1.5
    camera_range: float = 24.0
    bev_range: float = 16.0
    noise_steer: float = 0.03
    noise_throttle: float = 0.04
    vehicle_radius: float = 1.0
    deviation_threshold: float = 5.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if self.wheelbase <= 0:
            raise ValidationError(f"wheelbase must be positive, got {self.wheelbase}")

    @classmethod
    def from_config(cls, cfg: dict) -> "WorldConfig":
        g = cfg.get
        return cls(
            wheelbase=float(g("world.wheelbase", 2.5)),
            dt=float(g("world.dt", 0.1)),
            max_speed=float(g("world.max_speed", 10.0)),
            max_steer_angle=float(g("world.max_steer_angle", 0.6)),
            accel_max=float(g("world.accel_max", 3.0)),
            brake_max=float(g("world.brake_max", 6.0)),
            speed_base=float(g("world.speed_base", 6.0)),
            camera_hw=(int(g("model.camera_h", 16)), int(g("model.camera_w", 32))),
            bev_hw=(int(g("model.bev_h", 32)), int(g("model.bev_w", 32))),
            camera_fov=float(g("world.camera_fov", 1.5)),
            camera_range=float(g("world.camera_range", 24.0)),
            bev_range=float(g("world.bev_range", 16.0)),
            noise_steer=float(g("world.noise_steer", 0.03)),
            noise_throttle=float(g("world.noise_throttle", 0.04)),
            vehicle_radius=float(g("world.vehicle_radius", 1.0)),
            deviation_threshold=float(g("world.deviation_threshold", 5.0)),
        )


def step(s: VehicleState, steer: float, throttle: float, brake: float,
         cfg: WorldConfig) -> VehicleState:
    """One explicit-Euler update of the front-steer kinematic bicycle."""
    accel = cfg.accel_max * throttle - cfg.brake_max * brake
    v_next = min(max(s.v + accel * cfg.dt, 0.0), cfg.max_speed)
    delta = steer * cfg.max_steer_angle
    theta_next = s.theta + (s.v / cfg.wheelbase) * math.tan(delta) * cfg.dt
    x_next = s.x + s.v * math.cos(s.theta) * cfg.dt
    y_next = s.y + s.v * math.sin(s.theta) * cfg.dt
    return VehicleState(x=x_next, y=y_next, theta=theta_next, v=v_next)


# ---------------------------------------------------------------------------
# procedural scenarios
# ---------------------------------------------------------------------------

# max heading turn (rad) between consecutive route segments, per difficulty
TURN_CAPS = (0.0, 0.25, 0.45, 0.65)


def turn_cap(difficulty: int) -> float:
    return TURN_CAPS[min(max(int(difficulty), 0), len(TURN_CAPS) - 1)]


def _rng(seed) -> np.random.Generator:
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def generate_route(seed, difficulty: int, base: WorldConfig | None = None) -> RouteSpec:
    """Seeded pseudo-random route polyline; difficulty scales turn sharpness."""
    route, _ = generate_scenario(seed, difficulty, base or WorldConfig())
    return route


def generate_scenario(seed, difficulty: int, base: WorldConfig) -> tuple[RouteSpec, WorldConfig]:
    """Route plus a world populated with difficulty-scaled obstacles and signals."""
    rng = _rng(seed)
    difficulty = int(difficulty)
    cap = turn_cap(difficulty)
    n_segments = 4 + min(difficulty, 2)
    heading0 = rng.uniform(-math.pi, math.pi)
    heading = heading0
    pts = [np.zeros(2)]
    turns = []
    for i in range(n_segments):
        if i > 0 and cap > 0:
            turn = rng.uniform(-cap, cap)
            # keep routes heading outward so they never loop onto themselves
            drift = max(-1.3, min(1.3, (heading - heading0) + turn)) - (heading - heading0)
            heading += drift
            turns.append(abs(drift))
        else:
            turns.append(0.0)
        length = rng.uniform(22.0, 38.0)
        pts.append(pts[-1] + length * np.array([math.cos(heading), math.sin(heading)]))
    targets = np.stack(pts)
    limits = []
    for i in range(n_segments):
        ahead = turns[i + 1] if i + 1 < n_segments else 0.0
        limits.append(max(2.5, base.speed_base - 3.0 * ahead / max(cap, 1e-9) * (cap > 0)))
    route = RouteSpec.from_targets(targets, limits)

    obstacles = []
    n_obs = 0 if difficulty == 0 else int(difficulty * rng.integers(1, 3))
    for _ in range(n_obs):
        s = rng.uniform(15.0, max(route.total_length - 10.0, 16.0))
        side = rng.choice([-1.0, 1.0])
        offset = rng.uniform(3.2, 5.0)
        p = route.point_at(s)
        i = min(int(np.searchsorted(route._cum, s, side="right")) - 1, len(route._seg_len) - 1)
        d = route.targets[i + 1] - route.targets[i]
        normal = np.array([-d[1], d[0]]) / np.linalg.norm(d)
        c = p + side * offset * normal
        obstacles.append(Obstacle(x=float(c[0]), y=float(c[1]), radius=float(rng.uniform(0.8, 1.4))))

    signals = []
    n_sig = max(0, difficulty - 1)
    for _ in range(n_sig):
        s = rng.uniform(0.35, 0.75) * route.total_length
        p = route.point_at(s)
        signals.append(TrafficSignal(
            x=float(p[0]), y=float(p[1]), radius=2.2,
            period=float(rng.uniform(10.0, 16.0)),
            red_fraction=float(rng.uniform(0.3, 0.45)),
            phase=float(rng.uniform(0.0, 1.0))))

    world = replace(base, obstacles=tuple(obstacles), signals=tuple(signals))
    return route, world


def active_target(route: RouteSpec, progress: float) -> np.ndarray:
    """Next route vertex ahead of the given arc-length progress."""
    cum = route._cum
    idx = int(np.searchsorted(cum, progress + 0.5, side="right"))
    idx = min(max(idx, 1), route.targets.shape[0] - 1)
    return route.targets[idx]


def route_heading(route: RouteSpec, s: float) -> float:
    s = min(max(s, 0.0), route.total_length)
    i = int(np.searchsorted(route._cum, s, side="right") - 1)
    i = min(max(i, 0), len(route._seg_len) - 1)
    d = route.targets[i + 1] - route.targets[i]
    return math.atan2(d[1], d[0])


# ---------------------------------------------------------------------------
# controllers and the rollout engine
# ---------------------------------------------------------------------------

def pure_pursuit_steer(aim_ego: np.ndarray, cfg: WorldConfig) -> float:
    """Normalized steer command toward an ego-frame aim point."""
    dist = float(np.linalg.norm(aim_ego))
    if dist < 1e-9:
        return 0.0
    alpha = math.atan2(aim_ego[1], aim_ego[0])
    curvature = 2.0 * math.sin(alpha) / dist
    delta = math.atan(cfg.wheelbase * curvature)
    return min(max(delta / cfg.max_steer_angle, -1.0), 1.0)


def speed_control(v: float, v_target: float, kp: float = 0.9) -> tuple[float, float]:
    """Proportional throttle/brake split toward a target speed."""
    err = v_target - v
    if err >= 0:
        return min(kp * err, 1.0), 0.0
    return 0.0, min(-kp * err, 1.0)


class ExpertPolicy:
    """Pure-pursuit steering plus proportional speed control with optional
    seeded actuation noise."""

    def __init__(self, route: RouteSpec, cfg: WorldConfig, seed=0, noise: bool = True):
        self.route = route
        self.cfg = cfg
        self.noise = noise
        self.rng = _rng(seed)
        self._signal_arcs = [route.project(sig.center())[0] for sig in cfg.signals]

    def reset(self):
        pass

    def target_speed(self, state: VehicleState, t: float, progress: float) -> float:
        cfg, route = self.cfg, self.route
        v_target = route.limit_at(progress)
        # slow for upcoming curvature
        bend = abs(_wrap_angle(route_heading(route, progress + 6.0) - route_heading(route, progress)))
        v_target = min(v_target, max(2.2, cfg.speed_base * (1.0 - 0.75 * bend / 1.5708)))
        # stop in front of red signals
        for sig, s_sig in zip(cfg.signals, self._signal_arcs):
            gap = s_sig - progress - sig.radius - 1.0
            if -sig.radius <= gap <= 25.0 and sig.is_red(t):
                v_target = min(v_target, math.sqrt(2.0 * 0.7 * cfg.brake_max * max(gap, 0.0)))
        return v_target

    def act(self, state: VehicleState, t: float, progress: float) -> tuple[float, float, float]:
        cfg, route = self.cfg, self.route
        lookahead = min(max(1.8 + 0.7 * state.v, 2.5), 9.0)
        aim_world = route.point_at(min(progress + lookahead, route.total_length))
        aim_ego = ego_frame_transform(aim_world, (state.x, state.y, state.theta))
        steer = pure_pursuit_steer(aim_ego, cfg)
        throttle, brake = speed_control(state.v, self.target_speed(state, t, progress))
        if self.noise:
            steer = min(max(steer + self.rng.normal(0.0, cfg.noise_steer), -1.0), 1.0)
            throttle = min(max(throttle + self.rng.normal(0.0, cfg.noise_throttle), 0.0), 1.0)
        return steer, throttle, brake


class BangBangPolicy:
    """Baseline with pure-pursuit steering but all-or-nothing longitudinal
    control; produces the oscillating speed profile typical of naive agents."""

    def __init__(self, route: RouteSpec, cfg: WorldConfig, band: float = 0.5):
        self.expert = ExpertPolicy(route, cfg, seed=0, noise=False)
        self.band = band

    def reset(self):
        pass

    def act(self, state: VehicleState, t: float, progress: float) -> tuple[float, float, float]:
        steer, _, _ = self.expert.act(state, t, progress)
        v_target = self.expert.target_speed(state, t, progress)
        if state.v < v_target - self.band:
            return steer, 1.0, 0.0
        return steer, 0.0, 1.0


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def initial_state(route: RouteSpec) -> VehicleState:
    return VehicleState(x=float(route.targets[0, 0]), y=float(route.targets[0, 1]),
                        theta=route_heading(route, 0.0), v=0.0)


def default_timeout_steps(route: RouteSpec, cfg: WorldConfig) -> int:
    return int((3.0 * route.total_length / 2.0 + 90.0) / cfg.dt)


def run_episode(policy, route: RouteSpec, cfg: WorldConfig,
                timeout_steps: int | None = None) -> EpisodeLog:
    """Closed-loop rollout of a policy until the route end or a timeout.

    The policy sees ``(state, t, progress)`` and returns (steer, throttle,
    brake). Infractions are detected with entry debouncing.
    """
    if timeout_steps is None:
        timeout_steps = default_timeout_steps(route, cfg)
    policy.reset()
    state = initial_state(route)
    progress = 0.0
    steps: list[LogStep] = []
    in_collision: set[int] = set()
    in_signal: set[int] = set()
    deviating = False
    complete = False
    for i in range(timeout_steps):
        t = i * cfg.dt
        s_proj, lateral = route.project(state.pos())
        progress = max(progress, s_proj)
        events = []
        for k, obs in enumerate(cfg.obstacles):
            if np.linalg.norm(state.pos() - obs.center()) <= obs.radius + cfg.vehicle_radius:
                if k not in in_collision:
                    events.append(InfractionEvent(INFRACTION_COLLISION, f"obstacle_{k}"))
                    in_collision.add(k)
            else:
                in_collision.discard(k)
        for k, sig in enumerate(cfg.signals):
            inside = np.linalg.norm(state.pos() - sig.center()) <= sig.radius
            if inside and sig.is_red(t) and state.v > 0.3:
                if k not in in_signal:
                    events.append(InfractionEvent(INFRACTION_RED_SIGNAL, f"signal_{k}"))
                    in_signal.add(k)
            elif not inside:
                in_signal.discard(k)
        if lateral > cfg.deviation_threshold:
            if not deviating:
                events.append(InfractionEvent(INFRACTION_ROUTE_DEVIATION))
                deviating = True
        elif lateral < 0.5 * cfg.deviation_threshold:
            deviating = False

        steer, throttle, brake = policy.act(state, t, progress)
        steps.append(LogStep(t=t, x=state.x, y=state.y, theta=state.theta,
                             speed=state.v, steer=float(steer), throttle=float(throttle),
                             infractions=tuple(events)))
        if not np.isfinite([state.x, state.y, state.theta, state.v]).all():
            break
        if progress >= route.total_length - 1e-9:
            complete = True
            break
        state = step(state, steer, throttle, brake, cfg)
    return EpisodeLog(steps=tuple(steps), route=route,
                      completed_length=min(progress, route.total_length), complete=complete)


def expert_drive(route: RouteSpec, cfg: WorldConfig, seed=0, noise: bool = True,
                 timeout_steps: int | None = None) -> EpisodeLog:
    """Scripted expert rollout over a route."""
    return run_episode(ExpertPolicy(route, cfg, seed=seed, noise=noise), route, cfg,
                       timeout_steps=timeout_steps)


# ---------------------------------------------------------------------------
# control smoothing
# ---------------------------------------------------------------------------

def _window_slice(n: int, i: int, half: int) -> slice:
    return slice(max(0, i - half), min(n, i + half + 1))


def _despike(arr: np.ndarray, half: int) -> np.ndarray:
    out = arr.copy()
    n = len(arr)
    for i in range(n):
        win = arr[_window_slice(n, i, half)]
        m = float(win.mean())
        sd = float(win.std())
        if abs(arr[i] - m) > 3.0 * sd:
            out[i] = m
    return out


def _moving_average(arr: np.ndarray, half: int) -> np.ndarray:
    n = len(arr)
    return np.array([arr[_window_slice(n, i, half)].mean() for i in range(n)])


def smooth_controls(log: EpisodeLog, window: int) -> EpisodeLog:
    """Centered moving average over steer and throttle with 3-sigma outlier
    replacement; poses and timestamps untouched."""
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"window must be odd and >= 1, got {window}")
    if window > len(log.steps):
        raise ValidationError(f"window {window} larger than log length {len(log.steps)}")
    if window == 1:
        return log
    half = window // 2
    steer = np.array([s.steer for s in log.steps])
    throttle = np.array([s.throttle for s in log.steps])
    steer = _moving_average(_despike(steer, half), half)
    throttle = _moving_average(_despike(throttle, half), half)
    new_steps = tuple(
        LogStep(t=s.t, x=s.x, y=s.y, theta=s.theta, speed=s.speed,
                steer=float(steer[i]), throttle=float(throttle[i]),
                infractions=s.infractions)
        for i, s in enumerate(log.steps))
    return EpisodeLog(steps=new_steps, route=log.route,
                      completed_length=log.completed_length, complete=log.complete)


# ---------------------------------------------------------------------------
# sensor rendering
# ---------------------------------------------------------------------------

def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0) / 255.0


def _visible_discs(cfg: WorldConfig, t: float) -> list[tuple[np.ndarray, float, float]]:
    """(center, radius, intensity) of camera-visible discs; red signals render
    as barriers, green signals are transparent to the camera."""
    discs = [(o.center(), o.radius, 1.0) for o in cfg.obstacles]
    for sig in cfg.signals:
        if sig.is_red(t):
            discs.append((sig.center(), sig.radius, 1.0))
    return discs


def render_observation(state: VehicleState, cfg: WorldConfig, t: float = 0.0,
                       route: RouteSpec | None = None) -> ObservationFrame:
    """Depth-sweep camera raster and top-down BEV occupancy around the ego.

    Values are quantized to multiples of 1/255 so rasters survive the record
    encoding bit-exactly.
    """
    h_c, w_c = cfg.camera_hw
    camera = np.zeros((h_c, w_c))
    origin = state.pos()
    discs = _visible_discs(cfg, t)
    if discs:
        angles = state.theta + cfg.camera_fov / 2.0 - cfg.camera_fov * np.arange(w_c) / max(w_c - 1, 1)
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)      # (W, 2)
        centers = np.stack([d[0] for d in discs])                      # (N, 2)
        radii = np.array([d[1] for d in discs])
        rel = centers - origin
        proj = rel @ dirs.T                                            # (N, W)
        closest2 = (rel ** 2).sum(axis=1)[:, None] - proj ** 2
        under = radii[:, None] ** 2 - closest2
        hit = proj - np.sqrt(np.maximum(under, 0.0))
        valid = (proj > 0) & (under >= 0) & (hit > 0)
        hit = np.where(valid, hit, cfg.camera_range)
        depth = np.minimum(hit.min(axis=0), cfg.camera_range)          # (W,)
        closeness = 1.0 - depth / cfg.camera_range
        heights = np.rint(closeness * h_c).astype(int)
        row_idx = np.arange(h_c)[:, None]
        camera = np.where(row_idx < heights[None, :], closeness[None, :], 0.0)

    h_b, w_b = cfg.bev_hw
    bev = np.zeros((h_b, w_b))
    pose = (state.x, state.y, state.theta)
    half_extent = cfg.bev_range
    cell_h = 2.0 * half_extent / h_b
    cell_w = 2.0 * half_extent / w_b
    cx = half_extent - (np.arange(h_b) + 0.5) * cell_h                 # ego x per row
    cy = half_extent - (np.arange(w_b) + 0.5) * cell_w                 # ego y per col

    def paint_disc(center_world, radius: float, value: float):
        # cell is painted iff the disc intersects the cell rectangle
        ce = ego_frame_transform(center_world, pose)
        dx = np.maximum(np.abs(cx[:, None] - ce[0]) - cell_h / 2.0, 0.0)
        dy = np.maximum(np.abs(cy[None, :] - ce[1]) - cell_w / 2.0, 0.0)
        bev[dx * dx + dy * dy <= radius * radius] = value

    if route is not None:
        # distance from every cell center to the route polyline, per segment
        a = ego_frame_transform(route.targets[:-1], pose)              # (S, 2)
        b = ego_frame_transform(route.targets[1:], pose)
        d = b - a
        seg_len2 = (d ** 2).sum(axis=1)
        px = np.broadcast_to(cx[:, None], (h_b, w_b)).ravel()
        py = np.broadcast_to(cy[None, :], (h_b, w_b)).ravel()
        rel_x = px[:, None] - a[None, :, 0]
        rel_y = py[:, None] - a[None, :, 1]
        frac = (rel_x * d[None, :, 0] + rel_y * d[None, :, 1]) / seg_len2[None, :]
        frac = np.clip(frac, 0.0, 1.0)
        dist2 = ((rel_x - frac * d[None, :, 0]) ** 2
                 + (rel_y - frac * d[None, :, 1]) ** 2).min(axis=1)
        line_half = 0.75 * max(cell_h, cell_w)
        bev.ravel()[dist2 <= line_half * line_half] = 0.5
    for sig in cfg.signals:
        # red signals use a distinct occupancy value so they are separable
        # from static obstacles in the top-down view
        paint_disc(sig.center(), sig.radius, 0.9 if sig.is_red(t) else 0.25)
    for obs in cfg.obstacles:
        paint_disc(obs.center(), obs.radius, 1.0)

    return ObservationFrame(camera=_quantize(camera), bev=_quantize(bev), t=t)


# ---------------------------------------------------------------------------
# dataset emission
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One training sample: sensor window, ego-state window, ground-truth
    future trajectory (ego frame, first point at the origin), target point."""

    frames: tuple[ObservationFrame, ...]
    ego: EgoStateSequence
    gt: Trajectory
    target: np.ndarray
    route_index: int = 0
    start: int = 0

    def to_record(self) -> dict:
        ego = self.ego.to_record()
        gt = self.gt.numpy()
        return {
            "v": 1, "kind": "sample", "route": self.route_index, "start": self.start,
            "theta": ego["theta"], "steer": ego["steer"], "throttle": ego["throttle"],
            "delta_x": ego["delta_x"], "delta_y": ego["delta_y"],
            "timestamps": ego["timestamps"],
            "gt_x": gt[:, 0].tolist(), "gt_y": gt[:, 1].tolist(),
            "target_x": float(self.target[0]), "target_y": float(self.target[1]),
            "frame_t": [f.t for f in self.frames],
            "camera": [encode_raster(f.camera) for f in self.frames],
            "bev": [encode_raster(f.bev) for f in self.frames],
        }

    @classmethod
    def from_record(cls, rec: dict, camera_hw: tuple[int, int],
                    bev_hw: tuple[int, int]) -> "Sample":
        frames = tuple(
            ObservationFrame(camera=decode_raster(cam, camera_hw),
                             bev=decode_raster(occ, bev_hw), t=t)
            for cam, occ, t in zip(rec["camera"], rec["bev"], rec["frame_t"]))
        ego = EgoStateSequence(
            theta=rec["theta"], steer=rec["steer"], throttle=rec["throttle"],
            delta=np.stack([rec["delta_x"], rec["delta_y"]], axis=1),
            timestamps=rec["timestamps"])
        gt = Trajectory(np.stack([rec["gt_x"], rec["gt_y"]], axis=1))
        return cls(frames=frames, ego=ego, gt=gt,
                   target=np.array([rec["target_x"], rec["target_y"]]),
                   route_index=int(rec["route"]), start=int(rec["start"]))


def _unit_toward(target: np.ndarray, pos: np.ndarray) -> np.ndarray:
    d = target - pos
    n = float(np.linalg.norm(d))
    return d / n if n > 1e-12 else np.zeros(2)


def samples_from_log(log: EpisodeLog, cfg: WorldConfig, window_len: int, waypoints: int,
                     stride: int, route_index: int = 0) -> list[Sample]:
    """Cut fixed-stride training windows out of one (smoothed) episode log."""
    n = len(log.steps)
    if n < window_len + waypoints:
        return []
    route = log.route
    poses = log.poses()
    # arc-length progress per step, monotone, for target-point selection
    progress = np.zeros(n)
    running = 0.0
    for i in range(n):
        running = max(running, route.project(poses[i, :2])[0])
        progress[i] = running
    frames = [render_observation(
        VehicleState(x=s.x, y=s.y, theta=s.theta, v=s.speed), cfg, t=s.t, route=route)
        for s in log.steps]
    samples = []
    for start in range(0, n - window_len - waypoints + 1, stride):
        cur = start + window_len - 1
        window = log.steps[start:cur + 1]
        deltas = np.stack([
            _unit_toward(active_target(route, progress[start + j]), poses[start + j, :2])
            for j in range(window_len)])
        # control channels lag by one step: entry j carries the command applied
        # at step j-1, matching what a live controller can observe
        steer = [log.steps[start + j - 1].steer if start + j > 0 else 0.0
                 for j in range(window_len)]
        throttle = [log.steps[start + j - 1].throttle if start + j > 0 else 0.0
                    for j in range(window_len)]
        ego = EgoStateSequence(
            theta=np.array([s.theta for s in window]),
            steer=np.clip(steer, -1.0, 1.0),
            throttle=np.clip(throttle, 0.0, 1.0),
            delta=deltas,
            timestamps=np.array([s.t for s in window]))
        future = poses[cur:cur + waypoints, :2]
        gt = Trajectory(ego_frame_transform(future, tuple(poses[cur])))
        target_world = active_target(route, progress[cur])
        target = ego_frame_transform(target_world, tuple(poses[cur]))
        samples.append(Sample(frames=tuple(frames[start:cur + 1]), ego=ego, gt=gt,
                              target=target, route_index=route_index, start=start))
    return samples


def parse_difficulty_mix(mix: str | Sequence[int]) -> tuple[int, ...]:
    if isinstance(mix, str):
        return tuple(int(p) for p in mix.split(",") if p.strip() != "")
    return tuple(int(v) for v in mix)


def make_dataset(n_routes: int, seed: int, cfg: WorldConfig, out_dir, *,
                 window_len: int = 8, waypoints: int = 8, stride: int = 4,
                 difficulty_mix: Sequence[int] = (0, 1, 1, 2), smooth_window: int = 5,
                 config_snapshot: dict | None = None) -> dict:
    """Generate scenarios, roll out the noisy expert, smooth the control
    channels, window the logs into samples, and write the shard files."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    difficulty_mix = parse_difficulty_mix(difficulty_mix)
    all_samples: list[Sample] = []
    for i in range(n_routes):
        difficulty = difficulty_mix[i % len(difficulty_mix)]
        route, world = generate_scenario([seed, i], difficulty, cfg)
        log = expert_drive(route, world, seed=[seed, i, 1])
        log = smooth_controls(log, smooth_window)
        all_samples.extend(samples_from_log(log, world, window_len, waypoints,
                                            stride, route_index=i))
    shards = []
    for k in range(0, max(len(all_samples), 1), DATASET_SHARD_SIZE):
        shards.append(all_samples[k:k + DATASET_SHARD_SIZE])
    meta = {
        "v": 1, "kind": "dataset_meta", "samples": len(all_samples),
        "shards": len(shards), "routes": n_routes, "seed": seed,
        "window_len": window_len, "waypoints": waypoints, "stride": stride,
        "smooth_window": smooth_window,
        "difficulty_mix": list(difficulty_mix),
        "camera_h": cfg.camera_hw[0], "camera_w": cfg.camera_hw[1],
        "bev_h": cfg.bev_hw[0], "bev_w": cfg.bev_hw[1],
    }
    if config_snapshot:
        for key in sorted(config_snapshot):
            meta[f"config.{key}"] = config_snapshot[key]
    write_records(os.path.join(out_dir, DATASET_META_FILE), [meta])
    for k, shard in enumerate(shards):
        write_records(os.path.join(out_dir, DATASET_SHARD_PATTERN.format(k)),
                      [s.to_record() for s in shard])
    return meta


def load_dataset(dataset_dir) -> tuple[list[Sample], dict]:
    import os

    meta_recs = read_records(os.path.join(dataset_dir, DATASET_META_FILE))
    if not meta_recs or meta_recs[0].get("kind") != "dataset_meta":
        raise ValidationError(f"{dataset_dir} does not contain a dataset meta record")
    meta = meta_recs[0]
    camera_hw = (meta["camera_h"], meta["camera_w"])
    bev_hw = (meta["bev_h"], meta["bev_w"])
    samples = []
    for k in range(meta["shards"]):
        for rec in read_records(os.path.join(dataset_dir, DATASET_SHARD_PATTERN.format(k))):
            samples.append(Sample.from_record(rec, camera_hw, bev_hw))
    if len(samples) != meta["samples"]:
        raise ValidationError(
            f"dataset has {len(samples)} samples, meta promises {meta['samples']}")
    return samples, meta
