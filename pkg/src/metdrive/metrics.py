"""Open-loop trajectory metrics, leaderboard-style closed-loop scores
(route completion, infraction score, driving score), speed-profile smoothness
analysis, and the model rollout harness.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .domain import (
    INFRACTION_COLLISION,
    INFRACTION_RED_SIGNAL,
    INFRACTION_ROUTE_DEVIATION,
    ConfigurationError,
    EpisodeLog,
    RouteSpec,
    Trajectory,
    ValidationError,
    ego_frame_inverse,
    ego_frame_transform,
)
from .ego_temporal import input_streams
from .losses import batch_mean
from .model import DrivingModel, load_checkpoint, samples_to_tensors
from .synthworld import (
    VehicleState,
    WorldConfig,
    active_target,
    pure_pursuit_steer,
    render_observation,
    run_episode,
    speed_control,
)

DEFAULT_PENALTIES = {
    INFRACTION_COLLISION: 0.60,
    INFRACTION_RED_SIGNAL: 0.70,
    INFRACTION_ROUTE_DEVIATION: 0.75,
}


@dataclass(frozen=True)
class PenaltyTable:
    """Multiplicative penalty per infraction type, each in (0, 1]."""

    penalties: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_PENALTIES))

    def __post_init__(self):
        for kind, p in self.penalties.items():
            if not (0.0 < p <= 1.0):
                raise ConfigurationError(f"penalty for {kind!r} must be in (0, 1], got {p}")

    def penalty(self, kind: str) -> float:
        try:
            return self.penalties[kind]
        except KeyError:
            raise ConfigurationError(f"no penalty configured for infraction type {kind!r}") from None

    @classmethod
    def from_config(cls, cfg: dict) -> "PenaltyTable":
        g = cfg.get
        return cls(penalties={
            INFRACTION_COLLISION: float(g("metrics.penalty_collision", 0.60)),
            INFRACTION_RED_SIGNAL: float(g("metrics.penalty_red_signal", 0.70)),
            INFRACTION_ROUTE_DEVIATION: float(g("metrics.penalty_route_deviation", 0.75)),
        })


def ade_fde(pred, gt) -> tuple[float, float]:
    """Average and final displacement error between equal-length trajectories."""
    p = pred.numpy() if isinstance(pred, Trajectory) else np.asarray(pred, dtype=np.float64)
    g = gt.numpy() if isinstance(gt, Trajectory) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValidationError(f"trajectory shapes differ: {p.shape} vs {g.shape}")
    d = np.linalg.norm(p - g, axis=1)
    return float(d.mean()), float(d[-1])


def route_completion(log: EpisodeLog) -> float:
    """Percentage of the route arc length covered by the projected ego path."""
    if log.route.total_length <= 0:
        raise ValidationError("route has zero length")
    covered = 0.0
    for s in log.steps:
        covered = max(covered, log.route.project((s.x, s.y))[0])
    return 100.0 * min(covered, log.route.total_length) / log.route.total_length


def infraction_score(log: EpisodeLog, penalties: PenaltyTable | None = None) -> float:
    """Product of per-event penalties over all infractions in the log."""
    penalties = penalties or PenaltyTable()
    factors = sorted(penalties.penalty(e.kind) for e in log.all_infractions())
    score = 1.0
    for p in factors:
        score *= p
    return score


def driving_score(per_route: Sequence[tuple[float, float]]) -> float:
    """Mean over routes of route-completion times infraction-score."""
    if not per_route:
        raise ValidationError("driving score needs at least one route")
    return batch_mean(rc * isc for rc, isc in per_route)


@dataclass(frozen=True)
class SmoothnessReport:
    speed_min_kmh: float
    speed_max_kmh: float
    jerk_rms: float
    oscillation_count: int


def smoothness(log: EpisodeLog, deadband: float = 0.1) -> SmoothnessReport:
    """Speed range (km/h), RMS jerk, and count of acceleration sign flips
    whose magnitudes exceed the dead-band on both sides."""
    if len(log.steps) < 3:
        raise ValidationError(f"smoothness needs at least 3 steps, got {len(log.steps)}")
    speeds = log.speeds()
    times = log.times()
    dt = float(np.mean(np.diff(times)))
    accel = np.diff(speeds) / dt
    jerk = np.diff(speeds, n=2) / (dt * dt)
    flips = 0
    for a, b in zip(accel[:-1], accel[1:]):
        if abs(a) > deadband and abs(b) > deadband and np.sign(a) != np.sign(b):
            flips += 1
    return SmoothnessReport(
        speed_min_kmh=float(speeds.min() * 3.6),
        speed_max_kmh=float(speeds.max() * 3.6),
        jerk_rms=float(np.sqrt(np.mean(jerk ** 2))),
        oscillation_count=flips,
    )


# ---------------------------------------------------------------------------
# model rollout
# ---------------------------------------------------------------------------

class ModelPolicy:
    """Drives the simulated vehicle with the trained model: waypoint prediction
    in the ego frame, then pure-pursuit tracking of the predicted path.

    Per-frame geometric features are cached so each control step encodes only
    the newest frame.
    """

    def __init__(self, model: DrivingModel, route: RouteSpec, world: WorldConfig,
                 lookahead: float = 2.5, replan_every: int = 1):
        self.model = model
        self.route = route
        self.world = world
        self.lookahead = lookahead
        self.replan_every = max(int(replan_every), 1)
        self.dims = model.dims
        self._hist: deque = deque(maxlen=self.dims.window_len)
        self._last_cmd = (0.0, 0.0)
        self._steps = 0
        self._plan = None
        self._plan_pose = None

    def reset(self):
        self._hist.clear()
        self._last_cmd = (0.0, 0.0)
        self._steps = 0
        self._plan = None
        self._plan_pose = None

    def _push(self, state: VehicleState, t: float, progress: float):
        world = self.world
        frame = render_observation(state, world, t=t, route=self.route)
        with torch.no_grad():
            cam = torch.tensor(frame.camera, dtype=torch.float64).reshape(1, 1, *world.camera_hw)
            occ = torch.tensor(frame.bev, dtype=torch.float64).reshape(1, 1, *world.bev_hw)
            f_g = self.model.perception(cam, occ).squeeze(0)
        target_world = active_target(self.route, progress)
        d = target_world - state.pos()
        norm = float(np.linalg.norm(d))
        delta = d / norm if norm > 1e-12 else np.zeros(2)
        self._hist.append({
            "theta": state.theta, "steer": self._last_cmd[0], "throttle": self._last_cmd[1],
            "delta": delta, "t": t, "f_g": f_g, "target_world": target_world,
        })

    def _ego_window(self, t: float):
        from .domain import EgoStateSequence

        hist = list(self._hist)
        need = self.dims.window_len - len(hist)
        if need > 0:
            dt = self.world.dt
            pads = [dict(hist[0], t=hist[0]["t"] - dt * (need - j)) for j in range(need)]
            hist = pads + hist
        return hist, EgoStateSequence(
            theta=np.array([h["theta"] for h in hist]),
            steer=np.clip([h["steer"] for h in hist], -1.0, 1.0),
            throttle=np.clip([h["throttle"] for h in hist], 0.0, 1.0),
            delta=np.stack([h["delta"] for h in hist]),
            timestamps=np.array([h["t"] for h in hist]))

    def predict(self, state: VehicleState, t: float, progress: float) -> np.ndarray:
        """K predicted waypoints in the current ego frame."""
        self._push(state, t, progress)
        hist, ego = self._ego_window(t)
        sx, sy = input_streams(ego, self.dims.input_mode)
        with torch.no_grad():
            f_g = torch.stack([h["f_g"] for h in hist]).unsqueeze(0)
            f_t = self.model.encode_temporal(
                torch.tensor(sx, dtype=torch.float64).unsqueeze(0),
                torch.tensor(sy, dtype=torch.float64).unsqueeze(0) if sy is not None else None)
            fused = torch.cat([f_g, f_t], dim=2)
            target = ego_frame_transform(hist[-1]["target_world"], (state.x, state.y, state.theta))
            wps = self.model.decode_masked(
                fused, torch.ones(self.dims.window_len, dtype=torch.bool),
                torch.tensor(target, dtype=torch.float64).reshape(1, 2))
        return wps.squeeze(0).numpy()

    def act(self, state: VehicleState, t: float, progress: float) -> tuple[float, float, float]:
        pose = (state.x, state.y, state.theta)
        if self._steps % self.replan_every == 0 or self._plan is None:
            wps = self.predict(state, t, progress)
            self._plan, self._plan_pose = wps, pose
        else:
            self._push(state, t, progress)
            # reuse the last plan, re-expressed in the current ego frame
            world_wps = ego_frame_inverse(self._plan, self._plan_pose)
            wps = ego_frame_transform(world_wps, pose)
        self._steps += 1
        spacing = np.linalg.norm(np.diff(self._plan, axis=0), axis=1)
        v_des = float(spacing.mean()) / self.world.dt
        norms = np.linalg.norm(wps, axis=1)
        ahead = np.flatnonzero(norms >= self.lookahead)
        aim = wps[ahead[0]] if ahead.size else wps[-1]
        dist = float(np.linalg.norm(aim))
        if norms[-1] <= 0.3:
            steer = 0.0  # the plan says stop; hold the wheel
        else:
            if dist < self.lookahead:
                # short plans at low speed: keep the direction, stretch the aim
                # distance so pure-pursuit curvature stays bounded
                aim = aim * (self.lookahead / max(dist, 1e-9))
            steer = pure_pursuit_steer(aim, self.world)
        throttle, brake = speed_control(state.v, v_des)
        self._last_cmd = (steer, throttle)
        return steer, throttle, brake


def evaluate_scenarios(policy_factory, scenarios, penalties: PenaltyTable | None = None,
                       deadband: float = 0.1, timeout_steps: int | None = None) -> list[dict]:
    """Roll out one policy per (route, world) scenario and score each route."""
    penalties = penalties or PenaltyTable()
    rows = []
    for i, (route, world) in enumerate(scenarios):
        policy = policy_factory(route, world)
        log = run_episode(policy, route, world, timeout_steps=timeout_steps)
        rc = route_completion(log)
        isc = infraction_score(log, penalties)
        smooth = smoothness(log, deadband) if len(log.steps) >= 3 else None
        row = {"v": 1, "kind": "route_result", "route": i,
               "DS": rc * isc, "RC": rc, "IS": isc,
               "complete": log.complete,
               "infractions": len(log.all_infractions())}
        if smooth is not None:
            row.update({"speed_min_kmh": smooth.speed_min_kmh,
                        "speed_max_kmh": smooth.speed_max_kmh,
                        "jerk_rms": smooth.jerk_rms,
                        "oscillations": smooth.oscillation_count})
        rows.append(row)
    return rows


def aggregate_rows(rows: Sequence[dict]) -> dict:
    if not rows:
        raise ValidationError("no route results to aggregate")
    agg = {"v": 1, "kind": "aggregate", "routes": len(rows),
           "DS": batch_mean(r["DS"] for r in rows),
           "RC": batch_mean(r["RC"] for r in rows),
           "IS": batch_mean(r["IS"] for r in rows)}
    for key in ("oscillations", "jerk_rms"):
        if all(key in r for r in rows):
            agg[key] = batch_mean(r[key] for r in rows)
    return agg


def closed_loop_eval(checkpoint, scenarios, penalties: PenaltyTable | None = None,
                     deadband: float = 0.1, timeout_steps: int | None = None,
                     lookahead: float = 2.5, replan_every: int = 1) -> tuple[list[dict], dict]:
    """Score a trained checkpoint over scenarios; returns per-route rows plus
    the aggregate record."""
    if isinstance(checkpoint, DrivingModel):
        model = checkpoint
    else:
        model, _, _, _ = load_checkpoint(checkpoint)
    model.eval()

    def factory(route, world):
        return ModelPolicy(model, route, world, lookahead=lookahead,
                           replan_every=replan_every)

    rows = evaluate_scenarios(factory, scenarios, penalties=penalties,
                              deadband=deadband, timeout_steps=timeout_steps)
    return rows, aggregate_rows(rows)


def open_loop_eval(model: DrivingModel, samples, batch_size: int = 64) -> dict:
    """Mean ADE/FDE of the model over dataset samples."""
    model.eval()
    ades, fdes = [], []
    with torch.no_grad():
        for k in range(0, len(samples), batch_size):
            chunk = samples[k:k + batch_size]
            batch = samples_to_tensors(chunk, model.dims.input_mode)
            pred, _, _ = model(batch["camera"], batch["bev"], batch["streams_x"],
                               batch["streams_y"], batch["target"])
            d = torch.linalg.norm(pred - batch["gt"], dim=2)
            ades.extend(d.mean(dim=1).tolist())
            fdes.extend(d[:, -1].tolist())
    return {"v": 1, "kind": "open_loop", "samples": len(samples),
            "ADE": batch_mean(ades), "FDE": batch_mean(fdes)}
