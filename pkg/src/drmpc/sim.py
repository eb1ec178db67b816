"""Closed-loop simulation: bicycle robot on an oval, scripted obstacles,
collision checks and the per-stage trace."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .predict import ObstacleGeometry, ObstaclePolytope, polytope_from_state
from .track import Track
from .vehicle import VehicleParams, VehicleState, vehicle_step

__all__ = [
    "VehicleState", "VehicleParams", "vehicle_step", "Track", "ObstacleScript", "obstacle_truth",
    "collision_check", "clearance", "StageRecord", "SimTrace", "run_closed_loop", "TRACE_COLUMNS",
]

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("stage", "t", "x", "y", "theta", "beta", "v_cmd", "steer_cmd", "clearance", "risk_lhs_max",
                 "status", "solve_ms")


@dataclass(frozen=True)
class ObstacleScript:
    """Piecewise-linear obstacle trajectory.

    ``times`` in seconds (strictly increasing); ``states`` rows are
    ``(x, y, heading)`` with the heading unwrapped so that interpolation
    turns the short way the script intends.
    """

    times: tuple
    states: np.ndarray
    geometry: ObstacleGeometry
    interpolation: str = "linear"
    name: str = ""

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if len(times) < 1 or states.shape != (len(times), 3):
            raise InvalidArgument("obstacle script needs one (x, y, heading) row per waypoint time")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidArgument("waypoint times must be strictly increasing")
        if self.interpolation != "linear":
            raise InvalidArgument(f"unsupported interpolation {self.interpolation!r}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def state_at(self, time_s: float) -> np.ndarray:
        ts = np.asarray(self.times)
        return np.array([np.interp(time_s, ts, self.states[:, j]) for j in range(3)])


def obstacle_truth(script: ObstacleScript, t: int, T_s: float = 0.01):
    """True state at stage ``t`` and the forward-difference velocity to stage ``t + 1``.

    Outside the scripted span the state is held, so the velocity is zero.
    """
    now = script.state_at(t * T_s)
    nxt = script.state_at((t + 1) * T_s)
    return now, (nxt - now) / T_s


def collision_check(y_robot, polys: Sequence[ObstaclePolytope]) -> bool:
    """True iff the point lies in the open interior of some polytope."""
    return any(p.contains(y_robot, strict=True) for p in polys)


def clearance(y_robot, geom: ObstacleGeometry, state) -> float:
    """Signed clearance to a rectangle: distance outside, minus depth inside."""
    state = np.asarray(state, dtype=float)
    th = state[2]
    ct, st = math.cos(th), math.sin(th)
    cx = state[0] + geom.center_offset() * ct
    cy = state[1] + geom.center_offset() * st
    dx, dy = float(y_robot[0]) - cx, float(y_robot[1]) - cy
    lx = ct * dx + st * dy
    ly = -st * dx + ct * dy
    ox = abs(lx) - geom.half_length
    oy = abs(ly) - geom.half_width
    if ox <= 0 and oy <= 0:
        return max(ox, oy)
    return math.hypot(max(ox, 0.0), max(oy, 0.0))


@dataclass
class StageRecord:
    stage: int
    t: float
    state: VehicleState
    v_cmd: float
    steer_cmd: float
    clearance: float
    risk_lhs_max: float
    status: str
    solve_ms: float
    obstacle_states: np.ndarray
    stage_cost: float
    iterations: int = 0

    def row(self, include_timing: bool) -> list:
        s = self.state
        vals = [self.stage, repr(self.t), repr(s.x), repr(s.y), repr(s.theta), repr(s.beta), repr(self.v_cmd),
                repr(self.steer_cmd), repr(self.clearance), repr(self.risk_lhs_max), self.status,
                repr(self.solve_ms) if include_timing else ""]
        vals += [repr(float(v)) for v in np.asarray(self.obstacle_states).ravel()]
        return vals


@dataclass
class SimTrace:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    n_obstacles: int = 0

    def columns(self) -> list:
        cols = list(TRACE_COLUMNS)
        for o in range(self.n_obstacles):
            cols += [f"obs{o}_x", f"obs{o}_y", f"obs{o}_heading"]
        return cols

    def to_csv(self, include_timing: bool = False) -> str:
        """Trace as CSV text. Wall-clock solve times are left blank unless
        ``include_timing``, so that identical runs give identical files."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for r in self.records:
            w.writerow(r.row(include_timing))
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "solve_ms", "iterations"])
        for r in self.records:
            w.writerow([r.stage, repr(r.solve_ms), r.iterations])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"


def stage_cost(y, ref0, u, Q, R) -> float:
    e = np.asarray(y, dtype=float) - np.asarray(ref0, dtype=float)
    u = np.asarray(u, dtype=float)
    return float(e @ Q @ e + u @ R @ u)


def run_closed_loop(scenario, controller_kind: str | None = None, seed: int | None = None,
                    theta: float | None = None, strict: bool | None = None) -> SimTrace:
    """Simulate until the lap completes, a collision stops the run, the
    controller aborts (strict mode) or ``max_time`` elapses."""
    from . import mpc  # local import: mpc depends on the vehicle model only

    sc = scenario.with_overrides(controller_kind=controller_kind, seed=seed, theta=theta, strict=strict)
    cfg = sc.mpc_config()
    T_s = sc.T_s
    track: Track = sc.track
    scripts = sc.obstacles
    L = len(scripts)
    noise_rng = np.random.default_rng(np.random.SeedSequence([int(sc.seed), 7919]))
    noise_sd = math.sqrt(sc.observation_noise_var)
    cs = mpc.ControllerState.initial(L, cfg, seed=sc.seed)
    p = track.pose(sc.start_s)
    state = VehicleState(p[0], p[1], p[2], 0.0)
    last_s = track.project(state.position)
    progress = 0.0
    trace = SimTrace(n_obstacles=L)
    n_stages = int(round(sc.max_time / T_s))
    prev_obs = [None] * L
    acc_cost = 0.0
    collision = False
    lap_done = False
    status = "timeout"
    n_fail = 0
    solve_times = []
    min_clear = math.inf
    for t in range(n_stages):
        obs_now = [obstacle_truth(s, t, T_s)[0] for s in scripts]
        polys = [polytope_from_state(s.geometry, x) for s, x in zip(scripts, obs_now)]
        clear = min((clearance(state.position, s.geometry, x) for s, x in zip(scripts, obs_now)), default=math.inf)
        min_clear = min(min_clear, clear)
        hit = collision_check(state.position, polys)
        observations = []
        for o, s in enumerate(scripts):
            if prev_obs[o] is None:
                observations.append(mpc.ObstacleObservation(obs_now[o], s.geometry))
            else:
                vel = (obs_now[o] - prev_obs[o]) / T_s + noise_sd * noise_rng.standard_normal(3)
                observations.append(mpc.ObstacleObservation(obs_now[o], s.geometry, prev_obs[o], vel))
        ref = track.reference_window(state.position, cfg.K, cfg.T_s, sc.v_ref)
        try:
            u, diag = mpc.step(cs, state.as_array(), observations, ref, cfg)
            abort = None
        except mpc.ControllerAbort as exc:
            diag = exc.diagnostics
            u = np.zeros(2)
            abort = "infeasible-abort"
        except NumericFailure as exc:
            log.error("numeric failure at stage %d: %s", t, exc)
            status = "numeric-failure"
            break
        if diag.status != "optimal-local":
            n_fail += 1
        solve_times.append(diag.solve_time)
        c = stage_cost(state.position, ref[0], u, cfg.Q, cfg.R)
        acc_cost += c
        lhs = float(diag.risk_lhs.max()) if diag.risk_lhs.size else 0.0
        trace.records.append(StageRecord(t, t * T_s, state, float(u[0]), float(u[1]), float(clear), lhs, diag.status,
                                         diag.solve_time * 1e3, np.array(obs_now), c, diag.iterations))
        prev_obs = obs_now
        if hit:
            collision = True
            if sc.stop_on_collision:
                status = "collision"
                break
        if abort:
            status = abort
            break
        state = vehicle_step(state, u[0], u[1], sc.vehicle, T_s)
        s_now = track.project(state.position)
        ds = (s_now - last_s + track.length / 2) % track.length - track.length / 2
        progress += ds
        last_s = s_now
        if progress >= track.length:
            lap_done = True
            status = "collision" if collision else "lap-completed"
            break
    if collision and status in ("timeout", "lap-completed"):
        status = "collision"
    stages = len(trace.records)
    trace.summary = {
        "scenario": sc.name,
        "scenario_hash": scenario.digest(),  # of the file, before run overrides
        "controller": cfg.controller_kind,
        "theta": cfg.risk.theta if cfg.controller_kind == "drmpc" else 0.0,
        "seed": int(sc.seed),
        "status": status,
        "collision": collision,
        "lap_completed": lap_done,
        "lap_time": stages * T_s if lap_done else None,
        "accumulated_cost": acc_cost,
        "avg_solve_time": float(np.mean(solve_times)) if solve_times else 0.0,
        "stages": stages,
        "failed_solves": n_fail,
        "min_clearance": min_clear if math.isfinite(min_clear) else None,
        "progress": progress,
    }
    return trace
