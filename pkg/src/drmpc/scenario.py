"""Scenario files: a YAML document describing track, robot, obstacles, GP
and controller settings.

Required fields raise :class:`ScenarioError` naming the dotted path; unknown
keys only produce a warning so that older readers accept newer files.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidArgument
from .gp import GPHyperparams
from .mpc import MPCConfig
from .predict import ObstacleGeometry
from .risk import RiskSpec
from .sim import ObstacleScript
from .track import Track
from .vehicle import VehicleParams

log = logging.getLogger(__name__)

BUNDLED = Path(__file__).parent / "scenarios"


class ScenarioError(InvalidArgument):
    pass


class _Required:
    def __repr__(self):
        return "<required>"


REQUIRED = _Required()

# default tree; REQUIRED marks fields without a default
SCHEMA = {
    "name": "scenario",
    "seed": 0,
    "sim": {"T_s": 0.01, "max_time": 60.0, "stop_on_collision": True, "observation_noise_var": 1e-4},
    "track": {"straight": REQUIRED, "radius": REQUIRED, "center": [0.0, 0.0], "v_ref": REQUIRED, "start_s": 0.0},
    "vehicle": {"l_f": 2.0, "l_r": 2.0, "v_bounds": [0.0, 30.0], "steer_bounds": [-math.pi / 6, math.pi / 6]},
    "mpc": {
        "K": REQUIRED, "T_o": 0.01, "Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[0.01, 0.0], [0.0, 0.01]],
        "P": [[1.0, 0.0], [0.0, 1.0]], "M": REQUIRED, "controller": "drmpc", "backend": "reduced",
        "fallback": "brake", "tol": 1e-6, "feas_tol": 1e-6, "max_iter": 200, "zero_fill_window": False,
    },
    "risk": {"alpha": REQUIRED, "delta": REQUIRED, "theta": REQUIRED, "N": REQUIRED},
    "gp": {"length_scales": [25.0, 25.0, 1.0], "signal_variance": 4.0, "noise_variance": 1e-4, "prior_mean": 0.0},
    "obstacles": [],
}
OBSTACLE_SCHEMA = {"name": "", "half_length": 1.0, "half_width": 0.5, "inflation": 0.0, "anchor": "center",
                   "interpolation": "linear", "waypoints": REQUIRED}


def _merge(schema, data, path, unknown):
    if not isinstance(data, dict):
        raise ScenarioError(f"{path or 'document'}: expected a mapping, got {type(data).__name__}")
    out = {}
    for key, default in schema.items():
        where = f"{path}.{key}" if path else key
        if key in data:
            val = data[key]
            if isinstance(default, dict) and key != "gp":
                val = _merge(default, val, where, unknown)
            out[key] = val
        elif default is REQUIRED:
            raise ScenarioError(f"missing required field '{where}'")
        else:
            out[key] = copy.deepcopy(default)
    for key in data:
        if key not in schema:
            unknown.append(f"{path}.{key}" if path else key)
    return out


def _gp_list(raw, unknown):
    items = raw if isinstance(raw, list) else [raw]
    out = []
    for j, item in enumerate(items):
        merged = _merge(SCHEMA["gp"], item, f"gp[{j}]" if isinstance(raw, list) else "gp", unknown)
        out.append(merged)
    return out


@dataclass(eq=False)
class Scenario:
    name: str
    seed: int
    T_s: float
    max_time: float
    stop_on_collision: bool
    observation_noise_var: float
    track: Track
    v_ref: float
    start_s: float
    vehicle: VehicleParams
    mpc: dict
    risk: RiskSpec
    gp: tuple
    obstacles: tuple
    obstacle_meta: tuple

    def mpc_config(self) -> MPCConfig:
        m = self.mpc
        return MPCConfig(K=int(m["K"]), T_s=self.T_s, T_o=float(m["T_o"]), Q=np.array(m["Q"], dtype=float),
                         R=np.array(m["R"], dtype=float), P=np.array(m["P"], dtype=float), risk=self.risk,
                         M=int(m["M"]), controller_kind=m["controller"], vehicle=self.vehicle,
                         gp_hyper=self.gp, backend=m["backend"], tol=float(m["tol"]),
                         feas_tol=float(m["feas_tol"]), max_iter=int(m["max_iter"]), fallback=m["fallback"],
                         zero_fill_window=bool(m["zero_fill_window"]))

    def with_overrides(self, controller_kind=None, seed=None, theta=None, strict=None) -> "Scenario":
        mpc = dict(self.mpc)
        if controller_kind is not None:
            mpc["controller"] = controller_kind
        if strict is not None:
            mpc["fallback"] = "strict" if strict else "brake"
        risk = self.risk if theta is None else replace(self.risk, theta=float(theta))
        out = replace(self, mpc=mpc, risk=risk, seed=self.seed if seed is None else int(seed))
        out.mpc_config()  # validate
        return out

    def to_dict(self) -> dict:
        gp = [{"length_scales": list(h.length_scales), "signal_variance": h.signal_variance,
               "noise_variance": h.noise_variance, "prior_mean": h.prior_mean} for h in self.gp]
        obstacles = []
        for s, meta in zip(self.obstacles, self.obstacle_meta):
            g = s.geometry
            obstacles.append({
                "name": s.name, "half_length": g.half_length - meta["inflation"],
                "half_width": g.half_width - meta["inflation"], "inflation": meta["inflation"], "anchor": g.anchor,
                "interpolation": s.interpolation,
                "waypoints": [[t, *map(float, row)] for t, row in zip(s.times, s.states)],
            })
        mpc = {k: (np.asarray(v, dtype=float).tolist() if k in ("Q", "R", "P") else v) for k, v in self.mpc.items()}
        return {
            "name": self.name,
            "seed": int(self.seed),
            "sim": {"T_s": self.T_s, "max_time": self.max_time, "stop_on_collision": self.stop_on_collision,
                    "observation_noise_var": self.observation_noise_var},
            "track": {"straight": self.track.straight, "radius": self.track.radius,
                      "center": list(self.track.center), "v_ref": self.v_ref, "start_s": self.start_s},
            "vehicle": {"l_f": self.vehicle.l_f, "l_r": self.vehicle.l_r, "v_bounds": list(self.vehicle.v_bounds),
                        "steer_bounds": list(self.vehicle.steer_bounds)},
            "mpc": mpc,
            "risk": {"alpha": self.risk.alpha, "delta": self.risk.delta, "theta": self.risk.theta,
                     "N": int(self.risk.N)},
            "gp": gp if len({repr(g) for g in gp}) > 1 else gp[0],
            "obstacles": obstacles,
        }

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.to_dict() == other.to_dict()

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def _num(v, where):
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected a number, got {v!r}") from None


def scenario_from_dict(data: dict) -> Scenario:
    unknown = []
    d = _merge({k: v for k, v in SCHEMA.items()}, data, "", unknown)
    gp = _gp_list(d["gp"], unknown)
    obstacles, meta = [], []
    if not isinstance(d["obstacles"], list):
        raise ScenarioError("obstacles: expected a list")
    for i, raw in enumerate(d["obstacles"]):
        o = _merge(OBSTACLE_SCHEMA, raw, f"obstacles[{i}]", unknown)
        infl = _num(o["inflation"], f"obstacles[{i}].inflation")
        try:
            geom = ObstacleGeometry(_num(o["half_length"], f"obstacles[{i}].half_length") + infl,
                                    _num(o["half_width"], f"obstacles[{i}].half_width") + infl, o["anchor"])
            wp = np.asarray(o["waypoints"], dtype=float)
            if wp.ndim != 2 or wp.shape[1] != 4:
                raise ScenarioError(f"obstacles[{i}].waypoints: expected rows [t, x, y, heading]")
            obstacles.append(ObstacleScript(tuple(wp[:, 0]), wp[:, 1:], geom, o["interpolation"], o["name"]))
        except ScenarioError:
            raise
        except (InvalidArgument, ValueError) as exc:
            raise ScenarioError(f"obstacles[{i}]: {exc}") from None
        meta.append({"inflation": infl})
    for key in unknown:
        warnings.warn(f"unknown scenario key '{key}' ignored", stacklevel=3)
        log.warning("unknown scenario key '%s' ignored", key)
    try:
        risk = RiskSpec(_num(d["risk"]["alpha"], "risk.alpha"), _num(d["risk"]["delta"], "risk.delta"),
                        _num(d["risk"]["theta"], "risk.theta"), int(d["risk"]["N"]))
        track = Track(_num(d["track"]["straight"], "track.straight"), _num(d["track"]["radius"], "track.radius"),
                      tuple(d["track"]["center"]))
        vehicle = VehicleParams(_num(d["vehicle"]["l_f"], "vehicle.l_f"), _num(d["vehicle"]["l_r"], "vehicle.l_r"),
                                tuple(d["vehicle"]["v_bounds"]), tuple(d["vehicle"]["steer_bounds"]))
        hypers = tuple(GPHyperparams(tuple(g["length_scales"]), _num(g["signal_variance"], "gp.signal_variance"),
                                     _num(g["noise_variance"], "gp.noise_variance"),
                                     _num(g["prior_mean"], "gp.prior_mean")) for g in gp)
        if len(hypers) == 1:
            hypers = hypers * 3
        if len(hypers) != 3:
            raise ScenarioError("gp: give one hyperparameter set or one per state component (3)")
        mpc = dict(d["mpc"])
        sc = Scenario(
            name=str(d["name"]), seed=int(d["seed"]), T_s=_num(d["sim"]["T_s"], "sim.T_s"),
            max_time=_num(d["sim"]["max_time"], "sim.max_time"),
            stop_on_collision=bool(d["sim"]["stop_on_collision"]),
            observation_noise_var=_num(d["sim"]["observation_noise_var"], "sim.observation_noise_var"),
            track=track, v_ref=_num(d["track"]["v_ref"], "track.v_ref"),
            start_s=_num(d["track"]["start_s"], "track.start_s"), vehicle=vehicle, mpc=mpc, risk=risk,
            gp=hypers, obstacles=tuple(obstacles), obstacle_meta=tuple(meta))
        sc.mpc_config()
    except ScenarioError:
        raise
    except (InvalidArgument, ValueError, TypeError, KeyError) as exc:
        raise ScenarioError(str(exc)) from None
    if sc.observation_noise_var < 0:
        raise ScenarioError("sim.observation_noise_var must be non-negative")
    if sc.max_time <= 0 or sc.T_s <= 0:
        raise ScenarioError("sim.T_s and sim.max_time must be positive")
    return sc


def loads_scenario(text: str) -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"cannot parse scenario: {exc}") from None
    if data is None:
        raise ScenarioError("scenario file is empty")
    return scenario_from_dict(data)


def load_scenario(path) -> Scenario:
    """Load and validate a scenario. Bare names resolve to bundled scenarios."""
    p = Path(path)
    if not p.exists() and (BUNDLED / p.name).exists():
        p = BUNDLED / p.name
    elif not p.exists() and (BUNDLED / f"{p.name}.scenario").exists():
        p = BUNDLED / f"{p.name}.scenario"
    text = p.read_text()
    sc = loads_scenario(text)
    log.info("loaded scenario %s (%s)", sc.name, p)
    return sc


def write_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(scenario.dumps())
