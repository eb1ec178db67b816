"""Discrete kinematic bicycle model, state ``(x, y, theta, beta)`` and
input ``(v, steer)``."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

log = logging.getLogger(__name__)


def wrap_angle(a: float) -> float:
    """Wrap to ``(-pi, pi]``."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class VehicleParams:
    l_f: float = 2.0
    l_r: float = 2.0
    v_bounds: tuple = (0.0, 30.0)
    steer_bounds: tuple = (-math.pi / 6, math.pi / 6)

    def __post_init__(self):
        if self.l_f <= 0 or self.l_r <= 0:
            raise InvalidArgument("l_f and l_r must be positive")
        object.__setattr__(self, "v_bounds", tuple(float(v) for v in self.v_bounds))
        object.__setattr__(self, "steer_bounds", tuple(float(v) for v in self.steer_bounds))
        if self.v_bounds[0] > self.v_bounds[1] or self.steer_bounds[0] > self.steer_bounds[1]:
            raise InvalidArgument("input bounds are inverted")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.v_bounds[0], self.steer_bounds[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.v_bounds[1], self.steer_bounds[1]])


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "beta", wrap_angle(float(self.beta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.beta])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


def bicycle_update(xi, u, p: VehicleParams, T: float) -> np.ndarray:
    """One unwrapped step of the model on arrays (used inside the optimiser)."""
    x, y, th, be = xi
    v, d = u
    k = p.l_r / (p.l_r + p.l_f)
    return np.array([
        x + T * v * math.cos(th + be),
        y + T * v * math.sin(th + be),
        th + T * v * math.sin(be) / p.l_r,
        be + T * math.atan(k * math.tan(d)),
    ])


def bicycle_jacobians(xi, u, p: VehicleParams, T: float):
    """``(A, B)`` = derivatives of :func:`bicycle_update` w.r.t. state and input."""
    _, _, th, be = xi
    v, d = u
    k = p.l_r / (p.l_r + p.l_f)
    c, s = math.cos(th + be), math.sin(th + be)
    A = np.eye(4)
    A[0, 2] = A[0, 3] = -T * v * s
    A[1, 2] = A[1, 3] = T * v * c
    A[2, 3] = T * v * math.cos(be) / p.l_r
    B = np.zeros((4, 2))
    B[0, 0] = T * c
    B[1, 0] = T * s
    B[2, 0] = T * math.sin(be) / p.l_r
    td = math.tan(d)
    B[3, 1] = T * k * (1.0 + td * td) / (1.0 + (k * td) ** 2)
    return A, B


def clamp_input(v: float, steer: float, p: VehicleParams):
    vc = min(max(v, p.v_bounds[0]), p.v_bounds[1])
    sc = min(max(steer, p.steer_bounds[0]), p.steer_bounds[1])
    if vc != v or sc != steer:
        log.warning("input (%.6g, %.6g) clamped to (%.6g, %.6g)", v, steer, vc, sc)
    return vc, sc


def vehicle_step(s: VehicleState, v: float, steer: float, p: VehicleParams, T_s: float) -> VehicleState:
    """Advance one sample; inputs outside the bounds are clamped with a warning."""
    v, steer = clamp_input(float(v), float(steer), p)
    nxt = bicycle_update((s.x, s.y, s.theta, s.beta), (v, steer), p, T_s)
    return VehicleState(*nxt)
