"""Oval centerline: two straights joined by two semicircles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class Track:
    """Counter-clockwise oval. Arc length 0 is the left end of the lower straight.

    ``center`` is the midpoint of the oval, ``straight`` the length of each
    straight and ``radius`` the radius of the end arcs.
    """

    straight: float
    radius: float
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.straight < 0 or self.radius <= 0:
            raise InvalidArgument("straight must be >= 0 and radius > 0")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def length(self) -> float:
        return 2.0 * self.straight + 2.0 * math.pi * self.radius

    def _parts(self):
        L, R = self.straight, self.radius
        return L, math.pi * R, L, math.pi * R

    def point(self, s: float) -> np.ndarray:
        return self.pose(s)[:2]

    def pose(self, s: float) -> np.ndarray:
        """``(x, y, heading)`` at arc length ``s`` (taken modulo the length)."""
        s = s % self.length
        L, R = self.straight, self.radius
        cx, cy = self.center
        h = L / 2.0
        if s < L:
            return np.array([cx - h + s, cy - R, 0.0])
        s -= L
        if s < math.pi * R:
            a = -math.pi / 2 + s / R
            return np.array([cx + h + R * math.cos(a), cy + R * math.sin(a), a + math.pi / 2])
        s -= math.pi * R
        if s < L:
            return np.array([cx + h - s, cy + R, math.pi])
        s -= L
        a = math.pi / 2 + s / R
        return np.array([cx - h + R * math.cos(a), cy + R * math.sin(a), a + math.pi / 2])

    def project(self, p) -> float:
        """Arc length of the nearest centerline point."""
        px, py = float(p[0]) - self.center[0], float(p[1]) - self.center[1]
        L, R = self.straight, self.radius
        h = L / 2.0
        cands = []
        # lower and upper straights
        xs = min(max(px, -h), h)
        cands.append(((xs - px) ** 2 + (-R - py) ** 2, xs + h))
        cands.append(((xs - px) ** 2 + (R - py) ** 2, L + math.pi * R + (h - xs)))
        # right arc, angle in [-pi/2, pi/2]
        a = math.atan2(py, px - h)
        a = min(max(a, -math.pi / 2), math.pi / 2)
        q = (h + R * math.cos(a), R * math.sin(a))
        cands.append(((q[0] - px) ** 2 + (q[1] - py) ** 2, L + R * (a + math.pi / 2)))
        # left arc, angle in [pi/2, 3pi/2]
        a = math.atan2(py, px + h)
        if a < 0:
            a += 2 * math.pi
        a = min(max(a, math.pi / 2), 3 * math.pi / 2)
        q = (-h + R * math.cos(a), R * math.sin(a))
        cands.append(((q[0] - px) ** 2 + (q[1] - py) ** 2, 2 * L + math.pi * R + R * (a - math.pi / 2)))
        return min(cands)[1] % self.length

    def reference_window(self, p, K: int, T_s: float, v_ref: float) -> np.ndarray:
        """``K + 1`` reference positions: nearest point then steps of ``T_s * v_ref``."""
        s0 = self.project(p)
        return np.array([self.point(s0 + k * T_s * v_ref) for k in range(K + 1)])
