"""Obstacle belief propagation, sampling and polytope geometry.

Obstacle states are ``(x, y, heading)``; the GP predicts the velocity of each
component. Rectangles are described by four half-spaces ``G p <= g`` with
faces ordered front, back, left, right.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .gp import GPModel, posterior, posterior_mean_gradient

PSD_TOL = 1e-10
ANCHORS = ("center", "rear_axle", "front_axle")


def _symmetrize_psd(cov):
    cov = 0.5 * (cov + cov.T)
    if not np.any(cov):
        return cov
    w, V = np.linalg.eigh(cov)
    floor = PSD_TOL * max(1.0, float(np.abs(w).max()))
    if w.min() < -floor:
        raise NumericFailure(f"covariance lost positive semidefiniteness (min eigenvalue {w.min():.3e})")
    if w.min() < 0.0:
        cov = (V * np.maximum(w, 0.0)) @ V.T
        cov = 0.5 * (cov + cov.T)
    return cov


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise InvalidArgument(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def point(cls, mean) -> "GaussianBelief":
        """Belief with zero covariance, as at the start of every horizon."""
        mean = np.asarray(mean, dtype=float).ravel()
        return cls(mean, np.zeros((mean.size, mean.size)))


@dataclass(frozen=True)
class ObstacleGeometry:
    """Rectangle footprint. ``anchor`` names the point the state refers to.

    The axle anchors sit on the long axis at ``half_length`` behind (rear) or
    ahead of (front) the center.
    """

    half_length: float
    half_width: float
    anchor: str = "center"

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise InvalidArgument("half_length and half_width must be positive")
        if self.anchor not in ANCHORS:
            raise InvalidArgument(f"anchor must be one of {ANCHORS}, got {self.anchor!r}")

    def center_offset(self) -> float:
        """Signed distance from the anchor to the center along the heading."""
        return {"center": 0.0, "rear_axle": self.half_length, "front_axle": -self.half_length}[self.anchor]


@dataclass(frozen=True)
class ObstaclePolytope:
    G: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        g = np.asarray(self.g, dtype=float).ravel()
        if G.shape[0] != g.size:
            raise InvalidArgument("G and g have different numbers of rows")
        if G.shape[0] < 3:
            raise InvalidArgument("a bounded polytope needs at least 3 half-spaces")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "g", g)

    def contains(self, y, strict: bool = True) -> bool:
        lhs = self.G @ np.asarray(y, dtype=float)
        return bool(np.all(lhs < self.g) if strict else np.all(lhs <= self.g))


@dataclass(frozen=True)
class NormalizedHalfspaceSample:
    """Unit-normal faces with ``c_j . y + d_j`` = signed inside distance."""

    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        d = np.asarray(self.d, dtype=float).ravel()
        if c.shape[0] != d.size:
            raise InvalidArgument("c and d have different numbers of rows")
        if not np.allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-12, rtol=0):
            raise InvalidArgument("rows of c must have unit norm")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)

    def signed_distances(self, y) -> np.ndarray:
        return self.c @ np.asarray(y, dtype=float) + self.d


def propagate_one_step(belief: GaussianBelief, model: GPModel, T_o: float) -> GaussianBelief:
    """Push the belief through one Euler step of the GP velocity field.

    The velocity is linearised around the mean, so the joint state-velocity
    Gaussian has moments ``mu_v(mu_x)``, ``Sigma_v + J Sigma_x J^T`` and
    cross-covariance ``Sigma_x J^T``.
    """
    mu_x, S_x = belief.mean, belief.cov
    mu_v, var_v = posterior(model, mu_x)
    J = posterior_mean_gradient(model, mu_x)
    S_v = np.diag(var_v) + J @ S_x @ J.T
    S_xv = S_x @ J.T
    mean = mu_x + T_o * mu_v
    cov = S_x + T_o**2 * S_v + T_o * (S_xv + S_xv.T)
    return GaussianBelief(mean, _symmetrize_psd(cov))


def propagate_horizon(belief0: GaussianBelief, model: GPModel, K: int, T_o: float) -> list:
    if K < 1:
        raise InvalidArgument("horizon K must be >= 1")
    out = []
    b = belief0
    for _ in range(K):
        b = propagate_one_step(b, model, T_o)
        out.append(b)
    return out


def covariance_factor(cov) -> np.ndarray:
    """``F`` with ``F F^T = cov`` from the eigendecomposition (works at rank 0)."""
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return V * np.sqrt(np.maximum(w, 0.0))


def sample_states(belief: GaussianBelief, N: int, seed) -> np.ndarray:
    """``N`` i.i.d. draws, shape ``(N, n_x)``. ``seed`` is an int or a Generator."""
    if N < 1:
        raise InvalidArgument("N must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal((N, belief.mean.size))
    return belief.mean + z @ covariance_factor(belief.cov).T


def _rect_faces(theta):
    """Outward normals in face order front, back, left, right; shape (..., 4, 2)."""
    ct, st = np.cos(theta), np.sin(theta)
    return np.stack(
        [np.stack([ct, st], -1), np.stack([-ct, -st], -1), np.stack([-st, ct], -1), np.stack([st, -ct], -1)],
        axis=-2,
    )


def polytope_from_state(geom: ObstacleGeometry, state) -> ObstaclePolytope:
    state = np.asarray(state, dtype=float).ravel()
    if state.size < 3:
        raise InvalidArgument("obstacle state must carry x, y and heading")
    theta = state[2]
    center = state[:2] + geom.center_offset() * np.array([np.cos(theta), np.sin(theta)])
    G = _rect_faces(theta)
    half = np.array([geom.half_length, geom.half_length, geom.half_width, geom.half_width])
    return ObstaclePolytope(G, G @ center + half)


def normalized_halfspaces(poly: ObstaclePolytope) -> NormalizedHalfspaceSample:
    norms = np.linalg.norm(poly.G, axis=1)
    if np.any(norms <= 0):
        raise InvalidArgument("polytope has a zero-norm row")
    return NormalizedHalfspaceSample(-poly.G / norms[:, None], poly.g / norms)


def halfspace_arrays(geom: ObstacleGeometry, states) -> tuple:
    """Vectorised ``normalized_halfspaces(polytope_from_state(...))``.

    Returns ``C`` of shape ``(N, 4, 2)`` and ``D`` of shape ``(N, 4)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    theta = states[:, 2]
    heading = np.stack([np.cos(theta), np.sin(theta)], -1)
    center = states[:, :2] + geom.center_offset() * heading
    G = _rect_faces(theta)
    half = np.array([geom.half_length, geom.half_length, geom.half_width, geom.half_width])
    g = np.einsum("nmk,nk->nm", G, center) + half
    return -G, g


def samples_to_arrays(samples: Sequence[NormalizedHalfspaceSample]) -> tuple:
    C = np.stack([s.c for s in samples])
    D = np.stack([s.d for s in samples])
    return C, D
