"""Loss of safety, empirical CVaR and the worst-case CVaR bound.

The bound for a fixed robot position ``y`` is the optimal value of

    min  z + (lam * theta + mean(s)) / (1 - alpha)
    s.t. <rho_i, C_i y + d_i> <= s_i + z,  s_i + z >= 0,  s_i >= 0,
         |rho_i|^2 (|y|^2 + n_y) <= lam^2,  rho_i in the probability simplex.

Writing ``omega = sqrt(|y|^2 + n_y)`` and ``r = lam / omega`` the program
separates: for fixed ``r`` each ``rho_i`` minimises a linear function over
the simplex cut by the ball of radius ``r`` (closed form in
:mod:`drmpc.kernels`), ``s`` and ``z`` turn into a CVaR, and what is left is
a convex one-dimensional problem in ``r`` on ``[1/sqrt(m), 1]``. The
evaluator below solves it exactly, which also yields the full decision
block and the gradient with respect to ``y``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidArgument, NumericFailure
from .nlp import ConstraintBlock, VariableBlock
from .predict import ObstaclePolytope, samples_to_arrays

LAMBDA_CAP = 1e8


@dataclass(frozen=True)
class RiskSpec:
    alpha: float
    delta: float
    theta: float
    N: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgument(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.delta < 0:
            raise InvalidArgument("delta must be non-negative")
        if self.theta < 0:
            raise InvalidArgument("theta must be non-negative")
        if int(self.N) < 1:
            raise InvalidArgument("N must be >= 1")


@dataclass(frozen=True)
class DrDecisionBlock:
    z: float
    lam: float
    s: np.ndarray
    rho: np.ndarray


@dataclass(frozen=True)
class DrBound:
    """Value, y-gradient and optimal inner variables of the bound."""

    value: float
    gradient: np.ndarray
    r: float
    block: DrDecisionBlock
    weights: np.ndarray


def distance_to_safe_region(y, poly: ObstaclePolytope) -> float:
    """Euclidean distance from ``y`` to the closure of the complement of the polytope."""
    y = np.asarray(y, dtype=float)
    norms = np.linalg.norm(poly.G, axis=1)
    return float(np.min(np.maximum(poly.g - poly.G @ y, 0.0) / norms))


def cvar_empirical(losses, alpha: float) -> float:
    """CVaR of the uniform empirical distribution by the order-statistic formula."""
    losses = np.asarray(losses, dtype=float).ravel()
    if losses.size == 0:
        raise InvalidArgument("cvar of an empty sample")
    if not 0.0 <= alpha < 1.0:
        raise InvalidArgument(f"alpha must lie in [0, 1), got {alpha}")
    return float(kernels.cvar_sorted(np.ascontiguousarray(losses), float(alpha))[0])


def signed_distances(C, D, y) -> np.ndarray:
    """``A[i, j] = C[i, j] . y + D[i, j]`` for stacked samples."""
    return np.einsum("nmk,k->nm", C, np.asarray(y, dtype=float)) + D


def _as_arrays(samples):
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        return samples
    samples = list(samples)
    if not samples:
        raise InvalidArgument("at least one sample is required")
    return samples_to_arrays(samples)


def saa_risk(samples, y, alpha: float) -> float:
    C, D = _as_arrays(samples)
    A = signed_distances(C, D, y)
    return cvar_empirical(np.maximum(A.min(axis=1), 0.0), alpha)


def dr_bound(C, D, y, theta: float, alpha: float, r_tol: float = kernels.R_TOL) -> DrBound:
    """Exact worst-case CVaR bound at ``y`` with its gradient.

    ``theta = 0`` gives the sample-average CVaR of the loss of safety.
    """
    y = np.asarray(y, dtype=float)
    A = np.ascontiguousarray(signed_distances(C, D, y))
    omega = math.sqrt(float(y @ y) + y.size)
    c = theta * omega / (1.0 - alpha)
    val, r, z, phi, rho, pi = kernels.dr_block(A, float(c), float(alpha), float(r_tol))
    if not (np.isfinite(val) and np.all(np.isfinite(rho))):
        raise NumericFailure("worst-case CVaR evaluation produced non-finite values")
    grad = np.einsum("i,ijk,ij->k", pi, C, rho)
    if theta > 0.0:
        grad = grad + theta * r / (1.0 - alpha) * y / omega
    s = np.maximum(np.maximum(phi, 0.0) - z, 0.0)
    lam = omega * r if theta > 0.0 else min(omega * r, LAMBDA_CAP)
    return DrBound(float(val), grad, float(r), DrDecisionBlock(float(z), float(lam), s, rho), pi)


def dr_inner_solution(samples, y, spec: RiskSpec) -> DrBound:
    C, D = _as_arrays(samples)
    return dr_bound(C, D, y, spec.theta, spec.alpha)


def dr_cvar_upper_bound(samples, y, spec: RiskSpec) -> float:
    return dr_inner_solution(samples, y, spec).value


def saa_start(samples, y, alpha: float) -> DrDecisionBlock:
    """Starting point for a solver-based minimisation of the robust block.

    ``z`` is the empirical value-at-risk of the losses, ``rho_i`` is uniform
    over the faces attaining ``min_j``, ``s`` is the smallest feasible slack
    and ``lam`` the smallest value allowed by the ball constraint.
    """
    C, D = _as_arrays(samples)
    y = np.asarray(y, dtype=float)
    A = signed_distances(C, D, y)
    loss = np.maximum(A.min(axis=1), 0.0)
    N = loss.size
    z = float(np.sort(loss)[max(math.ceil(alpha * N) - 1, 0)])
    tie = np.isclose(A, A.min(axis=1, keepdims=True), rtol=0.0, atol=1e-12)
    rho = tie / tie.sum(axis=1, keepdims=True)
    s = np.maximum(np.maximum((rho * A).sum(axis=1), 0.0) - z, 0.0)
    s = np.maximum(s, -z)
    lam = math.sqrt(float(y @ y) + y.size) * float(np.linalg.norm(rho, axis=1).max())
    return DrDecisionBlock(z, lam, s, rho)


def block_objective(block: DrDecisionBlock, spec: RiskSpec) -> float:
    """Left-hand side of the budget constraint for given inner variables."""
    return block.z + (block.lam * spec.theta + float(np.mean(block.s))) / (1.0 - spec.alpha)


def block_violation(samples, y, block: DrDecisionBlock, spec: RiskSpec) -> float:
    """Largest violation of the inner constraints by ``block`` at ``y``."""
    C, D = _as_arrays(samples)
    y = np.asarray(y, dtype=float)
    A = signed_distances(C, D, y)
    omega2 = float(y @ y) + y.size
    viol = [
        np.max((block.rho * A).sum(axis=1) - block.s - block.z),
        np.max(-block.s - block.z),
        np.max(-block.s),
        np.max((block.rho**2).sum(axis=1) * omega2 - block.lam**2) / max(1.0, block.lam**2),
        np.max(np.abs(block.rho.sum(axis=1) - 1.0)),
        np.max(-block.rho),
        -block.lam,
    ]
    return float(max(viol))


@dataclass(frozen=True)
class RiskBlock:
    """Variables and constraints of one risk block for the full-space NLP."""

    variables: tuple
    constraints: tuple
    position: str
    prefix: str
    N: int
    m: int

    def blocks(self):
        return (*self.variables, *self.constraints)

    def names(self):
        p = self.prefix
        return {"z": f"{p}z", "lam": f"{p}lam", "s": f"{p}s", "rho": f"{p}rho"}


def _risk_block(samples, spec: RiskSpec, step_index: int, position: str, tag: str, robust: bool,
                init: DrDecisionBlock | None):
    C, D = _as_arrays(samples)
    N, m, ny = C.shape
    p = f"risk{tag}_{step_index}_"
    zn, ln, sn, rn = f"{p}z", f"{p}lam", f"{p}s", f"{p}rho"
    if init is None:
        init = DrDecisionBlock(0.0, 1.0, np.zeros(N), np.full((N, m), 1.0 / m))
    variables = [VariableBlock(zn, 1, init=init.z), VariableBlock(sn, N, lower=0.0, init=init.s),
                 VariableBlock(rn, N * m, lower=0.0, init=init.rho.ravel())]
    if robust:
        variables.insert(1, VariableBlock(ln, 1, lower=0.0, upper=LAMBDA_CAP, init=init.lam))
    tail = 1.0 - spec.alpha
    eye_n = np.eye(N)

    def budget(xs):
        val = xs[zn][0] + xs[sn].mean() / tail - spec.delta
        if robust:
            val += xs[ln][0] * spec.theta / tail
        return np.array([val])

    def budget_jac(xs):
        out = {zn: np.ones((1, 1)), sn: np.full((1, N), 1.0 / (N * tail))}
        if robust:
            out[ln] = np.full((1, 1), spec.theta / tail)
        return out

    def hinge(xs):
        rho = xs[rn].reshape(N, m)
        A = signed_distances(C, D, xs[position])
        return (rho * A).sum(axis=1) - xs[sn] - xs[zn][0]

    def hinge_jac(xs):
        rho = xs[rn].reshape(N, m)
        A = signed_distances(C, D, xs[position])
        Jr = np.zeros((N, N * m))
        for i in range(N):
            Jr[i, i * m:(i + 1) * m] = A[i]
        return {rn: Jr, sn: -eye_n, zn: -np.ones((N, 1)), position: np.einsum("ij,ijk->ik", rho, C)}

    def floor(xs):
        return -xs[sn] - xs[zn][0]

    def floor_jac(xs):
        return {sn: -eye_n, zn: -np.ones((N, 1))}

    def ball(xs):
        rho = xs[rn].reshape(N, m)
        y = xs[position]
        return (rho**2).sum(axis=1) * (y @ y + ny) - xs[ln][0] ** 2

    def ball_jac(xs):
        rho = xs[rn].reshape(N, m)
        y = xs[position]
        Jr = np.zeros((N, N * m))
        for i in range(N):
            Jr[i, i * m:(i + 1) * m] = 2.0 * rho[i] * (y @ y + ny)
        return {rn: Jr, ln: np.full((N, 1), -2.0 * xs[ln][0]),
                position: np.outer((rho**2).sum(axis=1), 2.0 * y)}

    def simplex(xs):
        return xs[rn].reshape(N, m).sum(axis=1) - 1.0

    simplex_J = np.kron(eye_n, np.ones((1, m)))

    def simplex_jac(xs):
        return {rn: simplex_J}

    budget_vars = (zn, sn, ln) if robust else (zn, sn)
    constraints = [
        ConstraintBlock(f"{p}budget", "ineq", 1, budget_vars, budget, budget_jac),
        ConstraintBlock(f"{p}hinge", "ineq", N, (rn, sn, zn, position), hinge, hinge_jac),
        ConstraintBlock(f"{p}floor", "ineq", N, (sn, zn), floor, floor_jac),
    ]
    if robust:
        constraints.append(ConstraintBlock(f"{p}ball", "ineq", N, (rn, ln, position), ball, ball_jac))
    constraints.append(ConstraintBlock(f"{p}simplex", "eq", N, (rn,), simplex, simplex_jac))
    return RiskBlock(tuple(variables), tuple(constraints), position, p, N, m)


def build_dr_constraint_block(samples, spec: RiskSpec, step_index: int, position: str = "y_1",
                              tag: str = "", init: DrDecisionBlock | None = None) -> RiskBlock:
    """Risk block with variables ``z, lam, s, rho`` and the robot position symbolic.

    Constraint rows: 1 budget, N hinge, N floor (``s + z >= 0``), N ball and
    N simplex equalities; ``s >= 0``, ``rho >= 0``, ``lam >= 0`` are bounds.
    """
    return _risk_block(samples, spec, step_index, position, tag, True, init)


def build_saa_constraint_block(samples, spec: RiskSpec, step_index: int, position: str = "y_1",
                               tag: str = "", init: DrDecisionBlock | None = None) -> RiskBlock:
    """Sample-average CVaR block: the robust block without ``lam`` and the ball rows.

    ``rho_i`` on the simplex is the smooth epigraph of ``min_j`` of the face
    distances.
    """
    return _risk_block(samples, spec, step_index, position, tag, False, init)
