"""Small smooth NLP layer: named variable blocks, callback constraints, a
local solver and a finite-difference derivative checker.

Inequalities use the convention ``h(x) <= 0``; equalities ``c(x) == 0``.
Callbacks receive a mapping from block name to the current values of that
block and return values (and Jacobians keyed by block name).
"""
from __future__ import annotations

import io
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.optimize import lsq_linear, minimize

from .errors import InvalidArgument

STATUSES = ("optimal-local", "infeasible", "max-iter", "numeric-failure")


@dataclass(frozen=True)
class VariableBlock:
    name: str
    size: int
    lower: np.ndarray = None
    upper: np.ndarray = None
    init: np.ndarray = None

    def __post_init__(self):
        if self.size < 1:
            raise InvalidArgument(f"block {self.name!r} must have positive size")
        for attr, fill in (("lower", -np.inf), ("upper", np.inf), ("init", 0.0)):
            val = getattr(self, attr)
            arr = np.full(self.size, fill) if val is None else np.broadcast_to(np.asarray(val, dtype=float).ravel(), (self.size,)).copy()
            object.__setattr__(self, attr, arr)
        if np.any(self.lower > self.upper):
            raise InvalidArgument(f"block {self.name!r} has lower > upper")


@dataclass(frozen=True)
class ConstraintBlock:
    """Vector constraint over a subset of variable blocks.

    ``jac`` returns a dict mapping each referenced block name to a dense
    ``(size, block_size)`` array.
    """

    name: str
    kind: str
    size: int
    variables: tuple
    fun: Callable
    jac: Callable

    def __post_init__(self):
        if self.kind not in ("eq", "ineq"):
            raise InvalidArgument(f"constraint {self.name!r}: kind must be 'eq' or 'ineq'")
        object.__setattr__(self, "variables", tuple(self.variables))


@dataclass(frozen=True)
class ObjectiveBlock:
    name: str
    variables: tuple
    fun: Callable
    grad: Callable

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))


@dataclass
class NLSolution:
    point: np.ndarray
    objective_value: float
    status: str
    kkt_residual: float
    max_violation: float
    iterations: int
    wall_time: float
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal-local"


class NLProblem:
    """Assembled problem with flat-vector evaluation of all callbacks."""

    def __init__(self, variables, objectives, constraints, initial_point=None):
        self.variables = tuple(variables)
        self.objectives = tuple(objectives)
        self.constraints = tuple(constraints)
        self.slices = {}
        off = 0
        for v in self.variables:
            self.slices[v.name] = slice(off, off + v.size)
            off += v.size
        self.n = off
        self.lower = np.concatenate([v.lower for v in self.variables])
        self.upper = np.concatenate([v.upper for v in self.variables])
        x0 = np.concatenate([v.init for v in self.variables])
        if initial_point is not None:
            x0 = np.asarray(initial_point, dtype=float).ravel()
            if x0.size != self.n:
                raise InvalidArgument(f"initial point has size {x0.size}, expected {self.n}")
        self.initial_point = x0
        self.eq = tuple(c for c in self.constraints if c.kind == "eq")
        self.ineq = tuple(c for c in self.constraints if c.kind == "ineq")
        self.n_eq = sum(c.size for c in self.eq)
        self.n_ineq = sum(c.size for c in self.ineq)

    def with_initial_point(self, x0) -> "NLProblem":
        return NLProblem(self.variables, self.objectives, self.constraints, x0)

    def split(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        return {name: x[s] for name, s in self.slices.items()}

    def join(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        x = self.initial_point.copy()
        for name, val in values.items():
            x[self.slices[name]] = np.asarray(val, dtype=float).ravel()
        return x

    def objective(self, x) -> float:
        xs = self.split(x)
        return float(sum(o.fun(xs) for o in self.objectives))

    def gradient(self, x) -> np.ndarray:
        xs = self.split(x)
        g = np.zeros(self.n)
        for o in self.objectives:
            for name, part in o.grad(xs).items():
                g[self.slices[name]] += np.asarray(part, dtype=float).ravel()
        return g

    def _values(self, cons, x):
        if not cons:
            return np.zeros(0)
        xs = self.split(x)
        out = []
        for c in cons:
            val = np.asarray(c.fun(xs), dtype=float).ravel()
            if val.size != c.size:
                raise InvalidArgument(f"constraint {c.name!r} returned {val.size} values, declared {c.size}")
            out.append(val)
        return np.concatenate(out)

    def _jacobian(self, cons, x):
        total = sum(c.size for c in cons)
        J = np.zeros((total, self.n))
        if not cons:
            return J
        xs = self.split(x)
        row = 0
        for c in cons:
            for name, part in c.jac(xs).items():
                J[row:row + c.size, self.slices[name]] += np.asarray(part, dtype=float).reshape(c.size, -1)
            row += c.size
        return J

    def eq_values(self, x):
        return self._values(self.eq, x)

    def ineq_values(self, x):
        return self._values(self.ineq, x)

    def eq_jacobian(self, x):
        return self._jacobian(self.eq, x)

    def ineq_jacobian(self, x):
        return self._jacobian(self.ineq, x)

    def max_violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        parts = [0.0]
        if self.n_eq:
            parts.append(np.abs(self.eq_values(x)).max())
        if self.n_ineq:
            parts.append(self.ineq_values(x).max())
        parts.append((self.lower - x).max(initial=0.0))
        parts.append((x - self.upper).max(initial=0.0))
        return float(max(parts))

    def constraint_counts(self) -> dict:
        return {c.name: c.size for c in self.constraints}


def assemble(blocks: Iterable, initial_point=None) -> NLProblem:
    """Build an :class:`NLProblem` from a flat or nested list of blocks.

    Anything with a ``blocks()`` method (e.g. a risk block) is expanded.
    """
    variables, objectives, constraints = [], [], []

    def visit(item):
        if isinstance(item, VariableBlock):
            variables.append(item)
        elif isinstance(item, ObjectiveBlock):
            objectives.append(item)
        elif isinstance(item, ConstraintBlock):
            constraints.append(item)
        elif hasattr(item, "blocks"):
            for sub in item.blocks():
                visit(sub)
        elif isinstance(item, (list, tuple)):
            for sub in item:
                visit(sub)
        else:
            raise InvalidArgument(f"cannot assemble object of type {type(item).__name__}")

    visit(list(blocks))
    names = [v.name for v in variables]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise InvalidArgument(f"duplicate variable names: {sorted(dupes)}")
    known = set(names)
    for item in (*objectives, *constraints):
        missing = [v for v in item.variables if v not in known]
        if missing:
            raise InvalidArgument(f"{item.name!r} references unknown variable blocks {missing}")
    return NLProblem(variables, objectives, constraints, initial_point)


def _kkt_residual(problem: NLProblem, x, active_tol):
    """Scaled stationarity residual with least-squares multipliers.

    Multipliers of active inequalities and bounds are sign-constrained, so the
    residual is the distance of ``-grad f`` from the cone spanned by the
    active constraint normals plus the equality normals.
    """
    g = problem.gradient(x)
    cols, lo, hi = [], [], []
    if problem.n_eq:
        Je = problem.eq_jacobian(x)
        cols.append(Je.T)
        lo += [-np.inf] * Je.shape[0]
        hi += [np.inf] * Je.shape[0]
    if problem.n_ineq:
        h = problem.ineq_values(x)
        act = h >= -active_tol
        if act.any():
            Ji = problem.ineq_jacobian(x)[act]
            cols.append(Ji.T)
            lo += [0.0] * Ji.shape[0]
            hi += [np.inf] * Ji.shape[0]
    scale_b = np.maximum(1.0, np.abs(problem.lower))
    at_lo = np.flatnonzero(np.isfinite(problem.lower) & (x - problem.lower <= active_tol * scale_b))
    scale_b = np.maximum(1.0, np.abs(problem.upper))
    at_hi = np.flatnonzero(np.isfinite(problem.upper) & (problem.upper - x <= active_tol * scale_b))
    eye = np.eye(problem.n)
    if at_lo.size:
        cols.append(-eye[:, at_lo])
        lo += [0.0] * at_lo.size
        hi += [np.inf] * at_lo.size
    if at_hi.size:
        cols.append(eye[:, at_hi])
        lo += [0.0] * at_hi.size
        hi += [np.inf] * at_hi.size
    scale = max(1.0, float(np.abs(g).max(initial=0.0)))
    if not cols:
        return float(np.abs(g).max(initial=0.0)) / scale
    A = np.hstack(cols)
    res = lsq_linear(A, -g, bounds=(np.array(lo), np.array(hi)), method="bvls", tol=1e-14, max_iter=2000)
    r = A @ res.x + g
    return float(np.abs(r).max()) / scale


def solve_local(problem: NLProblem, tol: float = 1e-6, feas_tol: float = 1e-6, max_iter: int = 200,
                active_tol: float = 1e-5, restarts: int = 3) -> NLSolution:
    """Local solve with SLSQP, then an independent KKT and feasibility audit.

    ``optimal-local`` is reported only when the audited stationarity residual
    (scaled by ``max(1, |grad f|_inf)``) is within ``tol`` and the maximum
    constraint violation within ``feas_tol``.
    """
    t0 = time.perf_counter()
    cons = []
    if problem.n_eq:
        cons.append({"type": "eq", "fun": problem.eq_values, "jac": problem.eq_jacobian})
    if problem.n_ineq:
        cons.append({"type": "ineq", "fun": lambda x: -problem.ineq_values(x),
                     "jac": lambda x: -problem.ineq_jacobian(x)})
    bounds = list(zip(np.where(np.isfinite(problem.lower), problem.lower, None),
                      np.where(np.isfinite(problem.upper), problem.upper, None)))
    x0 = np.clip(problem.initial_point, problem.lower, problem.upper)
    nit = 0
    try:
        x = x0
        for attempt in range(1 + restarts):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = minimize(problem.objective, x, jac=problem.gradient, method="SLSQP", bounds=bounds,
                               constraints=cons, options={"maxiter": max(max_iter - nit, 1), "ftol": 1e-12})
            nit += int(res.nit)
            x = np.clip(res.x, problem.lower, problem.upper)
            fval = problem.objective(x)
            if not np.all(np.isfinite(x)) or not np.isfinite(fval):
                raise FloatingPointError("non-finite iterate")
            viol = problem.max_violation(x)
            kkt = _kkt_residual(problem, x, active_tol)
            # SLSQP's stopping test is on the objective change; restart it from
            # its own point when the audit is not yet satisfied
            if (kkt <= tol and viol <= feas_tol) or nit >= max_iter or res.status not in (0, 8):
                break
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        return NLSolution(np.asarray(x0, dtype=float), float("nan"), "numeric-failure", float("inf"),
                          float("inf"), nit, time.perf_counter() - t0, str(exc))
    if viol > feas_tol:
        status = "infeasible"
    elif kkt <= tol:
        status = "optimal-local"
    elif res.status == 9 or nit >= max_iter:
        status = "max-iter"
    else:
        status = "numeric-failure"
    return NLSolution(x, fval, status, kkt, viol, nit, time.perf_counter() - t0, str(res.message))


def check_derivatives(problem: NLProblem, point, step: float = 1e-6) -> float:
    """Worst absolute gap between analytic and central-difference derivatives."""
    x = np.asarray(point, dtype=float).copy()
    worst = 0.0
    pairs = [(problem.objective, problem.gradient)]
    if problem.n_eq:
        pairs.append((problem.eq_values, problem.eq_jacobian))
    if problem.n_ineq:
        pairs.append((problem.ineq_values, problem.ineq_jacobian))
    for fun, jac in pairs:
        J = np.atleast_2d(jac(x))
        if J.shape[0] != np.atleast_1d(fun(x)).size:
            J = J.reshape(1, -1)
        fd = np.empty_like(J)
        for i in range(problem.n):
            xp = x.copy()
            xm = x.copy()
            xp[i] += step
            xm[i] -= step
            fd[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2 * step)
        worst = max(worst, float(np.abs(fd - J).max(initial=0.0)))
    return worst


def dump(problem: NLProblem, point=None) -> str:
    """Plain-text listing of blocks, bounds and constraint values at ``point``."""
    x = problem.initial_point if point is None else np.asarray(point, dtype=float)
    xs = problem.split(x)
    out = io.StringIO()
    out.write(f"# variables: {problem.n}  eq: {problem.n_eq}  ineq: {problem.n_ineq}\n")
    out.write(f"objective {problem.objective(x):.17g}\n")
    for v in problem.variables:
        out.write(f"var {v.name} size={v.size}\n")
        for i in range(v.size):
            out.write(f"  [{i}] lo={v.lower[i]:.6g} hi={v.upper[i]:.6g} val={xs[v.name][i]:.17g}\n")
    for c in problem.constraints:
        vals = np.asarray(c.fun(xs), dtype=float).ravel()
        rel = "==" if c.kind == "eq" else "<="
        out.write(f"con {c.name} {rel} 0 size={c.size} vars={','.join(c.variables)}\n")
        for i, val in enumerate(vals):
            out.write(f"  [{i}] {val:.17g}\n")
    return out.getvalue()
