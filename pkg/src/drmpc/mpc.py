"""Receding-horizon controller with sampled obstacle-risk constraints.

Per stage: update each obstacle's GP window, refit, propagate the belief over
the horizon, draw ``N`` obstacle states per horizon step, turn them into
normalised half-spaces and solve the tracking NLP subject to one risk
constraint per (horizon step, obstacle).

Two equivalent problem layouts are provided:

``reduced`` (default)
    Decision variables are the ``K`` control inputs; states are rolled out
    inside the callbacks and each risk constraint is the exact worst-case
    CVaR bound ``V(y_k) <= delta`` from :func:`drmpc.risk.dr_bound`, whose
    inner variables are optimal in closed form.
``fullspace``
    The literal program with inputs, states, outputs and every risk block's
    ``z, lam, s, rho`` as variables. It has thousands of variables at the
    default sizes and is meant for small instances and cross-checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import gp as gpmod
from .errors import InvalidArgument
from .nlp import ConstraintBlock, NLProblem, NLSolution, ObjectiveBlock, VariableBlock, assemble, solve_local
from .predict import GaussianBelief, ObstacleGeometry, halfspace_arrays, propagate_horizon, sample_states, samples_to_arrays
from .risk import RiskSpec, build_dr_constraint_block, build_saa_constraint_block, dr_bound
from .vehicle import VehicleParams, bicycle_jacobians, bicycle_update

NU, NXI, NY = 2, 4, 2
KINDS = ("drmpc", "saa")
BACKENDS = ("reduced", "fullspace")
FALLBACKS = ("brake", "strict")


def _default_gp():
    return (gpmod.GPHyperparams((25.0, 25.0, 1.0), 4.0, 1e-4),) * 3


@dataclass(frozen=True)
class MPCConfig:
    """Controller settings. ``risk.N`` is the number of samples per step."""

    K: int = 5
    T_s: float = 0.01
    T_o: float = 0.01
    Q: np.ndarray = field(default_factory=lambda: np.eye(2))
    R: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(2))
    P: np.ndarray = field(default_factory=lambda: np.eye(2))
    risk: RiskSpec = field(default_factory=lambda: RiskSpec(0.95, 0.01, 5e-5, 50))
    M: int = 20
    controller_kind: str = "drmpc"
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    gp_hyper: tuple = field(default_factory=_default_gp)
    backend: str = "reduced"
    tol: float = 1e-6
    feas_tol: float = 1e-6
    max_iter: int = 200
    fallback: str = "brake"
    zero_fill_window: bool = False

    def __post_init__(self):
        for name in ("Q", "R", "P"):
            W = np.asarray(getattr(self, name), dtype=float)
            if W.shape != (2, 2) or not np.allclose(W, W.T):
                raise InvalidArgument(f"{name} must be a symmetric 2x2 matrix")
            object.__setattr__(self, name, W)
        if self.K < 1:
            raise InvalidArgument("K must be >= 1")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12 or np.linalg.eigvalsh(self.P).min() < -1e-12:
            raise InvalidArgument("Q and P must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise InvalidArgument("R must be positive definite")
        if self.T_s <= 0 or self.T_o <= 0:
            raise InvalidArgument("sampling times must be positive")
        if self.M < 1:
            raise InvalidArgument("M must be >= 1")
        if self.controller_kind not in KINDS:
            raise InvalidArgument(f"controller_kind must be one of {KINDS}")
        if self.backend not in BACKENDS:
            raise InvalidArgument(f"backend must be one of {BACKENDS}")
        if self.fallback not in FALLBACKS:
            raise InvalidArgument(f"fallback must be one of {FALLBACKS}")
        object.__setattr__(self, "gp_hyper", tuple(self.gp_hyper))

    @property
    def N(self) -> int:
        return int(self.risk.N)

    @property
    def effective_theta(self) -> float:
        return self.risk.theta if self.controller_kind == "drmpc" else 0.0


@dataclass(frozen=True)
class ObstacleObservation:
    """Current obstacle state plus the newest training pair (if any)."""

    state: np.ndarray
    geometry: ObstacleGeometry
    train_state: np.ndarray | None = None
    train_velocity: np.ndarray | None = None


@dataclass
class ControllerState:
    gp_windows: list
    previous_solution: NLSolution | None = None
    stage: int = 0
    seed: int = 0
    previous_shape: tuple | None = None

    @classmethod
    def initial(cls, n_obstacles: int, cfg: MPCConfig, seed: int = 0) -> "ControllerState":
        return cls([gpmod.GPDataset(cfg.M) for _ in range(n_obstacles)], seed=seed)


@dataclass
class StepDiagnostics:
    status: str
    objective: float
    risk_lhs: np.ndarray
    solve_time: float
    iterations: int
    kkt_residual: float
    fallback_used: bool
    plan: np.ndarray


class ControllerAbort(RuntimeError):
    """Raised in strict mode when the NLP has no acceptable solution."""

    def __init__(self, diag: StepDiagnostics):
        super().__init__(f"controller step failed with status {diag.status}")
        self.diagnostics = diag


# ---------------------------------------------------------------------------
# rollout and tracking cost
# ---------------------------------------------------------------------------


def rollout(xi0, U, vp: VehicleParams, T: float):
    """States ``(K+1, 4)`` and sensitivities ``d xi_k / d U`` of shape ``(K+1, 4, 2K)``."""
    U = np.asarray(U, dtype=float).reshape(-1, NU)
    K = U.shape[0]
    Xi = np.empty((K + 1, NXI))
    S = np.zeros((K + 1, NXI, NU * K))
    Xi[0] = xi0
    for k in range(K):
        A, B = bicycle_jacobians(Xi[k], U[k], vp, T)
        Xi[k + 1] = bicycle_update(Xi[k], U[k], vp, T)
        S[k + 1] = A @ S[k]
        S[k + 1][:, NU * k:NU * (k + 1)] += B
    return Xi, S


@dataclass(frozen=True)
class TrackingCost:
    """Quadratic tracking cost over outputs ``y_0..y_K`` and inputs ``u_0..u_{K-1}``."""

    ref: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray

    @property
    def K(self) -> int:
        return self.ref.shape[0] - 1

    def _weights(self):
        return [self.Q] * self.K + [self.P]

    def value(self, Y, U) -> float:
        E = np.asarray(Y, dtype=float) - self.ref
        U = np.asarray(U, dtype=float).reshape(-1, NU)
        W = self._weights()
        return float(sum(E[k] @ W[k] @ E[k] for k in range(self.K + 1)) + sum(u @ self.R @ u for u in U))

    def gradient(self, Y, U):
        E = np.asarray(Y, dtype=float) - self.ref
        U = np.asarray(U, dtype=float).reshape(-1, NU)
        W = self._weights()
        gY = np.stack([2.0 * W[k] @ E[k] for k in range(self.K + 1)])
        gU = 2.0 * U @ self.R
        return gY, gU


def build_cost(ref_path, weights) -> TrackingCost:
    """Tracking cost for a ``(K+1, 2)`` reference; ``weights`` is ``(Q, R, P)`` or an MPCConfig."""
    if isinstance(weights, MPCConfig):
        Q, R, P = weights.Q, weights.R, weights.P
        K = weights.K
    else:
        Q, R, P = (np.asarray(w, dtype=float) for w in weights)
        K = None
    ref = np.asarray(ref_path, dtype=float)
    if ref.ndim != 2 or ref.shape[1] != NY or ref.shape[0] < 2:
        raise InvalidArgument("reference must have shape (K+1, 2) with K >= 1")
    if K is not None and ref.shape[0] != K + 1:
        raise InvalidArgument(f"reference has {ref.shape[0]} points, expected K+1 = {K + 1}")
    return TrackingCost(ref, Q, R, P)


# ---------------------------------------------------------------------------
# reduced problem: controls only
# ---------------------------------------------------------------------------


def _input_bounds(cfg, K):
    return np.tile(cfg.vehicle.lower, K), np.tile(cfg.vehicle.upper, K)


def build_reduced(xi_t, risk_arrays, ref_path, cfg: MPCConfig, u_init=None) -> NLProblem:
    """Controls-only problem.

    ``risk_arrays[o][k]`` is the ``(C, D)`` pair of obstacle ``o`` at horizon
    step ``k + 1``.
    """
    cost = build_cost(ref_path, cfg)
    K = cfg.K
    xi_t = np.asarray(xi_t, dtype=float)
    theta, alpha, delta = cfg.effective_theta, cfg.risk.alpha, cfg.risk.delta
    L = len(risk_arrays)
    cache = {}

    def evaluate(u):
        key = u.tobytes()
        hit = cache.get("key")
        if hit is not None and hit == key:
            return cache["val"]
        Xi, S = rollout(xi_t, u, cfg.vehicle, cfg.T_s)
        Y = Xi[:, :NY]
        gY, gU = cost.gradient(Y, u)
        J = cost.value(Y, u)
        gJ = gU.ravel() + np.einsum("ki,kij->j", gY, S[:, :NY, :])
        h = np.empty(K * L)
        Jh = np.empty((K * L, NU * K))
        row = 0
        for k in range(1, K + 1):
            for o in range(L):
                C, D = risk_arrays[o][k - 1]
                b = dr_bound(C, D, Y[k], theta, alpha)
                h[row] = b.value - delta
                Jh[row] = b.gradient @ S[k, :NY, :]
                row += 1
        out = (J, gJ, h, Jh, Xi)
        cache["key"] = key
        cache["val"] = out
        return out

    lo, hi = _input_bounds(cfg, K)
    init = np.clip(np.zeros(NU * K) if u_init is None else np.asarray(u_init, dtype=float).ravel(), lo, hi)
    blocks = [
        VariableBlock("u", NU * K, lower=lo, upper=hi, init=init),
        ObjectiveBlock("tracking", ("u",), lambda xs: evaluate(xs["u"])[0], lambda xs: {"u": evaluate(xs["u"])[1]}),
    ]
    if L:
        blocks.append(ConstraintBlock("risk", "ineq", K * L, ("u",), lambda xs: evaluate(xs["u"])[2],
                                      lambda xs: {"u": evaluate(xs["u"])[3]}))
    prob = assemble(blocks)
    prob.rollout = evaluate
    return prob


# ---------------------------------------------------------------------------
# full-space problem
# ---------------------------------------------------------------------------


def _fullspace(xi_t, samples, ref_path, cfg: MPCConfig, robust: bool, init=None) -> NLProblem:
    cost = build_cost(ref_path, cfg)
    K = cfg.K
    vp, T = cfg.vehicle, cfg.T_s
    xi_t = np.asarray(xi_t, dtype=float)
    lo, hi = cfg.vehicle.lower, cfg.vehicle.upper
    init = init or {}
    blocks = []
    U0 = init.get("u", np.zeros((K, NU)))
    Xi0, _ = rollout(xi_t, U0, vp, T)
    for k in range(K):
        blocks.append(VariableBlock(f"u_{k}", NU, lower=lo, upper=hi, init=np.clip(U0[k], lo, hi)))
    for k in range(K + 1):
        blocks.append(VariableBlock(f"xi_{k}", NXI, init=init.get(f"xi_{k}", Xi0[k])))
        blocks.append(VariableBlock(f"y_{k}", NY, init=init.get(f"y_{k}", Xi0[k, :NY])))
    blocks.append(ConstraintBlock("initial", "eq", NXI, ("xi_0",), lambda xs: xs["xi_0"] - xi_t,
                                  lambda xs: {"xi_0": np.eye(NXI)}))
    for k in range(K):
        a, b, c = f"xi_{k}", f"u_{k}", f"xi_{k + 1}"

        def dyn(xs, a=a, b=b, c=c):
            return xs[c] - bicycle_update(xs[a], xs[b], vp, T)

        def dyn_jac(xs, a=a, b=b, c=c):
            A, B = bicycle_jacobians(xs[a], xs[b], vp, T)
            return {c: np.eye(NXI), a: -A, b: -B}

        blocks.append(ConstraintBlock(f"dynamics_{k}", "eq", NXI, (a, b, c), dyn, dyn_jac))
    Cy = np.hstack([np.eye(NY), np.zeros((NY, NXI - NY))])
    for k in range(K + 1):
        a, c = f"xi_{k}", f"y_{k}"
        blocks.append(ConstraintBlock(f"output_{k}", "eq", NY, (a, c),
                                      lambda xs, a=a, c=c: xs[c] - Cy @ xs[a],
                                      lambda xs, a=a, c=c: {c: np.eye(NY), a: -Cy}))
    unames = [f"u_{k}" for k in range(K)]
    ynames = [f"y_{k}" for k in range(K + 1)]

    def obj(xs):
        return cost.value(np.stack([xs[n] for n in ynames]), np.stack([xs[n] for n in unames]))

    def obj_grad(xs):
        gY, gU = cost.gradient(np.stack([xs[n] for n in ynames]), np.stack([xs[n] for n in unames]))
        out = {n: gY[k] for k, n in enumerate(ynames)}
        out.update({n: gU[k] for k, n in enumerate(unames)})
        return out

    blocks.append(ObjectiveBlock("tracking", (*ynames, *unames), obj, obj_grad))
    spec = cfg.risk if robust else replace(cfg.risk, theta=0.0)
    for o, per_step in enumerate(samples):
        if len(per_step) != K:
            raise InvalidArgument(f"obstacle {o}: expected {K} sample sets, got {len(per_step)}")
        for k in range(1, K + 1):
            smp = per_step[k - 1]
            C, D = smp if isinstance(smp, tuple) else samples_to_arrays(smp)
            y_guess = init.get(f"y_{k}", Xi0[k, :NY])
            inner = dr_bound(C, D, y_guess, spec.theta, spec.alpha).block
            builder = build_dr_constraint_block if robust else build_saa_constraint_block
            blocks.append(builder((C, D), spec, k, position=f"y_{k}", tag=f"o{o}", init=inner))
    return assemble(blocks)


def build_drmpc(xi_t, beliefs, samples, ref_path, cfg: MPCConfig, init=None) -> NLProblem:
    """Full-space robust problem. ``samples[o][k]`` holds the samples for step ``k + 1``.

    ``beliefs[o]`` is the list of predicted beliefs the samples came from;
    it only serves as a shape check.
    """
    _check_beliefs(beliefs, samples, cfg)
    return _fullspace(xi_t, samples, ref_path, cfg, True, init)


def build_saampc(xi_t, beliefs, samples, ref_path, cfg: MPCConfig, init=None) -> NLProblem:
    """Full-space sample-average problem (hinge epigraph, no ambiguity radius)."""
    _check_beliefs(beliefs, samples, cfg)
    return _fullspace(xi_t, samples, ref_path, cfg, False, init)


def _check_beliefs(beliefs, samples, cfg):
    if beliefs is None:
        return
    if len(beliefs) != len(samples) or any(len(b) != cfg.K for b in beliefs):
        raise InvalidArgument("beliefs must provide K entries per obstacle")


def risk_lhs_fullspace(problem: NLProblem, x, cfg: MPCConfig, n_obstacles: int) -> np.ndarray:
    """Budget-constraint left-hand sides ``(K, L)`` read from full-space variables."""
    xs = problem.split(x)
    tail = 1.0 - cfg.risk.alpha
    out = np.empty((cfg.K, n_obstacles))
    for o in range(n_obstacles):
        for k in range(1, cfg.K + 1):
            p = f"risk{'o%d' % o}_{k}_"
            val = xs[p + "z"][0] + xs[p + "s"].mean() / tail
            if p + "lam" in xs:
                val += xs[p + "lam"][0] * cfg.risk.theta / tail
            out[k - 1, o] = val
    return out


# ---------------------------------------------------------------------------
# warm start
# ---------------------------------------------------------------------------


def shift_controls(U, K: int) -> np.ndarray:
    U = np.asarray(U, dtype=float).reshape(-1, NU)
    if U.shape[0] != K:
        raise InvalidArgument("control block has the wrong length")
    return np.vstack([U[1:], U[-1:]])


def warm_start(prev: NLSolution | None, cfg: MPCConfig, shape=None, current_shape=None):
    """Initial controls (``(K, 2)`` array) shifted from the previous plan.

    A missing plan or a change of problem shape (``shape`` vs
    ``current_shape``) gives ``None``, meaning a cold start.
    """
    if prev is None or prev.point is None:
        return None
    if shape is not None and current_shape is not None and shape != current_shape:
        return None
    plan = getattr(prev, "plan", None)
    if plan is None:
        return None
    try:
        return shift_controls(plan, cfg.K)
    except InvalidArgument:
        return None


# ---------------------------------------------------------------------------
# one controller stage
# ---------------------------------------------------------------------------


def sample_rng(seed: int, stage: int, obstacle: int) -> np.random.Generator:
    """Stage- and obstacle-indexed stream derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stage), int(obstacle)]))


def predict_obstacle(window: gpmod.GPDataset, state, geom: ObstacleGeometry, cfg: MPCConfig, rng):
    """Fit, propagate, sample. Returns beliefs and ``K`` ``(C, D)`` pairs."""
    model = gpmod.fit(window, cfg.gp_hyper, n_out=len(cfg.gp_hyper), zero_fill_window=cfg.zero_fill_window)
    beliefs = propagate_horizon(GaussianBelief.point(state), model, cfg.K, cfg.T_o)
    arrays = []
    for b in beliefs:
        X = sample_states(b, cfg.N, rng)
        arrays.append(halfspace_arrays(geom, X))
    return beliefs, arrays


def step(cs: ControllerState, xi_t, observations: Sequence[ObstacleObservation], ref_window, cfg: MPCConfig):
    """Run one stage and return ``(u, diagnostics)``; ``cs`` is updated in place."""
    xi_t = np.asarray(xi_t, dtype=float)
    if len(observations) != len(cs.gp_windows):
        raise InvalidArgument("number of observations does not match the controller's windows")
    arrays, beliefs = [], []
    for o, obs in enumerate(observations):
        if obs.train_state is not None:
            cs.gp_windows[o] = gpmod.update_window(cs.gp_windows[o], obs.train_state, obs.train_velocity)
        b, arr = predict_obstacle(cs.gp_windows[o], obs.state, obs.geometry, cfg, sample_rng(cs.seed, cs.stage, o))
        beliefs.append(b)
        arrays.append(arr)
    shape = (cfg.backend, cfg.K, cfg.N, len(observations))
    u0 = warm_start(cs.previous_solution, cfg, cs.previous_shape, shape)
    if cfg.backend == "reduced":
        prob = build_reduced(xi_t, arrays, ref_window, cfg, u_init=u0)
    else:
        init = {"u": u0} if u0 is not None else None
        builder = build_drmpc if cfg.controller_kind == "drmpc" else build_saampc
        prob = builder(xi_t, beliefs, arrays, ref_window, cfg, init=init)
    sol = solve_local(prob, tol=cfg.tol, feas_tol=cfg.feas_tol, max_iter=cfg.max_iter)
    plan = _extract_plan(prob, sol.point, cfg)
    if cfg.backend == "reduced":
        lhs = (prob.rollout(sol.point)[2].reshape(cfg.K, len(observations)) + cfg.risk.delta
               if observations else np.zeros((cfg.K, 0)))
    else:
        lhs = risk_lhs_fullspace(prob, sol.point, cfg, len(observations))
    ok = sol.status == "optimal-local"
    diag = StepDiagnostics(sol.status, sol.objective_value, lhs, sol.wall_time, sol.iterations,
                           sol.kkt_residual, not ok, plan)
    cs.stage += 1
    if ok:
        sol.plan = plan
        cs.previous_solution = sol
        cs.previous_shape = shape
        return plan[0].copy(), diag
    cs.previous_solution = None
    if cfg.fallback == "strict":
        raise ControllerAbort(diag)
    return np.zeros(NU), diag


def _extract_plan(prob: NLProblem, x, cfg):
    xs = prob.split(x)
    if "u" in xs:
        return xs["u"].reshape(cfg.K, NU).copy()
    return np.stack([xs[f"u_{k}"] for k in range(cfg.K)])
