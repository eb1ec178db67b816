"""Per-dimension Gaussian process regression of the obstacle velocity field.

Each output dimension is an independent GP with an RBF kernel and a constant
prior mean; all outputs share the same window of input states.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import InvalidArgument, NumericFailure

JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class GPHyperparams:
    """Hyperparameters of one output GP.

    ``length_scales`` are the diagonal entries of the length-scale matrix
    ``L`` in ``k(x, x') = sf2 * exp(-0.5 (x - x')^T L^{-1} (x - x'))``, so they
    carry squared input units.
    """

    length_scales: tuple
    signal_variance: float
    noise_variance: float
    prior_mean: float = 0.0

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        object.__setattr__(self, "length_scales", ls)
        if not ls or any(v <= 0 for v in ls):
            raise InvalidArgument("length_scales must be positive")
        if self.signal_variance <= 0:
            raise InvalidArgument("signal_variance must be positive")
        if self.noise_variance < 0:
            raise InvalidArgument("noise_variance must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.length_scales)


@dataclass
class GPDataset:
    """Sliding FIFO window of (state, velocity) observations."""

    capacity: int
    inputs: deque = field(default_factory=deque)
    outputs: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise InvalidArgument("capacity must be >= 1")
        if len(self.inputs) != len(self.outputs):
            raise InvalidArgument("inputs and outputs differ in length")
        while len(self.inputs) > self.capacity:
            self.inputs.popleft()
            self.outputs.popleft()

    def __len__(self):
        return len(self.inputs)

    def arrays(self):
        if not self.inputs:
            return np.empty((0, 0)), np.empty((0, 0))
        return np.array(self.inputs, dtype=float), np.array(self.outputs, dtype=float)

    def copy(self) -> "GPDataset":
        return GPDataset(self.capacity, deque(self.inputs), deque(self.outputs))


def update_window(dataset: GPDataset, obs_state, obs_velocity) -> GPDataset:
    """Return a new window with the observation appended (oldest evicted)."""
    x = np.asarray(obs_state, dtype=float).ravel()
    v = np.asarray(obs_velocity, dtype=float).ravel()
    if dataset.inputs:
        if x.size != len(dataset.inputs[0]) or v.size != len(dataset.outputs[0]):
            raise InvalidArgument("observation dimensions do not match the window")
    out = dataset.copy()
    out.inputs.append(x)
    out.outputs.append(v)
    if len(out.inputs) > out.capacity:
        out.inputs.popleft()
        out.outputs.popleft()
    return out


def _as_hypers(hyper, n_out):
    if isinstance(hyper, GPHyperparams):
        return [hyper] * n_out
    hyper = list(hyper)
    if len(hyper) != n_out:
        raise InvalidArgument(f"expected {n_out} hyperparameter sets, got {len(hyper)}")
    return hyper


def kernel_rbf(x, x2, hyper: GPHyperparams) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.size != x2.size or x.size != hyper.dim:
        raise InvalidArgument("dimension mismatch between inputs and length_scales")
    d = x - x2
    return float(hyper.signal_variance * np.exp(-0.5 * np.sum(d * d / np.asarray(hyper.length_scales))))


def kernel_matrix(X, X2, hyper: GPHyperparams) -> np.ndarray:
    inv_l = 1.0 / np.asarray(hyper.length_scales)
    d = X[:, None, :] - X2[None, :, :]
    return hyper.signal_variance * np.exp(-0.5 * np.einsum("ijk,k->ij", d * d, inv_l))


@dataclass(frozen=True)
class _OutputFit:
    hyper: GPHyperparams
    factor: np.ndarray  # lower Cholesky factor of K + noise I + jitter I
    alpha: np.ndarray  # (K + noise I)^{-1} (v - m)
    jitter: float


@dataclass(frozen=True)
class GPModel:
    """Fitted GP, one :class:`_OutputFit` per output dimension.

    An empty window gives a model that answers with the prior.
    """

    X: np.ndarray
    fits: tuple
    hypers: tuple

    @property
    def n_in(self) -> int:
        return self.hypers[0].dim

    @property
    def n_out(self) -> int:
        return len(self.hypers)

    @property
    def is_prior(self) -> bool:
        return self.X.shape[0] == 0


def _cholesky_with_jitter(Kn, sf2):
    jitter = JITTER_START * sf2
    n = Kn.shape[0]
    eye = np.eye(n)
    while jitter <= JITTER_MAX * sf2 * (1 + 1e-12):
        try:
            return np.linalg.cholesky(Kn + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    cond = np.linalg.cond(Kn)
    raise NumericFailure(f"kernel matrix not factorisable up to jitter {JITTER_MAX * sf2:.1e} (cond={cond:.3e})")


def fit(dataset: GPDataset, hyper, *, n_out: int | None = None, zero_fill_window: bool = False) -> GPModel:
    """Factor the kernel matrix of every output GP.

    ``hyper`` is either one :class:`GPHyperparams` shared by all outputs or a
    sequence with one entry per output. With an empty window the returned
    model is the prior unless ``zero_fill_window`` asks for a window of
    ``capacity`` all-zero observations instead.
    """
    X, V = dataset.arrays()
    if X.size == 0:
        if n_out is None:
            n_out = 1 if isinstance(hyper, GPHyperparams) else len(list(hyper))
        hypers = tuple(_as_hypers(hyper, n_out))
        if not zero_fill_window:
            return GPModel(np.empty((0, hypers[0].dim)), (), hypers)
        X = np.zeros((dataset.capacity, hypers[0].dim))
        V = np.zeros((dataset.capacity, n_out))
    hypers = tuple(_as_hypers(hyper, V.shape[1]))
    if X.shape[1] != hypers[0].dim:
        raise InvalidArgument("state dimension does not match length_scales")
    fits = []
    for j, h in enumerate(hypers):
        Kn = kernel_matrix(X, X, h) + h.noise_variance * np.eye(X.shape[0])
        L, jit = _cholesky_with_jitter(Kn, h.signal_variance)
        alpha = cho_solve((L, True), V[:, j] - h.prior_mean)
        fits.append(_OutputFit(h, L, alpha, jit))
    return GPModel(X, tuple(fits), hypers)


def posterior(model: GPModel, x):
    """Posterior mean and variance of every output at state ``x``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != model.n_in:
        raise InvalidArgument("test point dimension mismatch")
    if model.is_prior:
        mean = np.array([h.prior_mean for h in model.hypers])
        var = np.array([h.signal_variance for h in model.hypers])
        return mean, var
    mean = np.empty(model.n_out)
    var = np.empty(model.n_out)
    for j, f in enumerate(model.fits):
        ks = kernel_matrix(x[None, :], model.X, f.hyper)[0]
        mean[j] = f.hyper.prior_mean + ks @ f.alpha
        w = solve_triangular(f.factor, ks, lower=True, check_finite=False)
        v = f.hyper.signal_variance - w @ w
        var[j] = max(v, 0.0)
    return mean, var


def posterior_mean_gradient(model: GPModel, x) -> np.ndarray:
    """Jacobian ``d mean_j / d x_l`` of the posterior mean, shape (n_out, n_in)."""
    x = np.asarray(x, dtype=float).ravel()
    if model.is_prior:
        return np.zeros((model.n_out, model.n_in))
    jac = np.empty((model.n_out, model.n_in))
    for j, f in enumerate(model.fits):
        ks = kernel_matrix(x[None, :], model.X, f.hyper)[0]
        diff = (model.X - x) / np.asarray(f.hyper.length_scales)
        jac[j] = (f.alpha * ks) @ diff
    return jac
