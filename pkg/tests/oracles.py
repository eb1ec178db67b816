"""Independent reference computations used by the tests.

Every oracle here takes a deliberately different route from the library:
dense inverses instead of Cholesky solves, enumeration instead of closed
forms, grids instead of projections, and a conic solver for the
fixed-position bound.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import ConvexHull

from drmpc.predict import ObstaclePolytope


def gp_dense(X, V, x, length_scales, sf2, sn2, prior_mean=0.0, jitter=0.0):
    """Posterior mean and variance of one output from an explicit inverse."""
    X = np.asarray(X, dtype=float)
    Linv = np.diag(1.0 / np.asarray(length_scales, dtype=float))
    n = X.shape[0]
    K = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            d = X[a] - X[b]
            K[a, b] = sf2 * math.exp(-0.5 * d @ Linv @ d)
    ks = np.array([sf2 * math.exp(-0.5 * (x - X[a]) @ Linv @ (x - X[a])) for a in range(n)])
    Kinv = np.linalg.inv(K + (sn2 + jitter) * np.eye(n))
    mean = prior_mean + ks @ Kinv @ (np.asarray(V, dtype=float) - prior_mean)
    var = sf2 - ks @ Kinv @ ks
    return mean, var


def cvar_bruteforce(losses, alpha):
    """min over z in the sample values of z + mean((l - z)^+) / (1 - alpha)."""
    losses = np.asarray(losses, dtype=float)
    best = math.inf
    for z in losses:
        best = min(best, z + np.mean(np.maximum(losses - z, 0.0)) / (1.0 - alpha))
    return best


def in_rectangle(p, center, heading, half_length, half_width):
    """Rotate the point into the body frame and compare with the half sizes."""
    c, s = math.cos(-heading), math.sin(-heading)
    dx, dy = p[0] - center[0], p[1] - center[1]
    bx = c * dx - s * dy
    by = s * dx + c * dy
    return abs(bx) < half_length and abs(by) < half_width


def distance_to_exterior_grid(y, vertices, h):
    """Distance from ``y`` to the polygon boundary sampled every ``h``.

    Returns 0 when ``y`` is outside the polygon (counter-clockwise vertices).
    """
    vertices = np.asarray(vertices, dtype=float)
    n = len(vertices)
    inside = True
    for i in range(n):
        a, b = vertices[i], vertices[(i + 1) % n]
        cross = (b[0] - a[0]) * (y[1] - a[1]) - (b[1] - a[1]) * (y[0] - a[0])
        if cross <= 0:
            inside = False
    if not inside:
        return 0.0
    pts = []
    for i in range(n):
        a, b = vertices[i], vertices[(i + 1) % n]
        k = max(2, int(math.ceil(np.linalg.norm(b - a) / h)) + 1)
        t = np.linspace(0.0, 1.0, k)
        pts.append(a + t[:, None] * (b - a))
    pts = np.vstack(pts)
    return float(np.min(np.linalg.norm(pts - y, axis=1)))


def bicycle_formula(x, y, th, be, v, steer, lf, lr, T):
    """The four kinematic bicycle update equations written out by hand."""
    x1 = x + T * v * math.cos(th + be)
    y1 = y + T * v * math.sin(th + be)
    th1 = th + T * v / lr * math.sin(be)
    be1 = be + T * math.atan(lr / (lf + lr) * math.tan(steer))
    return x1, y1, th1, be1


def dr_bound_grid(C, D, y, theta, alpha, n_grid=1001):
    """Worst-case CVaR bound for N = 2 samples with m = 2 faces by grid search.

    ``rho_i = (p_i, 1 - p_i)`` is gridded; for each grid point ``lam`` is the
    smallest feasible value (the objective grows with ``lam``), ``s`` is the
    smallest feasible slack and ``z`` is enumerated over the kinks of the
    piecewise-linear objective.
    """
    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    assert C.shape[:2] == (2, 2)
    omega = math.sqrt(float(y @ y) + y.size)
    A = C @ y + D  # (2, 2) face values
    p = np.linspace(0.0, 1.0, n_grid)
    P1, P2 = np.meshgrid(p, p, indexing="ij")
    a1 = P1 * A[0, 0] + (1 - P1) * A[0, 1]
    a2 = P2 * A[1, 0] + (1 - P2) * A[1, 1]
    n1 = np.sqrt(P1**2 + (1 - P1) ** 2)
    n2 = np.sqrt(P2**2 + (1 - P2) ** 2)
    lam = omega * np.maximum(n1, n2)
    best = np.full(P1.shape, np.inf)
    tail = 1.0 - alpha
    for z in (np.maximum(a1, 0.0), np.maximum(a2, 0.0), np.zeros_like(a1)):
        s1 = np.maximum(np.maximum(a1 - z, -z), 0.0)
        s2 = np.maximum(np.maximum(a2 - z, -z), 0.0)
        val = z + (lam * theta + 0.5 * (s1 + s2)) / tail
        best = np.minimum(best, val)
    return float(best.min())


def dr_bound_conic(C, D, y, theta, alpha):
    """The same fixed-position program solved as a second-order cone program."""
    import cvxpy as cp

    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    N, m, _ = C.shape
    A = np.einsum("nmk,k->nm", C, y) + D
    omega = math.sqrt(float(y @ y) + y.size)
    z = cp.Variable()
    lam = cp.Variable(nonneg=True)
    s = cp.Variable(N, nonneg=True)
    rho = cp.Variable((N, m), nonneg=True)
    cons = [cp.sum(rho, axis=1) == 1, s + z >= 0]
    for i in range(N):
        cons.append(rho[i] @ A[i] <= s[i] + z)
        cons.append(omega * cp.norm(rho[i], 2) <= lam)
    prob = cp.Problem(cp.Minimize(z + (lam * theta + cp.sum(s) / N) / (1.0 - alpha)), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return float(prob.value)


def random_rectangle_samples(rng, N, spread=1.0, center=(0.0, 0.0)):
    """Normalised face arrays of ``N`` random rectangles near ``center``."""
    C = np.empty((N, 4, 2))
    D = np.empty((N, 4))
    for i in range(N):
        th = rng.uniform(-math.pi, math.pi)
        c = np.asarray(center) + spread * rng.standard_normal(2)
        hl, hw = rng.uniform(0.3, 1.5), rng.uniform(0.2, 1.0)
        u = np.array([math.cos(th), math.sin(th)])
        w = np.array([-math.sin(th), math.cos(th)])
        G = np.stack([u, -u, w, -w])
        g = G @ c + np.array([hl, hl, hw, hw])
        C[i] = -G
        D[i] = g
    return C, D


def random_convex_polygon(rng):
    """Random convex polygon as an arbitrarily row-scaled ``(G, g)`` polytope plus its CCW vertices."""
    k = int(rng.integers(3, 8))
    ang = np.sort(rng.uniform(0, 2 * math.pi, k))
    rad = rng.uniform(0.5, 2.0, k)
    pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], 1) + rng.normal(size=2)
    hull = ConvexHull(pts)
    verts = pts[hull.vertices]  # counter-clockwise
    G, g = [], []
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        n = np.array([b[1] - a[1], a[0] - b[0]])  # outward for CCW order
        scale = rng.uniform(0.2, 5.0)  # arbitrary row scaling
        G.append(scale * n)
        g.append(scale * n @ a)
    return ObstaclePolytope(np.array(G), np.array(g)), verts
