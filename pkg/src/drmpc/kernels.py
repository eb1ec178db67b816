"""Hot numeric kernels for the worst-case CVaR evaluator.

Every kernel exists twice: a loop form compiled with numba (``*_nb``) and a
vectorised numpy form (``*_np``). The public names point at one of them,
chosen once at import time by :data:`drmpc._jit.USE_NUMBA`.

Notation used below, for one horizon step of one obstacle:

``A``
    ``(N, m)`` array, ``A[i, j] = c_ij . y + d_ij`` -- the signed distance of
    the robot position ``y`` to face ``j`` of sampled polytope ``i``
    (positive means "on the inner side of that face").
``phi(r, a)``
    ``min <rho, a>`` over the probability simplex intersected with the
    Euclidean ball of radius ``r``; for ``r >= 1`` this is ``min_j a_j``.

For fixed ``y`` the worst-case CVaR bound equals

    min_{r in [1/sqrt(m), 1]}  c * r + CVaR_alpha( max(phi(r, A_i), 0) )

with ``c = theta * sqrt(|y|^2 + n_y) / (1 - alpha)``; the objective is convex
in ``r``, so the minimiser is found by a safeguarded secant search on the
r-derivative, which every evaluation returns alongside the value.
"""
import math

import numpy as np

from ._jit import USE_NUMBA, njit

R_TOL = 1e-11


# ---------------------------------------------------------------------------
# simplex / ball linear minimisation
# ---------------------------------------------------------------------------


@njit
def _simplex_ball_row_nb(a, r, rho, order):
    m = a.shape[0]
    # insertion sort of indices; m is tiny (4 for rectangles)
    for j in range(m):
        order[j] = j
    for j in range(1, m):
        cur = order[j]
        q = j - 1
        while q >= 0 and a[order[q]] > a[cur]:
            order[q + 1] = order[q]
            q -= 1
        order[q + 1] = cur
    b1 = a[order[0]]
    scale = 1.0
    for j in range(m):
        if abs(a[j]) > scale:
            scale = abs(a[j])
    tie_tol = 1e-12 * scale
    ntie = 1
    while ntie < m and a[order[ntie]] - b1 <= tie_tol:
        ntie += 1
    for j in range(m):
        rho[j] = 0.0
    r2 = r * r
    if ntie * r2 >= 1.0 - 1e-14:
        w = 1.0 / ntie
        phi = 0.0
        for j in range(ntie):
            rho[order[j]] = w
            phi += w * a[order[j]]
        return phi, 0.0
    s1 = 0.0
    s2 = 0.0
    kstar = -1
    t = 0.0
    tau = 0.0
    for k in range(1, m + 1):
        ck = a[order[k - 1]] - b1
        s1 += ck
        s2 += ck * ck
        den = k * r2 - 1.0
        if den <= 1e-14:
            continue
        mk = s1 / k
        vk = s2 / k - mk * mk
        if vk < 0.0:
            vk = 0.0
        tau_k = math.sqrt(vk / den)
        t_k = mk + tau_k
        if t_k < ck - tie_tol:
            continue
        if k < m and t_k > a[order[k]] - b1 + tie_tol:
            continue
        kstar = k
        t = t_k
        tau = tau_k
        break
    if kstar < 0 or tau * kstar <= 1e-300:
        # only reachable at r == 1/sqrt(m) up to rounding: uniform weights
        w = 1.0 / m
        phi = 0.0
        for j in range(m):
            rho[j] = w
            phi += w * a[j]
        return phi, -1e300
    S = kstar * tau
    phi = b1
    for j in range(kstar):
        cj = a[order[j]] - b1
        w = (t - cj) / S
        if w < 0.0:
            w = 0.0
        rho[order[j]] = w
        phi += w * cj
    return phi, -S * r


@njit
def _simplex_ball_into_nb(A, r, phi, rho, slope, order):
    for i in range(A.shape[0]):
        p, s = _simplex_ball_row_nb(A[i], r, rho[i], order)
        phi[i] = p
        slope[i] = s


@njit
def _simplex_ball_batch_nb(A, r):
    N, m = A.shape
    phi = np.empty(N)
    slope = np.empty(N)
    rho = np.empty((N, m))
    order = np.empty(m, dtype=np.int64)
    _simplex_ball_into_nb(A, r, phi, rho, slope, order)
    return phi, rho, slope


def _simplex_ball_batch_np(A, r):
    A = np.asarray(A, dtype=float)
    N, m = A.shape
    order = np.argsort(A, axis=1, kind="stable")
    B = np.take_along_axis(A, order, axis=1)
    b1 = B[:, :1]
    Cs = B - b1
    scale = np.maximum(1.0, np.abs(A).max(axis=1, keepdims=True))
    tie_tol = 1e-12 * scale
    ntie = (Cs <= tie_tol).sum(axis=1)
    r2 = r * r
    k = np.arange(1, m + 1, dtype=float)
    cs1 = np.cumsum(Cs, axis=1)
    cs2 = np.cumsum(Cs * Cs, axis=1)
    mk = cs1 / k
    vk = np.maximum(cs2 / k - mk * mk, 0.0)
    den = k * r2 - 1.0
    ok = den > 1e-14
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(ok, np.sqrt(vk / np.where(ok, den, 1.0)), np.inf)
    t = mk + tau
    nxt = np.concatenate([Cs[:, 1:], np.full((N, 1), np.inf)], axis=1)
    valid = ok & (t >= Cs - tie_tol) & (t <= nxt + tie_tol)
    has = valid.any(axis=1)
    kidx = np.argmax(valid, axis=1)
    rows = np.arange(N)
    t_sel = t[rows, kidx]
    tau_sel = tau[rows, kidx]
    kk = kidx + 1
    S = kk * tau_sel

    Ws = np.zeros((N, m))
    slope = np.zeros(N)
    inactive = ntie * r2 >= 1.0 - 1e-14
    active = ~inactive & has & (S > 1e-300)
    degenerate = ~inactive & ~active

    if active.any():
        cols = np.arange(m)
        w = (t_sel[active, None] - Cs[active]) / S[active, None]
        w = np.where(cols[None, :] < kk[active, None], np.maximum(w, 0.0), 0.0)
        Ws[active] = w
        slope[active] = -S[active] * r
    if inactive.any():
        cols = np.arange(m)
        nt = ntie[inactive]
        Ws[inactive] = np.where(cols[None, :] < nt[:, None], 1.0 / nt[:, None], 0.0)
    if degenerate.any():
        Ws[degenerate] = 1.0 / m
        slope[degenerate] = -1e300

    rho = np.empty_like(Ws)
    np.put_along_axis(rho, order, Ws, axis=1)
    phi = (rho * A).sum(axis=1)
    return phi, rho, slope


# ---------------------------------------------------------------------------
# CVaR of an empirical distribution with uniform weights
# ---------------------------------------------------------------------------


def _tail_count(n, alpha):
    k = int(math.ceil(n * (1.0 - alpha) - 1e-9))
    return min(max(k, 1), n)


@njit
def _cvar_topk_nb(losses, alpha, top):
    n = losses.shape[0]
    tail = 1.0 - alpha
    k = int(math.ceil(n * tail - 1e-9))
    if k < 1:
        k = 1
    if k > n:
        k = n
    # top[0..k-1] holds the k largest losses in descending order
    filled = 0
    for i in range(n):
        v = losses[i]
        if filled < k:
            q = filled
            filled += 1
        elif v > top[k - 1]:
            q = k - 1
        else:
            continue
        while q > 0 and top[q - 1] < v:
            top[q] = top[q - 1]
            q -= 1
        top[q] = v
    acc = 0.0
    for q in range(k - 1):
        acc += top[q]
    var = top[k - 1]
    acc = acc / n + (tail - (k - 1) / n) * var
    return acc / tail, var


@njit
def _cvar_nb(losses, alpha):
    top = np.empty(losses.shape[0])
    return _cvar_topk_nb(losses, alpha, top)


def _cvar_np(losses, alpha):
    losses = np.asarray(losses, dtype=float)
    n = losses.shape[0]
    tail = 1.0 - alpha
    k = _tail_count(n, alpha)
    srt = np.sort(losses)[::-1]
    var = srt[k - 1]
    acc = srt[: k - 1].sum() / n + (tail - (k - 1) / n) * var
    return acc / tail, var


# ---------------------------------------------------------------------------
# saddle weights of the inner problem
# ---------------------------------------------------------------------------


@njit
def _saddle_weights_nb(phi, slope, r, c, alpha):
    n = phi.shape[0]
    tail = 1.0 - alpha
    ubar = 1.0 / (n * tail)
    psi = np.maximum(phi, 0.0)
    k = int(math.ceil(n * tail - 1e-9))
    if k < 1:
        k = 1
    if k > n:
        k = n
    srt = np.sort(psi)
    tau = srt[n - k]
    scale = 1.0
    for i in range(n):
        if abs(phi[i]) > scale:
            scale = abs(phi[i])
    tol = 1e-9 * scale
    binding = tau > tol
    pi = np.zeros(n)
    tie = np.zeros(n, dtype=np.bool_)
    n_above = 0
    n_tie = 0
    for i in range(n):
        if psi[i] > tau + tol:
            pi[i] = ubar
            n_above += 1
        elif binding:
            if abs(phi[i] - tau) <= tol:
                tie[i] = True
                n_tie += 1
        elif abs(phi[i]) <= tol:
            tie[i] = True
            n_tie += 1
    mass_rem = 1.0 - n_above * ubar
    if mass_rem < 0.0:
        mass_rem = 0.0
    if n_tie == 0:
        return pi, tau
    cap = min(mass_rem, ubar * n_tie)
    if c <= 0.0:
        if binding:
            w = cap / n_tie
            for i in range(n):
                if tie[i]:
                    pi[i] = w
        return pi, tau
    g = -slope
    base = 0.0
    for i in range(n):
        if pi[i] > 0.0:
            base += pi[i] * g[i]
    target = c - base
    idx = np.empty(n_tie, dtype=np.int64)
    q = 0
    for i in range(n):
        if tie[i]:
            idx[q] = i
            q += 1
    gs = np.empty(n_tie)
    for q in range(n_tie):
        gs[q] = g[idx[q]]
    ordr = np.argsort(gs)
    lo_w = np.zeros(n_tie)
    hi_w = np.zeros(n_tie)
    if binding:
        left = cap
        for q in range(n_tie):
            take = min(ubar, left)
            lo_w[ordr[q]] = take
            left -= take
    left = cap
    for q in range(n_tie - 1, -1, -1):
        take = min(ubar, left)
        hi_w[ordr[q]] = take
        left -= take
    lo = 0.0
    hi = 0.0
    for q in range(n_tie):
        lo += lo_w[q] * gs[q]
        hi += hi_w[q] * gs[q]
    t = 0.0
    if hi - lo > 1e-300:
        t = (target - lo) / (hi - lo)
        if t < 0.0:
            t = 0.0
        if t > 1.0:
            t = 1.0
    for q in range(n_tie):
        pi[idx[q]] = (1.0 - t) * lo_w[q] + t * hi_w[q]
    return pi, tau


def _saddle_weights_np(phi, slope, r, c, alpha):
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    tail = 1.0 - alpha
    ubar = 1.0 / (n * tail)
    psi = np.maximum(phi, 0.0)
    k = _tail_count(n, alpha)
    tau = np.sort(psi)[::-1][k - 1]
    tol = 1e-9 * max(1.0, np.abs(phi).max())
    binding = tau > tol
    above = psi > tau + tol
    if binding:
        tie = ~above & (np.abs(phi - tau) <= tol)
    else:
        tie = ~above & (np.abs(phi) <= tol)
    pi = np.where(above, ubar, 0.0)
    mass_rem = max(1.0 - above.sum() * ubar, 0.0)
    idx = np.flatnonzero(tie)
    if idx.size == 0:
        return pi, tau
    cap = min(mass_rem, ubar * idx.size)
    if c <= 0.0:
        if binding:
            pi[idx] = cap / idx.size
        return pi, tau
    g = -np.asarray(slope, dtype=float)
    target = c - (pi * g).sum() if above.any() else c
    gs = g[idx]
    ordr = np.argsort(gs, kind="stable")

    def fill(seq):
        w = np.zeros(idx.size)
        left = cap
        for q in seq:
            take = min(ubar, left)
            w[q] = take
            left -= take
        return w

    lo_w = fill(ordr) if binding else np.zeros(idx.size)
    hi_w = fill(ordr[::-1])
    lo = lo_w @ gs
    hi = hi_w @ gs
    t = 0.0
    if hi - lo > 1e-300:
        t = min(max((target - lo) / (hi - lo), 0.0), 1.0)
    pi[idx] = (1.0 - t) * lo_w + t * hi_w
    return pi, tau


# ---------------------------------------------------------------------------
# worst-case CVaR bound for one block
# ---------------------------------------------------------------------------


@njit
def _block_prep_nb(A):
    """Per-row sorted prefix moments; none of them depend on r."""
    N, m = A.shape
    b1 = np.empty(N)
    cs = np.empty((N, m))
    mk = np.empty((N, m))
    vk = np.empty((N, m))
    ntie = np.empty(N, dtype=np.int64)
    order = np.empty(m, dtype=np.int64)
    for i in range(N):
        a = A[i]
        for j in range(m):
            order[j] = j
        for j in range(1, m):
            cur = order[j]
            q = j - 1
            while q >= 0 and a[order[q]] > a[cur]:
                order[q + 1] = order[q]
                q -= 1
            order[q + 1] = cur
        b1[i] = a[order[0]]
        scale = 1.0
        for j in range(m):
            if abs(a[j]) > scale:
                scale = abs(a[j])
        tie_tol = 1e-12 * scale
        s1 = 0.0
        s2 = 0.0
        nt = 0
        for k in range(1, m + 1):
            ck = a[order[k - 1]] - b1[i]
            cs[i, k - 1] = ck
            if ck <= tie_tol:
                nt += 1
            s1 += ck
            s2 += ck * ck
            mean = s1 / k
            var = s2 / k - mean * mean
            mk[i, k - 1] = mean
            vk[i, k - 1] = var if var > 0.0 else 0.0
        ntie[i] = nt
    return b1, cs, mk, vk, ntie


@njit
def _phi_fast_nb(r, b1, cs, mk, vk, ntie, phi, slope):
    """phi and d phi / d r for every row, from the prefix moments."""
    N, m = cs.shape
    r2 = r * r
    for i in range(N):
        if ntie[i] * r2 >= 1.0 - 1e-14:
            phi[i] = b1[i]
            slope[i] = 0.0
            continue
        scale = 1.0
        if abs(b1[i]) > scale:
            scale = abs(b1[i])
        if abs(b1[i] + cs[i, m - 1]) > scale:
            scale = abs(b1[i] + cs[i, m - 1])
        tie_tol = 1e-12 * scale
        done = False
        for k in range(1, m + 1):
            den = k * r2 - 1.0
            if den <= 1e-14:
                continue
            tau = math.sqrt(vk[i, k - 1] / den)
            t = mk[i, k - 1] + tau
            if t < cs[i, k - 1] - tie_tol:
                continue
            if k < m and t > cs[i, k] + tie_tol:
                continue
            if tau * k <= 1e-300:
                break
            phi[i] = b1[i] + mk[i, k - 1] - vk[i, k - 1] / tau
            slope[i] = -k * tau * r
            done = True
            break
        if not done:
            phi[i] = b1[i] + mk[i, m - 1]
            slope[i] = -1e300


@njit
def _block_eval_nb(r, c, alpha, b1, cs, mk, vk, ntie, phi, slope, top, topi):
    """Objective ``c r + CVaR(phi^+)`` and its r-derivative."""
    _phi_fast_nb(r, b1, cs, mk, vk, ntie, phi, slope)
    n = phi.shape[0]
    tail = 1.0 - alpha
    k = int(math.ceil(n * tail - 1e-9))
    if k < 1:
        k = 1
    if k > n:
        k = n
    filled = 0
    for i in range(n):
        v = phi[i] if phi[i] > 0.0 else 0.0
        if filled < k:
            q = filled
            filled += 1
        elif v > top[k - 1]:
            q = k - 1
        else:
            continue
        while q > 0 and top[q - 1] < v:
            top[q] = top[q - 1]
            topi[q] = topi[q - 1]
            q -= 1
        top[q] = v
        topi[q] = i
    w_full = 1.0 / (n * tail)
    w_last = (tail - (k - 1) / n) / tail
    val = 0.0
    der = 0.0
    for q in range(k):
        w = w_full if q < k - 1 else w_last
        val += w * top[q]
        if top[q] > 0.0:
            der += w * slope[topi[q]]
    return c * r + val, c + der


@njit
def _dr_block_nb(A, c, alpha, r_tol):
    N, m = A.shape
    r_lo = 1.0 / math.sqrt(m)
    r_hi = 1.0
    b1, cs, mk, vk, ntie = _block_prep_nb(A)
    phi = np.empty(N)
    slope = np.empty(N)
    top = np.empty(N)
    topi = np.empty(N, dtype=np.int64)
    r = r_hi
    if c > 0.0:
        fa, ga = _block_eval_nb(r_lo, c, alpha, b1, cs, mk, vk, ntie, phi, slope, top, topi)
        fb, gb = _block_eval_nb(r_hi, c, alpha, b1, cs, mk, vk, ntie, phi, slope, top, topi)
        if ga >= 0.0:
            r = r_lo
        elif gb <= 0.0:
            r = r_hi
        else:
            a = r_lo
            b = r_hi
            side = 0
            it = 0
            while b - a > r_tol and it < 200:
                it += 1
                if it % 3 == 0:
                    x = 0.5 * (a + b)
                else:
                    x = (a * gb - b * ga) / (gb - ga)
                    if not (a < x < b):
                        x = 0.5 * (a + b)
                fx, gx = _block_eval_nb(x, c, alpha, b1, cs, mk, vk, ntie, phi, slope, top, topi)
                if gx > 0.0:
                    b = x
                    fb = fx
                    gb = gx
                    if side == 1:
                        ga *= 0.5
                    side = 1
                elif gx < 0.0:
                    a = x
                    fa = fx
                    ga = gx
                    if side == -1:
                        gb *= 0.5
                    side = -1
                else:
                    a = x
                    b = x
                    fa = fx
                    fb = fx
            r = a if fa <= fb else b
    rho = np.empty((N, m))
    order = np.empty(m, dtype=np.int64)
    _simplex_ball_into_nb(A, r, phi, rho, slope, order)
    psi = np.maximum(phi, 0.0)
    val, _ = _cvar_topk_nb(psi, alpha, top)
    pi, tau = _saddle_weights_nb(phi, slope, r, c, alpha)
    return c * r + val, r, tau, phi, rho, pi


def _block_eval_np(A, r, c, alpha):
    phi, rho, slope = _simplex_ball_batch_np(A, r)
    n = phi.shape[0]
    tail = 1.0 - alpha
    k = _tail_count(n, alpha)
    psi = np.maximum(phi, 0.0)
    idx = np.argsort(-psi, kind="stable")[:k]
    w = np.full(k, 1.0 / (n * tail))
    w[-1] = (tail - (k - 1) / n) / tail
    val = w @ psi[idx]
    der = w @ np.where(psi[idx] > 0.0, slope[idx], 0.0)
    return c * r + val, c + der, phi, rho, slope


def _dr_block_np(A, c, alpha, r_tol):
    A = np.asarray(A, dtype=float)
    m = A.shape[1]
    r_lo, r_hi = 1.0 / math.sqrt(m), 1.0
    r = r_hi
    if c > 0.0:
        fa, ga, *_ = _block_eval_np(A, r_lo, c, alpha)
        fb, gb, *_ = _block_eval_np(A, r_hi, c, alpha)
        if ga >= 0.0:
            r = r_lo
        elif gb <= 0.0:
            r = r_hi
        else:
            a, b = r_lo, r_hi
            side = 0
            it = 0
            while b - a > r_tol and it < 200:
                it += 1
                x = 0.5 * (a + b)
                if it % 3 != 0:
                    xs = (a * gb - b * ga) / (gb - ga)
                    if a < xs < b:
                        x = xs
                fx, gx, *_ = _block_eval_np(A, x, c, alpha)
                if gx > 0.0:
                    b, fb, gb = x, fx, gx
                    if side == 1:
                        ga *= 0.5
                    side = 1
                elif gx < 0.0:
                    a, fa, ga = x, fx, gx
                    if side == -1:
                        gb *= 0.5
                    side = -1
                else:
                    a = b = x
                    fa = fb = fx
            r = a if fa <= fb else b
    val, _, phi, rho, slope = _block_eval_np(A, r, c, alpha)
    pi, tau = _saddle_weights_np(phi, slope, r, c, alpha)
    return val, r, tau, phi, rho, pi


if USE_NUMBA:
    simplex_ball_batch = _simplex_ball_batch_nb
    cvar_sorted = _cvar_nb
    saddle_weights = _saddle_weights_nb
    dr_block = _dr_block_nb
else:
    simplex_ball_batch = _simplex_ball_batch_np
    cvar_sorted = _cvar_np
    saddle_weights = _saddle_weights_np
    dr_block = _dr_block_np

BACKEND = "numba" if USE_NUMBA else "numpy"
