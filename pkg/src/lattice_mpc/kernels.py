"""Hot numeric kernels.

Each kernel exists in two flavours: a numba-compiled one and a numpy one.
The module-level names (``packed_eval``, ``qp_solve`` ...) are bound to the
numba flavour unless numba is missing or disabled through
``LATTICE_MPC_DISABLE_NUMBA``. Both flavours stay importable under explicit
``*_numpy`` / ``*_numba`` names so they can be compared side by side.

Lattice layout ("packed"): ``coef`` (n_literals, dim) and ``off``
(n_literals,) hold the affine literals; ``term_idx[term_ptr[t]:term_ptr[t+1]]``
lists the literals of term ``t``; ``out_ptr`` splits the terms into one group
per output component.
"""

import math

import numpy as np

from ._accel import HAVE_NUMBA, BACKEND, njit

__all__ = [
    "BACKEND",
    "literal_values",
    "packed_eval",
    "packed_eval_many",
    "region_search",
    "qp_solve",
    "rk4_bicycle",
]

QP_OPTIMAL = 0
QP_INFEASIBLE = 1
QP_MAX_ITER = 2


# --------------------------------------------------------------------------
# lattice evaluation
# --------------------------------------------------------------------------

def literal_values_numpy(coef, off, X):
    # accumulate column by column so the rounding matches the compiled loop
    acc = X[:, 0:1] * coef[:, 0]
    for d in range(1, coef.shape[1]):
        acc = acc + X[:, d:d + 1] * coef[:, d]
    return acc + off


def _literal_values_loop(coef, off, X):
    n_pts = X.shape[0]
    n_lit, dim = coef.shape
    out = np.empty((n_pts, n_lit))
    for p in range(n_pts):
        for j in range(n_lit):
            s = X[p, 0] * coef[j, 0]
            for d in range(1, dim):
                s = s + X[p, d] * coef[j, d]
            out[p, j] = s + off[j]
    return out


def packed_eval_numpy(coef, off, term_ptr, term_idx, out_ptr, x, lo, hi):
    vals = literal_values_numpy(coef, off, x.reshape(1, -1))[0]
    term_min = np.minimum.reduceat(vals[term_idx], term_ptr[:-1])
    out = np.maximum.reduceat(term_min, out_ptr[:-1])
    return np.minimum(np.maximum(out, lo), hi)


def _packed_eval_loop(coef, off, term_ptr, term_idx, out_ptr, x, lo, hi):
    n_lit, dim = coef.shape
    vals = np.empty(n_lit)
    for j in range(n_lit):
        s = x[0] * coef[j, 0]
        for d in range(1, dim):
            s = s + x[d] * coef[j, d]
        vals[j] = s + off[j]
    n_out = out_ptr.shape[0] - 1
    out = np.empty(n_out)
    for o in range(n_out):
        best = -np.inf
        for t in range(out_ptr[o], out_ptr[o + 1]):
            m = np.inf
            for q in range(term_ptr[t], term_ptr[t + 1]):
                v = vals[term_idx[q]]
                if v < m:
                    m = v
            if m > best:
                best = m
        if best < lo[o]:
            best = lo[o]
        if best > hi[o]:
            best = hi[o]
        out[o] = best
    return out


_GATHER_BUDGET = 1 << 22  # elements of the gathered literal table per chunk


def packed_eval_many_numpy(coef, off, term_ptr, term_idx, out_ptr, X):
    out = np.empty((X.shape[0], out_ptr.shape[0] - 1))
    step = max(1, _GATHER_BUDGET // max(1, term_idx.shape[0]))
    for a in range(0, X.shape[0], step):
        vals = literal_values_numpy(coef, off, X[a:a + step])
        term_min = np.minimum.reduceat(vals[:, term_idx], term_ptr[:-1], axis=1)
        out[a:a + step] = np.maximum.reduceat(term_min, out_ptr[:-1], axis=1)
    return out


def _packed_eval_many_loop(coef, off, term_ptr, term_idx, out_ptr, X):
    n_pts = X.shape[0]
    n_out = out_ptr.shape[0] - 1
    n_lit, dim = coef.shape
    vals = np.empty((n_pts, n_lit))
    for p in range(n_pts):
        for j in range(n_lit):
            s = X[p, 0] * coef[j, 0]
            for d in range(1, dim):
                s = s + X[p, d] * coef[j, d]
            vals[p, j] = s + off[j]
    out = np.empty((n_pts, n_out))
    for p in range(n_pts):
        for o in range(n_out):
            best = -np.inf
            for t in range(out_ptr[o], out_ptr[o + 1]):
                m = np.inf
                for q in range(term_ptr[t], term_ptr[t + 1]):
                    v = vals[p, term_idx[q]]
                    if v < m:
                        m = v
                if m > best:
                    best = m
            out[p, o] = best
    return out


# --------------------------------------------------------------------------
# sequential region search
# --------------------------------------------------------------------------

def region_search_numpy(P, q, row_ptr, x, tol):
    """Index of the first region with ``P x <= q + tol`` on all its rows, or -1."""
    bad = (P @ x - q) > tol
    counts = np.concatenate(([0], np.cumsum(bad)))
    hits = np.flatnonzero(counts[row_ptr[1:]] == counts[row_ptr[:-1]])
    return int(hits[0]) if hits.size else -1


def _region_search_loop(P, q, row_ptr, x, tol):
    n_reg = row_ptr.shape[0] - 1
    dim = P.shape[1]
    for r in range(n_reg):
        inside = True
        for i in range(row_ptr[r], row_ptr[r + 1]):
            s = 0.0
            for d in range(dim):
                s += P[i, d] * x[d]
            if s - q[i] > tol:
                inside = False
                break
        if inside:
            return r
    return -1


# --------------------------------------------------------------------------
# dual active-set QP (Goldfarb-Idnani)
# --------------------------------------------------------------------------

def _qp_dual_active_set(Hinv, g, G, h, max_iter, feas_tol):
    """min 1/2 U'HU + g'U  s.t.  G U <= h, given H^-1.

    Starts at the unconstrained minimiser and adds the most violated
    constraint while keeping dual feasibility. Returns
    ``(U, active, lam, status, iterations)``.
    """
    n = Hinv.shape[0]
    m = G.shape[0]
    U = -(Hinv @ g)
    active = np.empty(n + 1, np.int64)
    lam = np.zeros(n + 1)
    nact = 0
    in_active = np.zeros(m, np.bool_)
    rownorm = np.empty(m)
    for j in range(m):
        s = 0.0
        for d in range(n):
            s += G[j, d] * G[j, d]
        rownorm[j] = math.sqrt(s)

    it = 0
    status = QP_OPTIMAL
    while True:
        p = -1
        worst = -feas_tol
        for j in range(m):
            if in_active[j]:
                continue
            slack = h[j] - G[j] @ U
            if rownorm[j] > 0.0:
                slack = slack / rownorm[j]
            elif slack < -feas_tol:
                status = QP_INFEASIBLE
                break
            else:
                continue
            if slack < worst:
                worst = slack
                p = j
        if status != QP_OPTIMAL or p < 0:
            break

        npv = -G[p]
        Hn = Hinv @ npv
        nHn = npv @ Hn
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                status = QP_MAX_ITER
                break
            if nact > 0:
                Nmat = np.empty((n, nact))
                for k in range(nact):
                    Nmat[:, k] = -G[active[k]]
                HN = Hinv @ Nmat
                r = np.linalg.solve(Nmat.T @ HN, Nmat.T @ Hn)
                z = Hn - HN @ r
            else:
                r = np.zeros(0)
                z = Hn.copy()

            t1 = np.inf
            kdrop = -1
            for k in range(nact):
                if r[k] > 1e-13:
                    ratio = lam[k] / r[k]
                    if ratio < t1:
                        t1 = ratio
                        kdrop = k
            t2 = np.inf
            zn = z @ npv
            if nact < n and zn > 1e-12 * nHn:
                slack = h[p] - G[p] @ U
                t2 = max(-slack, 0.0) / zn

            if t1 == np.inf and t2 == np.inf:
                status = QP_INFEASIBLE
                break
            if t2 == np.inf:
                # p is dependent on the active rows: pure dual step, then drop
                for k in range(nact):
                    lam[k] -= t1 * r[k]
                u_p += t1
            else:
                t = min(t1, t2)
                U = U + t * z
                for k in range(nact):
                    lam[k] -= t * r[k]
                u_p += t
                if t2 <= t1:
                    active[nact] = p
                    lam[nact] = u_p
                    in_active[p] = True
                    nact += 1
                    break
            in_active[active[kdrop]] = False
            for k in range(kdrop, nact - 1):
                active[k] = active[k + 1]
                lam[k] = lam[k + 1]
            nact -= 1
        if status != QP_OPTIMAL:
            break
    return U, active[:nact].copy(), lam[:nact].copy(), status, it


# --------------------------------------------------------------------------
# plant integration
# --------------------------------------------------------------------------

def _rk4_bicycle(x, y, phi, v, delta, wheelbase, T, substeps):
    h = T / substeps
    w = v * math.tan(delta) / wheelbase
    for _ in range(substeps):
        c1, s1 = math.cos(phi), math.sin(phi)
        p2 = phi + 0.5 * h * w
        c2, s2 = math.cos(p2), math.sin(p2)
        # k3 sees the same heading as k2 because the heading rate is constant
        p4 = phi + h * w
        c4, s4 = math.cos(p4), math.sin(p4)
        x += h * v * (c1 + 4.0 * c2 + c4) / 6.0
        y += h * v * (s1 + 4.0 * s2 + s4) / 6.0
        phi = p4
    return x, y, phi


def warmup():
    """Call every bound kernel once on tiny inputs so compilation stays out of timings."""
    coef = np.ones((2, 3))
    off = np.zeros(2)
    ptr = np.array([0, 1, 2], np.int64)
    idx = np.array([0, 1], np.int64)
    out_ptr = np.array([0, 2], np.int64)
    x = np.zeros(3)
    literal_values(coef, off, x.reshape(1, 3))
    packed_eval(coef, off, ptr, idx, out_ptr, x, np.full(1, -1.0), np.full(1, 1.0))
    packed_eval_many(coef, off, ptr, idx, out_ptr, x.reshape(1, 3))
    region_search(coef, off, ptr, x, 1e-9)
    qp_solve(np.eye(2), np.ones(2), np.ones((1, 2)), np.ones(1), 10, 1e-10)
    rk4_bicycle(0.0, 0.0, 0.0, 1.0, 0.1, 0.1, 0.1, 2)


# --------------------------------------------------------------------------
# bindings
# --------------------------------------------------------------------------

qp_solve_numpy = _qp_dual_active_set
rk4_bicycle_numpy = _rk4_bicycle

if HAVE_NUMBA:
    literal_values_numba = njit(_literal_values_loop)
    packed_eval_numba = njit(_packed_eval_loop)
    packed_eval_many_numba = njit(_packed_eval_many_loop)
    region_search_numba = njit(_region_search_loop)
    qp_solve_numba = njit(_qp_dual_active_set)
    rk4_bicycle_numba = njit(_rk4_bicycle)

    literal_values = literal_values_numba
    packed_eval = packed_eval_numba
    packed_eval_many = packed_eval_many_numba
    region_search = region_search_numba
    qp_solve = qp_solve_numba
    rk4_bicycle = rk4_bicycle_numba
else:
    literal_values_numba = packed_eval_numba = packed_eval_many_numba = None
    region_search_numba = qp_solve_numba = rk4_bicycle_numba = None

    literal_values = literal_values_numpy
    packed_eval = packed_eval_numpy
    packed_eval_many = packed_eval_many_numpy
    region_search = region_search_numpy
    qp_solve = qp_solve_numpy
    rk4_bicycle = rk4_bicycle_numpy
