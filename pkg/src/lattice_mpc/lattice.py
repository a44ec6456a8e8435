"""Lattice piecewise-affine functions: ``max_t min_{j in term_t} l_j(x)``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import kernels


@dataclass(frozen=True)
class AffineFunction:
    a: np.ndarray
    c: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).ravel())
        object.__setattr__(self, "c", float(self.c))
        if not (np.all(np.isfinite(self.a)) and math.isfinite(self.c)):
            raise ValueError("affine function entries must be finite")

    def __call__(self, x) -> float:
        return float(self.a @ np.asarray(x, float) + self.c)


@dataclass(frozen=True)
class LabeledSample:
    point: np.ndarray
    value: float
    active: AffineFunction


class LatticePWA:
    """Immutable lattice PWA function of ``input_dim`` variables."""

    def __init__(self, coef, offset, terms: Sequence[Sequence[int]]):
        coef = np.atleast_2d(np.asarray(coef, dtype=float))
        offset = np.asarray(offset, dtype=float).ravel()
        if coef.shape[0] != offset.shape[0]:
            raise ValueError("one offset per literal required")
        if not terms:
            raise ValueError("a lattice needs at least one term")
        n_lit = coef.shape[0]
        clean = []
        for t in terms:
            t = tuple(int(j) for j in t)
            if not t:
                raise ValueError("terms must be non-empty")
            if min(t) < 0 or max(t) >= n_lit:
                raise ValueError(f"term {t} references a missing literal")
            clean.append(t)
        self.coef = coef
        self.offset = offset
        self.terms: tuple[tuple[int, ...], ...] = tuple(clean)
        self.coef.setflags(write=False)
        self.offset.setflags(write=False)
        self._term_ptr = np.cumsum([0] + [len(t) for t in clean]).astype(np.int64)
        self._term_idx = np.fromiter((j for t in clean for j in t), dtype=np.int64)
        self._out_ptr = np.array([0, len(clean)], dtype=np.int64)

    input_dim = property(lambda self: self.coef.shape[1])
    n_literals = property(lambda self: self.coef.shape[0])
    n_terms = property(lambda self: len(self.terms))

    @property
    def literals(self) -> list[AffineFunction]:
        return [AffineFunction(a, c) for a, c in zip(self.coef, self.offset)]

    @property
    def size(self) -> int:
        """Total literal references across terms."""
        return int(self._term_idx.size)

    def __call__(self, x) -> float:
        return evaluate(self, x)

    def __eq__(self, other):
        if not isinstance(other, LatticePWA):
            return NotImplemented
        return (
            self.terms == other.terms
            and np.array_equal(self.coef, other.coef)
            and np.array_equal(self.offset, other.offset)
        )

    def __repr__(self):
        return f"LatticePWA(dim={self.input_dim}, literals={self.n_literals}, terms={self.n_terms})"

    def evaluate_many(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected points of dimension {self.input_dim}, got {X.shape[1]}")
        return kernels.packed_eval_many(
            np.ascontiguousarray(self.coef), self.offset, self._term_ptr, self._term_idx, self._out_ptr, X
        )[:, 0]

    def term_values(self, X) -> np.ndarray:
        """(n_points, n_terms) matrix of each term's min at each point."""
        vals = kernels.literal_values(np.ascontiguousarray(self.coef), self.offset, np.atleast_2d(X))
        return np.minimum.reduceat(vals[:, self._term_idx], self._term_ptr[:-1], axis=1)


def evaluate(f: LatticePWA, x) -> float:
    x = np.ascontiguousarray(x, dtype=float).ravel()
    if x.shape[0] != f.input_dim:
        raise ValueError(f"expected a point of dimension {f.input_dim}, got {x.shape[0]}")
    inf = np.array([np.inf])
    return float(
        kernels.packed_eval(
            np.ascontiguousarray(f.coef), f.offset, f._term_ptr, f._term_idx, f._out_ptr, x, -inf, inf
        )[0]
    )


def naive_evaluate(f: LatticePWA, x) -> float:
    """Double-loop reference evaluation, kept deliberately plain."""
    x = [float(v) for v in np.asarray(x, float).ravel()]
    best = -math.inf
    for term in f.terms:
        m = math.inf
        for j in term:
            row = f.coef[j]
            s = x[0] * float(row[0])
            for d in range(1, len(x)):
                s = s + x[d] * float(row[d])
            m = min(m, s + float(f.offset[j]))
        best = max(best, m)
    return best


def dedupe_affine(functions: Sequence[AffineFunction], tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct affine functions by max coefficient difference.

    Returns ``(coef, offset, index)`` where ``index[k]`` is the distinct
    literal that ``functions[k]`` maps to.
    """
    rows: list[np.ndarray] = []
    index = np.empty(len(functions), dtype=np.int64)
    for k, fn in enumerate(functions):
        v = np.append(fn.a, fn.c)
        hit = -1
        if rows:
            diffs = np.max(np.abs(np.asarray(rows) - v), axis=1)
            j = int(np.argmin(diffs))
            if diffs[j] <= tol:
                hit = j
        if hit < 0:
            rows.append(v)
            hit = len(rows) - 1
        index[k] = hit
    table = np.asarray(rows)
    return table[:, :-1].copy(), table[:, -1].copy(), index


def construct_from_samples(samples: Sequence[LabeledSample], dedup_tol: float = 1e-9, tie_tol: float = 1e-10) -> LatticePWA:
    """One term per sample: every distinct literal that is ``>=`` the sample's
    active literal at the sample point."""
    if not samples:
        raise ValueError("cannot build a lattice from an empty sample list")
    coef, off, act = dedupe_affine([s.active for s in samples], dedup_tol)
    X = np.asarray([s.point for s in samples], dtype=float)
    vals = kernels.literal_values(coef, off, X)
    terms = []
    for k in range(len(samples)):
        ref = vals[k, act[k]]
        tol = tie_tol * max(1.0, abs(ref))
        terms.append(tuple(np.flatnonzero(vals[k] >= ref - tol)))
    return LatticePWA(coef, off, terms)


def sample_violations(f: LatticePWA, samples: Sequence[LabeledSample], tol: float = 1e-8) -> np.ndarray:
    """Indices of samples the lattice fails to reproduce (interpolation check)."""
    X = np.asarray([s.point for s in samples], dtype=float)
    y = np.asarray([s.value for s in samples], dtype=float)
    return np.flatnonzero(np.abs(f.evaluate_many(X) - y) > tol)


def simplify(f: LatticePWA, validation_points) -> LatticePWA:
    """Drop redundant terms and literals, certified on ``validation_points``.

    Output equals the input exactly at every validation point.
    """
    X = np.atleast_2d(np.asarray(validation_points, dtype=float))
    V = kernels.literal_values(np.ascontiguousarray(f.coef), f.offset, X)

    def term_vals(t):
        return V[:, list(t)].min(axis=1)

    def drop_dominated(terms):
        # a term goes if the remaining terms reach its value everywhere
        TV = [term_vals(t) for t in terms]
        keep = list(range(len(terms)))
        for t in range(len(terms)):
            others = [k for k in keep if k != t]
            if others and np.all(np.max([TV[k] for k in others], axis=0) >= TV[t]):
                keep.remove(t)
        return [terms[k] for k in keep]

    # identical literal sets, then dominated terms
    terms = drop_dominated(list(dict.fromkeys(tuple(sorted(t)) for t in f.terms)))
    fmax = np.max([term_vals(t) for t in terms], axis=0)

    # literals whose removal never lifts the term above the overall max
    out = []
    for t in terms:
        cur = list(t)
        for j in list(t):
            if len(cur) == 1:
                break
            trial = [k for k in cur if k != j]
            if np.all(V[:, trial].min(axis=1) <= fmax):
                cur = trial
        out.append(tuple(cur))
    terms = drop_dominated(list(dict.fromkeys(out)))

    used = sorted({j for t in terms for j in t})
    remap = {j: i for i, j in enumerate(used)}
    return LatticePWA(
        f.coef[used], f.offset[used], [tuple(remap[j] for j in t) for t in terms]
    )


# --------------------------------------------------------------------------
# approximation error certificate
# --------------------------------------------------------------------------

@dataclass
class ErrorBoundReport:
    sigma: float
    L_true: float
    L_hat: float
    max_observed_error: float
    max_error_at_linearization: float
    extra: dict = field(default_factory=dict)

    @property
    def L_estimate(self) -> float:
        return self.L_true + self.L_hat

    @property
    def bound(self) -> float:
        return self.L_estimate * self.sigma

    @property
    def holds(self) -> bool:
        return self.max_observed_error <= self.bound


def _as_vector_fn(f_hat) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(f_hat, LatticePWA):
        return lambda X: f_hat.evaluate_many(X)[:, None]
    parts = list(f_hat)
    return lambda X: np.column_stack([p.evaluate_many(X) for p in parts])


def _max_slope(F: np.ndarray, X: np.ndarray, pairs: np.ndarray) -> float:
    dx = np.linalg.norm(X[pairs[:, 0]] - X[pairs[:, 1]], axis=1)
    df = np.linalg.norm(F[pairs[:, 0]] - F[pairs[:, 1]], axis=1)
    ok = dx > 1e-12
    return float(np.max(df[ok] / dx[ok])) if np.any(ok) else 0.0


def certify_error(f_true, f_hat, probe_points, linearization_points, n_neighbors: int = 8) -> ErrorBoundReport:
    """Empirical check of ``max |f - f_hat| <= (L_true + L_hat) * sigma``.

    ``f_true`` maps an (n, d) array to (n,) or (n, m). ``f_hat`` is a lattice
    or a sequence of per-component lattices. Lipschitz constants are the
    largest finite-difference slopes over probe/nearest-linearization-point
    pairs and probe/k-nearest-probe pairs.
    """
    P = np.atleast_2d(np.asarray(probe_points, dtype=float))
    Z = np.atleast_2d(np.asarray(linearization_points, dtype=float))
    if P.shape[0] == 0:
        raise ValueError("empty probe set")
    hat = _as_vector_fn(f_hat)

    def true(X):
        out = np.asarray(f_true(X), dtype=float)
        return out[:, None] if out.ndim == 1 else out

    dist, nearest = cKDTree(Z).query(P)
    sigma = float(dist.max())

    X = np.vstack([P, Z])
    Ft, Fh = true(X), hat(X)
    n_p = P.shape[0]
    pairs = [np.column_stack([np.arange(n_p), n_p + nearest])]
    k = min(n_neighbors + 1, n_p)
    if k > 1:
        _, nn = cKDTree(P).query(P, k=k)
        for c in range(1, k):
            pairs.append(np.column_stack([np.arange(n_p), nn[:, c]]))
    pairs = np.vstack(pairs)

    err = np.linalg.norm(Ft - Fh, axis=1)
    return ErrorBoundReport(
        sigma=sigma,
        L_true=_max_slope(Ft, X, pairs),
        L_hat=_max_slope(Fh, X, pairs),
        max_observed_error=float(err[:n_p].max()),
        max_error_at_linearization=float(err[n_p:].max()),
    )


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------

MAGIC = "lattice-pwa 1"


def dumps(f: LatticePWA) -> str:
    lines = [MAGIC, f"dims {f.input_dim} literals {f.n_literals} terms {f.n_terms}"]
    for a, c in zip(f.coef, f.offset):
        lines.append("L " + " ".join(repr(float(v)) for v in (*a, c)))
    for t in f.terms:
        lines.append("T " + " ".join(str(j) for j in t))
    return "\n".join(lines) + "\n"


def loads(text: str) -> LatticePWA:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != MAGIC:
        raise ValueError("not a lattice-pwa file")
    head = lines[1].split()
    if head[0::2] != ["dims", "literals", "terms"]:
        raise ValueError(f"bad header line: {lines[1]!r}")
    dim, n_lit, n_terms = (int(v) for v in head[1::2])
    lits = [ln.split()[1:] for ln in lines[2:] if ln.startswith("L ")]
    terms = [tuple(int(v) for v in ln.split()[1:]) for ln in lines[2:] if ln.startswith("T ")]
    if len(lits) != n_lit or len(terms) != n_terms:
        raise ValueError("literal/term counts disagree with the header")
    table = np.array([[float(v) for v in row] for row in lits], dtype=float).reshape(n_lit, dim + 1)
    return LatticePWA(table[:, :dim], table[:, dim], terms)


def save(f: LatticePWA, path) -> None:
    Path(path).write_text(dumps(f), newline="\n")


def load(path) -> LatticePWA:
    return loads(Path(path).read_text())
