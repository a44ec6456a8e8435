"""Linear tracking MPC as a multiparametric QP.

The horizon problem at one reference point is condensed into::

    min_U  1/2 U'HU + (x'F + C_f) U    s.t.  G U <= W + E x

with ``x`` the initial state. Shifting ``z = U + H^-1 (F'x + C_f')`` gives
``min 1/2 z'Hz  s.t.  G z <= omega + S x``, whose KKT system yields an affine
optimiser on each critical region.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from . import kernels
from .kinematics import DiscreteAffineModel, ReferenceTrajectory


class QpError(RuntimeError):
    pass


class QpInfeasibleError(QpError):
    pass


class QpMaxIterError(QpError):
    def __init__(self, msg, U=None, active=None, iterations=0):
        super().__init__(msg)
        self.U = U
        self.active = active
        self.iterations = iterations


class CondensationError(ValueError):
    pass


class DegenerateLawError(QpError):
    pass


# --------------------------------------------------------------------------
# problem data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MpcSettings:
    """Horizon, weights and box bounds shared by every reference point."""

    N: int
    Q: np.ndarray
    R: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R", "x_min", "x_max", "u_min", "u_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if not np.allclose(self.Q, self.Q.T) or np.linalg.eigvalsh(self.Q).min() < -1e-12:
            raise ValueError("Q must be symmetric positive semidefinite")
        if not np.allclose(self.R, self.R.T) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")
        if np.any(self.x_min > self.x_max) or np.any(self.u_min > self.u_max):
            raise ValueError("bounds must satisfy min <= max")


@dataclass(frozen=True)
class LinearMpcSpec:
    """One linear tracking MPC problem with a frozen model over the horizon.

    ``x_ref[k]`` is the target for the predicted state ``x(k+1)`` and
    ``u_ref[k]`` the target for ``u(k)``, ``k = 0..N-1``.
    """

    model: DiscreteAffineModel
    settings: MpcSettings
    x_ref: np.ndarray
    u_ref: np.ndarray

    @property
    def N(self) -> int:
        return self.settings.N


def tracking_spec(traj: ReferenceTrajectory, i: int, model: DiscreteAffineModel, settings: MpcSettings) -> LinearMpcSpec:
    """Problem at reference point ``i``; the tail past the end repeats the last point."""
    K = len(traj)
    N = settings.N
    xi = np.minimum(np.arange(i + 1, i + N + 1), K - 1)
    ui = np.minimum(np.arange(i, i + N), K - 1)
    return LinearMpcSpec(model, settings, traj.states[xi], traj.controls[ui])


@dataclass(frozen=True)
class MpQpProblem:
    H: np.ndarray
    F: np.ndarray
    C_f: np.ndarray
    G: np.ndarray
    W: np.ndarray
    E: np.ndarray
    Hinv: np.ndarray
    omega: np.ndarray
    S: np.ndarray
    n_x: int
    n_u: int
    N: int
    n_input_rows: int
    # constant part of the tracking cost: 1/2 x'Yx + c_x'x + c0
    Y: np.ndarray = field(repr=False, default=None)
    c_x: np.ndarray = field(repr=False, default=None)
    c0: float = 0.0

    @property
    def n_vars(self) -> int:
        return self.H.shape[0]

    @property
    def n_rows(self) -> int:
        return self.G.shape[0]

    def h(self, x) -> np.ndarray:
        return self.W + self.E @ x

    def g(self, x) -> np.ndarray:
        return self.F.T @ x + self.C_f

    def objective(self, U, x) -> float:
        return float(0.5 * U @ self.H @ U + self.g(x) @ U)

    def tracking_cost(self, U, x) -> float:
        """Full horizon cost, constants included."""
        x = np.asarray(x, float)
        return self.objective(U, x) + float(0.5 * x @ self.Y @ x + self.c_x @ x + self.c0)

    def input_only(self) -> "MpQpProblem":
        """Same problem with the state-box rows dropped."""
        k = self.n_input_rows
        return _with_rows(self, self.G[:k], self.W[:k], self.E[:k], k)


def _with_rows(p: MpQpProblem, G, W, E, n_input_rows) -> MpQpProblem:
    omega = W + G @ (p.Hinv @ p.C_f)
    S = E + G @ (p.Hinv @ p.F.T)
    return replace(p, G=G, W=W, E=E, omega=omega, S=S, n_input_rows=n_input_rows)


def mpqp_from_matrices(H, F, C_f, G, W, E, n_u: int | None = None) -> MpQpProblem:
    """Wrap raw mpQP data (used for generic instances and tests)."""
    H = np.asarray(H, float)
    H = 0.5 * (H + H.T)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise CondensationError("H is not positive definite") from exc
    Linv = scipy.linalg.solve_triangular(L, np.eye(H.shape[0]), lower=True)
    Hinv = Linv.T @ Linv
    F = np.atleast_2d(np.asarray(F, float))
    C_f = np.asarray(C_f, float).ravel()
    G = np.atleast_2d(np.asarray(G, float)).reshape(-1, H.shape[0])
    W = np.asarray(W, float).ravel()
    E = np.asarray(E, float).reshape(G.shape[0], F.shape[0])
    n_x = F.shape[0]
    n_u = H.shape[0] if n_u is None else n_u
    p = MpQpProblem(
        H=H, F=F, C_f=C_f, G=G, W=W, E=E, Hinv=Hinv,
        omega=W + G @ (Hinv @ C_f), S=E + G @ (Hinv @ F.T),
        n_x=n_x, n_u=n_u, N=H.shape[0] // n_u, n_input_rows=G.shape[0],
        Y=np.zeros((n_x, n_x)), c_x=np.zeros(n_x), c0=0.0,
    )
    return p


def condense(spec: LinearMpcSpec) -> MpQpProblem:
    """Eliminate the predicted states and stack the box constraints."""
    A, B, b = spec.model.A, spec.model.B, spec.model.b
    s = spec.settings
    N = s.N
    n_x, n_u = B.shape

    # X = Phi x + Gam U + beta, X = [x(1); ...; x(N)]
    Phi = np.zeros((N * n_x, n_x))
    Gam = np.zeros((N * n_x, N * n_u))
    beta = np.zeros(N * n_x)
    Ak = np.eye(n_x)
    AkB = [B]
    acc = np.zeros(n_x)
    for k in range(N):
        acc = A @ acc + b
        Ak = A @ Ak
        Phi[k * n_x:(k + 1) * n_x] = Ak
        beta[k * n_x:(k + 1) * n_x] = acc
        if k > 0:
            AkB.append(A @ AkB[-1])
        for j in range(k + 1):
            Gam[k * n_x:(k + 1) * n_x, j * n_u:(j + 1) * n_u] = AkB[k - j]

    Qb = np.kron(np.eye(N), s.Q)
    Rb = np.kron(np.eye(N), s.R)
    Xr = np.asarray(spec.x_ref, float).ravel()
    Ur = np.asarray(spec.u_ref, float).ravel()
    d = beta - Xr
    QG = Qb @ Gam

    H = 2.0 * (Gam.T @ QG + Rb)
    F = 2.0 * Phi.T @ QG
    C_f = 2.0 * (d @ QG - Ur @ Rb)

    rows_G, rows_W, rows_E = [], [], []
    eye = np.eye(N * n_u)
    zero_E = np.zeros((N * n_u, n_x))
    for G_blk, bound, sign in ((eye, s.u_max, 1.0), (-eye, s.u_min, -1.0)):
        lim = sign * np.tile(bound, N)
        keep = np.isfinite(lim)
        rows_G.append(G_blk[keep]); rows_W.append(lim[keep]); rows_E.append(zero_E[keep])
    n_input_rows = sum(r.shape[0] for r in rows_G)
    for sign, bound in ((1.0, s.x_max), (-1.0, s.x_min)):
        lim = sign * np.tile(bound, N)
        keep = np.isfinite(lim)
        rows_G.append((sign * Gam)[keep])
        rows_W.append((lim - sign * beta)[keep])
        rows_E.append((-sign * Phi)[keep])
    G = np.vstack(rows_G)
    W = np.concatenate(rows_W)
    E = np.vstack(rows_E)

    p = mpqp_from_matrices(H, F, C_f, G, W, E, n_u=n_u)
    return replace(
        p,
        n_input_rows=n_input_rows,
        Y=2.0 * Phi.T @ Qb @ Phi,
        c_x=2.0 * Phi.T @ Qb @ d,
        c0=float(d @ Qb @ d + Ur @ Rb @ Ur),
    )


# --------------------------------------------------------------------------
# QP solving
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QpSolution:
    U_star: np.ndarray
    z_star: np.ndarray
    lam: np.ndarray
    active_set: tuple
    objective: float
    iterations: int = 0
    warm: bool = False


FEAS_TOL = 1e-10
WEAK_TOL = 1e-10


def _finish(p: MpQpProblem, x, U, active, lam, iterations, warm) -> QpSolution:
    scale = max(1.0, float(np.max(lam))) if lam.size else 1.0
    keep = lam > WEAK_TOL * scale
    active = np.asarray(active)[keep]
    lam = lam[keep]
    order = np.argsort(active)
    z = U + p.Hinv @ p.g(x)
    return QpSolution(
        U_star=U, z_star=z, lam=lam[order], active_set=tuple(int(a) for a in active[order]),
        objective=p.objective(U, x), iterations=int(iterations), warm=warm,
    )


def _try_active_set(p: MpQpProblem, x, h, g, active) -> tuple[np.ndarray, np.ndarray] | None:
    idx = list(active)
    if idx:
        GA = p.G[idx]
        M = GA @ p.Hinv @ GA.T
        try:
            lam = -np.linalg.solve(M, h[idx] + GA @ (p.Hinv @ g))
        except np.linalg.LinAlgError:
            return None
        if np.any(lam < -WEAK_TOL * max(1.0, float(np.abs(lam).max()))):
            return None
        U = -p.Hinv @ (g + GA.T @ lam)
    else:
        lam = np.zeros(0)
        U = -p.Hinv @ g
    if np.any(p.G @ U - h > FEAS_TOL * (1.0 + np.abs(h))):
        return None
    return U, lam


def solve_qp(p: MpQpProblem, x, warm_start: Sequence[int] | None = None, max_iter: int | None = None) -> QpSolution:
    """Global optimum of the strictly convex QP at parameter ``x``.

    ``warm_start`` is a guessed active set (e.g. last step's); it is accepted
    only when its KKT point is primal and dual feasible.
    """
    x = np.ascontiguousarray(x, dtype=float)
    h = p.h(x)
    g = p.g(x)
    if warm_start is not None:
        hit = _try_active_set(p, x, h, g, warm_start)
        if hit is not None:
            U, lam = hit
            return _finish(p, x, U, np.asarray(list(warm_start), dtype=np.int64), lam, 0, True)
    if max_iter is None:
        max_iter = 10 * (p.n_vars + p.n_rows) + 50
    U, active, lam, status, it = kernels.qp_solve(p.Hinv, g, p.G, h, max_iter, FEAS_TOL)
    if status == kernels.QP_INFEASIBLE:
        raise QpInfeasibleError(f"QP infeasible at x={x.tolist()}")
    if status == kernels.QP_MAX_ITER:
        raise QpMaxIterError(
            f"QP exceeded {max_iter} iterations at x={x.tolist()} (|active|={len(active)})",
            U=U, active=active, iterations=it,
        )
    return _finish(p, x, U, active, lam, it, False)


def kkt_residuals(p: MpQpProblem, x, sol: QpSolution) -> dict:
    """Residuals of stationarity, primal/dual feasibility and complementarity."""
    x = np.asarray(x, float)
    h = p.h(x)
    lam_full = np.zeros(p.n_rows)
    lam_full[list(sol.active_set)] = sol.lam
    U = sol.U_star
    slack = p.G @ U - h
    # the same conditions in the shifted variable z
    z_stat = p.H @ sol.z_star + p.G.T @ lam_full
    return {
        "stationarity": float(np.max(np.abs(p.H @ U + p.g(x) + p.G.T @ lam_full))),
        "stationarity_z": float(np.max(np.abs(z_stat))),
        "primal": float(max(0.0, slack.max())) if slack.size else 0.0,
        "active_equality": float(np.max(np.abs(slack[list(sol.active_set)]))) if sol.active_set else 0.0,
        "dual": float(max(0.0, -lam_full.min())) if lam_full.size else 0.0,
        "complementarity": float(np.max(np.abs(lam_full * slack))) if slack.size else 0.0,
    }


# --------------------------------------------------------------------------
# explicit laws
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineMap:
    K: np.ndarray
    k: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return self.K @ np.asarray(x, float) + self.k


@dataclass(frozen=True)
class ExplicitLaw:
    """Affine optimiser ``U*(x) = K_U x + k_U`` valid on ``{x : P x <= q}``."""

    K_U: np.ndarray
    k_U: np.ndarray
    P: np.ndarray
    q: np.ndarray
    active_set: tuple
    n_u: int

    def __call__(self, x) -> np.ndarray:
        return self.K_U @ np.asarray(x, float) + self.k_U

    def margin(self, x) -> float:
        """Largest violation of the region inequalities (<= 0 inside)."""
        if self.P.shape[0] == 0:
            return -np.inf
        return float(np.max(self.P @ np.asarray(x, float) - self.q))

    def contains(self, x, tol: float = 1e-9) -> bool:
        return self.margin(x) <= tol


RANK_TOL = 1e-10


def _independent_rows(GA: np.ndarray, active: list[int]) -> list[int]:
    _, R, piv = scipy.linalg.qr(GA.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(diag[0], 1e-300))) if diag.size else 0
    return sorted(active[i] for i in piv[:rank])


def explicit_law(p: MpQpProblem, sol: QpSolution, x_seed) -> ExplicitLaw:
    """Affine control law and critical region of ``sol``'s active set.

    A row-rank-deficient active set is first reduced to a maximal independent
    subset.
    """
    x_seed = np.asarray(x_seed, float)
    active = list(sol.active_set)
    if active:
        active = _independent_rows(p.G[active], active)
    inactive = np.setdiff1d(np.arange(p.n_rows), active)
    n_x = p.n_x

    HinvFt = p.Hinv @ p.F.T
    HinvC = p.Hinv @ p.C_f
    if active:
        GA = p.G[active]
        M = GA @ p.Hinv @ GA.T
        if np.linalg.cond(M) > 1e12:
            raise DegenerateLawError(f"singular KKT block for active set {active}")
        Minv_S = np.linalg.solve(M, p.S[active])
        Minv_w = np.linalg.solve(M, p.omega[active])
        HGt = p.Hinv @ GA.T
        Kz = HGt @ Minv_S
        kz = HGt @ Minv_w
        # lambda(x) = -M^-1 (omega_A + S_A x) >= 0
        P_dual, q_dual = Minv_S, -Minv_w
    else:
        Kz = np.zeros((p.n_vars, n_x))
        kz = np.zeros(p.n_vars)
        P_dual, q_dual = np.zeros((0, n_x)), np.zeros(0)

    GN = p.G[inactive]
    P_prim = GN @ Kz - p.S[inactive]
    q_prim = p.omega[inactive] - GN @ kz

    P = np.vstack([P_prim, P_dual])
    q = np.concatenate([q_prim, q_dual])
    norms = np.linalg.norm(P, axis=1)
    trivial = norms <= 1e-12
    drop = trivial & (q >= -1e-9)
    P, q, norms = P[~drop], q[~drop], norms[~drop]
    scale = np.where(norms > 1e-12, norms, 1.0)
    P = P / scale[:, None]
    q = q / scale

    law = ExplicitLaw(Kz - HinvFt, kz - HinvC, P, q, tuple(active), p.n_u)
    if law.margin(x_seed) > 1e-6:
        raise DegenerateLawError(
            f"seed violates its own region by {law.margin(x_seed):.3e} (active set {active})"
        )
    return law


def first_control(law: ExplicitLaw) -> AffineMap:
    """Rows of the law that produce the first control move."""
    return AffineMap(law.K_U[: law.n_u].copy(), law.k_U[: law.n_u].copy())


def enumerate_regions(p: MpQpProblem, seed_states, skip_infeasible: bool = False) -> list[ExplicitLaw]:
    """Critical regions met by the seeds, one per distinct active set."""
    laws: list[ExplicitLaw] = []
    seen: set[tuple] = set()
    for x in np.atleast_2d(seed_states):
        try:
            sol = solve_qp(p, x)
        except QpInfeasibleError:
            if skip_infeasible:
                continue
            raise
        if sol.active_set in seen:
            continue
        seen.add(sol.active_set)
        law = explicit_law(p, sol, x)
        if law.active_set != sol.active_set:
            if law.active_set in seen:
                continue
            seen.add(law.active_set)
        laws.append(law)
    return laws


class RegionTable:
    """Stacked region inequalities and first-control laws for fast scanning."""

    def __init__(self, laws: Sequence[ExplicitLaw]):
        if not laws:
            raise ValueError("region table needs at least one region")
        self.laws = list(laws)
        self.P = np.ascontiguousarray(np.vstack([l.P for l in laws]))
        self.q = np.concatenate([l.q for l in laws])
        self.row_ptr = np.cumsum([0] + [l.P.shape[0] for l in laws]).astype(np.int64)
        self.Ku = np.ascontiguousarray(np.stack([l.K_U[: l.n_u] for l in laws]))
        self.ku = np.ascontiguousarray(np.stack([l.k_U[: l.n_u] for l in laws]))

    def __len__(self):
        return len(self.laws)

    def locate(self, x, tol: float = 1e-9) -> int:
        return int(kernels.region_search(self.P, self.q, self.row_ptr, x, tol))

    def control(self, x, tol: float = 1e-9):
        x = np.ascontiguousarray(x, dtype=float)
        r = kernels.region_search(self.P, self.q, self.row_ptr, x, tol)
        if r < 0:
            return None
        return self.Ku[r] @ x + self.ku[r]


def sequential_search(regions, x, tol: float = 1e-9):
    """First control of the first region containing ``x``; ``None`` if none does."""
    table = regions if isinstance(regions, RegionTable) else RegionTable(regions)
    return table.control(x, tol)


# --------------------------------------------------------------------------
# region list text format
# --------------------------------------------------------------------------

REGIONS_MAGIC = "explicit-regions 1"


def dumps_regions(laws: Sequence[ExplicitLaw]) -> str:
    n_x = laws[0].K_U.shape[1]
    lines = [
        REGIONS_MAGIC,
        f"dims {n_x} controls {laws[0].n_u} horizon_vars {laws[0].K_U.shape[0]} regions {len(laws)}",
    ]
    fmt = lambda row: " ".join(repr(float(v)) for v in row)
    for i, law in enumerate(laws):
        lines.append(f"R {i} rows {law.P.shape[0]} active " + " ".join(str(a) for a in law.active_set))
        for prow, qv in zip(law.P, law.q):
            lines.append("P " + fmt((*prow, qv)))
        for krow, kv in zip(law.K_U, law.k_U):
            lines.append("U " + fmt((*krow, kv)))
    return "\n".join(lines) + "\n"


def loads_regions(text: str) -> list[ExplicitLaw]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != REGIONS_MAGIC:
        raise ValueError("not an explicit-regions file")
    head = lines[1].split()
    n_x, n_u, n_vars, n_reg = (int(v) for v in head[1::2])
    laws = []
    pos = 2
    for _ in range(n_reg):
        parts = lines[pos].split()
        n_rows = int(parts[3])
        active = tuple(int(a) for a in parts[5:])
        pos += 1
        P = np.array([[float(v) for v in lines[pos + i].split()[1:]] for i in range(n_rows)]).reshape(n_rows, n_x + 1)
        pos += n_rows
        K = np.array([[float(v) for v in lines[pos + i].split()[1:]] for i in range(n_vars)]).reshape(n_vars, n_x + 1)
        pos += n_vars
        laws.append(ExplicitLaw(K[:, :n_x], K[:, n_x], P[:, :n_x], P[:, n_x], active, n_u))
    return laws


def save_regions(laws, path) -> None:
    Path(path).write_text(dumps_regions(laws), newline="\n")


def load_regions(path) -> list[ExplicitLaw]:
    return loads_regions(Path(path).read_text())
