"""Offline construction of per-point lattice controllers and the online loop."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from . import lattice as lt
from .kinematics import (
    DiscreteAffineModel,
    dynamics_many,
    ReferenceTrajectory,
    RobotParams,
    integrate_plant,
    linearize_along,
    select_linearization_points,
)
from .mpqp import (
    MpcSettings,
    MpQpProblem,
    QpInfeasibleError,
    RegionTable,
    condense,
    enumerate_regions,
    explicit_law,
    first_control,
    solve_qp,
    tracking_spec,
)

log = logging.getLogger(__name__)

STRATEGIES = ("lattice", "linear_mpc", "explicit_seq")


class BuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplingPlan:
    """How states are drawn around each reference point.

    ``radius=None`` means half the smallest spacing between consecutive
    reference states.
    """

    radius: float | None = None
    samples_per_point: int = 50
    resample_budget: int = 3
    resample_tol: float = 1e-4
    validation_grid_size: int = 100
    max_draw_factor: int = 20
    repair_rounds: int = 6

    def __post_init__(self):
        if self.radius is not None and not self.radius > 0:
            raise ValueError("sampling radius must be positive")
        if self.samples_per_point < 1:
            raise ValueError("samples_per_point must be >= 1")
        if self.resample_budget < 0 or self.validation_grid_size < 0:
            raise ValueError("resample budget and validation size must be >= 0")

    def radius_for(self, traj: ReferenceTrajectory) -> float:
        return self.radius if self.radius is not None else 0.5 * traj.min_spacing()


@dataclass
class Scenario:
    """Reference, robot and MPC settings, plus the linearized models.

    Only the first ``steps`` reference points are tracked (all by default);
    any further points serve as horizon lookahead.
    """

    traj: ReferenceTrajectory
    params: RobotParams
    settings: MpcSettings
    substeps: int = 10
    delta_threshold: float = 0.0
    steps: int | None = None
    assignment: np.ndarray = field(init=False, repr=False)
    models: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.steps is None:
            self.steps = len(self.traj)
        if not 1 <= self.steps <= len(self.traj):
            raise ValueError(f"steps must lie in [1, {len(self.traj)}]")
        self.assignment = select_linearization_points(self.traj, self.params, self.delta_threshold)
        self.models = linearize_along(self.traj, self.params, self.assignment)

    @property
    def K(self) -> int:
        return self.steps

    @property
    def n_models(self) -> int:
        return int(self.assignment.max()) + 1

    def mpqp(self, i: int) -> MpQpProblem:
        return condense(tracking_spec(self.traj, i, self.models[i], self.settings))


def sample_ball(rng: np.random.Generator, center, radius: float, n: int) -> np.ndarray:
    """``n`` points uniform in the Euclidean ball."""
    center = np.asarray(center, float)
    d = center.shape[0]
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    return center + g * r[:, None]


# --------------------------------------------------------------------------
# per-point build
# --------------------------------------------------------------------------

@dataclass
class PointController:
    index: int
    lattices: list
    raw_lattices: list
    sample_points: np.ndarray
    sample_controls: np.ndarray
    stats: dict


class _Labeler:
    """QP solves at states, with the explicit law cached per active set."""

    def __init__(self, prob: MpQpProblem):
        self.prob = prob
        self.laws = {}

    def __call__(self, x):
        sol = solve_qp(self.prob, x)
        fc = self.laws.get(sol.active_set)
        if fc is None:
            fc = first_control(explicit_law(self.prob, sol, x))
            self.laws[sol.active_set] = fc
        return sol.U_star[: self.prob.n_u].copy(), fc


def _lattices_from(X, Uq, maps, n_u) -> list:
    out = []
    for c in range(n_u):
        samples = [
            lt.LabeledSample(x, float(u[c]), lt.AffineFunction(fc.K[c], fc.k[c]))
            for x, u, fc in zip(X, Uq, maps)
        ]
        out.append(lt.construct_from_samples(samples))
    return out


def _interpolation_gaps(lattices, X, Uq, tol):
    """Pairs ``(j, k)``: sample ``k`` is overshot, mostly by sample ``j``'s term.

    Terms are in sample order, as built by ``construct_from_samples``.
    """
    pairs = set()
    for c, f in enumerate(lattices):
        TV = f.term_values(X)
        over = TV - Uq[:, c][:, None]
        for k in np.flatnonzero(over.max(axis=1) > tol):
            pairs.add((int(np.argmax(over[k])), int(k)))
    return sorted(pairs)


def _repair_interpolation(X, Uq, maps, label, n_u, rounds, tol=1e-8):
    """Label states on segments between clashing samples until every sample is reproduced.

    A term overshoots another sample only when affine pieces crossed on the
    way between the two were never sampled; points on that segment supply them.
    """
    lattices = _lattices_from(X, Uq, maps, n_u)
    added = 0
    for r in range(rounds):
        pairs = _interpolation_gaps(lattices, np.asarray(X), np.asarray(Uq), tol)
        if not pairs:
            return lattices, added, 0
        ts = np.linspace(0.0, 1.0, 2 ** (r + 2) + 1)[1:-1]
        for j, k in pairs:
            for t in ts:
                x = X[j] + t * (X[k] - X[j])
                try:
                    u, fc = label(x)
                except QpInfeasibleError:
                    continue
                X.append(x)
                Uq.append(u)
                maps.append(fc)
                added += 1
        lattices = _lattices_from(X, Uq, maps, n_u)
    left = len(_interpolation_gaps(lattices, np.asarray(X), np.asarray(Uq), tol))
    return lattices, added, left


def _draw_feasible(rng, center, radius, n, label, max_draws, index):
    pts, ctrls, maps = [], [], []
    draws = discards = 0
    while len(pts) < n:
        if draws >= max_draws:
            if not pts:
                raise BuildError(f"reference point {index}: no feasible state in the sampling ball")
            break
        batch = sample_ball(rng, center, radius, n - len(pts))
        for x in batch:
            draws += 1
            try:
                u, fc = label(x)
            except QpInfeasibleError:
                discards += 1
                continue
            pts.append(x)
            ctrls.append(u)
            maps.append(fc)
    return pts, ctrls, maps, draws, discards


def build_point(scenario: Scenario, i: int, plan: SamplingPlan, seed: int) -> PointController:
    """Sample, label, build, resample and simplify the lattices of point ``i``."""
    rng = np.random.default_rng([seed, i])
    prob = scenario.mpqp(i)
    radius = plan.radius_for(scenario.traj)
    center = scenario.traj.states[i]
    label = _Labeler(prob)
    n_u = prob.n_u
    max_draws = plan.max_draw_factor * max(plan.samples_per_point, 1)

    X, Uq, maps, draws, discards = _draw_feasible(
        rng, center, radius, plan.samples_per_point, label, max_draws, i
    )
    lattices, repaired, gaps = _repair_interpolation(X, Uq, maps, label, n_u, plan.repair_rounds)

    validation = []
    rounds = added = 0
    worst = 0.0
    for rounds in range(1, plan.resample_budget + 1):
        V, Vu, Vmaps, d2, x2 = _draw_feasible(
            rng, center, radius, plan.validation_grid_size, label, plan.max_draw_factor * max(plan.validation_grid_size, 1), i
        )
        draws += d2
        discards += x2
        if not V:
            break
        V = np.asarray(V)
        Vu = np.asarray(Vu)
        approx = np.column_stack([f.evaluate_many(V) for f in lattices])
        mismatch = np.max(np.abs(approx - Vu), axis=1)
        worst = float(mismatch.max())
        validation.append(V)
        bad = np.flatnonzero(mismatch > plan.resample_tol)
        if bad.size == 0:
            break
        X += [V[k] for k in bad]
        Uq += [Vu[k] for k in bad]
        maps += [Vmaps[k] for k in bad]
        added += bad.size
        lattices, more, gaps = _repair_interpolation(X, Uq, maps, label, n_u, plan.repair_rounds)
        repaired += more
    else:
        rounds = plan.resample_budget

    X = np.asarray(X)
    Uq = np.asarray(Uq)
    grid = np.vstack(validation + [X]) if validation else X
    simplified = [lt.simplify(f, grid) for f in lattices]

    stats = {
        "samples": int(X.shape[0]),
        "draws": int(draws),
        "discarded": int(discards),
        "resample_rounds": int(rounds),
        "resampled_added": int(added),
        "segment_samples": int(repaired),
        "unreproduced_samples": int(gaps),
        "active_sets": len(label.laws),
        "validation_mismatch": worst,
        "terms_before": sum(f.n_terms for f in lattices),
        "literals_before": sum(f.n_literals for f in lattices),
        "terms_after": sum(f.n_terms for f in simplified),
        "literals_after": sum(f.n_literals for f in simplified),
    }
    return PointController(i, simplified, lattices, X, Uq, stats)


def _build_point_job(args):
    return build_point(*args)


# --------------------------------------------------------------------------
# controller
# --------------------------------------------------------------------------

def pack_lattices(lattices: Sequence[lt.LatticePWA]):
    coef = np.ascontiguousarray(np.vstack([f.coef for f in lattices]))
    off = np.concatenate([f.offset for f in lattices])
    lit_base = np.cumsum([0] + [f.n_literals for f in lattices])
    term_idx, term_len = [], []
    for base, f in zip(lit_base, lattices):
        for t in f.terms:
            term_idx.extend(base + j for j in t)
            term_len.append(len(t))
    term_ptr = np.cumsum([0] + term_len).astype(np.int64)
    out_ptr = np.cumsum([0] + [f.n_terms for f in lattices]).astype(np.int64)
    return coef, off, term_ptr, np.asarray(term_idx, dtype=np.int64), out_ptr


class LatticeController:
    """Per-reference-point lattice approximations of the first MPC move."""

    def __init__(self, points: Sequence[PointController], u_min, u_max, radius: float,
                 plan: SamplingPlan | None = None, traj_digest: str = "", build_time: float = 0.0):
        self.points = list(points)
        self.u_min = np.asarray(u_min, dtype=float)
        self.u_max = np.asarray(u_max, dtype=float)
        self.radius = float(radius)
        self.plan = plan
        self.traj_digest = traj_digest
        self.build_time = build_time
        self._packed = [pack_lattices(p.lattices) for p in self.points]

    def __len__(self):
        return len(self.points)

    def online_step(self, i: int, x) -> np.ndarray:
        coef, off, tp, ti, op = self._packed[i]
        return kernels.packed_eval(coef, off, tp, ti, op, x, self.u_min, self.u_max)

    def totals(self) -> dict:
        keys = ("terms_before", "literals_before", "terms_after", "literals_after", "samples", "discarded")
        return {k: int(sum(p.stats.get(k, 0) for p in self.points)) for k in keys}

    def unsimplified(self) -> "LatticeController":
        pts = [PointController(p.index, p.raw_lattices, p.raw_lattices, p.sample_points, p.sample_controls, p.stats)
               for p in self.points]
        return LatticeController(pts, self.u_min, self.u_max, self.radius, self.plan, self.traj_digest, self.build_time)

    # persistence ----------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for p in self.points:
            for c, f in enumerate(p.lattices):
                name = f"point{p.index:05d}_u{c}.lpwa"
                lt.save(f, directory / name)
                files.append(name)
        manifest = {
            "format": "lattice-controller 1",
            "trajectory_sha256": self.traj_digest,
            "n_points": len(self.points),
            "n_outputs": len(self.points[0].lattices) if self.points else 0,
            "radius": self.radius,
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
            "plan": asdict(self.plan) if self.plan else None,
            "build_time_s": self.build_time,
            "stats": [p.stats for p in self.points],
            "files": files,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
        return directory

    @classmethod
    def load(cls, directory, expect_digest: str | None = None) -> "LatticeController":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if expect_digest is not None and manifest["trajectory_sha256"] != expect_digest:
            raise BuildError(f"controller in {directory} was built for a different trajectory")
        n_out = manifest["n_outputs"]
        points = []
        for i in range(manifest["n_points"]):
            lats = [lt.load(directory / f"point{i:05d}_u{c}.lpwa") for c in range(n_out)]
            points.append(PointController(i, lats, lats, np.zeros((0, 3)), np.zeros((0, n_out)), manifest["stats"][i]))
        plan = SamplingPlan(**manifest["plan"]) if manifest.get("plan") else None
        return cls(points, manifest["u_min"], manifest["u_max"], manifest["radius"], plan,
                   manifest["trajectory_sha256"], manifest.get("build_time_s", 0.0))


def offline_build(scenario: Scenario, plan: SamplingPlan = SamplingPlan(), seed: int = 0,
                  workers: int = 1, indices: Sequence[int] | None = None) -> LatticeController:
    """Build one lattice controller per reference point."""
    t0 = time.perf_counter()
    idx = list(range(scenario.K)) if indices is None else list(indices)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            points = list(ex.map(_build_point_job, [(scenario, i, plan, seed) for i in idx]))
    else:
        points = [build_point(scenario, i, plan, seed) for i in idx]
    s = scenario.settings
    return LatticeController(points, s.u_min, s.u_max, plan.radius_for(scenario.traj), plan,
                             scenario.traj.digest(), time.perf_counter() - t0)


def online_step(ctrl: LatticeController, i: int, x) -> np.ndarray:
    return ctrl.online_step(i, np.ascontiguousarray(x, dtype=float))


# --------------------------------------------------------------------------
# explicit baseline
# --------------------------------------------------------------------------

@dataclass
class ExplicitController:
    tables: list
    build_time: float = 0.0

    def region_counts(self) -> list[int]:
        return [len(t) for t in self.tables]


def build_explicit(scenario: Scenario, plan: SamplingPlan = SamplingPlan(), seed: int = 0,
                   indices: Sequence[int] | None = None) -> ExplicitController:
    """Sample-seeded critical regions per reference point."""
    t0 = time.perf_counter()
    radius = plan.radius_for(scenario.traj)
    n_seeds = plan.samples_per_point + plan.validation_grid_size
    tables = []
    for i in (range(scenario.K) if indices is None else indices):
        rng = np.random.default_rng([seed, i, 1])
        seeds = np.vstack([scenario.traj.states[i], sample_ball(rng, scenario.traj.states[i], radius, n_seeds)])
        laws = enumerate_regions(scenario.mpqp(i), seeds, skip_infeasible=True)
        if not laws:
            raise BuildError(f"reference point {i}: no feasible seed for region enumeration")
        tables.append(RegionTable(laws))
    return ExplicitController(tables, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# system approximation
# --------------------------------------------------------------------------

def system_lattice(traj: ReferenceTrajectory, models: Sequence[DiscreteAffineModel]) -> list[lt.LatticePWA]:
    """Lattice model of ``(x, u) -> x + T f(x, u)``, one lattice per state component.

    Each reference point contributes its own linearization as the active literal.
    """
    pts = np.hstack([traj.states, traj.controls])
    out = []
    for c in range(traj.states.shape[1]):
        samples = []
        for k, m in enumerate(models):
            fn = lt.AffineFunction(np.append(m.A[c], m.B[c]), m.b[c])
            samples.append(lt.LabeledSample(pts[k], fn(pts[k]), fn))
        out.append(lt.construct_from_samples(samples))
    return out


# --------------------------------------------------------------------------
# online tracking
# --------------------------------------------------------------------------

@dataclass
class TrackingResult:
    strategy: str
    T: float
    ref_states: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    errors: np.ndarray
    eval_time_ns: np.ndarray
    offline_time_s: float = 0.0
    events: list = field(default_factory=list)
    fallbacks: int = 0

    @property
    def average_error(self) -> float:
        return float(np.mean(self.errors))

    @property
    def median_time_us(self) -> float:
        return float(np.median(self.eval_time_ns)) / 1e3

    @property
    def mean_time_us(self) -> float:
        return float(np.mean(self.eval_time_ns)) / 1e3


class _LinearMpc:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.warm = None
        self.events: list = []

    def __call__(self, i, x):
        prob = self.sc.mpqp(i)
        try:
            sol = solve_qp(prob, x, warm_start=self.warm)
        except QpInfeasibleError:
            self.events.append(f"step {i}: QP infeasible, state bounds dropped")
            sol = solve_qp(prob.input_only(), x)
            self.warm = None
            return sol.U_star[: prob.n_u]
        self.warm = sol.active_set
        return sol.U_star[: prob.n_u]


class _Explicit:
    def __init__(self, scenario: Scenario, explicit: ExplicitController):
        self.tables = explicit.tables
        self.fallback = _LinearMpc(scenario)
        self.misses = 0

    def __call__(self, i, x):
        u = self.tables[i].control(x)
        if u is None:
            self.misses += 1
            log.debug("step %d: state not covered by any stored region, solving the QP", i)
            return self.fallback(i, x)
        return u


def run_tracking(strategy: str, scenario: Scenario, x0, controller: LatticeController | None = None,
                 explicit: ExplicitController | None = None) -> TrackingResult:
    """Closed-loop rollout on the nonlinear plant over the whole reference."""
    if strategy == "lattice":
        if controller is None:
            raise ValueError("lattice strategy needs a built LatticeController")
        policy = controller.online_step
        offline = controller.build_time
    elif strategy == "linear_mpc":
        policy = _LinearMpc(scenario)
        offline = 0.0
    elif strategy == "explicit_seq":
        if explicit is None:
            raise ValueError("explicit_seq strategy needs an ExplicitController")
        policy = _Explicit(scenario, explicit)
        offline = explicit.build_time
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")

    traj = scenario.traj
    K = scenario.K
    s = scenario.settings
    states = np.empty((K, 3))
    controls = np.empty((K, 2))
    times = np.empty(K, dtype=np.int64)
    events = []
    x = np.ascontiguousarray(x0, dtype=float).copy()
    steer_cap = math.pi / 2 - 1e-9
    kernels.warmup()
    clock = time.perf_counter_ns
    for k in range(K):
        states[k] = x
        if np.any(x < s.x_min) or np.any(x > s.x_max):
            events.append(f"step {k}: state {x.tolist()} outside the state box")
        t0 = clock()
        u = policy(k, x)
        times[k] = clock() - t0
        controls[k] = u
        v, d = float(u[0]), float(u[1])
        if abs(d) > steer_cap:
            events.append(f"step {k}: steering {d} clipped below pi/2 for the plant")
            d = math.copysign(steer_cap, d)
        x = np.asarray(integrate_plant(x, (v, d), scenario.params, traj.T, scenario.substeps))

    ref = traj.states[:K]
    errors = np.linalg.norm(states[:, :2] - ref[:, :2], axis=1)
    fallbacks = 0
    if isinstance(policy, _Explicit):
        fallbacks = policy.misses
        events += policy.fallback.events
    elif isinstance(policy, _LinearMpc):
        events += policy.events
    return TrackingResult(strategy, traj.T, ref.copy(), states, controls, errors, times,
                          offline, events, fallbacks)


def discrete_map(Z: np.ndarray, params: RobotParams, T: float) -> np.ndarray:
    """Forward-Euler map ``x + T f(x, u)`` over rows ``Z = [x, u]`` of shape (n, 5)."""
    Z = np.atleast_2d(Z)
    return Z[:, :3] + T * dynamics_many(Z[:, :3], Z[:, 3:], params)
