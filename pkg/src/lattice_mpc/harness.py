"""Strategy comparison: build artifacts once, roll out each strategy, write CSVs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ScenarioConfig
from .controller import (
    STRATEGIES,
    ExplicitController,
    LatticeController,
    SamplingPlan,
    Scenario,
    TrackingResult,
    build_explicit,
    offline_build,
    run_tracking,
)
from .kinematics import RobotParams, generate_reference
from .mpqp import MpcSettings

log = logging.getLogger(__name__)

RUN_COLUMNS = ("k", "t", "x_ref", "y_ref", "phi_ref", "x", "y", "phi", "v", "delta", "err", "eval_time_ns")
TIMING_COLUMNS = ("eval_time_ns",)


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    """Reference (plus optional lookahead points), linearized models and MPC settings."""
    params = RobotParams(cfg.wheelbase)
    traj = generate_reference(cfg.shape, cfg.T, cfg.K, params, lookahead=cfg.lookahead, **dict(cfg.geometry))
    settings = MpcSettings(
        N=cfg.N,
        Q=np.diag(cfg.Q),
        R=np.diag(cfg.R),
        x_min=np.array(cfg.x_min),
        x_max=np.array(cfg.x_max),
        u_min=np.array(cfg.u_min),
        u_max=np.array(cfg.u_max),
    )
    return Scenario(traj, params, settings, cfg.substeps, cfg.delta_threshold, steps=cfg.K)


def sampling_plan(cfg: ScenarioConfig) -> SamplingPlan:
    return SamplingPlan(
        radius=cfg.radius,
        samples_per_point=cfg.samples_per_point,
        resample_budget=cfg.resample_budget,
        resample_tol=cfg.resample_tol,
        validation_grid_size=cfg.validation_grid_size,
    )


def parse_strategies(text: str | Sequence[str] | None) -> list[str]:
    if text is None:
        return list(STRATEGIES)
    items = [s.strip() for s in text.split(",")] if isinstance(text, str) else list(text)
    items = [s for s in items if s]
    bad = [s for s in items if s not in STRATEGIES]
    if bad or not items:
        raise ValueError(f"unknown strategies {bad}; choose from {', '.join(STRATEGIES)}")
    return list(dict.fromkeys(items))


# --------------------------------------------------------------------------
# CSV artifacts
# --------------------------------------------------------------------------

def write_run_csv(result: TrackingResult, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for k in range(result.states.shape[0]):
            ref, x, u = result.ref_states[k], result.states[k], result.controls[k]
            w.writerow([k, repr(k * result.T), *map(repr, map(float, ref)), *map(repr, map(float, x)),
                        *map(repr, map(float, u)), repr(float(result.errors[k])), int(result.eval_time_ns[k])])
    return path


def read_run_csv(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    missing = [c for c in RUN_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    if not body:
        raise ValueError(f"{path}: no data rows")
    data = np.array(body, dtype=float)
    return {c: data[:, header.index(c)] for c in header}


@dataclass
class StrategyRow:
    strategy: str
    offline_time_s: float
    median_time_us: float
    mean_time_us: float
    average_error: float
    terms: int = 0
    literals: int = 0
    regions: int = 0
    fallbacks: int = 0
    violations: int = 0


@dataclass
class ComparisonReport:
    scenario: str
    seed: int
    rows: list

    def row(self, strategy: str) -> StrategyRow:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)

    def to_text(self) -> str:
        head = f"{'strategy':<13} {'offline s':>10} {'median us':>10} {'mean us':>10} {'avg err m':>12} {'terms':>7} {'literals':>8} {'regions':>7}"
        lines = [f"scenario {self.scenario}  seed {self.seed}", head]
        for r in self.rows:
            lines.append(
                f"{r.strategy:<13} {r.offline_time_s:>10.3f} {r.median_time_us:>10.2f} {r.mean_time_us:>10.2f} "
                f"{r.average_error:>12.6f} {r.terms:>7d} {r.literals:>8d} {r.regions:>7d}"
            )
        return "\n".join(lines)

    def write_csv(self, path) -> Path:
        path = Path(path)
        cols = list(StrategyRow.__dataclass_fields__)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in cols)])
        return path


@dataclass
class Artifacts:
    scenario: Scenario
    lattice: LatticeController | None = None
    explicit: ExplicitController | None = None


def build_artifacts(cfg: ScenarioConfig, strategies: Sequence[str], lattice: LatticeController | None = None) -> Artifacts:
    """Build only what the requested strategies need."""
    sc = build_scenario(cfg)
    plan = sampling_plan(cfg)
    art = Artifacts(sc, lattice)
    if "lattice" in strategies and art.lattice is None:
        log.info("building lattice controllers for %d points", sc.K)
        art.lattice = offline_build(sc, plan, seed=cfg.seed, workers=cfg.workers)
    if "explicit_seq" in strategies:
        log.info("enumerating critical regions for %d points", sc.K)
        art.explicit = build_explicit(sc, plan, seed=cfg.seed)
    return art


def run_compare(cfg: ScenarioConfig, strategies: Sequence[str] | None, out_dir,
                artifacts: Artifacts | None = None) -> tuple[ComparisonReport, dict[str, TrackingResult]]:
    """Run every strategy from the same start and write per-step CSVs and a report."""
    strategies = parse_strategies(strategies)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = artifacts if artifacts is not None else build_artifacts(cfg, strategies)
    results, rows = {}, []
    for s in strategies:
        res = run_tracking(s, art.scenario, cfg.x0, art.lattice, art.explicit)
        results[s] = res
        write_run_csv(res, out / f"run_{s}.csv")
        row = StrategyRow(s, res.offline_time_s, res.median_time_us, res.mean_time_us, res.average_error,
                          fallbacks=res.fallbacks,
                          violations=sum("outside the state box" in e for e in res.events))
        if s == "lattice":
            tot = art.lattice.totals()
            row.terms, row.literals = tot["terms_after"], tot["literals_after"]
        elif s == "explicit_seq":
            row.regions = int(sum(art.explicit.region_counts()))
        rows.append(row)
        for e in res.events:
            log.warning("%s: %s", s, e)
    report = ComparisonReport(cfg.name, cfg.seed, rows)
    report.write_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text() + "\n")
    return report, results


def emit_plot_data(csv_paths: Sequence, out_path) -> Path:
    """Reference and closed-loop XY of several runs side by side."""
    if not csv_paths:
        raise ValueError("no run CSVs given")
    runs = {}
    for p in csv_paths:
        name = Path(p).stem
        name = name[4:] if name.startswith("run_") else name
        runs[name] = read_run_csv(p)
    first = next(iter(runs.values()))
    n = first["k"].shape[0]
    for name, d in runs.items():
        if d["k"].shape[0] != n:
            raise ValueError(f"run {name} has {d['k'].shape[0]} rows, expected {n}")
    out_path = Path(out_path)
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_ref", "y_ref"] + [c for name in runs for c in (f"x_act_{name}", f"y_act_{name}")])
        for k in range(n):
            row = [first["x_ref"][k], first["y_ref"][k]]
            for d in runs.values():
                row += [d["x"][k], d["y"][k]]
            w.writerow([repr(float(v)) for v in row])
    return out_path
