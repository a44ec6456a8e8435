"""Time the numba kernels against their numpy counterparts.

Workloads come from a circle scenario with narrow input bounds, so the
lattices, region tables and QPs carry real active constraints.

    python benchmarks/bench_kernels.py [--repeat 2000] [--point 3]
"""

import argparse
import math
import statistics
import time

import numpy as np

from lattice_mpc import kernels
from lattice_mpc.controller import SamplingPlan, Scenario, build_explicit, build_point, pack_lattices, sample_ball
from lattice_mpc.kinematics import RobotParams, generate_reference
from lattice_mpc.mpqp import MpcSettings


def tight_scenario():
    traj = generate_reference("circle", 0.1, 360, RobotParams())
    s = MpcSettings(10, np.diag([10.0, 10.0, 0.5]), np.diag([0.1, 0.1]),
                    np.array([-3, -3, -3 * math.pi]), np.array([3, 3, 3 * math.pi]),
                    np.array([0.3, -0.1]), np.array([0.4, 0.2]))
    return Scenario(traj, RobotParams(), s)


def per_call_us(fn, args_list, repeat):
    """Median over ``repeat`` calls, cycling through ``args_list``."""
    fn(*args_list[0])
    clock = time.perf_counter_ns
    samples = []
    for k in range(repeat):
        a = args_list[k % len(args_list)]
        t0 = clock()
        fn(*a)
        samples.append(clock() - t0)
    return statistics.median(samples) / 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--point", type=int, default=3, help="reference point used for the workloads")
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is unavailable or disabled; nothing to compare")

    sc = tight_scenario()
    i, r = args.point, 0.1
    plan = SamplingPlan(radius=r)
    rng = np.random.default_rng(0)
    states = sample_ball(rng, sc.traj.states[i], r, 64)
    lo, hi = sc.settings.u_min, sc.settings.u_max

    pc = build_point(sc, i, plan, seed=1)
    packs = {"simplified": pack_lattices(pc.lattices), "raw": pack_lattices(pc.raw_lattices)}
    table = build_explicit(sc, plan, seed=1, indices=[i]).tables[0]
    p = sc.mpqp(i)
    qp_args = [(p.Hinv, p.g(x), p.G, p.h(x), 500, 1e-10) for x in states]
    batch = np.ascontiguousarray(states)

    cases = []
    for name, (coef, off, tp, ti, op) in packs.items():
        single = [(coef, off, tp, ti, op, x, lo, hi) for x in states]
        cases.append((f"lattice eval, {name} ({tp.size - 1} terms)", "packed_eval", single))
        cases.append((f"lattice eval x64, {name}", "packed_eval_many", [(coef, off, tp, ti, op, batch)]))
    cases.append((f"region search ({len(table)} regions)", "region_search",
                  [(table.P, table.q, table.row_ptr, x, 1e-9) for x in states]))
    cases.append((f"QP solve ({p.n_vars} vars, {p.n_rows} rows)", "qp_solve", qp_args))
    cases.append(("RK4 plant step", "rk4_bicycle", [(*x, 0.35, 0.05, 0.1, 0.1, 10) for x in states]))

    print(f"backend check: numba {kernels.BACKEND == 'numba'}, repeat {args.repeat}, point {i}")
    print(f"{'kernel':<44} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for label, name, arglist in cases:
        t_np = per_call_us(getattr(kernels, f"{name}_numpy"), arglist, args.repeat)
        t_nb = per_call_us(getattr(kernels, f"{name}_numba"), arglist, args.repeat)
        print(f"{label:<44} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
