import numpy as np
import pytest
from dataclasses import replace

from lattice_mpc.controller import sample_ball
from lattice_mpc.kinematics import DiscreteAffineModel, RobotParams, linearize
from lattice_mpc.mpqp import (
    CondensationError,
    LinearMpcSpec,
    MpcSettings,
    QpInfeasibleError,
    QpMaxIterError,
    QpSolution,
    RegionTable,
    condense,
    dumps_regions,
    enumerate_regions,
    explicit_law,
    first_control,
    kkt_residuals,
    loads_regions,
    mpqp_from_matrices,
    sequential_search,
    solve_qp,
    tracking_spec,
)

from conftest import base_settings, toy_mpqp
from oracles import dual_projected_gradient, exhaustive_regions

INF3 = np.full(3, np.inf)
INF2 = np.full(2, np.inf)


def rollout_cost(spec, x, U):
    """Simulate the linear model and add up the tracking cost directly."""
    m, s = spec.model, spec.settings
    cost, xk = 0.0, np.asarray(x, float)
    states = []
    for k in range(s.N):
        u = U[2 * k:2 * k + 2]
        xk = m.step(xk, u)
        states.append(xk)
        dx, du = xk - spec.x_ref[k], u - spec.u_ref[k]
        cost += dx @ s.Q @ dx + du @ s.R @ du
    return cost, np.array(states)


def random_spec(rng, N=4, bounded=True):
    xr = rng.uniform(-1, 1, 3)
    ur = np.array([rng.uniform(0.2, 1.0), rng.uniform(-0.5, 0.5)])
    model = linearize(xr, ur, RobotParams(), 0.1)
    s = base_settings(N=N) if bounded else MpcSettings(N, np.diag([10, 10, 0.5]), np.diag([0.1, 0.1]), -INF3, INF3, -INF2, INF2)
    return LinearMpcSpec(model, s, rng.uniform(-1, 1, (N, 3)), rng.uniform(-0.5, 0.5, (N, 2)))


def test_condensed_cost_matches_rollout():
    rng = np.random.default_rng(0)
    for _ in range(20):
        spec = random_spec(rng)
        p = condense(spec)
        x, U = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2 * spec.N)
        cost, states = rollout_cost(spec, x, U)
        assert p.tracking_cost(U, x) == pytest.approx(cost, rel=1e-11, abs=1e-11)
        # constraint rows reproduce the box checks on the simulated states
        s = spec.settings
        expect = np.concatenate([U - np.tile(s.u_max, spec.N), np.tile(s.u_min, spec.N) - U,
                                 (states - s.x_max).ravel(), (s.x_min - states).ravel()])
        np.testing.assert_allclose(p.G @ U - p.h(x), expect, atol=1e-12)


def test_condense_one_step_closed_form():
    rng = np.random.default_rng(1)
    spec = random_spec(rng, N=1, bounded=False)
    p = condense(spec)
    m, s = spec.model, spec.settings
    np.testing.assert_allclose(p.H, 2 * (m.B.T @ s.Q @ m.B + s.R), atol=1e-12)
    x = rng.uniform(-1, 1, 3)
    U = -np.linalg.solve(p.H, p.F.T @ x + p.C_f)
    hand = np.linalg.solve(m.B.T @ s.Q @ m.B + s.R, m.B.T @ s.Q @ (spec.x_ref[0] - m.A @ x - m.b) + s.R @ spec.u_ref[0])
    np.testing.assert_allclose(U, hand, atol=1e-10)
    assert p.G.shape[0] == 0


def test_equilibrium_tracking_costs_nothing():
    A = np.array([[1.0, 0.1, 0.0], [0.0, 0.9, 0.1], [0.0, 0.0, 0.8]])
    B = np.array([[0.0, 0.1], [0.1, 0.0], [0.2, 0.1]])
    xr, ur = np.array([0.3, -0.2, 0.1]), np.array([0.5, -0.1])
    b = xr - A @ xr - B @ ur
    N = 5
    spec = LinearMpcSpec(DiscreteAffineModel(A, B, b), base_settings(N=N), np.tile(xr, (N, 1)), np.tile(ur, (N, 1)))
    p = condense(spec)
    sol = solve_qp(p, xr)
    np.testing.assert_allclose(sol.U_star, np.tile(ur, N), atol=1e-12)
    assert p.tracking_cost(sol.U_star, xr) == pytest.approx(0.0, abs=1e-12)


def test_circle_problem_dimensions(circle_scenario):
    p = circle_scenario.mpqp(0)
    assert p.H.shape == (20, 20)
    np.linalg.cholesky(p.H)
    np.testing.assert_allclose(p.H, p.H.T)


def test_non_pd_hessian_rejected():
    with pytest.raises(CondensationError):
        mpqp_from_matrices(np.diag([1.0, -1.0]), np.zeros((1, 2)), np.zeros(2), np.zeros((0, 2)), [], np.zeros((0, 1)))


def test_settings_validated():
    with pytest.raises(ValueError):
        base_settings(u_lo=(1, 0), u_hi=(0, 1))
    with pytest.raises(ValueError):
        MpcSettings(3, np.eye(3), np.zeros((2, 2)), -INF3, INF3, -INF2, INF2)


def test_tracking_spec_repeats_tail(circle_traj):
    s = base_settings()
    spec = tracking_spec(circle_traj, 355, linearize(circle_traj.states[355], circle_traj.controls[355],
                                                     RobotParams(), 0.1), s)
    np.testing.assert_array_equal(spec.x_ref[4:], np.tile(circle_traj.states[-1], (6, 1)))
    np.testing.assert_array_equal(spec.x_ref[0], circle_traj.states[356])


def test_halfspace_projection_qp():
    p = mpqp_from_matrices(np.eye(1), np.zeros((1, 1)), [0.0], [[-1.0]], [-1.0], [[0.0]])
    sol = solve_qp(p, [0.0])
    assert sol.U_star[0] == pytest.approx(1.0)
    assert sol.active_set == (0,) and sol.lam[0] == pytest.approx(1.0)


def test_unconstrained_instance(circle_traj):
    rng = np.random.default_rng(2)
    spec = random_spec(rng, N=6, bounded=False)
    p = condense(spec)
    x = rng.uniform(-1, 1, 3)
    sol = solve_qp(p, x)
    np.testing.assert_allclose(sol.U_star, -np.linalg.solve(p.H, p.F.T @ x + p.C_f), atol=1e-10)
    assert sol.active_set == ()


def test_infeasible_and_iteration_limit():
    p = mpqp_from_matrices(np.eye(1), np.zeros((1, 1)), [0.0], [[1.0], [-1.0]], [-1.0, -1.0], [[0.0], [0.0]])
    with pytest.raises(QpInfeasibleError):
        solve_qp(p, [0.0])
    p = toy_mpqp(u_bound=0.1)
    with pytest.raises(QpMaxIterError) as err:
        solve_qp(p, [5.0], max_iter=1)
    assert err.value.U is not None


def _random_generic(rng, n=8, m=16):
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    G = rng.standard_normal((m, n))
    U0 = rng.standard_normal(n)
    h = G @ U0 + rng.random(m) * 0.5
    g = rng.standard_normal(n) * 4
    return H, g, G, h


def test_random_instances_match_projected_gradient_oracle(tight_scenario):
    rng = np.random.default_rng(3)
    Hs, gs, Gs, hs, objs = [], [], [], [], []
    for _ in range(100):
        H, g, G, h = _random_generic(rng)
        p = mpqp_from_matrices(H, g[None, :], np.zeros(8), G, h, np.zeros((16, 1)))
        sol = solve_qp(p, [1.0])
        res = kkt_residuals(p, [1.0], sol)
        assert max(res.values()) <= 1e-8, res
        Hs.append(H); gs.append(g); Gs.append(G); hs.append(h); objs.append(sol.objective)
    dual, _, _ = dual_projected_gradient(np.array(Hs), np.array(gs), np.array(Gs), np.array(hs))
    np.testing.assert_allclose(objs, dual, atol=1e-7, rtol=0)


def test_weakly_active_constraints_excluded():
    # constraint z <= 0 touches the unconstrained optimum z = 0 with zero multiplier
    p = mpqp_from_matrices(np.eye(1), np.zeros((1, 1)), [0.0], [[1.0]], [0.0], [[0.0]])
    sol = solve_qp(p, [0.0])
    assert sol.active_set == ()


def test_warm_start_accepts_only_valid_sets(tight_scenario):
    p = tight_scenario.mpqp(0)
    x = tight_scenario.traj.states[0] + np.array([0.05, -0.04, 0.1])
    cold = solve_qp(p, x)
    assert cold.active_set
    warm = solve_qp(p, x, warm_start=cold.active_set)
    assert warm.warm and warm.active_set == cold.active_set
    np.testing.assert_allclose(warm.U_star, cold.U_star, atol=1e-10)
    wrong = solve_qp(p, x, warm_start=())
    assert not wrong.warm
    np.testing.assert_allclose(wrong.U_star, cold.U_star, atol=1e-10)


def test_scaling_weights_leaves_minimiser(circle_traj, tight_scenario):
    i = 7
    x = circle_traj.states[i] + np.array([0.03, 0.02, -0.05])
    p1 = tight_scenario.mpqp(i)
    spec = tracking_spec(circle_traj, i, tight_scenario.models[i], tight_scenario.settings)
    s = spec.settings
    scaled = replace(spec, settings=MpcSettings(s.N, 7.5 * s.Q, 7.5 * s.R, s.x_min, s.x_max, s.u_min, s.u_max))
    np.testing.assert_allclose(solve_qp(condense(scaled), x).U_star, solve_qp(p1, x).U_star, atol=1e-8)


def test_explicit_law_empty_active_set(circle_scenario):
    p = circle_scenario.mpqp(3)
    x = circle_scenario.traj.states[3]
    sol = solve_qp(p, x)
    assert sol.active_set == ()
    law = explicit_law(p, sol, x)
    np.testing.assert_allclose(law.K_U, -np.linalg.solve(p.H, p.F.T), atol=1e-10)
    np.testing.assert_allclose(law.k_U, -np.linalg.solve(p.H, p.C_f), atol=1e-10)
    np.testing.assert_allclose(first_control(law)(x), sol.U_star[:2], atol=1e-10)


def test_explicit_law_region_agrees_with_fresh_solves(tight_scenario):
    rng = np.random.default_rng(4)
    p = tight_scenario.mpqp(2)
    centre = tight_scenario.traj.states[2]
    checked = 0
    for x_seed in sample_ball(rng, centre, 0.1, 20):
        sol = solve_qp(p, x_seed)
        law = explicit_law(p, sol, x_seed)
        np.testing.assert_allclose(law(x_seed), sol.U_star, atol=1e-9)
        fc = first_control(law)
        np.testing.assert_array_equal(fc.K, law.K_U[:2])
        # states inside the region give the same active set and optimiser
        for x in sample_ball(rng, x_seed, 0.01, 200):
            if law.margin(x) < -1e-7:
                fresh = solve_qp(p, x)
                assert fresh.active_set == law.active_set
                np.testing.assert_allclose(law(x), fresh.U_star, atol=1e-8)
                checked += 1
    assert checked >= 20


def test_rank_deficient_active_set_is_repaired():
    # duplicated row u0 <= 0.2: both copies would be active
    H = np.eye(2) * 2
    G = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    W = np.array([0.2, 0.2, 5.0])
    p = mpqp_from_matrices(H, np.array([[-2.0, 0.0]]), np.zeros(2), G, W, np.zeros((3, 1)))
    x = np.array([1.0])
    U = np.array([0.2, 0.0])
    sol = QpSolution(U, U + p.Hinv @ p.g(x), np.array([0.4, 0.4]), (0, 1), p.objective(U, x))
    law = explicit_law(p, sol, x)
    assert len(law.active_set) == 1
    np.testing.assert_allclose(law(x), U, atol=1e-12)
    assert law.contains(np.array([2.0])) and not law.contains(np.array([0.0]))


def test_enumerate_unconstrained_gives_one_region():
    p = toy_mpqp(u_bound=1e6)
    laws = enumerate_regions(p, np.linspace(-3, 3, 40)[:, None])
    assert len(laws) == 1 and laws[0].active_set == ()


def test_toy_enumeration_matches_exhaustive():
    p = toy_mpqp(u_bound=0.5)
    seeded = enumerate_regions(p, np.linspace(-5, 5, 2001)[:, None])
    exhaustive = exhaustive_regions(p, [-5.0], [5.0])
    assert {l.active_set for l in seeded} == exhaustive
    assert len(exhaustive) > 1


def test_regions_cover_their_seeds(circle_scenario):
    rng = np.random.default_rng(5)
    p = circle_scenario.mpqp(10)
    seeds = sample_ball(rng, circle_scenario.traj.states[10], 0.02, 300)
    laws = enumerate_regions(p, seeds)
    assert len(laws) >= 1
    table = RegionTable(laws)
    assert all(table.locate(x) >= 0 for x in seeds)


def test_sequential_search_matches_qp(tight_scenario):
    rng = np.random.default_rng(6)
    p = tight_scenario.mpqp(4)
    centre = tight_scenario.traj.states[4]
    laws = enumerate_regions(p, sample_ball(rng, centre, 0.1, 300))
    table = RegionTable(laws)
    hits = 0
    for x in sample_ball(rng, centre, 0.1, 300):
        u = sequential_search(table, x)
        if u is None:
            continue
        np.testing.assert_allclose(u, solve_qp(p, x).U_star[:2], atol=1e-7)
        hits += 1
    assert hits > 100


def test_sequential_search_single_region_and_miss():
    p = toy_mpqp(u_bound=1e6)
    laws = enumerate_regions(p, [[0.3]])
    x = np.array([1.7])
    assert sequential_search(laws, x) == pytest.approx((-np.linalg.solve(p.H, p.F.T @ x + p.C_f))[:1])
    p = toy_mpqp(u_bound=0.5)
    laws = enumerate_regions(p, [[0.0]])
    assert sequential_search(laws, np.array([4.0])) is None


def test_adjacent_laws_agree_on_facets():
    p = toy_mpqp(u_bound=0.5)
    laws = enumerate_regions(p, np.linspace(-5, 5, 2001)[:, None])
    for a in laws:
        for b in laws:
            if a is b:
                continue
            # facet points: shared boundary along the line
            for x in np.linspace(-5, 5, 20001):
                xv = np.array([x])
                if a.contains(xv, 1e-9) and b.contains(xv, 1e-9):
                    assert np.max(np.abs(a(xv) - b(xv))) <= 1e-6


def test_region_text_round_trip(tmp_path, tight_scenario):
    rng = np.random.default_rng(7)
    p = tight_scenario.mpqp(1)
    laws = enumerate_regions(p, sample_ball(rng, tight_scenario.traj.states[1], 0.1, 50))
    back = loads_regions(dumps_regions(laws))
    assert len(back) == len(laws)
    for a, b in zip(laws, back):
        assert a.active_set == b.active_set
        np.testing.assert_array_equal(a.P, b.P)
        np.testing.assert_array_equal(a.K_U, b.K_U)
        np.testing.assert_array_equal(a.q, b.q)
    with pytest.raises(ValueError):
        loads_regions("junk")
