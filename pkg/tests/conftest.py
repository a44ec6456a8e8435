import math

import numpy as np
import pytest

from lattice_mpc.config import bundled_config, load_config
from lattice_mpc.controller import SamplingPlan, Scenario, offline_build
from lattice_mpc.harness import build_artifacts
from lattice_mpc.kinematics import RobotParams, generate_reference
from lattice_mpc.mpqp import MpcSettings, mpqp_from_matrices


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash[_VERDICTS].append(line)
        print(line)
        assert ok, line
    return record


def base_settings(x_lo=(-3, -3, -3 * math.pi), x_hi=(3, 3, 3 * math.pi),
                   u_lo=(-2, -math.pi / 2), u_hi=(2, math.pi / 2), N=10):
    return MpcSettings(N, np.diag([10.0, 10.0, 0.5]), np.diag([0.1, 0.1]),
                       np.array(x_lo, float), np.array(x_hi, float),
                       np.array(u_lo, float), np.array(u_hi, float))


@pytest.fixture(scope="session")
def circle_traj():
    return generate_reference("circle", 0.1, 360, RobotParams())


@pytest.fixture(scope="session")
def circle_scenario(circle_traj):
    return Scenario(circle_traj, RobotParams(), base_settings())


@pytest.fixture(scope="session")
def tight_scenario(circle_traj):
    """Circle with narrow input bounds so many constraints become active."""
    return Scenario(circle_traj, RobotParams(), base_settings(u_lo=(0.3, -0.1), u_hi=(0.4, 0.2)))


@pytest.fixture(scope="session")
def tight_controller(tight_scenario):
    return offline_build(tight_scenario, SamplingPlan(radius=0.1), seed=3, indices=range(6))


@pytest.fixture(scope="session")
def circle_artifacts():
    cfg = load_config(bundled_config("circle"))
    return cfg, build_artifacts(cfg, ["lattice", "linear_mpc", "explicit_seq"])


@pytest.fixture(scope="session")
def figure8_artifacts():
    cfg = load_config(bundled_config("figure8"))
    return cfg, build_artifacts(cfg, ["lattice", "linear_mpc", "explicit_seq"])


def toy_mpqp(u_bound=1.0, a=1.2, b=1.0, q=1.0, r=0.1):
    """Scalar system x+ = a x + b u, horizon 2, |u_k| <= u_bound, regulated to 0."""
    A, B = a, b
    # x1 = A x + B u0, x2 = A^2 x + A B u0 + B u1
    Gam = np.array([[B, 0.0], [A * B, B]])
    Phi = np.array([[A], [A * A]])
    H = 2 * (q * Gam.T @ Gam + r * np.eye(2))
    F = 2 * q * Phi.T @ Gam
    C_f = np.zeros((1, 2))
    G = np.vstack([np.eye(2), -np.eye(2)])
    W = np.full(4, u_bound)
    E = np.zeros((4, 1))
    return mpqp_from_matrices(H, F, C_f, G, W, E, n_u=1)
