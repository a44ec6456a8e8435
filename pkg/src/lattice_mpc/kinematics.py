"""Bicycle-style kinematics of a wheeled mobile robot.

State is ``(x, y, phi)``, control is ``(v, delta_steer)``::

    xdot   = v cos(phi)
    ydot   = v sin(phi)
    phidot = v tan(delta_steer) / l
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels

N_X = 3
N_U = 2


class DomainError(ValueError):
    """Steering angle at or beyond +-pi/2, where tan() blows up."""


@dataclass(frozen=True)
class RobotParams:
    wheelbase: float = 0.1

    def __post_init__(self):
        if not self.wheelbase > 0:
            raise ValueError(f"wheelbase must be positive, got {self.wheelbase}")


class State(NamedTuple):
    x: float
    y: float
    phi: float


class Control(NamedTuple):
    v: float
    delta_steer: float


@dataclass(frozen=True)
class DiscreteAffineModel:
    """``x(k+1) = A x(k) + B u(k) + b`` obtained at one reference point."""

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    source_index: int = 0

    def step(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, float) + self.B @ np.asarray(u, float) + self.b


def _check_steer(delta: float) -> None:
    if not abs(delta) < math.pi / 2:
        raise DomainError(f"steering angle {delta!r} outside (-pi/2, pi/2)")


def dynamics(s, u, p: RobotParams) -> np.ndarray:
    """Continuous-time state derivative."""
    _, _, phi = s
    v, delta = u
    _check_steer(delta)
    return np.array([v * math.cos(phi), v * math.sin(phi), v * math.tan(delta) / p.wheelbase])


def dynamics_many(X: np.ndarray, Uc: np.ndarray, p: RobotParams) -> np.ndarray:
    """Vectorised ``dynamics`` over rows of ``X`` (n, 3) and ``Uc`` (n, 2)."""
    X = np.atleast_2d(X)
    Uc = np.atleast_2d(Uc)
    if np.any(np.abs(Uc[:, 1]) >= math.pi / 2):
        raise DomainError("steering angle outside (-pi/2, pi/2)")
    v = Uc[:, 0]
    return np.column_stack(
        [v * np.cos(X[:, 2]), v * np.sin(X[:, 2]), v * np.tan(Uc[:, 1]) / p.wheelbase]
    )


def jacobians(s, u, p: RobotParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(df/dx, df/du)`` at ``(s, u)``."""
    _, _, phi = s
    v, delta = u
    _check_steer(delta)
    c, sn = math.cos(phi), math.sin(phi)
    Jx = np.array([[0.0, 0.0, -v * sn], [0.0, 0.0, v * c], [0.0, 0.0, 0.0]])
    Ju = np.array(
        [
            [c, 0.0],
            [sn, 0.0],
            [math.tan(delta) / p.wheelbase, v / (p.wheelbase * math.cos(delta) ** 2)],
        ]
    )
    return Jx, Ju


def integrate_plant(s, u, p: RobotParams, T: float, substeps: int = 10) -> State:
    """Propagate the nonlinear model over one period with fixed-step RK4."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    v, delta = float(u[0]), float(u[1])
    _check_steer(delta)
    x, y, phi = kernels.rk4_bicycle(
        float(s[0]), float(s[1]), float(s[2]), v, delta, p.wheelbase, float(T), int(substeps)
    )
    return State(x, y, phi)


def linearize(ref_state, ref_control, p: RobotParams, T: float, source_index: int = 0) -> DiscreteAffineModel:
    """First-order Taylor expansion at the reference, then forward-Euler discretisation."""
    xr = np.asarray(ref_state, float)
    ur = np.asarray(ref_control, float)
    Jx, Ju = jacobians(xr, ur, p)
    f = dynamics(xr, ur, p)
    A = np.eye(N_X) + T * Jx
    B = T * Ju
    b = T * (f - Jx @ xr - Ju @ ur)
    return DiscreteAffineModel(A, B, b, source_index)


@dataclass(frozen=True)
class ReferenceTrajectory:
    """K reachable reference points sampled every ``T`` seconds.

    ``derivatives`` holds the curve's own state derivative at every point, so
    reachability can be checked against ``dynamics``.
    """

    T: float
    states: np.ndarray
    controls: np.ndarray
    derivatives: np.ndarray

    def __post_init__(self):
        K = self.states.shape[0]
        if K < 2:
            raise ValueError("a reference trajectory needs at least 2 points")
        if self.states.shape != (K, N_X) or self.controls.shape != (K, N_U):
            raise ValueError("states must be (K, 3) and controls (K, 2)")
        if self.derivatives.shape != (K, N_X):
            raise ValueError("derivatives must be (K, 3)")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def K(self) -> int:
        return self.states.shape[0]

    def point(self, k: int) -> tuple[State, Control]:
        return State(*self.states[k]), Control(*self.controls[k])

    def reachability_residual(self, p: RobotParams) -> np.ndarray:
        """Per-point ``||xi_dot_r - f(xi_r, u_r)||``."""
        f = dynamics_many(self.states, self.controls, p)
        return np.linalg.norm(self.derivatives - f, axis=1)

    def min_spacing(self) -> float:
        """Smallest Euclidean distance between consecutive states."""
        return float(np.min(np.linalg.norm(np.diff(self.states, axis=0), axis=1)))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.float64(self.T).tobytes())
        for arr in (self.states, self.controls):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


def _from_curve(pos, vel, acc, times, p: RobotParams, T: float) -> ReferenceTrajectory:
    """Recover heading and controls from the curve's derivatives."""
    xs, ys = pos
    xd, yd = vel
    xdd, ydd = acc
    speed = np.hypot(xd, yd)
    if np.any(speed <= 1e-12):
        raise ValueError("reference speed vanishes on the curve; heading undefined")
    phi = np.unwrap(np.arctan2(yd, xd))
    phidot = (xd * ydd - yd * xdd) / speed**2
    delta = np.arctan(p.wheelbase * phidot / speed)
    states = np.column_stack([xs, ys, phi])
    controls = np.column_stack([speed, delta])
    derivatives = np.column_stack([xd, yd, phidot])
    return ReferenceTrajectory(float(T), states, controls, derivatives)


def generate_reference(shape: str, T: float, K: int, p: RobotParams = RobotParams(), lookahead: int = 0,
                       **geometry) -> ReferenceTrajectory:
    """Sample a closed-form reference curve at ``K`` points spaced ``T`` apart.

    ``lookahead`` appends that many further points along the same curve (the
    lap period stays tied to ``K``), so a horizon starting near the end still
    sees a moving reference.

    Shapes and their geometry keywords:

    * ``circle``: ``radius`` (2.0), ``center`` ((0, 0)), ``start_angle`` (0),
      ``laps`` (1). Counter-clockwise, one lap per ``K`` points by default.
    * ``figure8``: ``a`` (2.0), ``b`` (2.4), ``laps`` (1). Lissajous curve
      ``x = a sin(theta)``, ``y = b sin(2 theta) / 2``.
    * ``line``: ``speed`` (0.5), ``heading`` (0), ``start`` ((0, 0)).
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if lookahead < 0:
        raise ValueError("lookahead must be >= 0")
    t = np.arange(K + lookahead) * T
    duration = K * T
    shape = shape.lower()
    if shape == "circle":
        R = float(geometry.pop("radius", 2.0))
        cx, cy = geometry.pop("center", (0.0, 0.0))
        a0 = float(geometry.pop("start_angle", 0.0))
        laps = float(geometry.pop("laps", 1.0))
        w = 2.0 * math.pi * laps / duration
        th = a0 + w * t
        pos = (cx + R * np.cos(th), cy + R * np.sin(th))
        vel = (-R * w * np.sin(th), R * w * np.cos(th))
        acc = (-R * w * w * np.cos(th), -R * w * w * np.sin(th))
    elif shape in ("figure8", "figure-8", "eight"):
        a = float(geometry.pop("a", 2.0))
        b = float(geometry.pop("b", 2.4))
        laps = float(geometry.pop("laps", 1.0))
        w = 2.0 * math.pi * laps / duration
        th = w * t
        pos = (a * np.sin(th), 0.5 * b * np.sin(2 * th))
        vel = (a * w * np.cos(th), b * w * np.cos(2 * th))
        acc = (-a * w * w * np.sin(th), -2.0 * b * w * w * np.sin(2 * th))
    elif shape == "line":
        speed = float(geometry.pop("speed", 0.5))
        hd = float(geometry.pop("heading", 0.0))
        x0, y0 = geometry.pop("start", (0.0, 0.0))
        ones = np.ones_like(t)
        pos = (x0 + speed * math.cos(hd) * t, y0 + speed * math.sin(hd) * t)
        vel = (speed * math.cos(hd) * ones, speed * math.sin(hd) * ones)
        acc = (0.0 * ones, 0.0 * ones)
    else:
        raise ValueError(f"unknown reference shape {shape!r}")
    if geometry:
        raise ValueError(f"unexpected geometry keys for {shape}: {sorted(geometry)}")
    return _from_curve(pos, vel, acc, t, p, T)


def select_linearization_points(traj: ReferenceTrajectory, p: RobotParams, delta_threshold: float) -> np.ndarray:
    """Share one linearized model across consecutive reference points.

    Scans forward accumulating ``F_s``, the 1-norm change of the dynamics
    relative to the current linearization point. Once ``F_s`` reaches the
    threshold, the previous point becomes the next linearization point.
    A threshold of 0 gives every point its own model.

    Returns the model index of every reference point.
    """
    K = len(traj)
    if delta_threshold < 0:
        raise ValueError("delta_threshold must be >= 0")
    if delta_threshold == 0:
        return np.arange(K)
    f = dynamics_many(traj.states, traj.controls, p)
    assignment = np.zeros(K, dtype=np.int64)
    model = 0
    base = 0
    Fs = 0.0
    i = 1
    while i < K:
        Fs += float(np.abs(f[i] - f[base]).sum())
        if Fs >= delta_threshold:
            model += 1
            # the previous point opens the next model, unless it is the base itself
            base = i - 1 if i - 1 > base else i
            assignment[base] = model
            Fs = 0.0
            i = base + 1
        else:
            assignment[i] = model
            i += 1
    return assignment


def model_sources(assignment: np.ndarray) -> np.ndarray:
    """Reference index that each model was linearized at (its first point)."""
    _, first = np.unique(assignment, return_index=True)
    return first


def linearize_along(traj: ReferenceTrajectory, p: RobotParams, assignment: np.ndarray | None = None) -> list[DiscreteAffineModel]:
    """One model per reference point, shared per ``assignment`` when given."""
    K = len(traj)
    if assignment is None:
        assignment = np.arange(K)
    sources = model_sources(assignment)
    models = [linearize(traj.states[s], traj.controls[s], p, traj.T, int(s)) for s in sources]
    return [models[assignment[k]] for k in range(K)]
