"""Scenario configuration files.

One ``section.key = value`` pair per line, ``#`` starts a comment. Values are
numbers, comma separated number lists, plain words, or arithmetic over
numbers and ``pi`` (``-3*pi``, ``pi/2``).
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, field, fields
from pathlib import Path

DEFAULT_SEED = 12345

GEOMETRY_KEYS = {
    "circle": {"radius", "center", "start_angle", "laps"},
    "figure8": {"a", "b", "laps"},
    "line": {"speed", "heading", "start"},
}


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    shape: str = "circle"
    geometry: dict = field(default_factory=dict)
    T: float = 0.1
    K: int = 360
    lookahead: int = 0
    wheelbase: float = 0.1
    N: int = 10
    Q: tuple = (10.0, 10.0, 0.5)
    R: tuple = (0.1, 0.1)
    x_min: tuple = (-3.0, -3.0, -3 * math.pi)
    x_max: tuple = (3.0, 3.0, 3 * math.pi)
    u_min: tuple = (-2.0, -math.pi / 2)
    u_max: tuple = (2.0, math.pi / 2)
    x0: tuple = (1.9, 0.0, 1.57)
    samples_per_point: int = 50
    radius: float | None = None
    resample_tol: float = 1e-4
    resample_budget: int = 3
    validation_grid_size: int = 100
    delta_threshold: float = 0.0
    substeps: int = 10
    seed: int = DEFAULT_SEED
    workers: int = 1

    def validate(self) -> "ScenarioConfig":
        if self.shape not in GEOMETRY_KEYS:
            raise ConfigError(f"scenario.shape: unknown shape {self.shape!r}")
        extra = set(self.geometry) - GEOMETRY_KEYS[self.shape]
        if extra:
            raise ConfigError(f"geometry.{sorted(extra)[0]}: not a {self.shape} parameter")
        for name, n in (("Q", 3), ("R", 2), ("x_min", 3), ("x_max", 3), ("u_min", 2), ("u_max", 2), ("x0", 3)):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{_KEY_OF[name]}: expected {n} values")
        for lo, hi in (("x_min", "x_max"), ("u_min", "u_max")):
            if any(a > b for a, b in zip(getattr(self, lo), getattr(self, hi))):
                raise ConfigError(f"{_KEY_OF[lo]}: lower bound exceeds {_KEY_OF[hi]}")
        if any(q < 0 for q in self.Q):
            raise ConfigError("mpc.Q: weights must be >= 0")
        if any(r <= 0 for r in self.R):
            raise ConfigError("mpc.R: weights must be > 0")
        if any(abs(u) > math.pi / 2 + 1e-12 for u in (self.u_min[1], self.u_max[1])):
            raise ConfigError("bounds.u_min/u_max: steering bounds must lie within [-pi/2, pi/2]")
        positive = {"T": self.T, "wheelbase": self.wheelbase}
        for k, v in positive.items():
            if not v > 0:
                raise ConfigError(f"{_KEY_OF[k]}: must be > 0")
        if self.radius is not None and not self.radius > 0:
            raise ConfigError("sampling.radius: must be > 0")
        for k in ("K", "N", "samples_per_point", "substeps", "workers"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{_KEY_OF[k]}: must be >= 1")
        if self.K < 2:
            raise ConfigError("scenario.K: need at least 2 points")
        for k in ("lookahead", "resample_budget", "validation_grid_size", "delta_threshold", "resample_tol"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{_KEY_OF[k]}: must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("run.seed: must be an unsigned 64-bit integer")
        return self


# config key -> (field, kind)
_SCHEMA = {
    "scenario.name": ("name", "str"),
    "scenario.shape": ("shape", "str"),
    "scenario.T": ("T", "float"),
    "scenario.K": ("K", "int"),
    "scenario.lookahead": ("lookahead", "int"),
    "robot.wheelbase": ("wheelbase", "float"),
    "mpc.N": ("N", "int"),
    "mpc.Q": ("Q", "vec"),
    "mpc.R": ("R", "vec"),
    "bounds.x_min": ("x_min", "vec"),
    "bounds.x_max": ("x_max", "vec"),
    "bounds.u_min": ("u_min", "vec"),
    "bounds.u_max": ("u_max", "vec"),
    "start.x0": ("x0", "vec"),
    "sampling.samples_per_point": ("samples_per_point", "int"),
    "sampling.radius": ("radius", "float?"),
    "sampling.resample_tol": ("resample_tol", "float"),
    "sampling.resample_budget": ("resample_budget", "int"),
    "sampling.validation_grid_size": ("validation_grid_size", "int"),
    "model.delta_threshold": ("delta_threshold", "float"),
    "plant.substeps": ("substeps", "int"),
    "run.seed": ("seed", "int"),
    "run.workers": ("workers", "int"),
}
_KEY_OF = {f: k for k, (f, _) in _SCHEMA.items()}

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def _eval_number(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.Name) and node.id == "pi":
        return math.pi
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_number(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_number(node.left), _eval_number(node.right))
    raise ValueError("not a number")


def parse_number(text: str) -> float | int:
    try:
        return _eval_number(ast.parse(text.strip(), mode="eval").body)
    except (SyntaxError, ValueError, ZeroDivisionError, OverflowError) as exc:
        raise ValueError(f"cannot read {text.strip()!r} as a number") from exc


def _convert(kind: str, raw: str):
    if kind == "str":
        return raw
    if kind == "vec":
        return tuple(float(parse_number(p)) for p in raw.split(","))
    if kind == "float?" and raw.lower() in ("none", "auto"):
        return None
    v = parse_number(raw)
    if kind == "int":
        if float(v) != int(v):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(v)
    return float(v)


def loads_config(text: str, source: str = "<string>") -> ScenarioConfig:
    values: dict = {}
    geometry: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}: {line.strip()}"
        if "=" not in body:
            raise ConfigError(f"{where}\n  expected 'section.key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if not raw:
            raise ConfigError(f"{where}\n  missing value for {key}")
        try:
            if key.startswith("geometry."):
                sub = key.split(".", 1)[1]
                parts = [float(parse_number(p)) for p in raw.split(",")]
                geometry[sub] = tuple(parts) if len(parts) > 1 else parts[0]
                continue
            if key not in _SCHEMA:
                raise ConfigError(f"{where}\n  unknown key {key!r}")
            name, kind = _SCHEMA[key]
            if name in values:
                raise ConfigError(f"{where}\n  duplicate key {key!r}")
            values[name] = _convert(kind, raw)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{where}\n  {exc}") from None
    cfg = ScenarioConfig(**values, geometry=geometry)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads_config(path.read_text(), str(path))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps_config(cfg: ScenarioConfig) -> str:
    lines = []
    by_field = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, (name, _) in _SCHEMA.items():
        lines.append(f"{key} = {_fmt(by_field[name])}")
    for k in sorted(cfg.geometry):
        lines.append(f"geometry.{k} = {_fmt(cfg.geometry[k])}")
    return "\n".join(lines) + "\n"


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``circle`` or ``figure8``)."""
    path = Path(__file__).with_name("configs") / f"{name}.cfg"
    if not path.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
