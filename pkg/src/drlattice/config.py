"""Run configuration: JSON parsing, schema validation and construction of the
model objects.  Every error carries the file line it points at."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .drbsde import (
    Driver, ObstacleError, ObstaclePair, build_driver_from_hamiltonian, linear_driver,
    running_reward_driver, zero_driver,
)
from .lattice import Lattice, LatticeError, VolatilityGrid, build_lattice

DEFAULT_TOLERANCES = {
    "representation": 1e-10,
    "minimum_condition": 1e-9,
    "skorohod": 1e-12,
    "jordan": 1e-10,
    "dynkin": 1e-10,
    "comparison": 1e-12,
    "decomposition": 1e-10,
    "minmax": 1e-10,
}
DEFAULT_CAP = 1_000_000
DEFAULT_INSTANCES = 200
DEFAULT_EPSILON = 0.01


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` is ``path:line: key.path: message``."""

    def __init__(self, path: str, line: int, where: str, message: str):
        self.path, self.line, self.where = path, line, where
        loc = f"{where}: " if where else ""
        super().__init__(f"{path}:{line}: {loc}{message}")


def load_schema() -> dict:
    return json.loads(resources.files("drlattice").joinpath("config.schema.json").read_text())


def _line_of(text: str, keys: list) -> int:
    """Best-effort line of a nested key: walk the text key by key."""
    pos = 0
    for key in keys:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _dotted(keys) -> str:
    return ".".join(str(k) for k in keys)


@dataclass(frozen=True, eq=False)
class RunConfig:
    path: str
    raw: dict = field(repr=False)
    text: str = field(repr=False)
    lattice: Lattice = field(repr=False)
    grid: VolatilityGrid
    driver: Driver = field(repr=False)
    terminal: Any = field(repr=False)
    obstacles: ObstaclePair = field(repr=False)
    penalty: Any = field(repr=False)
    scheme: str
    tolerances: dict
    cap: int
    instances: int
    properties: tuple[str, ...]
    epsilon: float
    seed: int

    def error(self, keys: list, message: str) -> ConfigError:
        return ConfigError(self.path, _line_of(self.text, keys), _dotted(keys), message)


def payoff_function(spec: dict):
    """``(t, x) -> value`` from a payoff block."""
    kind = spec["type"]
    if kind == "constant":
        v = float(spec["value"])
        return lambda t, x: np.full(np.shape(x), v)
    if kind == "linear":
        a, b, c = (float(spec.get(k, 0.0)) for k in ("intercept", "slope", "time_slope"))
        return lambda t, x: a + b * np.asarray(x, dtype=float) + c * t
    k, scale, shift = float(spec["strike"]), float(spec.get("scale", 1.0)), float(spec.get("shift", 0.0))
    if kind == "call":
        return lambda t, x: shift + scale * np.maximum(np.asarray(x, dtype=float) - k, 0.0)
    return lambda t, x: shift + scale * np.maximum(k - np.asarray(x, dtype=float), 0.0)


def driver_from_spec(spec: dict | None, grid: VolatilityGrid) -> Driver:
    spec = spec or {"type": "zero"}
    kind = spec["type"]
    c, s = float(spec.get("constant", 0.0)), float(spec.get("slope", 0.0))
    g = lambda t, x: c + s * np.asarray(x, dtype=float)  # noqa: E731
    if kind == "zero":
        return zero_driver()
    if kind == "running":
        return running_reward_driver(g)
    if kind == "linear":
        return linear_driver(float(spec.get("rate_y", 0.0)), float(spec.get("rate_z", 0.0)), g,
                             a_min=grid.a_lower)
    curv = float(spec["curvature"])
    gmax = float(spec.get("gamma_max", 10.0))
    count = int(spec.get("gamma_count", 2001))
    count += 1 - count % 2  # odd, so the grid contains 0
    gammas = np.linspace(-gmax, gmax, count)
    return build_driver_from_hamiltonian(lambda t, x, y, z, gam: 0.5 * curv * gam**2, gammas)


def parse_config(path: str | Path, seed: int | None = None, cap: int | None = None) -> RunConfig:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(path, 0, "", f"cannot read config: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(path, exc.lineno, "", f"invalid JSON: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        keys = list(err.absolute_path)
        raise ConfigError(path, _line_of(text, keys), _dotted(keys), err.message)

    model, problem = raw["model"], raw["problem"]

    def fail(keys, message):
        return ConfigError(path, _line_of(text, keys), _dotted(keys), message)

    try:
        grid = VolatilityGrid(model["vol_levels"])
    except LatticeError as exc:
        raise fail(["model", "vol_levels"], str(exc)) from None
    try:
        lattice = build_lattice(model["horizon"], model["steps"], model.get("x0", 0.0), grid,
                                model.get("stretch", 1.0))
    except LatticeError as exc:
        raise fail(["model"], str(exc)) from None

    lower = payoff_function(problem["lower"])
    terminal_fn = payoff_function(problem["terminal"])
    T = lattice.horizon
    terminal = lambda x: terminal_fn(T, x)  # noqa: E731
    has_upper, has_pen = "upper" in problem, "penalty" in problem
    if has_upper == has_pen:
        raise fail(["problem"], "give exactly one of 'upper' and 'penalty'")
    if has_pen:
        penalty = payoff_function(problem["penalty"])
        upper = lambda t, x: np.asarray(lower(t, x)) + np.asarray(penalty(t, x))  # noqa: E731
    elif problem["upper"] is None:
        penalty = None
        upper = lambda t, x: np.full(np.shape(x), np.inf)  # noqa: E731
    else:
        upper_fn = payoff_function(problem["upper"])
        upper = upper_fn
        penalty = lambda t, x: np.asarray(upper_fn(t, x)) - np.asarray(lower(t, x))  # noqa: E731
    obstacles = ObstaclePair(lower, upper)
    try:
        obstacles.validate(lattice, terminal)
    except ObstacleError as exc:
        raise fail(["problem", "terminal" if "terminal" in str(exc) else "lower"], str(exc)) from None

    tolerances = dict(DEFAULT_TOLERANCES, **raw.get("tolerances", {}))
    verify = raw.get("verify", {})
    return RunConfig(
        path=path, raw=raw, text=text, lattice=lattice, grid=grid,
        driver=driver_from_spec(problem.get("driver"), grid), terminal=terminal,
        obstacles=obstacles, penalty=penalty, scheme=problem.get("scheme", "explicit"),
        tolerances=tolerances,
        cap=int(cap if cap is not None else raw.get("oracle", {}).get("cap", DEFAULT_CAP)),
        instances=int(verify.get("instances", DEFAULT_INSTANCES)),
        properties=tuple(verify.get("properties", ())),
        epsilon=float(raw.get("epsilon", DEFAULT_EPSILON)),
        seed=int(seed if seed is not None else raw.get("seed", 0)),
    )
