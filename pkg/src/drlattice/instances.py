"""Seeded random problem instances for the property suites.

Every generator takes a ``numpy.random.Generator`` and returns an
:class:`Instance` whose callables close over plain coefficient arrays, so two
generators fed the same seed build identical problems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drbsde import Driver, ObstaclePair, linear_driver, running_reward_driver, zero_driver
from .lattice import Lattice, VolatilityGrid, build_lattice

DRIVER_KINDS = ("zero", "running", "linear", "vol")


@dataclass(frozen=True, eq=False)
class Instance:
    lattice: Lattice
    grid: VolatilityGrid
    driver: Driver
    terminal: object
    obstacles: ObstaclePair
    label: str = ""


def random_grid(rng: np.random.Generator, n_levels: int) -> VolatilityGrid:
    if n_levels == 1:
        return VolatilityGrid([float(rng.uniform(0.15, 0.5))])
    levels = np.sort(rng.uniform(0.1, 0.5, n_levels))
    # keep the levels apart so the vol choice visibly matters
    levels = levels[0] + np.arange(n_levels) * max(0.08, np.min(np.diff(levels)))
    return VolatilityGrid(np.round(levels, 6))


def random_driver(rng: np.random.Generator, kind: str, lattice: Lattice) -> Driver:
    """Drivers small enough that the explicit step stays monotone on ``lattice``."""
    r0, r1, w = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 3.0)
    g = lambda t, x: r0 + r1 * np.sin(w * x)  # noqa: E731
    if kind == "zero":
        return zero_driver()
    if kind == "running":
        return running_reward_driver(g)
    a_min = lattice.grid.a_lower
    if kind == "linear":
        ry = rng.uniform(-0.5, 0.5)
        rz = rng.uniform(-0.2, 0.2) * np.sqrt(a_min)
        return linear_driver(ry, rz, g, a_min=a_min)
    if kind == "vol":
        # an a-dependent running reward, the shape of a Hamiltonian transform
        kappa = rng.uniform(-1.0, 1.0)
        return Driver(lambda t, x, y, z, a: g(t, x) + kappa * np.asarray(a), name="vol")
    raise ValueError(f"unknown driver kind {kind!r}")


def random_obstacles(rng: np.random.Generator, lattice: Lattice, scale: float = 1.0,
                     binding: float = 1.0) -> tuple[ObstaclePair, object]:
    """Smooth random obstacles plus a compatible terminal payoff.

    ``binding`` shrinks the band between the obstacles; 0 pushes them far
    apart so neither reflection acts.
    """
    x0 = lattice.x0
    c0, c1, c2 = rng.uniform(-0.3, 0.3, 3) * scale
    w, phi = rng.uniform(1.0, 6.0), rng.uniform(0.0, 2 * np.pi)
    drift = rng.uniform(-0.3, 0.3) * scale
    band0 = rng.uniform(0.05, 0.6) * scale
    band1 = rng.uniform(0.0, 0.5) * scale
    far = 0.0 if binding > 0 else 100.0 * scale
    width = max(binding, 1e-3)

    def lower(t, x):
        u = np.asarray(x) - x0
        return c0 - far + c1 * u + c2 * np.cos(w * u + phi) + drift * t

    def upper(t, x):
        u = np.asarray(x) - x0
        return lower(t, x) + 2 * far + (band0 + band1 * (1 + np.sin(w * u - phi))) / width

    k0, k1 = rng.uniform(-0.5, 0.5, 2) * scale
    strike = rng.uniform(-0.3, 0.3)
    T = lattice.horizon

    def terminal(x):
        u = np.asarray(x) - x0
        raw = k0 + k1 * u + scale * 2.0 * np.maximum(u - strike, 0.0)
        return np.clip(raw, lower(T, x), upper(T, x))

    return ObstaclePair(lower, upper), terminal


def random_instance(rng: np.random.Generator, steps: int, n_levels: int,
                    driver_kind: str | None = None, stretch: float = 1.0,
                    binding: float = 1.0) -> Instance:
    grid = random_grid(rng, n_levels)
    lattice = build_lattice(1.0, steps, 0.0, grid, stretch)
    kind = driver_kind or DRIVER_KINDS[int(rng.integers(len(DRIVER_KINDS)))]
    driver = random_driver(rng, kind, lattice)
    obstacles, terminal = random_obstacles(rng, lattice, binding=binding)
    return Instance(lattice, grid, driver, terminal, obstacles, label=f"{kind}/{steps}/{n_levels}")


def forced_contact_on(rng: np.random.Generator, lattice: Lattice, grid: VolatilityGrid,
                      driver_kind: str = "running") -> Instance:
    """Upper obstacle far away except on the last non-terminal slice, where it
    sits below the continuation value.

    Contact then happens on that slice only and the second-order value never
    touches S before it.
    """
    driver = random_driver(rng, driver_kind, lattice)
    obstacles, _ = random_obstacles(rng, lattice)
    lower0 = obstacles.lower
    T, dt = lattice.horizon, lattice.dt
    level, slope = rng.uniform(0.1, 0.4), rng.uniform(0.5, 2.0)

    def terminal(x):
        return lower0(T, x) + 0.5 + slope * np.abs(np.asarray(x) - lattice.x0)

    def upper(t, x):
        if t <= T - 1.5 * dt:
            return lower0(t, x) + 100.0
        if t < T - 0.5 * dt:
            # above L by `level`, below most continuation values
            return lower0(t, x) + level
        return terminal(x) + 1.0

    return Instance(lattice, grid, driver, terminal, ObstaclePair(lower0, upper),
                    label=f"contact/{lattice.steps}/{len(grid)}")


def forced_contact_instance(rng: np.random.Generator, steps: int, n_levels: int = 2,
                            driver_kind: str = "running") -> Instance:
    grid = random_grid(rng, n_levels)
    lattice = build_lattice(1.0, steps, 0.0, grid)
    return forced_contact_on(rng, lattice, grid, driver_kind)


def binomial_instance(rng: np.random.Generator, steps: int,
                      driver_kind: str = "running") -> Instance:
    """Single volatility at stretch 1: the middle branch has probability 0, so
    only half the nodes are reachable and brute force stays small."""
    return random_instance(rng, steps, 1, driver_kind, stretch=1.0)
