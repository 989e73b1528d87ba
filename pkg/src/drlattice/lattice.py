"""Recombining trinomial lattices under a finite family of volatility levels.

Every level shares one space grid: the step is tied to the largest volatility,
and each level gets the unique zero-mean, variance-matching distribution on
``{-dx, 0, +dx}``.  A strategy assigns one level to every non-terminal node;
enumerating all of them gives the finite family used by the brute-force
oracles.

Per-node quantities are stored slice by slice: slice ``i`` holds ``2*i + 1``
nodes ordered from the lowest state to the highest.  Node ``(i, j)`` has
state ``x0 + (j - i) * dx`` and children ``j, j + 1, j + 2`` (down, mid, up)
in slice ``i + 1``.  Flattening slices in order puts node ``(i, j)`` at
offset ``i**2 + j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROBABILITY_TOL = 1e-12
MOMENT_TOL = 1e-10


class LatticeError(ValueError):
    """Invalid lattice parameters."""


class OracleCapExceeded(RuntimeError):
    """An exhaustive enumeration would exceed the requested cap."""


@dataclass(frozen=True)
class VolatilityGrid:
    levels: tuple[float, ...]

    def __init__(self, levels: Sequence[float]):
        levels = tuple(float(s) for s in levels)
        if not levels:
            raise LatticeError("volatility grid must be non-empty")
        if any(not np.isfinite(s) or s <= 0.0 for s in levels):
            raise LatticeError(f"volatility levels must be finite and > 0, got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise LatticeError(f"volatility levels must be strictly increasing, got {levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def a_lower(self) -> float:
        return self.levels[0] ** 2

    @property
    def a_upper(self) -> float:
        return self.levels[-1] ** 2

    @property
    def variances(self) -> np.ndarray:
        return np.square(np.asarray(self.levels))

    def __len__(self) -> int:
        return len(self.levels)

    def is_subgrid_of(self, other: "VolatilityGrid") -> bool:
        return set(self.levels) <= set(other.levels)


@dataclass(frozen=True, eq=False)
class Kernel:
    """Transition from one node: child indices in the next slice, branch
    probabilities and signed state increments (down, mid, up)."""

    children: np.ndarray
    probabilities: np.ndarray
    increments: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.probabilities @ self.increments)

    @property
    def variance(self) -> float:
        return float(self.probabilities @ self.increments**2) - self.mean**2


@dataclass(frozen=True, eq=False)
class Lattice:
    horizon: float
    steps: int
    x0: float
    dx: float
    grid: VolatilityGrid
    stretch: float
    # (n_levels, 3) branch probabilities, columns ordered (down, mid, up)
    probabilities: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def increments(self) -> np.ndarray:
        return np.array([-self.dx, 0.0, self.dx])

    def time(self, i: int) -> float:
        return i * self.dt

    def states(self, i: int) -> np.ndarray:
        return self.x0 + np.arange(-i, i + 1) * self.dx

    @property
    def space_grid(self) -> list[np.ndarray]:
        return [self.states(i) for i in range(self.steps + 1)]

    def slice_size(self, i: int) -> int:
        return 2 * i + 1

    @property
    def n_nonterminal(self) -> int:
        return self.steps**2

    def offset(self, i: int) -> int:
        return i * i

    def kernel(self, i: int, j: int, vol_index: int) -> Kernel:
        if not (0 <= i < self.steps and 0 <= j < self.slice_size(i)):
            raise IndexError(f"no transition from node ({i}, {j})")
        return Kernel(
            children=np.array([j, j + 1, j + 2]),
            probabilities=self.probabilities[vol_index].copy(),
            increments=self.increments,
        )

    def level_index(self, sigma: float) -> int:
        try:
            return self.grid.levels.index(float(sigma))
        except ValueError:
            raise LatticeError(f"volatility {sigma} is not a level of this lattice") from None

    def grid_indices(self, grid: VolatilityGrid) -> np.ndarray:
        """Lattice kernel indices of the levels of ``grid`` (a subgrid)."""
        return np.array([self.level_index(s) for s in grid.levels], dtype=int)

    def expectation(self, values_next: np.ndarray, vol_index) -> np.ndarray:
        """Vectorised one-step expectation from every node of a slice.

        ``values_next`` has trailing axis of length ``m + 2`` (next slice);
        the result has trailing axis ``m``.  ``vol_index`` broadcasts
        against the result.
        """
        p = self.probabilities[np.asarray(vol_index)]
        down, mid, up = values_next[..., :-2], values_next[..., 1:-1], values_next[..., 2:]
        return p[..., 0] * down + p[..., 1] * mid + p[..., 2] * up

    def hedge_coefficient(self, values_next: np.ndarray, vol_index) -> np.ndarray:
        """Regression coefficient cov(value_next, dB) / (a dt) under a kernel."""
        p = self.probabilities[np.asarray(vol_index)]
        a = self.grid.variances[np.asarray(vol_index)]
        down, up = values_next[..., :-2], values_next[..., 2:]
        cov = (p[..., 2] * up - p[..., 0] * down) * self.dx
        return cov / (a * self.dt)


def build_lattice(
    horizon: float,
    steps: int,
    x0: float,
    grid: VolatilityGrid,
    stretch: float = 1.0,
    moment_tol: float = MOMENT_TOL,
) -> Lattice:
    if not (np.isfinite(horizon) and horizon > 0):
        raise LatticeError(f"horizon must be > 0, got {horizon}")
    if int(steps) != steps or steps < 1:
        raise LatticeError(f"steps must be an integer >= 1, got {steps}")
    if not (np.isfinite(stretch) and stretch >= 1.0):
        raise LatticeError(f"stretch must be >= 1, got {stretch}")
    steps = int(steps)
    dt = horizon / steps
    dx = stretch * grid.levels[-1] * np.sqrt(dt)
    # sigma^2 dt / (2 dx^2) written as a ratio so the top level is exact
    ratio = np.asarray(grid.levels) / grid.levels[-1]
    p_side = ratio**2 / (2.0 * stretch**2)
    p_mid = 1.0 - 2.0 * p_side
    probs = np.column_stack([p_side, p_mid, p_side])
    if np.any(probs < -PROBABILITY_TOL) or np.any(probs > 1.0 + PROBABILITY_TOL):
        raise LatticeError("matched probabilities fall outside [0, 1]; increase stretch")
    probs = np.clip(probs, 0.0, 1.0)
    probs.setflags(write=False)

    lattice = Lattice(
        horizon=float(horizon), steps=steps, x0=float(x0), dx=float(dx),
        grid=grid, stretch=float(stretch), probabilities=probs,
    )
    inc = lattice.increments
    for k, sigma in enumerate(grid.levels):
        p = probs[k]
        mean = p @ inc
        if abs(p.sum() - 1.0) > PROBABILITY_TOL or abs(mean) > PROBABILITY_TOL:
            raise LatticeError(f"kernel for sigma={sigma} is not a martingale kernel")
        if abs(p @ inc**2 - mean**2 - sigma**2 * dt) > moment_tol:
            raise LatticeError(f"kernel for sigma={sigma} misses the variance target")
    return lattice


@dataclass(frozen=True, eq=False)
class Strategy:
    """A volatility index for every non-terminal node, stored flat in slice order."""

    flat: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.int64)
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    @classmethod
    def constant(cls, lattice: Lattice, vol_index: int) -> "Strategy":
        return cls(np.full(lattice.n_nonterminal, vol_index, dtype=np.int64))

    @classmethod
    def from_slices(cls, choice: Sequence[Sequence[int]]) -> "Strategy":
        return cls(np.concatenate([np.asarray(c, dtype=np.int64) for c in choice]))

    def at(self, i: int) -> np.ndarray:
        return self.flat[i * i:(i + 1) ** 2]

    @property
    def choice(self) -> list[np.ndarray]:
        steps = int(round(np.sqrt(self.flat.size)))
        return [self.at(i) for i in range(steps)]

    def __eq__(self, other):
        return isinstance(other, Strategy) and np.array_equal(self.flat, other.flat)

    def __hash__(self):
        return hash(self.flat.tobytes())


def choice_matrix(
    n_levels: int, n_nodes: int, cap: int, values: Sequence[int] | None = None
) -> np.ndarray:
    """All assignments of ``n_levels`` choices to ``n_nodes`` nodes, one per row.

    Row ``r`` spells ``r`` in base ``n_levels`` with the first node as the most
    significant digit, so row 0 is the all-zero assignment.
    """
    count = n_levels**n_nodes
    if count > cap:
        raise OracleCapExceeded(
            f"{n_levels}^{n_nodes} = {count} assignments exceed the cap {cap}"
        )
    rows = np.arange(count, dtype=np.int64)
    powers = n_levels ** np.arange(n_nodes - 1, -1, -1, dtype=np.int64)
    digits = (rows[:, None] // powers[None, :]) % n_levels
    if values is not None:
        digits = np.asarray(values, dtype=np.int64)[digits]
    return digits


def strategy_matrix(
    lattice: Lattice, grid: VolatilityGrid, cap: int, first_slice: int = 0
) -> np.ndarray:
    """Every node-feedback strategy as rows of lattice kernel indices.

    Columns cover the non-terminal nodes from ``first_slice`` on (flat order
    restricted to those slices).
    """
    n_nodes = lattice.n_nonterminal - first_slice**2
    return choice_matrix(len(grid), n_nodes, cap, values=lattice.grid_indices(grid))


def enumerate_strategies(lattice: Lattice, grid: VolatilityGrid, cap: int) -> list[Strategy]:
    return [Strategy(row) for row in strategy_matrix(lattice, grid, cap)]


def kernel_expectation(lattice: Lattice, node: tuple[int, int], vol_index: int,
                       values_at_next_slice: np.ndarray) -> float:
    i, j = node
    values = np.asarray(values_at_next_slice, dtype=float)
    if values.shape != (lattice.slice_size(i + 1),):
        raise ValueError(
            f"expected {lattice.slice_size(i + 1)} next-slice values, got shape {values.shape}"
        )
    k = lattice.kernel(i, j, vol_index)
    return float(k.probabilities @ values[k.children])


def iter_nodes(lattice: Lattice, terminal: bool = False):
    last = lattice.steps + 1 if terminal else lattice.steps
    for i in range(last):
        for j in range(lattice.slice_size(i)):
            yield i, j


__all__ = [
    "Kernel", "Lattice", "LatticeError", "OracleCapExceeded", "Strategy",
    "VolatilityGrid", "build_lattice", "choice_matrix", "enumerate_strategies",
    "iter_nodes", "kernel_expectation", "strategy_matrix",
]
