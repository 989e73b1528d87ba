"""Second-order doubly reflected BSDEs by dynamic programming over volatilities.

The solver takes, at every node, the best unreflected backward value over the
volatility levels and then reflects it between the obstacles.  The rest of
the module rebuilds the per-strategy bounded-variation ledgers ``V`` and
checks the structural identities (representation, minimum condition, Jordan
split) against exhaustive strategy enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .drbsde import (
    DrbsdeSolution, Driver, ObstaclePair, candidate, clamp, solve_drbsde_batch,
    terminal_values,
)
from .lattice import Lattice, Strategy, VolatilityGrid, choice_matrix, strategy_matrix

ArrayFn = Callable[..., np.ndarray]


class JordanDecompositionError(ValueError):
    """A V ledger does not split into a non-decreasing part and -k_plus."""


@dataclass(frozen=True, eq=False)
class SecondOrderSolution:
    lattice: Lattice = field(repr=False)
    grid: VolatilityGrid
    Y: list[np.ndarray]
    Z: list[np.ndarray]
    # lattice kernel index of the optimising level (lowest index on ties)
    argmax_vol: list[np.ndarray]
    # max - min of the per-level hedge coefficients at each node (diagnostic)
    z_spread: list[np.ndarray] = field(repr=False)
    sense: str = "upper"
    scheme: str = "explicit"

    @property
    def y0(self) -> float:
        return float(self.Y[0][0])

    def argmax_strategy(self) -> Strategy:
        return Strategy(np.concatenate(self.argmax_vol))


def solve_2drbsde(lattice: Lattice, grid: VolatilityGrid, driver: Driver, terminal: ArrayFn,
                  obstacles: ObstaclePair, scheme: str = "explicit",
                  sense: str = "upper") -> SecondOrderSolution:
    """Superhedging-type solution: ``Y = clamp(max_a {E_a[Y'] + dt F(.., a)})``.

    ``sense="lower"`` replaces the max by a min (the sub-hedging equation).
    """
    if sense not in ("upper", "lower"):
        raise ValueError(f"sense must be 'upper' or 'lower', got {sense!r}")
    obstacles.validate(lattice, terminal)
    vols = lattice.grid_indices(grid)
    lo_all, up_all = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    Y_next = terminal_values(terminal, lattice)
    Ys, Zs, arg, spread = [Y_next], [], [], []
    for i in range(lattice.steps - 1, -1, -1):
        cands, hedges = zip(*(candidate(lattice, i, k, Y_next, driver, scheme) for k in vols))
        cands, hedges = np.stack(cands), np.stack(hedges)
        best = np.argmax(cands, axis=0) if sense == "upper" else np.argmin(cands, axis=0)
        cols = np.arange(cands.shape[1])
        Y = clamp(cands[best, cols], lo_all[i], up_all[i])
        Ys.append(Y)
        Zs.append(hedges[best, cols])
        arg.append(vols[best])
        spread.append(hedges.max(axis=0) - hedges.min(axis=0))
        Y_next = Y
    return SecondOrderSolution(lattice, grid, Ys[::-1], Zs[::-1], arg[::-1], spread[::-1],
                               sense, scheme)


def solve_2drbsde_lower(lattice: Lattice, grid: VolatilityGrid, driver: Driver,
                        terminal: ArrayFn, obstacles: ObstaclePair,
                        scheme: str = "explicit") -> SecondOrderSolution:
    return solve_2drbsde(lattice, grid, driver, terminal, obstacles, scheme, sense="lower")


def mirrored_problem(driver: Driver, terminal: ArrayFn, obstacles: ObstaclePair):
    """Data of the sign-flipped equation: ``-xi``, ``-F(-y, -z)``, ``[-S, -L]``."""
    flipped = Driver(lambda t, x, y, z, a: -driver(t, x, -np.asarray(y), -np.asarray(z), a),
                     driver.lipschitz_y, driver.lipschitz_z, name=f"mirrored {driver.name}")
    return flipped, (lambda x: -terminal(x)), obstacles.mirrored()


@dataclass(frozen=True, eq=False)
class VLedger:
    """Per-node increments of V for one strategy.

    ``v`` is the predictable increment at each non-terminal node;
    ``residual[i]`` holds, per node and branch (down, mid, up), the
    zero-mean remainder so that ``v + residual`` is the pathwise increment of
    ``Y_0 - Y_t - sum F dt + sum Z dB``.  ``v_plus`` and ``k_plus`` are filled
    by :func:`decompose_v`.
    """

    strategy: Strategy = field(repr=False)
    v: list[np.ndarray]
    residual: list[np.ndarray] = field(repr=False)
    v_plus: list[np.ndarray] | None = None
    k_plus: list[np.ndarray] | None = None
    contact: list[np.ndarray] | None = field(default=None, repr=False)
    contact_mismatch: float | None = None

    def total_variation(self) -> list[np.ndarray]:
        return [np.abs(v) for v in self.v]


def v_process(lattice: Lattice, strategy: Strategy, solution: SecondOrderSolution,
              driver: Driver) -> VLedger:
    vs, residuals = [], []
    inc = lattice.increments
    for i in range(lattice.steps):
        vol = strategy.at(i)
        Y_next = solution.Y[i + 1]
        c, _ = candidate(lattice, i, vol, Y_next, driver, solution.scheme)
        vs.append(solution.Y[i] - c)
        e = lattice.expectation(Y_next, vol)
        branches = np.stack([Y_next[:-2], Y_next[1:-1], Y_next[2:]], axis=-1)
        residuals.append(e[:, None] - branches + solution.Z[i][:, None] * inc[None, :])
    return VLedger(strategy, vs, residuals)


def pathwise_v(lattice: Lattice, solution: SecondOrderSolution, strategy: Strategy,
               driver: Driver, path: Sequence[int]) -> float:
    """``V_T = Y_0 - Y_T - sum F dt + sum Z dB`` along one path of branch codes.

    Branch codes are 0 (down), 1 (mid), 2 (up); the driver term uses the
    strategy's variance at each visited node.
    """
    j, total = 0, solution.Y[0][0]
    for i, b in enumerate(path):
        vol = int(strategy.at(i)[j])
        Y_next = solution.Y[i + 1]
        e = float(lattice.expectation(Y_next, vol)[j])
        c = float(candidate(lattice, i, vol, Y_next, driver, solution.scheme)[0][j])
        f_dt = c - e
        total += -f_dt + solution.Z[i][j] * (b - 1) * lattice.dx
        j += b
    return float(total - solution.Y[len(path)][j])


def decompose_v(ledger: VLedger, drbsde_solution: DrbsdeSolution, obstacles: ObstaclePair,
                tol: float = 1e-10) -> VLedger:
    """Split ``v`` by whether the strategy's own DRBSDE value sits on S.

    Off contact the increments must be non-negative (``v_plus``); on contact
    they must be non-positive and are reported as ``k_plus = -v``.  The
    largest gap between ``k_plus`` and the DRBSDE's ``dk_plus`` on contact nodes
    is returned as ``contact_mismatch``.
    """
    lattice = drbsde_solution.lattice
    if not np.array_equal(ledger.strategy.flat, drbsde_solution.strategy.flat):
        raise ValueError("ledger and DRBSDE solution use different strategies")
    up_all = obstacles.upper_values(lattice)
    v_plus, k_plus, contact = [], [], []
    mismatch = 0.0
    for i, v in enumerate(ledger.v):
        on = drbsde_solution.y[i] >= up_all[i] - tol
        off_neg = np.where(~on, v, 0.0).min(initial=0.0)
        on_pos = np.where(on, v, 0.0).max(initial=0.0)
        if off_neg < -tol:
            j = int(np.argmin(np.where(~on, v, 0.0)))
            raise JordanDecompositionError(
                f"V decreases off the upper obstacle at node ({i}, {j}): dv={v[j]!r}"
            )
        if on_pos > tol:
            j = int(np.argmax(np.where(on, v, 0.0)))
            raise JordanDecompositionError(
                f"V increases on the upper obstacle at node ({i}, {j}): dv={v[j]!r}"
            )
        vp = np.where(on, 0.0, v)
        kp = np.where(on, -v, 0.0)
        if on.any():
            mismatch = max(mismatch, float(np.max(np.abs(kp - drbsde_solution.dk_plus[i])[on])))
        v_plus.append(vp)
        k_plus.append(kp)
        contact.append(on)
    return VLedger(ledger.strategy, ledger.v, ledger.residual, v_plus, k_plus, contact, mismatch)


@dataclass(frozen=True)
class RepresentationReport:
    t1: int
    t2: int
    per_node_deviation: np.ndarray
    strategies: int

    @property
    def max_deviation(self) -> float:
        return float(np.max(self.per_node_deviation))


def check_representation(lattice: Lattice, grid: VolatilityGrid, solution: SecondOrderSolution,
                         driver: Driver, obstacles: ObstaclePair, cap: int,
                         t1: int = 0, t2: int | None = None) -> RepresentationReport:
    """Compare ``Y`` on slice ``t1`` with the best DRBSDE value over all strategies
    on ``[t1, t2]`` started from ``Y`` on slice ``t2``."""
    t2 = lattice.steps if t2 is None else t2
    if not 0 <= t1 < t2 <= lattice.steps:
        raise ValueError(f"need 0 <= t1 < t2 <= steps, got t1={t1}, t2={t2}")
    choices = choice_matrix(len(grid), t2**2 - t1**2, cap, values=lattice.grid_indices(grid))
    batch = solve_drbsde_batch(lattice, choices, driver, solution.Y[t2], obstacles,
                               first_slice=t1, last_slice=t2, scheme=solution.scheme)
    y = batch.at(t1)
    best = y.max(axis=0) if solution.sense == "upper" else y.min(axis=0)
    return RepresentationReport(t1, t2, np.abs(solution.Y[t1] - best), choices.shape[0])


@dataclass(frozen=True)
class MinimumConditionReport:
    t_slice: int
    # min over continuations of E[A_T - A_t | node], A = V + k_plus - k_minus
    per_node_min: np.ndarray
    continuations: int
    tol: float

    @property
    def max_gap(self) -> float:
        return float(np.max(np.abs(self.per_node_min), initial=0.0))

    @property
    def passed(self) -> bool:
        return self.max_gap <= self.tol


def check_minimum_condition(lattice: Lattice, grid: VolatilityGrid,
                            solution: SecondOrderSolution, driver: Driver,
                            obstacles: ObstaclePair, t_slice: int, cap: int,
                            tol: float = 1e-9, measure: str = "plain") -> MinimumConditionReport:
    """Exhaustive check that ``V + k_plus - k_minus`` is conditionally minimal.

    For every continuation of the strategy from ``t_slice`` on, the future
    increments of ``A = V + k_plus - k_minus`` are accumulated in conditional
    expectation; their minimum over continuations must vanish at every node of
    the slice (the maximum for the lower equation).

    ``measure="plain"`` uses the continuation's own kernels, which makes the
    minimum exactly zero when the driver ignores ``(y, z)``.  With
    ``measure="linearized"`` the kernels are tilted by the difference quotients
    of the driver between ``Y`` and the continuation's value, the discrete
    form of the change of measure that turns the accumulated increments into
    ``Y - y``; the minimum is then zero for any Lipschitz driver (explicit
    scheme only).
    """
    if measure not in ("plain", "linearized"):
        raise ValueError(f"measure must be 'plain' or 'linearized', got {measure!r}")
    if measure == "linearized" and solution.scheme != "explicit":
        raise ValueError("the linearized measure is implemented for the explicit scheme only")
    n = lattice.steps
    if not 0 <= t_slice <= n:
        raise ValueError(f"t_slice must lie in [0, {n}], got {t_slice}")
    if t_slice == n:
        return MinimumConditionReport(t_slice, np.zeros(lattice.slice_size(n)), 1, tol)
    choices = strategy_matrix(lattice, grid, cap, first_slice=t_slice)
    batch = solve_drbsde_batch(lattice, choices, driver, solution.Y[n], obstacles,
                               first_slice=t_slice, scheme=solution.scheme)
    base, dt = t_slice**2, lattice.dt
    W = np.zeros((choices.shape[0], lattice.slice_size(n)))
    for i in range(n - 1, t_slice - 1, -1):
        vol = choices[:, i * i - base:(i + 1) ** 2 - base]
        Y_next = solution.Y[i + 1]
        c, _ = candidate(lattice, i, vol, Y_next, driver, solution.scheme)
        k = i - t_slice
        alpha = (solution.Y[i] - c) + batch.dk_plus[k] - batch.dk_minus[k]
        eW = lattice.expectation(W, vol)
        if measure == "linearized":
            y_next = batch.y[k + 1]
            t, x = lattice.time(i), lattice.states(i)
            a = lattice.grid.variances[vol]
            eY, ey = lattice.expectation(Y_next, vol), lattice.expectation(y_next, vol)
            zY, zy = lattice.hedge_coefficient(Y_next, vol), lattice.hedge_coefficient(y_next, vol)
            lam_y = _quotient(driver(t, x, eY, zY, a) - driver(t, x, ey, zY, a), eY - ey)
            lam_z = _quotient(driver(t, x, ey, zY, a) - driver(t, x, ey, zy, a), zY - zy)
            eW = eW + dt * (lam_y * eW + lam_z * lattice.hedge_coefficient(W, vol))
        W = alpha + eW
    extreme = W.min(axis=0) if solution.sense == "upper" else W.max(axis=0)
    return MinimumConditionReport(t_slice, extreme, choices.shape[0], tol)


def _quotient(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    safe = np.where(den == 0.0, 1.0, den)
    return np.where(den == 0.0, 0.0, num / safe)


def conditional_strategies_best(lattice: Lattice, grid: VolatilityGrid, driver: Driver,
                                terminal: ArrayFn, obstacles: ObstaclePair, cap: int,
                                scheme: str = "explicit") -> tuple[np.ndarray, np.ndarray, list]:
    """Nodewise max and min of ``y^P`` over every enumerated strategy.

    Returns ``(max per slice, min per slice, batch)`` with the per-slice
    extremes as lists of arrays.
    """
    obstacles.validate(lattice, terminal)
    choices = strategy_matrix(lattice, grid, cap)
    batch = solve_drbsde_batch(lattice, choices, driver, terminal_values(terminal, lattice),
                               obstacles, scheme=scheme)
    return [y.max(axis=0) for y in batch.y], [y.min(axis=0) for y in batch.y], batch
