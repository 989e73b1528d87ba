"""Game (Israeli) options under volatility uncertainty.

The holder may exercise at any time for ``exercise(t, x)``; the writer may
cancel for ``exercise + penalty``.  The superhedging bound solves the
second-order equation with the max over volatilities, the subhedging bound
the one with the min.  The super price is reported as an upper bound only:
nothing here shows it is the least superhedging price.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .drbsde import Driver, ObstaclePair, zero_driver
from .lattice import Lattice, VolatilityGrid
from .second_order import SecondOrderSolution, solve_2drbsde, solve_2drbsde_lower

AMERICAN_ROUNDS = 4
AMERICAN_FACTOR = 10.0


class OptionSpecError(ValueError):
    """Penalty not positive or terminal payoff outside [exercise, cancel]."""


@dataclass(frozen=True)
class GameOptionSpec:
    exercise_payoff: object
    penalty: object
    terminal_payoff: object
    funding_driver: Driver = field(default_factory=zero_driver)

    def cancel_payoff(self, t, x):
        return np.asarray(self.exercise_payoff(t, x)) + np.asarray(self.penalty(t, x))

    @property
    def obstacles(self) -> ObstaclePair:
        # the band is exactly the penalty, so separation is checked through it
        return ObstaclePair(self.exercise_payoff, self.cancel_payoff, gap=1e-300)

    def validate(self, lattice: Lattice) -> None:
        for i in range(lattice.steps + 1):
            x = lattice.states(i)
            pen = np.broadcast_to(np.asarray(self.penalty(lattice.time(i), x), dtype=float), x.shape)
            bad = np.flatnonzero(~(pen > 0))
            if bad.size:
                j = int(bad[0])
                raise OptionSpecError(f"penalty must be > 0, got {pen[j]!r} at node ({i}, {j})")
        n = lattice.steps
        x, T = lattice.states(n), lattice.horizon
        xi = np.broadcast_to(np.asarray(self.terminal_payoff(x), dtype=float), x.shape)
        lo = np.broadcast_to(np.asarray(self.exercise_payoff(T, x), dtype=float), x.shape)
        up = np.broadcast_to(np.asarray(self.cancel_payoff(T, x), dtype=float), x.shape)
        bad = np.flatnonzero(~((lo <= xi) & (xi <= up)))
        if bad.size:
            j = int(bad[0])
            raise OptionSpecError(
                f"terminal payoff outside [exercise, cancel] at node ({n}, {j}): "
                f"{lo[j]!r} <= {xi[j]!r} <= {up[j]!r} fails"
            )

    def with_penalty_scaled(self, factor: float) -> "GameOptionSpec":
        pen = self.penalty
        return GameOptionSpec(self.exercise_payoff, lambda t, x: factor * np.asarray(pen(t, x)),
                              self.terminal_payoff, self.funding_driver)


@dataclass(frozen=True, eq=False)
class PriceInterval:
    sub_price: float
    super_price: float
    sub_curve: list[np.ndarray] = field(repr=False)
    super_curve: list[np.ndarray] = field(repr=False)
    upper_solution: SecondOrderSolution = field(repr=False)
    lower_solution: SecondOrderSolution = field(repr=False)

    @property
    def width(self) -> float:
        return self.super_price - self.sub_price


def price_game_option(lattice: Lattice, grid: VolatilityGrid, spec: GameOptionSpec,
                      scheme: str = "explicit") -> PriceInterval:
    spec.validate(lattice)
    args = (lattice, grid, spec.funding_driver, spec.terminal_payoff, spec.obstacles)
    hi = solve_2drbsde(*args, scheme=scheme)
    lo = solve_2drbsde_lower(*args, scheme=scheme)
    return PriceInterval(lo.y0, hi.y0, lo.Y, hi.Y, hi, lo)


@dataclass(frozen=True, eq=False)
class HedgeTable:
    pi: list[np.ndarray]
    argmax_vol: list[np.ndarray]


def hedge_strategy(solution: SecondOrderSolution) -> HedgeTable:
    """Units of the underlying held at each non-terminal node (the solution's Z)."""
    return HedgeTable([z.copy() for z in solution.Z], [a.copy() for a in solution.argmax_vol])


@dataclass(frozen=True)
class BoundaryRow:
    slice: int
    time: float
    buyer_states: tuple[float, ...]
    # one tuple of states per strategy passed in
    seller_states: tuple[tuple[float, ...], ...]


def exercise_boundary(lattice: Lattice, Y: Sequence[np.ndarray],
                      strategy_values: Sequence[Sequence[np.ndarray]], spec: GameOptionSpec,
                      epsilon: float) -> list[BoundaryRow]:
    """Per slice, where the buyer exercises (``Y <= L + eps``) and where each
    strategy's seller cancels (``y >= S - eps``)."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    obs = spec.obstacles
    lo, up = obs.lower_values(lattice), obs.upper_values(lattice)
    rows = []
    for i in range(lattice.steps + 1):
        x = lattice.states(i)
        buyer = tuple(float(s) for s in x[Y[i] <= lo[i] + epsilon])
        sellers = tuple(tuple(float(s) for s in x[y[i] >= up[i] - epsilon])
                        for y in strategy_values)
        rows.append(BoundaryRow(i, lattice.time(i), buyer, sellers))
    return rows


@dataclass(frozen=True)
class AmericanLimit:
    penalties: tuple[float, ...]
    super_prices: tuple[float, ...]
    american: float

    @property
    def errors(self) -> tuple[float, ...]:
        return tuple(abs(p - self.american) for p in self.super_prices)

    @property
    def monotone(self) -> bool:
        p = self.super_prices
        return all(a <= b for a, b in zip(p, p[1:])) and p[-1] <= self.american + 1e-12


def american_limit(lattice: Lattice, grid: VolatilityGrid, spec: GameOptionSpec,
                   rounds: int = AMERICAN_ROUNDS, factor: float = AMERICAN_FACTOR,
                   scheme: str = "explicit") -> AmericanLimit:
    """Super prices as the penalty is multiplied by ``factor`` each round,
    against the value with the cancellation right removed."""
    prices, scales = [], []
    for k in range(rounds):
        scale = factor**k
        prices.append(price_game_option(lattice, grid, spec.with_penalty_scaled(scale),
                                        scheme).super_price)
        scales.append(scale)
    american = solve_2drbsde(
        lattice, grid, spec.funding_driver, spec.terminal_payoff,
        ObstaclePair(spec.exercise_payoff, lambda t, x: np.full(np.shape(x), np.inf)), scheme,
    )
    return AmericanLimit(tuple(scales), tuple(prices), american.y0)
