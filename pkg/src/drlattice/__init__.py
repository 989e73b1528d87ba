"""Doubly reflected second-order BSDEs on a trinomial lattice under volatility uncertainty."""

from .drbsde import ObstaclePair, solve_drbsde_reflected
from .lattice import Strategy, VolatilityGrid, build_lattice
from .second_order import solve_2drbsde, solve_2drbsde_lower

__all__ = [
    "ObstaclePair", "Strategy", "VolatilityGrid", "build_lattice", "solve_2drbsde",
    "solve_2drbsde_lower", "solve_drbsde_reflected",
]
