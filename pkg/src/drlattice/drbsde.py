"""Doubly reflected BSDEs under one fixed volatility strategy.

The backward step at a node with chosen variance ``a`` is

    c = E_a[y_next] + dt * F(t, x, y_ref, z, a),   z = cov_a(y_next, dB) / (a dt)
    y = min(S, max(L, c))

with ``y_ref = E_a[y_next]`` (explicit scheme) or the fixed point of
``y_ref = E_a[y_next] + dt * F(t, x, y_ref, z, a)`` (implicit scheme).  The
pushes are ``dk_minus = (L - c)^+`` and ``dk_plus = (c - S)^+``.

Drivers, obstacles and terminal payoffs are numpy-broadcastable callables:
``F(t, x, y, z, a)``, ``L(t, x)``, ``S(t, x)`` and ``xi(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lattice import Lattice, Strategy

PICARD_MAX_ITER = 50
PICARD_TOL = 1e-12
DEFAULT_PENALTY_SCHEDULE = tuple(10.0**k for k in range(1, 9))

ArrayFn = Callable[..., np.ndarray]


class ObstacleError(ValueError):
    """Obstacles are not strictly separated or the terminal payoff leaves them."""


class NotSupermartingale(ValueError):
    """The penalisation residual does not decrease along the schedule."""


@dataclass(frozen=True)
class Driver:
    evaluate: ArrayFn
    lipschitz_y: float = 0.0
    lipschitz_z: float = 0.0
    name: str = "driver"

    def __call__(self, t, x, y, z, a):
        return np.broadcast_to(
            np.asarray(self.evaluate(t, x, y, z, a), dtype=float),
            np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(z), np.shape(a)),
        )

    def lipschitz_excess(self, rng: np.random.Generator, samples: int = 200,
                         a_range: tuple[float, float] = (0.01, 1.0), scale: float = 10.0) -> float:
        """Largest violation of the declared Lipschitz bound on random quadruples.

        Returns ``max(|F - F'| - Ly |y - y'| - Lz sqrt(a) |z - z'|)``; a value
        <= ~1e-12 means the declaration survived the sample.
        """
        t = rng.uniform(0.0, 1.0, samples)
        x = rng.uniform(-scale, scale, samples)
        a = rng.uniform(*a_range, samples)
        y1, y2, z1, z2 = rng.uniform(-scale, scale, (4, samples))
        lhs = np.abs(np.asarray(self(t, x, y1, z1, a)) - np.asarray(self(t, x, y2, z2, a)))
        rhs = self.lipschitz_y * np.abs(y1 - y2) + self.lipschitz_z * np.sqrt(a) * np.abs(z1 - z2)
        return float(np.max(lhs - rhs))


def zero_driver() -> Driver:
    return Driver(lambda t, x, y, z, a: np.zeros_like(np.asarray(y, dtype=float)), name="zero")


def running_reward_driver(g: ArrayFn) -> Driver:
    """F(t, x, y, z, a) = g(t, x): a driver independent of (y, z)."""
    return Driver(lambda t, x, y, z, a: g(t, x), name="running")


def linear_driver(rate_y: float = 0.0, rate_z: float = 0.0,
                  g: ArrayFn | None = None, a_min: float = 0.01) -> Driver:
    """F = rate_y * y + rate_z * z + g(t, x).

    The z-constant is declared against ``sqrt(a)``, so it is only valid for
    variances ``a >= a_min``.
    """
    def evaluate(t, x, y, z, a):
        out = rate_y * np.asarray(y) + rate_z * np.asarray(z)
        return out + g(t, x) if g is not None else out

    return Driver(evaluate, lipschitz_y=abs(rate_y), lipschitz_z=abs(rate_z) / np.sqrt(a_min),
                  name="linear")


def build_driver_from_hamiltonian(H: ArrayFn, gamma_grid: Sequence[float],
                                  lipschitz_y: float = 0.0, lipschitz_z: float = 0.0) -> Driver:
    """Fenchel transform in gamma over a finite grid: F(a) = max_g {a g / 2 - H(g)}."""
    gammas = np.asarray(gamma_grid, dtype=float)
    if gammas.size == 0:
        raise ValueError("gamma grid must be non-empty")
    if not np.any(gammas == 0.0):
        raise ValueError("gamma grid must contain 0")

    def evaluate(t, x, y, z, a):
        a = np.asarray(a, dtype=float)
        best = None
        for g in gammas:
            val = 0.5 * a * g - np.asarray(H(t, x, y, z, g), dtype=float)
            best = val if best is None else np.maximum(best, val)
        return best

    return Driver(evaluate, lipschitz_y=lipschitz_y, lipschitz_z=lipschitz_z, name="hamiltonian")


@dataclass(frozen=True)
class ObstaclePair:
    lower: ArrayFn
    upper: ArrayFn
    gap: float = 1e-9

    def lower_values(self, lattice: Lattice) -> list[np.ndarray]:
        return [_eval2(self.lower, lattice, i) for i in range(lattice.steps + 1)]

    def upper_values(self, lattice: Lattice) -> list[np.ndarray]:
        return [_eval2(self.upper, lattice, i) for i in range(lattice.steps + 1)]

    def validate(self, lattice: Lattice, terminal: ArrayFn | None = None) -> None:
        if not self.gap > 0:
            raise ObstacleError(f"obstacle gap must be > 0, got {self.gap}")
        for i, (lo, up) in enumerate(zip(self.lower_values(lattice), self.upper_values(lattice))):
            bad = np.flatnonzero(~(lo + self.gap <= up))
            if bad.size:
                j = int(bad[0])
                raise ObstacleError(
                    f"obstacles not separated by {self.gap} at node ({i}, {j}): "
                    f"L={lo[j]!r}, S={up[j]!r}"
                )
        if terminal is not None:
            n = lattice.steps
            xi = _eval_terminal(terminal, lattice)
            lo, up = self.lower_values(lattice)[n], self.upper_values(lattice)[n]
            bad = np.flatnonzero(~((lo <= xi) & (xi <= up)))
            if bad.size:
                j = int(bad[0])
                raise ObstacleError(
                    f"terminal payoff leaves the obstacles at node ({n}, {j}): "
                    f"L={lo[j]!r}, xi={xi[j]!r}, S={up[j]!r}"
                )

    def mirrored(self) -> "ObstaclePair":
        """Obstacles of the sign-flipped problem: lower -S, upper -L."""
        lower, upper = self.lower, self.upper
        return ObstaclePair(lambda t, x: -upper(t, x), lambda t, x: -lower(t, x), self.gap)


def _eval2(fn: ArrayFn, lattice: Lattice, i: int) -> np.ndarray:
    x = lattice.states(i)
    return np.broadcast_to(np.asarray(fn(lattice.time(i), x), dtype=float), x.shape).copy()


def _eval_terminal(terminal: ArrayFn, lattice: Lattice) -> np.ndarray:
    x = lattice.states(lattice.steps)
    return np.broadcast_to(np.asarray(terminal(x), dtype=float), x.shape).copy()


def terminal_values(terminal: ArrayFn, lattice: Lattice) -> np.ndarray:
    return _eval_terminal(terminal, lattice)


def candidate(lattice: Lattice, i: int, vol, y_next: np.ndarray, driver: Driver,
              scheme: str = "explicit") -> tuple[np.ndarray, np.ndarray]:
    """Unreflected backward value ``c`` and hedge ``z`` at every node of slice ``i``.

    ``vol`` holds lattice kernel indices broadcastable to the slice.
    """
    dt = lattice.dt
    t, x = lattice.time(i), lattice.states(i)
    e = lattice.expectation(y_next, vol)
    z = lattice.hedge_coefficient(y_next, vol)
    a = lattice.grid.variances[np.asarray(vol)]
    if scheme == "explicit":
        return e + dt * driver(t, x, e, z, a), z
    if scheme != "implicit":
        raise ValueError(f"unknown scheme {scheme!r}")
    y = e + dt * driver(t, x, e, z, a)
    for _ in range(PICARD_MAX_ITER):
        y_new = e + dt * driver(t, x, y, z, a)
        done = np.max(np.abs(y_new - y), initial=0.0) <= PICARD_TOL
        y = y_new
        if done:
            break
    return y, z


def clamp(c: np.ndarray, lo: np.ndarray, up: np.ndarray) -> np.ndarray:
    y = np.minimum(up, np.maximum(lo, c))
    # both clamp orders agree whenever lo <= up
    assert np.array_equal(y, np.maximum(lo, np.minimum(up, c)))
    return y


@dataclass(frozen=True, eq=False)
class DrbsdeSolution:
    """Per-slice arrays; ``z`` and the pushes live on non-terminal slices."""

    lattice: Lattice = field(repr=False)
    strategy: Strategy = field(repr=False)
    y: list[np.ndarray]
    z: list[np.ndarray]
    dk_plus: list[np.ndarray]
    dk_minus: list[np.ndarray]
    unreflected: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def y0(self) -> float:
        return float(self.y[0][0])


@dataclass(frozen=True, eq=False)
class BatchSolution:
    """Reflected solutions for many strategies at once; arrays are ``(B, nodes)``.

    Slices run from ``first_slice`` to ``last_slice``; ``y[k]`` belongs to slice
    ``first_slice + k``.
    """

    first_slice: int
    y: list[np.ndarray]
    z: list[np.ndarray]
    dk_plus: list[np.ndarray]
    dk_minus: list[np.ndarray]
    unreflected: list[np.ndarray]

    def at(self, i: int) -> np.ndarray:
        return self.y[i - self.first_slice]


def solve_drbsde_batch(lattice: Lattice, choices: np.ndarray, driver: Driver,
                       final_values: np.ndarray, obstacles: ObstaclePair,
                       first_slice: int = 0, last_slice: int | None = None,
                       scheme: str = "explicit") -> BatchSolution:
    """Reflected backward induction for every row of ``choices`` in one pass.

    ``choices`` holds lattice kernel indices for the non-terminal nodes of
    slices ``first_slice .. last_slice - 1`` in flat order, one row per
    strategy.  ``final_values`` gives y on ``last_slice`` (broadcast over rows).
    """
    last = lattice.steps if last_slice is None else last_slice
    choices = np.atleast_2d(np.asarray(choices, dtype=np.int64))
    n_rows = choices.shape[0]
    base = first_slice**2
    expected = last**2 - base
    if choices.shape[1] != expected:
        raise ValueError(f"choices need {expected} columns, got {choices.shape[1]}")
    lo_all, up_all = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    y_next = np.broadcast_to(np.asarray(final_values, dtype=float),
                             (n_rows, lattice.slice_size(last))).copy()
    ys, zs, kps, kms, cs = [y_next], [], [], [], []
    for i in range(last - 1, first_slice - 1, -1):
        vol = choices[:, i * i - base:(i + 1) ** 2 - base]
        c, z = candidate(lattice, i, vol, y_next, driver, scheme)
        lo, up = lo_all[i], up_all[i]
        y = clamp(c, lo, up)
        kps.append(np.maximum(c - up, 0.0))
        kms.append(np.maximum(lo - c, 0.0))
        zs.append(z)
        cs.append(c)
        ys.append(y)
        y_next = y
    return BatchSolution(first_slice, ys[::-1], zs[::-1], kps[::-1], kms[::-1], cs[::-1])


def solve_drbsde_reflected(lattice: Lattice, strategy: Strategy, driver: Driver,
                           terminal: ArrayFn, obstacles: ObstaclePair,
                           scheme: str = "explicit") -> DrbsdeSolution:
    obstacles.validate(lattice, terminal)
    xi = terminal_values(terminal, lattice)
    batch = solve_drbsde_batch(lattice, strategy.flat[None, :], driver, xi, obstacles,
                               scheme=scheme)
    first = lambda arrs: [a[0] for a in arrs]  # noqa: E731
    return DrbsdeSolution(lattice, strategy, first(batch.y), first(batch.z),
                          first(batch.dk_plus), first(batch.dk_minus), first(batch.unreflected))


@dataclass(frozen=True, eq=False)
class PenalizedSolution:
    """Lower obstacle reflected, upper obstacle penalised with intensity ``n``."""

    lattice: Lattice = field(repr=False)
    strategy: Strategy = field(repr=False)
    penalty_n: float
    y: list[np.ndarray]
    z: list[np.ndarray]
    dk_minus: list[np.ndarray]
    penalty_accrual: list[np.ndarray]

    @property
    def dk_plus(self) -> list[np.ndarray]:
        return self.penalty_accrual

    @property
    def y0(self) -> float:
        return float(self.y[0][0])


def solve_drbsde_penalized(lattice: Lattice, strategy: Strategy, driver: Driver,
                           terminal: ArrayFn, obstacles: ObstaclePair,
                           penalty_n: float, scheme: str = "explicit") -> PenalizedSolution:
    """Penalise excursions above S by ``n (y - S)^+`` and reflect at L.

    The penalty is taken implicitly in y, so the step stays monotone for any
    ``n dt``: above S the unreflected value ``c`` is pulled to
    ``(c + n dt S) / (1 + n dt)``.
    """
    if not penalty_n > 0:
        raise ValueError(f"penalty_n must be > 0, got {penalty_n}")
    obstacles.validate(lattice, terminal)
    lo_all, up_all = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    nd = penalty_n * lattice.dt
    y_next = terminal_values(terminal, lattice)
    ys, zs, kms, accs = [y_next], [], [], []
    for i in range(lattice.steps - 1, -1, -1):
        c, z = candidate(lattice, i, strategy.at(i), y_next, driver, scheme)
        lo, up = lo_all[i], up_all[i]
        pulled = np.where(c > up, (c + nd * up) / (1.0 + nd), c)
        y = np.maximum(lo, pulled)
        accs.append(c - pulled)
        kms.append(np.maximum(lo - pulled, 0.0))
        zs.append(z)
        ys.append(y)
        y_next = y
    return PenalizedSolution(lattice, strategy, float(penalty_n), ys[::-1], zs[::-1],
                             kms[::-1], accs[::-1])


@dataclass(frozen=True, eq=False)
class SupermartingaleDecomposition:
    """Last penalised iterate of a doubly reflected g-supermartingale.

    Per node: ``Y ~ y = c + V + dk_minus - dk_plus`` where ``c`` is the
    unreflected backward value from the next slice of the iterate.
    """

    y: list[np.ndarray]
    z: list[np.ndarray]
    dk_plus: list[np.ndarray]
    dk_minus: list[np.ndarray]
    V: list[np.ndarray]
    residual: float
    residuals: tuple[float, ...]
    schedule: tuple[float, ...]


def _penalize_toward(lattice, strategy, driver, Y, obstacles, n, scheme):
    lo_all, up_all = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    nd = n * lattice.dt
    y_next = np.asarray(Y[-1], dtype=float).copy()
    ys, zs, kps, kms, vs = [y_next], [], [], [], []
    for i in range(lattice.steps - 1, -1, -1):
        c, z = candidate(lattice, i, strategy.at(i), y_next, driver, scheme)
        lo, up, target = lo_all[i], up_all[i], np.asarray(Y[i], dtype=float)
        # implicit in y: y = clamp(c + n dt (Y - y)^+); shortfalls at rounding
        # level are ignored so that n dt does not amplify them
        noise = 8 * np.finfo(float).eps * np.maximum(1.0, np.abs(target))
        act = target - c > noise
        lifted = np.where(act, (c + nd * target) / (1.0 + nd), c)
        y = clamp(lifted, lo, up)
        v = np.where(act, nd * np.maximum(target - y, 0.0), 0.0)
        kps.append(np.maximum(c - up, 0.0))
        kms.append(np.maximum(y - c - v, 0.0) * (y == lo))
        vs.append(v)
        zs.append(z)
        ys.append(y)
        y_next = y
    return ys[::-1], zs[::-1], kps[::-1], kms[::-1], vs[::-1]


def decompose_supermartingale(lattice: Lattice, strategy: Strategy, driver: Driver,
                              path_process: Sequence[np.ndarray], obstacles: ObstaclePair,
                              penalty_schedule: Sequence[float] = DEFAULT_PENALTY_SCHEDULE,
                              scheme: str = "explicit", atol: float = 1e-12
                              ) -> SupermartingaleDecomposition:
    """Non-linear Doob-Meyer decomposition by penalising ``n (y - Y)^-``.

    Raises ``NotSupermartingale`` when the reconstruction residual
    ``max |Y - y_n|`` does not shrink along the schedule.
    """
    Y = [np.asarray(v, dtype=float) for v in path_process]
    if len(Y) != lattice.steps + 1 or any(
        v.shape != (lattice.slice_size(i),) for i, v in enumerate(Y)
    ):
        raise ValueError("path_process must hold one array per slice")
    lo_all, up_all = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    for i, v in enumerate(Y):
        if np.any(v < lo_all[i] - atol) or np.any(v > up_all[i] + atol):
            raise ObstacleError(f"path process leaves the obstacles on slice {i}")
    schedule = tuple(float(n) for n in penalty_schedule)
    if not schedule or any(n <= 0 for n in schedule):
        raise ValueError("penalty schedule must be a non-empty list of positive numbers")

    residuals = []
    result = None
    for n in schedule:
        result = _penalize_toward(lattice, strategy, driver, Y, obstacles, n, scheme)
        residuals.append(max(float(np.max(np.abs(a - b))) for a, b in zip(Y, result[0])))
    scale = max(1.0, max(float(np.max(np.abs(v))) for v in Y))
    stalled = residuals[-1] >= residuals[0] or any(
        b > a * (1 + 1e-9) + atol * scale for a, b in zip(residuals, residuals[1:])
    )
    if len(residuals) > 1 and residuals[-1] > atol * scale and stalled:
        raise NotSupermartingale(
            f"penalisation residual does not decrease along the schedule: {residuals}"
        )
    ys, zs, kps, kms, vs = result
    return SupermartingaleDecomposition(ys, zs, kps, kms, vs, residuals[-1],
                                        tuple(residuals), schedule)


@dataclass(frozen=True)
class SkorohodReport:
    complementarity: float
    obstacle_violation: float
    simultaneous: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.complementarity, self.obstacle_violation, self.simultaneous) <= self.tol


def check_skorohod(solution, obstacles: ObstaclePair, tol: float = 1e-12) -> SkorohodReport:
    """Re-derive complementarity, obstacle and simultaneous-push violations."""
    lattice = solution.lattice
    lo_all, up_all = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    comp = obst = simul = 0.0
    for i, y in enumerate(solution.y):
        lo, up = lo_all[i], up_all[i]
        obst = max(obst, float(np.max(np.maximum(lo - y, 0.0))),
                   float(np.max(np.maximum(y - up, 0.0))))
        if i == lattice.steps:
            continue
        kp, km = solution.dk_plus[i], solution.dk_minus[i]
        upper_gap = np.where(kp != 0.0, up - y, 0.0)
        lower_gap = np.where(km != 0.0, y - lo, 0.0)
        comp = max(comp, float(np.max(np.abs(kp * upper_gap))),
                   float(np.max(np.abs(km * lower_gap))))
        simul = max(simul, float(np.max(np.abs(kp * km))))
    return SkorohodReport(comp, obst, simul, tol)
