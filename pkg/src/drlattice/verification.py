"""Seeded property suite shared by the ``verify`` and ``oracle`` commands.

Each property maps a random generator and a base lattice to one
:class:`Check` (a deviation against a tolerance).  Instance ``k`` of property
``p`` draws from ``default_rng([seed, p, k])`` so any single failure can be
replayed from the logged triple.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from multiprocessing.pool import ThreadPool
from typing import Callable

import numpy as np

from .drbsde import (
    Driver, ObstaclePair, check_skorohod, decompose_supermartingale, solve_drbsde_reflected,
)
from .dynkin import GamePayoff, dynkin_bruteforce, dynkin_value_iteration, minmax_exchange
from .instances import Instance, forced_contact_on, random_driver, random_obstacles
from .lattice import Lattice, Strategy, VolatilityGrid
from .second_order import (
    check_minimum_condition, check_representation, decompose_v, solve_2drbsde, v_process,
)

THREADS_ENV = "DRLATTICE_THREADS"
PROPERTIES = (
    "representation", "minimum_condition", "skorohod", "decomposition",
    "jordan", "comparison", "saddle", "minmax_exchange",
)
# reported as findings; a gap does not fail the run
INFORMATIONAL = frozenset({"minmax_exchange"})
TOLERANCE_KEY = {
    "representation": "representation", "minimum_condition": "minimum_condition",
    "skorohod": "skorohod", "decomposition": "decomposition", "jordan": "jordan",
    "comparison": "comparison", "saddle": "dynkin", "minmax_exchange": "minmax",
}


@dataclass(frozen=True)
class Check:
    deviation: float
    detail: str = ""


@dataclass(frozen=True)
class InstanceResult:
    prop: str
    index: int
    seed: tuple[int, int, int]
    deviation: float
    tol: float
    detail: str

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tol)


@dataclass(frozen=True)
class PropertySummary:
    name: str
    instances: int
    failures: int
    max_deviation: float
    tol: float
    informational: bool

    @property
    def passed(self) -> bool:
        return self.failures == 0 or self.informational


def is_running_type(driver: Driver) -> bool:
    """Driver ignores (y, z), which is the regime where the game identities are exact."""
    return driver.lipschitz_y == 0.0 and driver.lipschitz_z == 0.0


def random_on(rng: np.random.Generator, lattice: Lattice, grid: VolatilityGrid,
              kinds=("zero", "running", "linear", "vol")) -> Instance:
    kind = kinds[int(rng.integers(len(kinds)))]
    driver = random_driver(rng, kind, lattice)
    obstacles, terminal = random_obstacles(rng, lattice)
    return Instance(lattice, grid, driver, terminal, obstacles, label=kind)


def random_strategy(rng: np.random.Generator, lattice: Lattice, grid: VolatilityGrid) -> Strategy:
    return Strategy(lattice.grid_indices(grid)[rng.integers(len(grid), size=lattice.n_nonterminal)])


def _payoff(inst: Instance) -> GamePayoff:
    d = inst.driver
    return GamePayoff(lambda t, x: d(t, x, 0.0, 0.0, 0.0), inst.obstacles.lower,
                      inst.obstacles.upper, inst.terminal)


def prop_representation(rng, lattice, grid, cap):
    inst = random_on(rng, lattice, grid)
    sol = solve_2drbsde(lattice, grid, inst.driver, inst.terminal, inst.obstacles)
    full = check_representation(lattice, grid, sol, inst.driver, inst.obstacles, cap)
    t1 = int(rng.integers(lattice.steps))
    step = check_representation(lattice, grid, sol, inst.driver, inst.obstacles, cap, t1, t1 + 1)
    return Check(max(full.max_deviation, step.max_deviation), f"{inst.label} t1={t1}")


def prop_minimum_condition(rng, lattice, grid, cap):
    inst = random_on(rng, lattice, grid)
    sol = solve_2drbsde(lattice, grid, inst.driver, inst.terminal, inst.obstacles)
    # plain kernels when the driver ignores (y, z), tilted kernels otherwise
    measure = "plain" if is_running_type(inst.driver) else "linearized"
    gap = max(check_minimum_condition(lattice, grid, sol, inst.driver, inst.obstacles, t, cap,
                                      measure=measure).max_gap
              for t in range(lattice.steps))
    return Check(gap, inst.label)


def prop_skorohod(rng, lattice, grid, cap):
    inst = random_on(rng, lattice, grid)
    st = random_strategy(rng, lattice, grid)
    rep = check_skorohod(solve_drbsde_reflected(lattice, st, inst.driver, inst.terminal,
                                                inst.obstacles), inst.obstacles)
    return Check(max(rep.complementarity, rep.obstacle_violation, rep.simultaneous), inst.label)


def prop_decomposition(rng, lattice, grid, cap):
    inst = random_on(rng, lattice, grid)
    st = random_strategy(rng, lattice, grid)
    sol = solve_drbsde_reflected(lattice, st, inst.driver, inst.terminal, inst.obstacles)
    dec = decompose_supermartingale(lattice, st, inst.driver, sol.y, inst.obstacles)
    return Check(max(dec.residual, max(float(np.max(np.abs(v))) for v in dec.V)), inst.label)


def prop_jordan(rng, lattice, grid, cap):
    inst = forced_contact_on(rng, lattice, grid)
    sol = solve_2drbsde(lattice, grid, inst.driver, inst.terminal, inst.obstacles)
    st = random_strategy(rng, lattice, grid)
    ledger = v_process(lattice, st, sol, inst.driver)
    comp = solve_drbsde_reflected(lattice, st, inst.driver, inst.terminal, inst.obstacles)
    full = decompose_v(ledger, comp, inst.obstacles)
    recon = max(float(np.max(np.abs(v - (p - k))))
                for v, p, k in zip(full.v, full.v_plus, full.k_plus))
    overlap = max(float(np.max(np.abs(p * k))) for p, k in zip(full.v_plus, full.k_plus))
    return Check(max(recon, overlap, full.contact_mismatch), inst.label)


def ordered_pair(rng, inst: Instance, share: str | None = None) -> Instance:
    """A second instance below ``inst`` in the comparison order.

    ``share`` keeps the "upper" or "lower" obstacle identical.
    """
    lattice = inst.lattice
    lo1, up1, xi1, d1 = inst.obstacles.lower, inst.obstacles.upper, inst.terminal, inst.driver
    u1 = 0.0 if share == "lower" else rng.uniform(0.0, 0.3)
    u2 = 0.0 if share == "upper" else rng.uniform(0.0, 1.0)
    u3, df = rng.uniform(0.0, 0.3), rng.uniform(0.0, 0.5)
    lo2 = lambda t, x: np.asarray(lo1(t, x)) - u1  # noqa: E731

    def up2(t, x):
        lo, up = np.asarray(lo1(t, x)), np.asarray(up1(t, x))
        # stays above lo2 by at least half the original band
        return up - np.minimum(u2, 0.5 * (up - lo))

    T = lattice.horizon
    xi2 = lambda x: np.clip(np.asarray(xi1(x)) - u3, lo2(T, x), up2(T, x))  # noqa: E731
    d2 = Driver(lambda t, x, y, z, a: d1(t, x, y, z, a) - df, d1.lipschitz_y, d1.lipschitz_z,
                name=f"{d1.name}-shifted")
    return Instance(lattice, inst.grid, d2, xi2, ObstaclePair(lo2, up2), inst.label)


def prop_comparison(rng, lattice, grid, cap):
    inst = random_on(rng, lattice, grid)
    share = (None, "upper", "lower")[int(rng.integers(3))]
    low = ordered_pair(rng, inst, share)
    st = random_strategy(rng, lattice, grid)
    a = solve_drbsde_reflected(lattice, st, inst.driver, inst.terminal, inst.obstacles)
    b = solve_drbsde_reflected(lattice, st, low.driver, low.terminal, low.obstacles)
    worst = max(float(np.max(y2 - y1)) for y1, y2 in zip(a.y, b.y))
    if share == "upper":
        worst = max(worst, max(float(np.max(k2 - k1)) for k1, k2 in zip(a.dk_plus, b.dk_plus)))
    if share == "lower":
        worst = max(worst, max(float(np.max(k1 - k2)) for k1, k2 in zip(a.dk_minus, b.dk_minus)))
    A = solve_2drbsde(lattice, grid, inst.driver, inst.terminal, inst.obstacles)
    B = solve_2drbsde(lattice, grid, low.driver, low.terminal, low.obstacles)
    worst = max(worst, max(float(np.max(y2 - y1)) for y1, y2 in zip(A.Y, B.Y)))
    return Check(max(worst, 0.0), f"{inst.label} share={share}")


def prop_saddle(rng, lattice, grid, cap):
    inst = random_on(rng, lattice, grid, kinds=("zero", "running"))
    st = random_strategy(rng, lattice, grid)
    pay = _payoff(inst)
    bf = dynkin_bruteforce(lattice, st, pay, cap)
    vi = dynkin_value_iteration(lattice, st, pay)[0][0]
    return Check(max(bf.saddle_gap, abs(bf.infsup - vi)), inst.label)


def prop_minmax_exchange(rng, lattice, grid, cap):
    inst = random_on(rng, lattice, grid, kinds=("zero", "running"))
    rep = minmax_exchange(lattice, grid, _payoff(inst), cap)
    return Check(rep.exchange_gap, inst.label)


PROPERTY_FUNCS: dict[str, Callable] = {
    "representation": prop_representation,
    "minimum_condition": prop_minimum_condition,
    "skorohod": prop_skorohod,
    "decomposition": prop_decomposition,
    "jordan": prop_jordan,
    "comparison": prop_comparison,
    "saddle": prop_saddle,
    "minmax_exchange": prop_minmax_exchange,
}


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_suite(lattice: Lattice, grid: VolatilityGrid, seed: int, instances: int, cap: int,
              tolerances: dict, properties=PROPERTIES) -> list[InstanceResult]:
    """Run every property on ``instances`` seeded instances; results come back
    in (property, instance) order whatever the thread count."""
    tasks = [(PROPERTIES.index(p), p, k) for p in properties for k in range(instances)]

    def run(task):
        p_idx, name, k = task
        rng = np.random.default_rng([seed, p_idx, k])
        check = PROPERTY_FUNCS[name](rng, lattice, grid, cap)
        return InstanceResult(name, k, (seed, p_idx, k), check.deviation,
                              tolerances[TOLERANCE_KEY[name]], check.detail)

    n = thread_count()
    if n == 1:
        return [run(t) for t in tasks]
    with ThreadPool(n) as pool:
        return pool.map(run, tasks)


def summarize(results: list[InstanceResult], properties=PROPERTIES) -> list[PropertySummary]:
    out = []
    for name in properties:
        rows = [r for r in results if r.prop == name]
        if not rows:
            continue
        out.append(PropertySummary(name, len(rows), sum(not r.passed for r in rows),
                                   max(r.deviation for r in rows), rows[0].tol,
                                   name in INFORMATIONAL))
    return out

