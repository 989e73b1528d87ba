"""Randomised cross-module properties driven by hypothesis-chosen seeds."""

import numpy as np
from hypothesis import given, settings, strategies as st

from drlattice.drbsde import check_skorohod, solve_drbsde_reflected
from drlattice.dynkin import GamePayoff, dynkin_value_iteration
from drlattice.instances import random_instance
from drlattice.second_order import check_representation, solve_2drbsde, solve_2drbsde_lower
from drlattice.verification import random_strategy

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 4), st.sampled_from(["zero", "running", "linear", "vol"]))
def test_reflected_solution_is_skorohod(seed, steps, kind):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, steps, 2, kind)
    strat = random_strategy(rng, inst.lattice, inst.grid)
    rep = check_skorohod(solve_drbsde_reflected(inst.lattice, strat, inst.driver, inst.terminal,
                                                inst.obstacles), inst.obstacles)
    assert max(rep.complementarity, rep.obstacle_violation, rep.simultaneous) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(1, 3))
def test_second_order_value_brackets(seed, steps):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, steps, 2)
    args = (inst.lattice, inst.grid, inst.driver, inst.terminal, inst.obstacles)
    hi, lo = solve_2drbsde(*args), solve_2drbsde_lower(*args)
    y = solve_drbsde_reflected(inst.lattice, random_strategy(rng, inst.lattice, inst.grid),
                               inst.driver, inst.terminal, inst.obstacles).y
    lower, upper = inst.obstacles.lower_values(inst.lattice), inst.obstacles.upper_values(inst.lattice)
    for a, b, c, l, u in zip(lo.Y, y, hi.Y, lower, upper):
        assert np.all(a <= b + 1e-12) and np.all(b <= c + 1e-12)
        assert np.all(l <= a) and np.all(c <= u)
    rep = check_representation(inst.lattice, inst.grid, hi, inst.driver, inst.obstacles, 10**6)
    assert rep.max_deviation <= 1e-10


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 5))
def test_running_reward_game_equals_drbsde(seed, steps):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, steps, 2, "running")
    strat = random_strategy(rng, inst.lattice, inst.grid)
    d = inst.driver
    pay = GamePayoff(lambda t, x: d(t, x, 0.0, 0.0, 0.0), inst.obstacles.lower,
                     inst.obstacles.upper, inst.terminal)
    V = dynkin_value_iteration(inst.lattice, strat, pay)
    y = solve_drbsde_reflected(inst.lattice, strat, d, inst.terminal, inst.obstacles).y
    assert max(float(np.max(np.abs(a - b))) for a, b in zip(V, y)) <= 1e-12
