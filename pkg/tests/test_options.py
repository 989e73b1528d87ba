import numpy as np
import pytest

from conftest import const
from drlattice.drbsde import ObstaclePair, linear_driver, solve_drbsde_reflected, zero_driver
from drlattice.lattice import Strategy, VolatilityGrid, build_lattice
from drlattice.options import (
    GameOptionSpec, OptionSpecError, american_limit, exercise_boundary, hedge_strategy,
    price_game_option,
)

put = lambda k: (lambda t, x: np.maximum(k - np.asarray(x), 0.0))  # noqa: E731


def put_spec(strike=0.0, penalty=0.05, driver=None):
    p = put(strike)
    return GameOptionSpec(p, const(penalty), lambda x: p(1.0, x), driver or zero_driver())


@pytest.fixture
def grid3():
    grid = VolatilityGrid([0.15, 0.3])
    return build_lattice(1.0, 6, 0.0, grid), grid


def test_singleton_interval_collapses_to_drbsde_price():
    grid = VolatilityGrid([0.25])
    lat = build_lattice(1.0, 8, 0.0, grid)
    spec = put_spec(0.1)
    iv = price_game_option(lat, grid, spec)
    ref = solve_drbsde_reflected(lat, Strategy.constant(lat, 0), spec.funding_driver,
                                 spec.terminal_payoff, spec.obstacles).y0
    assert iv.sub_price == iv.super_price
    assert abs(iv.super_price - ref) <= 1e-14 and iv.width == 0.0


def test_constant_game(grid3):
    lat, grid = grid3
    spec = GameOptionSpec(const(2.5), const(0.3), lambda x: np.full(np.shape(x), 2.5))
    iv = price_game_option(lat, grid, spec)
    assert iv.sub_price == iv.super_price == 2.5


def test_interval_is_ordered_and_nested(grid3):
    lat, grid = grid3
    spec = put_spec(0.0, 0.2)
    wide = price_game_option(lat, grid, spec)
    assert wide.sub_price <= wide.super_price
    assert all(np.all(a <= b) for a, b in zip(wide.sub_curve, wide.super_curve))
    for level in grid.levels:
        one = price_game_option(lat, VolatilityGrid([level]), spec)
        assert wide.sub_price <= one.sub_price + 1e-14
        assert one.super_price <= wide.super_price + 1e-14
    assert wide.width > 1e-3


def test_linear_claim_hedge_is_one():
    grid = VolatilityGrid([0.2])
    lat = build_lattice(1.0, 5, 0.0, grid)
    spec = GameOptionSpec(lambda t, x: np.asarray(x) - 1.0, const(2.0), lambda x: np.asarray(x))
    iv = price_game_option(lat, grid, spec)
    for pi in hedge_strategy(iv.upper_solution).pi:
        np.testing.assert_allclose(pi, 1.0, atol=1e-12)


def test_constant_claim_hedge_is_zero(grid3):
    lat, grid = grid3
    spec = GameOptionSpec(const(0.0), const(1.0), lambda x: np.full(np.shape(x), 0.5))
    table = hedge_strategy(price_game_option(lat, grid, spec).upper_solution)
    assert all(np.all(pi == 0.0) for pi in table.pi)
    assert len(table.argmax_vol) == lat.steps


def test_call_hedge_is_a_delta():
    grid = VolatilityGrid([0.3])
    lat = build_lattice(1.0, 10, 0.0, grid)
    call = lambda x: np.maximum(np.asarray(x) - 0.05, 0.0)  # noqa: E731
    spec = GameOptionSpec(const(0.0), const(100.0), call)
    for pi in hedge_strategy(price_game_option(lat, grid, spec).upper_solution).pi:
        assert np.all(pi >= -1e-15) and np.all(pi <= 1 + 1e-15)
        assert np.all(np.diff(pi) >= -1e-15)


def test_penalty_raises_the_super_price(grid3):
    lat, grid = grid3
    prices = [price_game_option(lat, grid, put_spec(0.0, p)).super_price
              for p in (0.01, 0.03, 0.1, 1.0)]
    assert all(a <= b for a, b in zip(prices, prices[1:]))


def test_american_limit_from_below(grid3):
    lat, grid = grid3
    res = american_limit(lat, grid, put_spec(0.0, 0.005))
    assert res.penalties == (1.0, 10.0, 100.0, 1000.0)
    assert res.monotone
    errs = res.errors
    assert errs[-1] <= errs[0] and errs[-1] <= 1e-12


def test_american_limit_singleton_matches_lower_reflection():
    grid = VolatilityGrid([0.2])
    lat = build_lattice(1.0, 6, 0.0, grid)
    spec = put_spec(0.1, 0.01)
    res = american_limit(lat, grid, spec)
    inf = ObstaclePair(spec.exercise_payoff, const(np.inf))
    ref = solve_drbsde_reflected(lat, Strategy.constant(lat, 0), zero_driver(),
                                 spec.terminal_payoff, inf).y0
    assert res.american == ref


def test_buyer_region_empty_where_time_value_is_large(grid3):
    lat, grid = grid3
    spec = put_spec(-0.2, 0.5)  # out of the money at x0 but within reach
    iv = price_game_option(lat, grid, spec)
    rows = exercise_boundary(lat, iv.super_curve, [], spec, 1e-3)
    assert rows[0].buyer_states == () and rows[1].buyer_states == ()
    assert all(r.seller_states == () for r in rows)
    lo = spec.obstacles.lower_values(lat)
    for r in rows:
        mask = np.isin(lat.states(r.slice), r.buyer_states)
        assert np.all(iv.super_curve[r.slice][mask] <= lo[r.slice][mask] + 1e-3)
    # at the horizon Y = xi = L, so everyone exercises
    assert len(rows[-1].buyer_states) == lat.slice_size(lat.steps)


def test_seller_region_everything_when_epsilon_covers_penalty(grid3):
    lat, grid = grid3
    spec = put_spec(0.0, 0.05)
    iv = price_game_option(lat, grid, spec)
    y = solve_drbsde_reflected(lat, Strategy.constant(lat, 0), zero_driver(),
                               spec.terminal_payoff, spec.obstacles).y
    rows = exercise_boundary(lat, iv.super_curve, [y], spec, 0.06)
    for r in rows:
        assert r.seller_states[0] == tuple(float(s) for s in lat.states(r.slice))
    with pytest.raises(ValueError):
        exercise_boundary(lat, iv.super_curve, [y], spec, 0.0)


def test_funding_driver_is_used(grid3):
    lat, grid = grid3
    base = price_game_option(lat, grid, put_spec(0.0, 0.2))
    d = linear_driver(0.0, 0.0, const(0.05), a_min=grid.a_lower)
    funded = price_game_option(lat, grid, put_spec(0.0, 0.2, d))
    assert funded.super_price > base.super_price


def test_spec_validation(grid3):
    lat, grid = grid3
    bad_pen = GameOptionSpec(const(0.0), const(0.0), lambda x: np.zeros(np.shape(x)))
    with pytest.raises(OptionSpecError, match="penalty"):
        price_game_option(lat, grid, bad_pen)
    bad_xi = GameOptionSpec(const(0.0), const(1.0), lambda x: np.full(np.shape(x), 2.0))
    with pytest.raises(OptionSpecError, match="terminal"):
        bad_xi.validate(lat)
    put_spec().validate(lat)
