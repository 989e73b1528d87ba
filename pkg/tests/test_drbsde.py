import numpy as np
import pytest
from dataclasses import replace

from conftest import const
from drlattice.drbsde import (
    NotSupermartingale, ObstacleError, ObstaclePair, build_driver_from_hamiltonian,
    check_skorohod, decompose_supermartingale, linear_driver, running_reward_driver,
    solve_drbsde_penalized, solve_drbsde_reflected, zero_driver,
)
from drlattice.dynkin import GamePayoff, dynkin_bruteforce, dynkin_value_iteration
from drlattice.instances import binomial_instance, random_instance
from drlattice.lattice import Strategy, VolatilityGrid, build_lattice


def one_step():
    lat = build_lattice(1.0, 1, 0.0, VolatilityGrid([0.2]))
    return lat, Strategy.constant(lat, 0)


def test_interior_constant():
    lat, st = one_step()
    sol = solve_drbsde_reflected(lat, st, zero_driver(), lambda x: np.full_like(x, 5.0),
                                 ObstaclePair(const(0), const(10)))
    assert sol.y0 == 5.0
    assert sol.dk_plus[0][0] == 0.0 and sol.dk_minus[0][0] == 0.0


def test_upper_clamp_binds():
    lat, st = one_step()
    # S(T) = 12 keeps xi compatible, S = 10 at the root forces the push
    upper = lambda t, x: np.full(np.shape(x), 10.0 if t < 1.0 else 12.0)  # noqa: E731
    sol = solve_drbsde_reflected(lat, st, zero_driver(), lambda x: np.full_like(x, 12.0),
                                 ObstaclePair(const(0), upper))
    assert sol.y0 == 10.0
    assert sol.dk_plus[0][0] == 2.0 and sol.dk_minus[0][0] == 0.0


def test_rejects_incompatible_terminal_and_overlap():
    lat, st = one_step()
    with pytest.raises(ObstacleError):
        solve_drbsde_reflected(lat, st, zero_driver(), lambda x: np.full_like(x, 12.0),
                               ObstaclePair(const(0), const(10)))
    with pytest.raises(ObstacleError):
        solve_drbsde_reflected(lat, st, zero_driver(), lambda x: np.full_like(x, 1.0),
                               ObstaclePair(const(1), const(1)))


def test_matches_dynkin_bruteforce_four_steps():
    rng = np.random.default_rng(11)
    for _ in range(5):
        inst = binomial_instance(rng, 4)
        lat = inst.lattice
        st = Strategy.constant(lat, 0)
        d = inst.driver
        payoff = GamePayoff(lambda t, x: d(t, x, 0, 0, 0), inst.obstacles.lower,
                            inst.obstacles.upper, inst.terminal)
        y0 = solve_drbsde_reflected(lat, st, d, inst.terminal, inst.obstacles).y0
        assert abs(y0 - dynkin_bruteforce(lat, st, payoff, cap=2**21).infsup) <= 1e-10


def test_zero_driver_equals_value_iteration_exactly():
    rng = np.random.default_rng(12)
    inst = random_instance(rng, 5, 2, "zero")
    lat = inst.lattice
    st = Strategy(rng.integers(2, size=lat.n_nonterminal))
    payoff = GamePayoff(lambda t, x: np.zeros_like(x), inst.obstacles.lower,
                        inst.obstacles.upper, inst.terminal)
    sol = solve_drbsde_reflected(lat, st, zero_driver(), inst.terminal, inst.obstacles)
    for a, b in zip(sol.y, dynkin_value_iteration(lat, st, payoff)):
        assert np.array_equal(a, b)


def test_hamiltonian_examples():
    zero = build_driver_from_hamiltonian(lambda t, x, y, z, g: 0.0 * g, [0.0])
    assert zero(0.0, 1.0, 2.0, 3.0, 0.5) == 0.0
    grid = np.round(np.arange(-1000, 1001) * 0.01, 10)
    quad = build_driver_from_hamiltonian(lambda t, x, y, z, g: 0.5 * g**2, grid)
    assert abs(float(quad(0.0, 0.0, 0.0, 0.0, 2.0)) - 0.5) <= 1e-4
    a0 = 0.04
    lin = build_driver_from_hamiltonian(lambda t, x, y, z, g: 0.5 * a0 * g, [-10, -1, 0, 1, 10])
    assert float(lin(0, 0, 0, 0, a0)) == 0.0
    assert float(lin(0, 0, 0, 0, 0.09)) > float(lin(0, 0, 0, 0, 0.05)) > 0.0
    with pytest.raises(ValueError):
        build_driver_from_hamiltonian(lambda t, x, y, z, g: g, [1.0, 2.0])


def test_hamiltonian_dominates_every_grid_point():
    rng = np.random.default_rng(3)
    gammas = np.linspace(-3, 3, 13)
    H = lambda t, x, y, z, g: 0.3 * g**2 + 0.1 * y * g  # noqa: E731
    F = build_driver_from_hamiltonian(H, gammas)
    for _ in range(50):
        y, a = rng.uniform(-2, 2), rng.uniform(0.01, 1)
        vals = [0.5 * a * g - H(0, 0, y, 0, g) for g in gammas]
        assert float(F(0, 0, y, 0, a)) == pytest.approx(max(vals), abs=0)


def test_driver_lipschitz_check():
    rng = np.random.default_rng(0)
    assert linear_driver(0.3, 0.05, a_min=0.01).lipschitz_excess(rng) <= 1e-12
    bad = replace(linear_driver(0.3, 0.05), lipschitz_y=0.1)
    assert bad.lipschitz_excess(rng) > 0


def wide_lower(lat):
    return ObstaclePair(const(-0.2), const(1e6))


def test_penalized_equals_lower_reflected_when_upper_never_binds():
    rng = np.random.default_rng(4)
    inst = random_instance(rng, 4, 1, "running")
    lat = inst.lattice
    st = Strategy.constant(lat, 0)
    obs = ObstaclePair(inst.obstacles.lower, const(1e6))
    ref = solve_drbsde_reflected(lat, st, inst.driver, inst.terminal, obs)
    for n in (1, 10, 1000):
        pen = solve_drbsde_penalized(lat, st, inst.driver, inst.terminal, obs, n)
        for a, b in zip(pen.y, ref.y):
            assert np.array_equal(a, b)


def test_penalized_monotone_and_skorohod_shrinks():
    rng = np.random.default_rng(5)
    inst = random_instance(rng, 5, 1, "running")
    lat = inst.lattice
    st = Strategy.constant(lat, 0)
    ref = solve_drbsde_reflected(lat, st, inst.driver, inst.terminal, inst.obstacles)
    prev, viol = None, []
    for n in (1, 10, 100, 1000, 10**5):
        pen = solve_drbsde_penalized(lat, st, inst.driver, inst.terminal, inst.obstacles, n)
        if prev is not None:
            for a, b in zip(prev.y, pen.y):
                assert np.all(b <= a)
        for a, b in zip(pen.y, ref.y):
            assert np.all(a >= b - 1e-15)
        viol.append(check_skorohod(pen, inst.obstacles).obstacle_violation)
        prev = pen
    assert viol[0] > 0
    assert all(b <= a for a, b in zip(viol, viol[1:]))
    assert viol[-1] < 1e-3 * viol[0]


def test_penalty_must_be_positive():
    lat, st = one_step()
    with pytest.raises(ValueError):
        solve_drbsde_penalized(lat, st, zero_driver(), lambda x: x * 0, ObstaclePair(const(-1), const(1)), 0)


def test_skorohod_on_solution_and_corruption():
    rng = np.random.default_rng(6)
    inst = random_instance(rng, 4, 2)
    lat = inst.lattice
    st = Strategy(rng.integers(2, size=lat.n_nonterminal))
    sol = solve_drbsde_reflected(lat, st, inst.driver, inst.terminal, inst.obstacles)
    rep = check_skorohod(sol, inst.obstacles)
    assert rep.passed and rep.complementarity == 0 and rep.simultaneous == 0
    up = inst.obstacles.upper_values(lat)
    kp = [k.copy() for k in sol.dk_plus]
    i = 1
    j = int(np.argmax(up[i] - sol.y[i]))
    kp[i][j] = 0.25
    bad = replace(sol, dk_plus=kp)
    assert check_skorohod(bad, inst.obstacles).complementarity == pytest.approx(
        max(0.25 * (up[i][j] - sol.y[i][j]), check_skorohod(sol, inst.obstacles).complementarity))


def test_explicit_and_implicit_agree_for_running_driver():
    rng = np.random.default_rng(7)
    inst = random_instance(rng, 5, 2, "running")
    lat = inst.lattice
    st = Strategy(rng.integers(2, size=lat.n_nonterminal))
    a = solve_drbsde_reflected(lat, st, inst.driver, inst.terminal, inst.obstacles)
    b = solve_drbsde_reflected(lat, st, inst.driver, inst.terminal, inst.obstacles, scheme="implicit")
    assert max(float(np.max(np.abs(u - v))) for u, v in zip(a.y, b.y)) <= 1e-14


def test_implicit_is_a_fixed_point():
    rng = np.random.default_rng(8)
    inst = random_instance(rng, 3, 1, "linear")
    lat = inst.lattice
    st = Strategy.constant(lat, 0)
    sol = solve_drbsde_reflected(lat, st, inst.driver, inst.terminal, inst.obstacles, scheme="implicit")
    i = 1
    c = sol.unreflected[i]
    e = lat.expectation(sol.y[i + 1], st.at(i))
    f = inst.driver(lat.time(i), lat.states(i), c, sol.z[i], lat.grid.variances[st.at(i)])
    np.testing.assert_allclose(c, e + lat.dt * f, atol=1e-12)


def test_comparison_orientation_counterexample():
    """A lower upper obstacle can only lower the value."""
    lat, st = one_step()
    xi = lambda x: np.full_like(x, 9.5)  # noqa: E731
    s1 = lambda t, x: np.full(np.shape(x), 5.0 if t < 1.0 else 10.0)  # noqa: E731
    y1 = solve_drbsde_reflected(lat, st, zero_driver(), xi, ObstaclePair(const(0), s1)).y0
    y2 = solve_drbsde_reflected(lat, st, zero_driver(), xi, ObstaclePair(const(0), const(20))).y0
    assert (y1, y2) == (5.0, 9.5)


def test_doob_meyer_of_exact_solution_is_trivial():
    rng = np.random.default_rng(9)
    inst = random_instance(rng, 4, 2)
    lat = inst.lattice
    st = Strategy(rng.integers(2, size=lat.n_nonterminal))
    sol = solve_drbsde_reflected(lat, st, inst.driver, inst.terminal, inst.obstacles)
    dec = decompose_supermartingale(lat, st, inst.driver, sol.y, inst.obstacles)
    assert dec.residual == 0.0
    assert max(float(np.max(np.abs(v))) for v in dec.V) == 0.0
    for a, b in zip(dec.dk_plus, sol.dk_plus):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_doob_meyer_of_a_martingale():
    lat = build_lattice(1.0, 4, 0.0, VolatilityGrid([0.2]))
    st = Strategy.constant(lat, 0)
    Y = [lat.states(i) + 1.0 for i in range(lat.steps + 1)]
    dec = decompose_supermartingale(lat, st, zero_driver(), Y, ObstaclePair(const(-100), const(100)))
    assert dec.residual <= 1e-14
    assert all(np.all(v == 0) for v in dec.V + dec.dk_plus + dec.dk_minus)
    for z in dec.z:
        np.testing.assert_allclose(z, 1.0, atol=1e-12)


def test_doob_meyer_recovers_bumped_process():
    rng = np.random.default_rng(10)
    inst = random_instance(rng, 4, 1, "running")
    lat = inst.lattice
    st = Strategy.constant(lat, 0)
    sol = solve_drbsde_reflected(lat, st, inst.driver, inst.terminal, inst.obstacles)
    up = inst.obstacles.upper_values(lat)
    Y = [np.minimum(up[i], y + 0.5) for i, y in enumerate(sol.y[:-1])] + [sol.y[-1]]
    dec = decompose_supermartingale(lat, st, inst.driver, Y, inst.obstacles)
    assert dec.residual < 1e-6
    assert all(np.all(v >= 0) for v in dec.V)
    assert max(float(np.max(v)) for v in dec.V) > 0.1
    # each step of the iterate is its unreflected value plus the recorded pushes
    for i in range(lat.steps):
        c = lat.expectation(dec.y[i + 1], st.at(i)) + lat.dt * inst.driver(
            lat.time(i), lat.states(i), 0, 0, 0)
        np.testing.assert_allclose(dec.y[i], c + dec.V[i] + dec.dk_minus[i] - dec.dk_plus[i],
                                   atol=1e-12)


def test_doob_meyer_rejects_submartingale():
    lat = build_lattice(1.0, 3, 0.0, VolatilityGrid([0.2]))
    st = Strategy.constant(lat, 0)
    # increasing in time: a strict submartingale under the zero driver
    Y = [np.full(lat.slice_size(i), float(i)) for i in range(lat.steps + 1)]
    with pytest.raises(NotSupermartingale):
        decompose_supermartingale(lat, st, zero_driver(), Y, ObstaclePair(const(-100), const(100)))


def test_running_reward_driver_ignores_y_z():
    d = running_reward_driver(lambda t, x: 2.0 * x)
    assert float(d(0.0, 1.5, 10.0, -3.0, 0.2)) == 3.0
