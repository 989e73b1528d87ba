"""Dynkin games on the lattice: Bellman recursion, exhaustive stopping-rule
enumeration, uncertain-volatility game values and epsilon-optimal rules.

Payoff convention: the minimiser stops with ``tau`` and pays ``S``, the
maximiser stops with ``sigma`` and receives ``L``; a simultaneous stop pays
``L`` and at the horizon both receive ``xi``.  The running reward ``g``
accrues ``g dt`` per step survived.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .drbsde import Driver, ObstaclePair, candidate, running_reward_driver
from .lattice import (
    Lattice, OracleCapExceeded, Strategy, VolatilityGrid, choice_matrix, strategy_matrix,
)


@dataclass(frozen=True)
class GamePayoff:
    running: object
    lower: object
    upper: object
    terminal: object
    gap: float = 1e-9

    @property
    def obstacles(self) -> ObstaclePair:
        return ObstaclePair(self.lower, self.upper, self.gap)

    def driver(self) -> Driver:
        return running_reward_driver(self.running)

    def validate(self, lattice: Lattice) -> None:
        self.obstacles.validate(lattice, self.terminal)

    def tables(self, lattice: Lattice):
        """Per-slice arrays ``(g, L, S)`` and the terminal values."""
        obs = self.obstacles
        g = [np.broadcast_to(np.asarray(self.running(lattice.time(i), lattice.states(i)),
                                        dtype=float), (lattice.slice_size(i),))
             for i in range(lattice.steps)]
        xi = np.broadcast_to(np.asarray(self.terminal(lattice.states(lattice.steps)), dtype=float),
                             (lattice.slice_size(lattice.steps),))
        return g, obs.lower_values(lattice), obs.upper_values(lattice), xi


@dataclass(frozen=True, eq=False)
class StoppingRule:
    """Stop at the first visited node whose flag is set; terminal nodes always stop."""

    stop: list[np.ndarray]

    def stops_at(self, i: int, j: int) -> bool:
        return i >= len(self.stop) or bool(self.stop[i][j])

    @classmethod
    def never(cls, lattice: Lattice) -> "StoppingRule":
        return cls([np.zeros(lattice.slice_size(i), dtype=bool) for i in range(lattice.steps)])


def dynkin_value_iteration(lattice: Lattice, strategy: Strategy | np.ndarray,
                           payoff: GamePayoff) -> list[np.ndarray]:
    """``V = min(S, max(L, E[V_next] + g dt))`` under one or many strategies.

    ``strategy`` may be a :class:`Strategy` or a ``(B, N**2)`` matrix of
    kernel indices; in the latter case every returned slice has a leading
    batch axis.
    """
    payoff.validate(lattice)
    g, lo, up, xi = payoff.tables(lattice)
    flat = strategy.flat if isinstance(strategy, Strategy) else np.asarray(strategy)
    V = np.broadcast_to(xi, flat.shape[:-1] + xi.shape).copy()
    out = [V]
    for i in range(lattice.steps - 1, -1, -1):
        vol = flat[..., i * i:(i + 1) ** 2]
        V = np.minimum(up[i], np.maximum(lo[i], lattice.expectation(V, vol) + g[i] * lattice.dt))
        out.append(V)
    return out[::-1]


@dataclass(frozen=True, eq=False)
class _Tree:
    """Levels of a (possibly unrolled) tree: lattice column, children, probabilities."""

    columns: list[np.ndarray]
    children: list[np.ndarray]
    probs: list[np.ndarray]


def _markov_tree(lattice: Lattice, strategy: Strategy) -> _Tree:
    reach = [np.array([True])]
    cols, kids, probs = [], [], []
    for i in range(lattice.steps):
        p = lattice.probabilities[strategy.at(i)]
        nxt = np.zeros(lattice.slice_size(i + 1), dtype=bool)
        for b in range(3):
            nxt[b:b + lattice.slice_size(i)] |= reach[i] & (p[:, b] > 0)
        reach.append(nxt)
    for i in range(lattice.steps + 1):
        cols.append(np.flatnonzero(reach[i]))
    for i in range(lattice.steps):
        pos = -np.ones(lattice.slice_size(i + 1), dtype=int)
        pos[cols[i + 1]] = np.arange(cols[i + 1].size)
        j = cols[i]
        kid = np.stack([pos[j], pos[j + 1], pos[j + 2]], axis=1)
        p = lattice.probabilities[strategy.at(i)[j]]
        kids.append(np.where(p > 0, kid, 0))
        probs.append(p)
    return _Tree(cols, kids, probs)


def _path_tree(lattice: Lattice, strategy: Strategy) -> _Tree:
    cols, kids, probs = [np.array([0])], [], []
    for i in range(lattice.steps):
        p = lattice.probabilities[strategy.at(i)[cols[i]]]
        nxt, kid = [], np.zeros((cols[i].size, 3), dtype=int)
        for n, j in enumerate(cols[i]):
            for b in range(3):
                if p[n, b] > 0:
                    kid[n, b] = len(nxt)
                    nxt.append(j + b)
        cols.append(np.array(nxt, dtype=int))
        kids.append(kid)
        probs.append(p)
    return _Tree(cols, kids, probs)


@dataclass(frozen=True, eq=False)
class BruteForceResult:
    infsup: float
    supinf: float
    # indices into the rule lists of a minimax tau and a maximin sigma
    saddle: tuple[int, int]
    tau_rules: list[StoppingRule] = field(repr=False)
    sigma_rules: list[StoppingRule] = field(repr=False)
    payoff_matrix: np.ndarray = field(repr=False)

    @property
    def saddle_gap(self) -> float:
        return abs(self.infsup - self.supinf)


def _rules_from_markings(tree: _Tree, lattice: Lattice, marks: np.ndarray,
                         mode: str) -> list[StoppingRule]:
    if mode != "markov":
        return []
    rules = []
    for row in marks:
        stop, k = [], 0
        for i in range(lattice.steps):
            s = np.zeros(lattice.slice_size(i), dtype=bool)
            n = tree.columns[i].size
            s[tree.columns[i]] = row[k:k + n]
            k += n
            stop.append(s)
        rules.append(StoppingRule(stop))
    return rules


def dynkin_bruteforce(lattice: Lattice, strategy: Strategy, payoff: GamePayoff, cap: int,
                      mode: str = "markov") -> BruteForceResult:
    """Evaluate every pair of stopping rules and read off infsup and supinf.

    Rules are boolean markings of the reachable non-terminal nodes
    (``mode="markov"``) or of the unrolled path tree (``mode="path"``, rules
    may depend on the whole history).  ``cap`` bounds the number of pairs.
    """
    if mode not in ("markov", "path"):
        raise ValueError(f"mode must be 'markov' or 'path', got {mode!r}")
    payoff.validate(lattice)
    tree = _markov_tree(lattice, strategy) if mode == "markov" else _path_tree(lattice, strategy)
    sizes = [c.size for c in tree.columns[:-1]]
    n_marks = sum(sizes)
    if 4**n_marks > cap:
        raise OracleCapExceeded(f"4^{n_marks} = {4**n_marks} rule pairs exceed the cap {cap}")
    marks = choice_matrix(2, n_marks, cap).astype(bool)
    g, lo, up, xi = payoff.tables(lattice)
    dt = lattice.dt
    n_rules = marks.shape[0]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    # W[tau, sigma, node] on the current level
    W = np.broadcast_to(xi[tree.columns[-1]], (n_rules, n_rules, tree.columns[-1].size))
    for i in range(lattice.steps - 1, -1, -1):
        j = tree.columns[i]
        kid, p = tree.children[i], tree.probs[i]
        cont = (W[..., kid] * p).sum(axis=-1) + g[i][j] * dt
        m = marks[:, offsets[i]:offsets[i + 1]]
        W = np.where(m[None, :, :], lo[i][j], np.where(m[:, None, :], up[i][j], cont))
    R = W[..., 0]
    worst_for_tau = R.max(axis=1)
    best_for_sigma = R.min(axis=0)
    t_star, s_star = int(np.argmin(worst_for_tau)), int(np.argmax(best_for_sigma))
    return BruteForceResult(
        float(worst_for_tau[t_star]), float(best_for_sigma[s_star]), (t_star, s_star),
        _rules_from_markings(tree, lattice, marks, mode),
        _rules_from_markings(tree, lattice, marks, mode), R,
    )


def evaluate_rules(lattice: Lattice, strategy: Strategy, payoff: GamePayoff,
                   tau: StoppingRule, sigma: StoppingRule,
                   extra_running: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Conditional value of the fixed pair ``(tau, sigma)`` at every node.

    ``extra_running`` adds a per-node reward (already multiplied by dt) on
    every step survived, used for compensated games.
    """
    g, lo, up, xi = payoff.tables(lattice)
    W, out = xi.copy(), [xi.copy()]
    for i in range(lattice.steps - 1, -1, -1):
        cont = lattice.expectation(W, strategy.at(i)) + g[i] * lattice.dt
        if extra_running is not None:
            cont = cont + extra_running[i]
        W = np.where(sigma.stop[i], lo[i], np.where(tau.stop[i], up[i], cont))
        out.append(W)
    return out[::-1]


def best_response_values(lattice: Lattice, strategy: Strategy, payoff: GamePayoff,
                         tau: StoppingRule | None = None, sigma: StoppingRule | None = None,
                         extra_running: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Value of the optimal reply to one fixed rule.

    With ``tau`` fixed the maximiser optimises ``sigma``; with ``sigma`` fixed
    the minimiser optimises ``tau``.  Exactly one of them must be given.
    """
    if (tau is None) == (sigma is None):
        raise ValueError("give exactly one of tau, sigma")
    g, lo, up, xi = payoff.tables(lattice)
    W, out = xi.copy(), [xi.copy()]
    for i in range(lattice.steps - 1, -1, -1):
        cont = lattice.expectation(W, strategy.at(i)) + g[i] * lattice.dt
        if extra_running is not None:
            cont = cont + extra_running[i]
        if tau is not None:
            # stopping together would pay L < S, so the maximiser waits
            W = np.where(tau.stop[i], up[i], np.maximum(lo[i], cont))
        else:
            W = np.where(sigma.stop[i], lo[i], np.minimum(up[i], cont))
        out.append(W)
    return out[::-1]


def epsilon_optimal_times(lattice: Lattice, Y: Sequence[np.ndarray],
                          strategy_values: Sequence[Sequence[np.ndarray]],
                          obstacles: ObstaclePair, epsilon: float
                          ) -> tuple[list[StoppingRule], StoppingRule]:
    """``tau`` per strategy from its own value ``y`` (first ``y >= S - eps``) and one
    strategy-free ``sigma`` from ``Y`` (first ``Y <= L + eps``)."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    lo, up = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    n = lattice.steps
    sigma = StoppingRule([Y[i] <= lo[i] + epsilon for i in range(n)])
    taus = [StoppingRule([y[i] >= up[i] - epsilon for i in range(n)]) for y in strategy_values]
    return taus, sigma


@dataclass(frozen=True, eq=False)
class UncertainGameValues:
    upper: list[np.ndarray]
    lower: list[np.ndarray]
    strategies: int

    @property
    def root_gap(self) -> float:
        return float(self.upper[0][0] - self.lower[0][0])


def uncertain_game_values(lattice: Lattice, grid: VolatilityGrid, payoff: GamePayoff,
                          cap: int) -> UncertainGameValues:
    """Nodewise max and min of the Dynkin value over every strategy."""
    choices = strategy_matrix(lattice, grid, cap)
    values = dynkin_value_iteration(lattice, choices, payoff)
    return UncertainGameValues([v.max(axis=0) for v in values],
                               [v.min(axis=0) for v in values], choices.shape[0])


@dataclass(frozen=True)
class MinMaxReport:
    """Root values of the game with the measure choice inside the stopping problem.

    ``infsup`` is ``min_tau max_sigma sup_P`` and ``supinf`` is
    ``max_sigma min_tau sup_P`` (``inf_P`` for the lower game); ``second_order``
    is the value with the measure outside, i.e. the max (min) over strategies
    of the per-strategy Dynkin value.
    """

    infsup: float
    supinf: float
    second_order: float
    rules: int

    @property
    def exchange_gap(self) -> float:
        return abs(self.infsup - self.second_order)


def minmax_exchange(lattice: Lattice, grid: VolatilityGrid, payoff: GamePayoff, cap: int,
                    sense: str = "upper") -> MinMaxReport:
    """Empirical check of the min-max exchange on an enumerable instance.

    Markov rules over the full lattice are enumerated; for a fixed pair the
    best (worst) node-feedback measure is found by a max (min) over the
    volatility levels at each node.
    """
    if sense not in ("upper", "lower"):
        raise ValueError(f"sense must be 'upper' or 'lower', got {sense!r}")
    payoff.validate(lattice)
    n_marks = lattice.n_nonterminal
    if 4**n_marks > cap:
        raise OracleCapExceeded(f"4^{n_marks} = {4**n_marks} rule pairs exceed the cap {cap}")
    marks = choice_matrix(2, n_marks, cap).astype(bool)
    g, lo, up, xi = payoff.tables(lattice)
    vols = lattice.grid_indices(grid)
    pick = np.max if sense == "upper" else np.min
    n_rules = marks.shape[0]
    W = np.broadcast_to(xi, (n_rules, n_rules, xi.size))
    for i in range(lattice.steps - 1, -1, -1):
        cont = pick(np.stack([lattice.expectation(W, k) for k in vols]), axis=0) + g[i] * lattice.dt
        m = marks[:, i * i:(i + 1) ** 2]
        W = np.where(m[None, :, :], lo[i], np.where(m[:, None, :], up[i], cont))
    R = W[..., 0]
    games = uncertain_game_values(lattice, grid, payoff, cap)
    outer = games.upper if sense == "upper" else games.lower
    return MinMaxReport(float(R.max(axis=1).min()), float(R.min(axis=0).max()),
                        float(outer[0][0]), n_rules)


def compensated_running(lattice: Lattice, strategy: Strategy, Y: Sequence[np.ndarray],
                        y_strategy: Sequence[np.ndarray], v: Sequence[np.ndarray],
                        driver: Driver, obstacles: ObstaclePair, gamma: float,
                        scheme: str = "explicit") -> list[np.ndarray]:
    """Per-node running reward of the compensated game under one strategy.

    It is the driver increment along ``(Y, Z)`` plus the mixture
    ``gamma 1{y < S} v + (1 - gamma) 1{Y > L} v`` of the strategy's
    V increments.  Returned values already include the ``dt`` factor.
    """
    lo, up = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    out = []
    for i in range(lattice.steps):
        vol = strategy.at(i)
        c, _ = candidate(lattice, i, vol, Y[i + 1], driver, scheme)
        f_dt = c - lattice.expectation(Y[i + 1], vol)
        mix = gamma * (y_strategy[i] < up[i]) * v[i] + (1 - gamma) * (Y[i] > lo[i]) * v[i]
        out.append(f_dt + mix)
    return out


def compensated_game_value(lattice: Lattice, strategy: Strategy, running: Sequence[np.ndarray],
                           obstacles: ObstaclePair, terminal) -> list[np.ndarray]:
    """Bellman recursion of a Dynkin game with a per-node running reward."""
    lo, up = obstacles.lower_values(lattice), obstacles.upper_values(lattice)
    W = np.asarray(terminal(lattice.states(lattice.steps)), dtype=float) * np.ones(
        lattice.slice_size(lattice.steps))
    out = [W]
    for i in range(lattice.steps - 1, -1, -1):
        W = np.minimum(up[i], np.maximum(lo[i], lattice.expectation(W, strategy.at(i)) + running[i]))
        out.append(W)
    return out[::-1]
