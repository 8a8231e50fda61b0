import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caumax import selectors as sel
from caumax.evaluation import OracleModel, tiny_instance, two_source_instance
from caumax.graph import TwoGroupNetwork
from caumax.scm import ScmParams, true_co2g, true_co2g_batch
from caumax.utils import ParameterError


class Stub:
    def __init__(self, n_source):
        self.n_source = n_source


def bare_network(n_a, n_b, edges_A=(), edges_B=(), cross=None):
    cross = cross if cross is not None else [(j % n_a, j) for j in range(n_b)]
    return TwoGroupNetwork(np.arange(n_a), np.arange(n_a, n_a + n_b), list(edges_A),
                           list(edges_B), cross, np.ones(len(cross)),
                           np.zeros((n_a, 1)), np.zeros((n_b, 1)))


def separable_instance(seed):
    """Every target has a single source neighbour, so Co2G is additive over sources."""
    rng = np.random.default_rng(seed)
    n_a = int(rng.integers(3, 11))
    n_b = int(rng.integers(n_a, 3 * n_a))
    owner = rng.integers(0, n_a, n_b)
    cross = sorted((int(owner[j]), j) for j in range(n_b))
    net = TwoGroupNetwork(np.arange(n_a), np.arange(n_a, n_a + n_b), [], [], cross,
                          rng.uniform(0.1, 3.0, n_b), rng.standard_normal((n_a, 2)),
                          rng.standard_normal((n_b, 2)))
    params = ScmParams(w=rng.standard_normal(2), w_y=rng.standard_normal(2),
                       w_x=rng.standard_normal(2), beta=float(rng.uniform(0.5, 2)))
    return net, params


def test_greedy_on_additive_stub():
    res = sel.caumax_g(sel.AdditiveModel([0.0, 0.2, 0.0, 0.5]), Stub(4), 2, lam=0.0, passes=1)
    assert res.subset == [3, 1]
    assert res.trace == pytest.approx([0.5, 0.7])
    best, value = sel.exhaustive_optimum(lambda T: T @ np.array([0.0, 0.2, 0.0, 0.5]), 4, 2)
    assert sorted(res.subset) == best and value == pytest.approx(0.7)


def test_greedy_edge_cases():
    assert sel.caumax_g(sel.AdditiveModel([1.0, 2.0]), Stub(2), 0).subset == []
    assert sel.caumax_g(sel.AdditiveModel([-1.0, -0.1, -3.0]), Stub(3), 3, lam=0.0).subset == []
    # stops once gains turn non-positive
    res = sel.caumax_g(sel.AdditiveModel([0.3, -0.1, 0.2]), Stub(3), 3, lam=0.0, passes=1)
    assert res.subset == [0, 2]
    # equal gains go to the smallest id
    assert sel.caumax_g(sel.AdditiveModel([1.0, 1.0, 1.0]), Stub(3), 1, passes=1).subset == [0]
    with pytest.raises(ParameterError):
        sel.caumax_g(sel.AdditiveModel([1.0]), Stub(1), 2)


def test_greedy_prefix_property():
    net, params = tiny_instance(0)
    model = OracleModel(net, params)
    full = sel.caumax_g(model, net, 3, lam=0.0, passes=1)
    for k in range(4):
        assert sel.caumax_g(model, net, k, lam=0.0, passes=1).subset == full.prefix(k).subset


def test_gumbel_and_projection():
    assert sel.gumbel_noise(np.exp(-1.0)) == 0.0
    assert sel.top_k([0.3, -1, 2, 0.5], 2) == [2, 3]
    assert sel.top_k([1, 1, 1], 2) == [0, 1]
    assert sel.top_k([1, 2], 0) == []


def test_budget_penalty_zero_when_mass_equals_budget():
    # with a flat objective, psi only moves through the penalty; sum(T) == K means no move
    class Flat:
        def relaxed_co2g(self, net, t_soft, passes, seed):
            from caumax import diffgrad as dg
            return dg.concat([dg.reshape(dg.scale(dg.sum_reduce(t_soft), 0.0), (1,))] * passes)

    t = np.array([0.25, 0.75, 0.5, 0.5])
    excess = t.sum() - 2
    assert 0.01 * excess ** 2 == 0.0
    state = sel.GumbelState(iterations=0)
    res = sel.caumax_d(Flat(), Stub(4), 2, state)
    assert res.trace == [] and len(res.subset) == 2


def test_caumax_d_recovers_additive_optimum():
    gains = np.array([0.05, 0.8, -0.2, 0.6, 0.1, 0.7])
    res = sel.caumax_d(sel.AdditiveModel(gains), Stub(6), 3, lam=0.0, passes=1, seed=1)
    assert sorted(res.subset) == [1, 3, 5]
    assert len(res.trace) == 500
    again = sel.caumax_d(sel.AdditiveModel(gains), Stub(6), 3, lam=0.0, passes=1, seed=1)
    assert again.subset == res.subset


def test_budget_penalty_pulls_mass_to_k():
    # flat objective and annealed temperature: soft mass approaches K
    state = sel.GumbelState(gamma=1.0, lr=0.5, iterations=300, tau=1.0, tau_final=0.05)
    sel.caumax_d(sel.AdditiveModel(np.zeros(8)), Stub(8), 3, state, lam=0.0, passes=1)
    mass = (1 / (1 + np.exp(-state.psi / 0.05))).sum()
    assert abs(mass - 3) < 0.5
    assert state.temperature(0) == 1.0 and state.temperature(299) == pytest.approx(0.05)


def test_gumbel_state_validation():
    with pytest.raises(ParameterError):
        sel.GumbelState(tau=0)
    with pytest.raises(ParameterError):
        sel.GumbelState(gamma=-1)


def test_random_selector():
    net = bare_network(5, 5)
    assert sorted(sel.select_random(net, 5, 0).subset) == list(range(5))
    assert sel.select_random(net, 3, 9).subset == sel.select_random(net, 3, 9).subset
    assert sel.select_random(net, 0, 1).subset == []


def test_degree_selector():
    # source degrees 5, 2, 9, 9 through cross edges only
    counts = [5, 2, 9, 9]
    cross = []
    j = 0
    for i, c in enumerate(counts):
        for _ in range(c):
            cross.append((i, j))
            j += 1
    net = bare_network(4, j, cross=cross)
    assert net.source_degree.tolist() == counts
    assert sel.select_degree(net, 2).subset == [2, 3]
    assert sel.select_degree(net, 1).subset == [2]
    star = bare_network(4, 4, edges_A=[(0, 1), (0, 2), (0, 3)])
    assert sel.select_degree(star, 1).subset == [0]


def test_im_full_propagation():
    # connected graph, p_ic = 1: every seed reaches all nodes, smallest id wins
    net = bare_network(3, 3, edges_A=[(0, 1), (1, 2)])
    res = sel.select_im(net, 1, R=5, p_ic=1.0)
    assert res.subset == [0]
    assert res.trace == [6.0]


def test_im_two_components():
    net = bare_network(4, 2, edges_A=[(0, 1), (2, 3)], cross=[(0, 0), (2, 1)])
    res = sel.select_im(net, 2, R=3, p_ic=1.0)
    labels, sizes = sel.live_edge_components(net, 3, 1.0, 0)
    best = max(itertools.combinations(range(4), 2),
               key=lambda S: sel.cascade_spread(labels, sizes, S))
    assert sorted(res.subset) in ([0, 2], [0, 3], [1, 2], [1, 3])
    assert res.trace[-1] == sel.cascade_spread(labels, sizes, best) == 6.0


def test_im_vanishing_probability():
    net = bare_network(4, 4, edges_A=[(0, 1), (1, 2), (2, 3)])
    res = sel.select_im(net, 3, R=20, p_ic=1e-9)
    assert res.trace == [1.0, 2.0, 3.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_im_spread_monotone(seed):
    net, _ = tiny_instance(seed % 9)
    labels, sizes = sel.live_edge_components(net, 10, 0.4, seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(net.n_source)
    values = [sel.cascade_spread(labels, sizes, order[:k]) for k in range(net.n_source + 1)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    res = sel.select_im(net, net.n_source, R=10, p_ic=0.4, seed=seed)
    assert res.trace[-1] == pytest.approx(sel.cascade_spread(labels, sizes, res.subset))


def test_oracle_greedy_examples():
    net, params = two_source_instance()
    assert sel.oracle_greedy(net, params, 1).subset == [0]
    res = sel.oracle_greedy(net, params, 2)
    assert sorted(res.subset) == [0, 1]
    assert res.trace[-1] == pytest.approx(true_co2g(net, params, [0, 1]), abs=1e-12)
    # asymmetric: the source with two targets wins
    net = bare_network(2, 3, cross=[(0, 0), (1, 1), (1, 2)])
    params = ScmParams(w=[0.0], w_y=[0.0], w_x=[0.0])
    assert sel.oracle_greedy(net, params, 1).subset == [1]


@pytest.mark.parametrize("seed", range(20))
def test_oracle_greedy_exact_on_separable_instances(seed):
    net, params = separable_instance(seed)
    for K in range(1, min(3, net.n_source) + 1):
        res = sel.oracle_greedy(net, params, K)
        _, best = sel.exhaustive_optimum(lambda T: true_co2g_batch(net, params, T),
                                         net.n_source, K)
        assert true_co2g(net, params, res.subset) == pytest.approx(best, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_oracle_greedy_close_to_optimum(seed):
    net, params = tiny_instance(seed)
    res = sel.oracle_greedy(net, params, 2)
    _, best = sel.exhaustive_optimum(lambda T: true_co2g_batch(net, params, T), net.n_source, 2)
    assert true_co2g(net, params, res.subset) <= best + 1e-12
    assert res.trace[-1] == pytest.approx(true_co2g(net, params, res.subset), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_selectors_return_valid_subsets(seed, K):
    net, params = tiny_instance(seed % 11)
    model = OracleModel(net, params)
    results = [sel.select_random(net, K, seed), sel.select_degree(net, K),
               sel.select_im(net, K, R=5, seed=seed), sel.oracle_greedy(net, params, K),
               sel.caumax_g(model, net, K, passes=1),
               sel.caumax_d(model, net, K, sel.GumbelState(iterations=20), passes=1)]
    for res in results:
        assert len(res.subset) <= K
        assert len(set(res.subset)) == len(res.subset)
        assert all(0 <= i < net.n_source for i in res.subset)


def test_selection_csv_row():
    res = sel.SelectionResult([3, 1], [0.5, 0.7], "caumax_g", 2, 0.5, 4, 12.34)
    row = res.csv_row()
    assert list(row) == sel.CSV_FIELDS
    assert row["subset"] == "3;1" and row["J"] == "0.7" and row["wall_ms"] == "12.3"
    assert res.prefix(1).subset == [3] and res.prefix(1).budget == 1
