import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caumax.evaluation import tiny_instance, two_source_instance
from caumax.graph import TwoGroupNetwork
from caumax.scm import (ScmParams, draw_scm_params, load_dataset, make_treatment_vector,
                        outcome_mean, propensities, sample_observational, save_dataset,
                        synthesize_features, true_co2g, true_interventional_mean)
from caumax.utils import FormatError, ParameterError

# ln(1 + e^x) evaluated at 50 digits with mpmath, minus ln 2
CO2G_ONE = 0.41479312709730459
CO2G_BOTH = 0.93868810339489347
Y_ONE = 1.1079403076572499


def random_instance(seed, n_a):
    rng = np.random.default_rng(seed)
    n_b = int(rng.integers(1, 6))
    cross = sorted({(int(rng.integers(n_a)), j) for j in range(n_b)}
                   | {(i, j) for i in range(n_a) for j in range(n_b) if rng.random() < 0.4})
    net = TwoGroupNetwork(np.arange(n_a), np.arange(n_a, n_a + n_b), [], [], cross,
                          rng.uniform(0.0, 2.0, len(cross)),
                          rng.standard_normal((n_a, 2)), rng.standard_normal((n_b, 2)))
    params = ScmParams(w=rng.standard_normal(2), w_y=rng.standard_normal(2),
                       w_x=rng.standard_normal(2), beta=float(rng.uniform(0, 2)))
    return net, params


def test_treatment_vector():
    assert make_treatment_vector({1, 3}, 1, 4).tolist() == [0, 1, 0, 1]
    assert make_treatment_vector(set(), 1, 3).tolist() == [0, 0, 0]
    assert make_treatment_vector({0}, 0, 2).tolist() == [0, 0]
    with pytest.raises(IndexError):
        make_treatment_vector({5}, 1, 3)


def test_two_source_values():
    net, params = two_source_instance()
    assert outcome_mean(net, params, [1, 0])[0] == pytest.approx(Y_ONE, abs=1e-12)
    assert true_co2g(net, params, [0]) == pytest.approx(CO2G_ONE, abs=1e-12)
    assert true_co2g(net, params, [0, 1]) == pytest.approx(CO2G_BOTH, abs=1e-12)
    assert true_co2g(net, params, []) == 0.0


def test_two_source_monte_carlo():
    net, params = two_source_instance(noise_sigma=0.1)
    rng = np.random.default_rng(11)
    y = outcome_mean(net, params, [1, 0])[0] + rng.normal(0, params.noise_sigma, 10**6)
    se = y.std() / math.sqrt(len(y))
    assert abs(y.mean() - true_interventional_mean(net, params, [0], 1)) < 3 * se


def test_all_control_and_zero_propensity():
    net, params = tiny_instance(0, noise_sigma=0.0, alpha=0.0, b_scale=0.0, beta=2.0)
    params.w[:] = 0
    params.w_y[:] = 0
    assert np.allclose(propensities(net, params), 0.5)
    assert np.allclose(outcome_mean(net, params, np.zeros(net.n_source)), 2.0 * math.log(2))


def test_control_arm_ignores_subset():
    net, params = tiny_instance(0)
    base = true_interventional_mean(net, params, [], 0)
    for S in ([0], [1, 2], [0, 1, 2]):
        assert true_interventional_mean(net, params, S, 0) == base


def test_beta_zero_removes_treatment():
    net, params = tiny_instance(0, beta=0.0)
    vals = {true_interventional_mean(net, params, S, t) for S in ([], [0], [0, 2]) for t in (0, 1)}
    assert len(vals) == 1


def test_monotone_on_small_instances():
    for seed in range(25):
        n_a = 2 + seed % 5
        net, params = random_instance(seed, n_a)
        for r in range(n_a):
            for S in itertools.combinations(range(n_a), r):
                base = true_co2g(net, params, S)
                for v in set(range(n_a)) - set(S):
                    assert true_co2g(net, params, S + (v,)) >= base - 1e-15


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_propensities_strictly_inside(seed):
    net, params = random_instance(seed, 4)
    p = propensities(net, params, np.random.default_rng(seed).normal(0, 1, 4))
    assert np.all((p > 0) & (p < 1))


def test_observational_mean_converges():
    net, params = tiny_instance(1)
    data = sample_observational(net, params, 4000, seed=5)
    resid = data.outcomes - outcome_mean(net, params, data.treatments)
    bound = 4 * params.noise_sigma / math.sqrt(data.outcomes.size)
    assert abs(resid.mean()) <= bound


def test_observational_deterministic_and_binary():
    net, params = tiny_instance(2)
    a = sample_observational(net, params, 300, seed=9)
    b = sample_observational(net, params, 300, seed=9)
    assert np.array_equal(a.treatments, b.treatments)
    assert np.array_equal(a.outcomes, b.outcomes)
    assert set(np.unique(a.treatments)) <= {0, 1}
    assert a[0].y_bar == pytest.approx(a.outcomes[0].mean())


def test_fractional_treatments_accepted():
    net, params = tiny_instance(0)
    half = outcome_mean(net, params, np.full(net.n_source, 0.5))
    assert np.all(half > outcome_mean(net, params, np.zeros(net.n_source)))


def test_features_and_params():
    net, _ = tiny_instance(0)
    a = synthesize_features(net, 3, 4)
    b = synthesize_features(net, 3, 4)
    assert np.array_equal(a.features_A, b.features_A)
    assert a.features_B.shape == (net.n_target, 3)
    with pytest.raises(ParameterError):
        synthesize_features(net, 0, 4)
    with pytest.raises(ParameterError):
        draw_scm_params(0, 1)
    assert draw_scm_params(4, 2).w.tolist() == draw_scm_params(4, 2).w.tolist()


def test_dataset_round_trip(tmp_path):
    net, params = tiny_instance(3)
    data = sample_observational(net, params, 20, seed=1)
    save_dataset(tmp_path / "d.txt", "net", params, data, "h1")
    p2, d2, meta = load_dataset(tmp_path / "d.txt")
    assert meta["config_hash"] == "h1"
    assert np.array_equal(d2.outcomes, data.outcomes)
    assert p2.w.tolist() == params.w.tolist()
    (tmp_path / "bad.txt").write_text("garbage\n")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "bad.txt")
