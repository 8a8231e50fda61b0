import math
import warnings

import numpy as np
import pytest

from caumax import evaluation as ev
from caumax import selectors as sel
from caumax.estimator import EffectModel, EstimatorConfig
from caumax.scm import true_co2g
from caumax.utils import ParameterError, SupportError


class Constant:
    def __init__(self, value):
        self.value = value

    def co2g_samples(self, net, treatments, passes, seed, dropout=True):
        return np.full((len(np.atleast_2d(treatments)), passes), self.value)


def quick_config(**kw):
    base = dict(dataset={"kind": "synthetic", "n": 200, "attachment": 2}, n_samples=50,
                methods=["random", "oracle_greedy"], budgets=[1], seeds=[0])
    return ev.ExperimentConfig(**{**base, **kw})


def test_regret_examples():
    net, params = ev.two_source_instance()
    assert ev.regret_at_k(net, params, [0], [0]) == 0.0
    net, params = ev.tiny_instance(0)
    a, b = true_co2g(net, params, [0]), true_co2g(net, params, [1])
    worse, better = ([0], [1]) if a < b else ([1], [0])
    assert ev.regret_at_k(net, params, worse, better) == pytest.approx(abs(a - b))
    assert ev.regret_at_k(net, params, worse, better) > 0


def test_regret_of_oracle_against_itself():
    net, params = ev.tiny_instance(2)
    for K in range(4):
        S = sel.oracle_greedy(net, params, K).subset
        assert ev.regret_at_k(net, params, S, S) == 0.0


def test_rmse_examples():
    net, params = ev.two_source_instance()
    pool = ev.EvalSubsetPool([[0]])
    truth = true_co2g(net, params, [0])
    assert ev.rmse_over_pool(Constant(truth + 0.1), net, params, pool) == pytest.approx(0.1)
    net, params = ev.tiny_instance(1)
    pool = ev.build_pool(net, 3, 30, 0)
    assert ev.rmse_over_pool(ev.OracleModel(net, params), net, params, pool) == 0.0
    model = EffectModel(net.d_in, EstimatorConfig(gcn_hidden=3, mlp_hidden=(3,)), 0)
    empty = ev.EvalSubsetPool([[]])
    assert ev.rmse_over_pool(model, net, params, empty, 10, 0, dropout=True) == 0.0
    with pytest.raises(ParameterError):
        ev.rmse_over_pool(model, net, params, ev.EvalSubsetPool([]))


def test_pool_examples():
    net, _ = ev.tiny_instance(0)
    one = ev.build_pool(net, 1, 1, 5)
    assert len(one.subsets) == 1 and one.sizes == [1]
    a, b = ev.build_pool(net, 3, 40, 2), ev.build_pool(net, 3, 40, 2)
    assert a.subsets == b.subsets
    assert all(1 <= k <= 3 for k in a.sizes)
    assert all(len(set(s)) == len(s) for s in a.subsets)
    with pytest.raises(ParameterError):
        ev.build_pool(net, 4, 5, 0)


def test_identification_noise_free_is_exact():
    net, params = ev.tiny_instance(0, noise_sigma=0.0)
    res = ev.identification_check(net, params, [0, 2], 1.0, 4000, 3)
    assert res.matches > 0
    assert res.adjustment == res.truth
    assert res.z == 0.0


def test_identification_empty_subset_arms_agree():
    net, params = ev.tiny_instance(0)
    on = ev.identification_check(net, params, [], 1.0, 2000, 1)
    off = ev.identification_check(net, params, [], 0.0, 2000, 1)
    assert on.truth == off.truth and on.adjustment == off.adjustment


def test_identification_without_support():
    net, params = ev.tiny_instance(0)
    with pytest.raises(SupportError):
        ev.identification_check(net, params, [0, 1, 2], 1.0, 1, 0)


def test_identification_z_scores_look_standard():
    net, params = ev.tiny_instance(4)
    zs = [ev.identification_check(net, params, [1], 1.0, 4000, s).z for s in range(60)]
    assert np.mean(np.array(zs) < 2) >= 0.9


def test_config_hash_ignores_scope_only():
    a = ev.ExperimentConfig()
    b = ev.ExperimentConfig(seeds=[7], budgets=[3], lambdas=[0, 2], methods=["degree"])
    c = ev.ExperimentConfig(n_samples=1999)
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 16
    assert ev.ExperimentConfig.from_dict(a.to_dict()).config_hash() == a.config_hash()
    with pytest.raises(ParameterError):
        ev.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ParameterError):
        ev.ExperimentConfig(methods=["magic"])


def test_run_experiment_counts_and_reproducibility():
    cfg = quick_config()
    first = ev.run_experiment(cfg)
    assert sorted(r["method"] for r in first.rows) == ["oracle_greedy", "random"]
    oracle = [r for r in first.rows if r["method"] == "oracle_greedy"][0]
    assert float(oracle["regret"]) == 0.0
    second = ev.run_experiment(cfg)
    assert ev.strip_timing(first.to_csv()) == ev.strip_timing(second.to_csv())


def test_threads_match_sequential():
    cfg = quick_config(seeds=[0, 1, 2], methods=["degree", "im", "random"], budgets=[1, 3])
    seq = ev.run_experiment(cfg, threads=1)
    par = ev.run_experiment(cfg, threads=3)
    assert ev.strip_timing(seq.to_csv()) == ev.strip_timing(par.to_csv())


def test_aggregation_is_exact_mean():
    rows = [{"method": "random", "dataset": "d", "K": 5, "lambda": "0.5", "seed": s,
             "regret": repr(v), "rmse": "", "wall_ms": "1.0"}
            for s, v in enumerate([0.1, 0.25, 0.4])]
    agg = ev.aggregate_rows(rows, "h")
    assert len(agg) == 1
    assert float(agg[0]["regret_mean"]) == np.mean([0.1, 0.25, 0.4])
    assert float(agg[0]["regret_std"]) == pytest.approx(0.15)
    assert float(agg[0]["regret_se"]) == pytest.approx(0.15 / math.sqrt(3))
    assert agg[0]["n_seeds"] == 3 and agg[0]["config_hash"] == "h"


def test_lambda_sweep_structure():
    lams = [0, 0.25, 0.5, 1.0, 2.0]
    agg = [{"method": m, "dataset": "d", "K": k, "lambda": repr(float(x)),
            "regret_mean": "0.1", "regret_se": "0.01"}
           for m in ("caumax_d", "caumax_g") for k in (5, 10) for x in lams]
    sweep = ev.lambda_sweep_rows(agg)
    assert set(sweep) == {"caumax_d", "caumax_g"}
    fields, rows = sweep["caumax_d"]
    assert sum(f.startswith("regret_lambda_") for f in fields) == 5
    assert [r["K"] for r in rows] == [5, 10]


def test_select_all_shapes():
    cfg = quick_config(methods=["caumax_g", "caumax_d", "degree"], budgets=[1, 2],
                       lambdas=[0, 0.5], gumbel={"tau": 0.5, "gamma": 0.01, "lr": 0.2,
                                                 "iterations": 5, "tau_final": None})
    net, params = ev.tiny_instance(0)
    res = ev.select_all(cfg, 0, net, ev.OracleModel(net, params))
    cells = {(r.method, r.budget, r.lam) for r in res}
    assert len(res) == len(cells) == 3 * 2 * 2
    with pytest.raises(ParameterError):
        ev.select_all(cfg, 0, net, None)
    with pytest.raises(ParameterError):
        ev.select_all(quick_config(budgets=[9]), 0, net, None)


def test_negative_regret_warns_not_clamped():
    net, params = ev.tiny_instance(0)
    best, _ = sel.exhaustive_optimum(lambda T: ev.true_co2g_batch(net, params, T), 3, 2)
    greedy = sel.oracle_greedy(net, params, 2).subset
    cfg = quick_config(budgets=[2])
    fake = sel.SelectionResult(best, [], "random", 2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = ev.evaluate_seed(cfg, 0, net, params, None, [fake])
    regret = float(rows[0]["regret"])
    assert regret == pytest.approx(true_co2g(net, params, greedy) - true_co2g(net, params, best))
    assert (regret < -1e-12) == bool(caught)


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("CAUMAX_THREADS", "3")
    assert ev.thread_count() == 3
    monkeypatch.setenv("CAUMAX_THREADS", "x")
    with pytest.raises(ParameterError):
        ev.thread_count()
