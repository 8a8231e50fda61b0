"""Fit the effect estimator on one desk-scale seed and compare every selector.

Takes two to three minutes on one core.  python3 demos/train_and_select.py [seed]
"""

import sys
import time

from caumax.estimator import estimate_co2g
from caumax.evaluation import (ExperimentConfig, build_pool, fit_seed, prepare_seed,
                               regret_at_k, rmse_over_pool, select_all)
from caumax.selectors import oracle_greedy

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ExperimentConfig(budgets=[5, 10, 20], seeds=[seed])
net, params, data = prepare_seed(cfg, seed)

start = time.perf_counter()
model, trace = fit_seed(cfg, seed, net, data)
ratio = min(trace.val_loss) / trace.baseline_val
print(f"trained {trace.stopped_epoch} epochs in {time.perf_counter() - start:.0f}s; "
      f"validation MSE is {ratio:.1%} of the constant predictor's")

pool = build_pool(net, 20, 200, seed)
print(f"RMSE of estimated Co2G over 200 random subsets: "
      f"{rmse_over_pool(model, net, params, pool):.4f}")

best = oracle_greedy(net, params, 20)
stats = estimate_co2g(model, net, best.subset[:10], seed=seed)
print(f"oracle top-10: true Co2G {best.trace[9]:.4f}, estimate {stats.mean:.4f} "
      f"+/- {stats.std:.4f}")

rows = {}
for res in select_all(cfg, seed, net, model):
    rows.setdefault(res.method, []).append(
        regret_at_k(net, params, res.subset, best.subset[:res.budget]))
print("\nRegret@K (lower is better)")
print(f"{'method':<10}" + "".join(f"{'K=' + str(k):>10}" for k in cfg.budgets))
for method, regrets in rows.items():
    print(f"{method:<10}" + "".join(f"{r:>10.4f}" for r in regrets))
