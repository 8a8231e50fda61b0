"""How the uncertainty penalty moves the relaxed selector.

Trains one model per seed (about 90 s each) and runs CauMax-D at K=10 for
each lambda.  python3 demos/lambda_sweep.py [n_seeds]
"""

import sys

import numpy as np

from caumax.evaluation import ExperimentConfig, fit_seed, prepare_seed, regret_at_k
from caumax.selectors import GumbelState, caumax_d, oracle_greedy

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
lambdas = [0.0, 0.25, 0.5, 1.0, 2.0]
cfg = ExperimentConfig(budgets=[10], lambdas=lambdas, seeds=list(range(n_seeds)))

regret = np.zeros((n_seeds, len(lambdas)))
for seed in cfg.seeds:
    net, params, data = prepare_seed(cfg, seed)
    model, _ = fit_seed(cfg, seed, net, data)
    best = oracle_greedy(net, params, 10).subset
    for j, lam in enumerate(lambdas):
        res = caumax_d(model, net, 10, GumbelState(**cfg.gumbel), lam,
                       cfg.estimator.mc_passes, seed)
        regret[seed, j] = regret_at_k(net, params, res.subset, best)
    print(f"seed {seed}: " + "  ".join(f"{r:.4f}" for r in regret[seed]))

print("\nlambda  mean Regret@10")
for lam, r in zip(lambdas, regret.mean(axis=0)):
    print(f"{lam:>6g}  {r:.4f}  " + "#" * int(round(r * 2000)))
