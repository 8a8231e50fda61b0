"""Cross-group causal influence maximization on two-group networks.

Pipeline: split a graph into a source core and a target periphery, draw
observational data from a known structural model, fit a graph-network
effect estimator, then pick a budgeted set of sources to treat.
"""

from .estimator import (Co2gStats, EffectModel, EstimatorConfig, estimate_co2g, forward,
                        lcb_objective, load_model, save_model, train)
from .evaluation import (ExperimentConfig, ExperimentReport, build_pool, identification_check,
                         regret_at_k, rmse_over_pool, run_experiment)
from .graph import (RawGraph, TwoGroupNetwork, compute_coreness, core_periphery_split,
                    load_edge_list, synthesize_graph)
from .scm import (ScmParams, draw_scm_params, sample_observational, synthesize_features,
                  true_co2g, true_interventional_mean)
from .selectors import (GumbelState, SelectionResult, caumax_d, caumax_g, oracle_greedy,
                        select_degree, select_im, select_random)
from .utils import CaumaxError

__version__ = "0.1.0"
