"""Regret and RMSE metrics, the identification check and the experiment runner."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffgrad as dg
from . import selectors as sel
from .estimator import EffectModel, EstimatorConfig, train
from .graph import (RawGraph, TwoGroupNetwork, core_periphery_split, load_edge_list,
                    synthesize_graph)
from .scm import (ScmParams, draw_scm_params, make_treatment_vector, sample_observational,
                  synthesize_features, true_co2g, true_co2g_batch, true_interventional_mean)
from .utils import ParameterError, SupportError, atomic_write_text, rng_stream

MODEL_METHODS = ("caumax_d", "caumax_g")
BASELINES = ("degree", "im", "random")
REFERENCE = ("oracle_greedy",)
ALL_METHODS = MODEL_METHODS + BASELINES + REFERENCE
REPORT_FIELDS = ["method", "dataset", "K", "lambda", "seed", "regret", "rmse", "wall_ms",
                 "config_hash"]
AGGREGATE_FIELDS = ["method", "dataset", "K", "lambda", "n_seeds", "regret_mean", "regret_std",
                    "regret_se", "rmse_mean", "rmse_std", "wall_ms_mean", "config_hash"]
TIMING_FIELDS = ("wall_ms", "wall_ms_mean")
SCOPE_KEYS = ("seeds", "methods", "budgets", "lambdas")


# -- metrics ---------------------------------------------------------------

def regret_at_k(net: TwoGroupNetwork, params: ScmParams, S_k, S_star) -> float:
    return true_co2g(net, params, S_star) - true_co2g(net, params, S_k)


@dataclass
class EvalSubsetPool:
    subsets: list
    seed: int = 0

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.subsets]

    def matrix(self, n_source: int) -> np.ndarray:
        T = np.zeros((len(self.subsets), n_source))
        for row, s in enumerate(self.subsets):
            T[row, list(s)] = 1.0
        return T


def build_pool(net: TwoGroupNetwork, K_max: int, count: int, seed: int) -> EvalSubsetPool:
    """``count`` random subsets with sizes uniform on 1..K_max."""
    if count < 1:
        raise ParameterError("pool needs at least one subset")
    if not 1 <= K_max <= net.n_source:
        raise ParameterError(f"K_max must lie in 1..{net.n_source}")
    rng = rng_stream(seed, "eval-pool")
    subsets = []
    for _ in range(count):
        k = int(rng.integers(1, K_max + 1))
        subsets.append(sorted(int(i) for i in rng.choice(net.n_source, k, replace=False)))
    return EvalSubsetPool(subsets, seed)


def rmse_over_pool(model, net: TwoGroupNetwork, params: ScmParams, pool: EvalSubsetPool,
                   passes: int = 20, seed: int = 0, dropout: bool = False) -> float:
    """RMSE of estimated against true Co2G over the pool.

    The point estimate is the dropout-free forward unless ``dropout`` is set,
    in which case the MC mean over ``passes`` is used.
    """
    if not pool.subsets:
        raise ParameterError("empty evaluation pool")
    T = pool.matrix(net.n_source)
    est = model.co2g_samples(net, T, passes if dropout else 1, seed, dropout=dropout).mean(axis=1)
    truth = true_co2g_batch(net, params, T)
    return float(np.sqrt(np.mean((est - truth) ** 2)))


@dataclass
class IdentificationResult:
    adjustment: float
    truth: float
    z: float
    matches: int


def identification_check(net: TwoGroupNetwork, params: ScmParams, S, t: float, n_obs: int,
                         seed: int) -> IdentificationResult:
    """Compare the observational exact-match mean with the interventional mean.

    Covariates are fixed for a single network, so the adjustment formula
    reduces to averaging Y_B over samples whose treatment vector equals
    T(S, t).  ``z`` is |difference| over the standard error of that average.
    """
    data = sample_observational(net, params, n_obs, seed)
    target = make_treatment_vector(S, t, net.n_source).astype(np.int8)
    match = np.all(data.treatments == target, axis=1)
    n = int(match.sum())
    if n == 0:
        raise SupportError(f"no observational sample has treatment {target.tolist()} "
                           f"among {n_obs} draws")
    y = data.y_bar[match]
    # shifted mean: exact when every matched outcome is identical
    est = float(y[0] + (y - y[0]).mean())
    truth = true_interventional_mean(net, params, S, t)
    se = float(y.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    diff = abs(est - truth)
    if se > 0:
        z = diff / se
    else:
        z = 0.0 if diff == 0 else math.inf
    return IdentificationResult(est, truth, z, n)


class OracleModel:
    """Estimator stand-in that returns the closed-form Co2G in every pass.

    ``y_scale`` plays the role of a trained model's outcome std.
    """

    def __init__(self, net: TwoGroupNetwork, params: ScmParams, y_scale: float = 1.0):
        self.params = params
        self.y_scale = y_scale
        self._spill = net.spillover_operator

    def co2g_samples(self, net, treatments, passes, seed, dropout=True):
        vals = true_co2g_batch(net, self.params, treatments)
        return np.repeat(vals[:, None], passes, axis=1)

    def relaxed_co2g(self, net, t_soft, passes, seed):
        z = dg.spmm(self._spill, dg.reshape(t_soft, (net.n_source, 1)))
        effect = dg.mean_reduce(dg.softplus(z)) - math.log(2.0)
        value = dg.reshape(dg.scale(effect, self.params.beta), (1,))
        return dg.concat([value] * passes, axis=0)


def two_source_instance(beta: float = 1.0, noise_sigma: float = 0.0):
    """Sources a1, a2 both linked to one target; only the treatment term is live."""
    net = TwoGroupNetwork(
        source_ids=np.array([0, 1]), target_ids=np.array([2]),
        edges_A=np.zeros((0, 2), dtype=np.int64), edges_B=np.zeros((0, 2), dtype=np.int64),
        edges_AB=np.array([[0, 0], [1, 0]]), weights_AB=np.ones(2),
        features_A=np.zeros((2, 1)), features_B=np.zeros((1, 1)))
    params = ScmParams(w=[0.0], w_y=[0.0], w_x=[0.0], beta=beta, alpha=0.0,
                       noise_sigma=noise_sigma)
    return net, params


def tiny_instance(seed: int = 0, d_in: int = 2, **overrides) -> tuple[TwoGroupNetwork, ScmParams]:
    """Three sources and five targets with overlapping cross edges."""
    cross = np.array([[0, 0], [0, 1], [1, 1], [1, 2], [2, 2], [2, 3], [0, 4], [2, 4]])
    net = TwoGroupNetwork(
        source_ids=np.arange(3), target_ids=np.arange(3, 8),
        edges_A=np.array([[0, 1], [1, 2]]), edges_B=np.array([[0, 1], [3, 4]]),
        edges_AB=cross, weights_AB=np.ones(len(cross)))
    net = synthesize_features(net, d_in, seed)
    params = draw_scm_params(d_in, seed, **overrides)
    return net, params


# -- experiment configuration ----------------------------------------------

def _default_dataset():
    return {"kind": "synthetic", "n": 1000, "attachment": 3}


def _default_scm():
    return {"beta": 1.0, "alpha": 0.5, "noise_sigma": 0.1, "b_scale": 0.1}


@dataclass
class ExperimentConfig:
    """Everything that determines an experiment's results."""

    name: str = "synthetic"
    dataset: dict = field(default_factory=_default_dataset)
    split_p: float = 15.0
    d_in: int = 4
    n_samples: int = 2000
    scm: dict = field(default_factory=_default_scm)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    methods: list = field(default_factory=lambda: list(MODEL_METHODS + BASELINES))
    budgets: list = field(default_factory=lambda: [5, 10, 15, 20, 30, 50])
    lambdas: list = field(default_factory=lambda: [0.5])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    gumbel: dict = field(default_factory=lambda: {"tau": 0.5, "gamma": 0.01, "lr": 0.2,
                                                  "iterations": 500, "tau_final": None})
    im: dict = field(default_factory=lambda: {"R": 100, "p_ic": 0.1})
    pool_count: int = 200
    rmse_dropout: bool = False

    def __post_init__(self):
        if isinstance(self.estimator, dict):
            self.estimator = EstimatorConfig(**self.estimator)
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ParameterError(f"unknown method(s) {sorted(unknown)}; "
                                 f"choose from {list(ALL_METHODS)}")
        if not self.budgets or min(self.budgets) < 0:
            raise ParameterError("budgets must be a non-empty list of non-negative integers")
        if not self.lambdas or min(self.lambdas) < 0:
            raise ParameterError("lambdas must be a non-empty list of non-negative numbers")
        if not self.seeds:
            raise ParameterError("need at least one seed")
        if self.dataset.get("kind") not in ("synthetic", "file"):
            raise ParameterError("dataset.kind must be 'synthetic' or 'file'")
        self.budgets = sorted({int(k) for k in self.budgets})
        self.lambdas = sorted({float(x) for x in self.lambdas})
        self.seeds = [int(s) for s in self.seeds]
        self.methods = [m for m in ALL_METHODS if m in self.methods]
        sel.GumbelState(**self.gumbel)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimator"] = self.estimator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ParameterError(f"unknown config key(s): {sorted(extra)}")
        return cls(**d)

    def config_hash(self) -> str:
        """Digest of every key that affects how a result cell is computed.

        Seeds, methods, budgets and lambdas only choose which cells exist, so
        they are left out; artifacts from runs that differ only in scope can
        be combined.
        """
        d = {k: v for k, v in self.to_dict().items() if k not in SCOPE_KEYS}
        body = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()[:16]


# -- per-seed pipeline -----------------------------------------------------

def load_raw_graph(cfg: ExperimentConfig, seed: int) -> RawGraph:
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        return synthesize_graph(int(ds["n"]), int(ds["attachment"]), seed)
    return load_edge_list(ds["edges"], ds.get("features"))


def prepare_seed(cfg: ExperimentConfig, seed: int):
    """Network, SCM parameters and observational data for one seed."""
    raw = load_raw_graph(cfg, seed)
    net = core_periphery_split(raw, cfg.split_p)
    if net.features_A is None:
        net = synthesize_features(net, cfg.d_in, seed)
    params = draw_scm_params(net.d_in, seed, **cfg.scm)
    data = sample_observational(net, params, cfg.n_samples, seed)
    return net, params, data


def fit_seed(cfg: ExperimentConfig, seed: int, net, data):
    model = EffectModel(net.d_in, cfg.estimator, seed)
    model, trace = train(model, net, data, cfg.estimator, seed)
    return model.freeze(), trace


def check_budgets(cfg: ExperimentConfig, net: TwoGroupNetwork):
    if max(cfg.budgets) > net.n_source:
        raise ParameterError(f"budget {max(cfg.budgets)} exceeds |V_A| = {net.n_source}")


def select_all(cfg: ExperimentConfig, seed: int, net: TwoGroupNetwork, model=None,
               methods=None, params=None) -> list[sel.SelectionResult]:
    """Run every configured selector at every budget and lambda.

    Model-free baselines do not depend on lambda; they are run once per
    budget and repeated for each lambda so every (method, K, lambda) cell
    has a row.  ``oracle_greedy`` needs the true SCM ``params``.
    """
    check_budgets(cfg, net)
    methods = methods or cfg.methods
    passes = cfg.estimator.mc_passes
    k_max = max(cfg.budgets)
    out = []
    for method in methods:
        if method in MODEL_METHODS and model is None:
            raise ParameterError(f"method {method} needs a trained model")
        if method in REFERENCE and params is None:
            raise ParameterError(f"method {method} needs the SCM parameters")
        for lam in cfg.lambdas:
            if method == "caumax_g":
                full = sel.caumax_g(model, net, k_max, lam, passes, seed)
                out.extend(full.prefix(k) for k in cfg.budgets)
            elif method == "caumax_d":
                for k in cfg.budgets:
                    out.append(sel.caumax_d(model, net, k, sel.GumbelState(**cfg.gumbel),
                                            lam, passes, seed))
        if method in BASELINES + REFERENCE:
            for k in cfg.budgets:
                if method == "oracle_greedy":
                    res = sel.oracle_greedy(net, params, k)
                elif method == "degree":
                    res = sel.select_degree(net, k)
                elif method == "im":
                    res = sel.select_im(net, k, cfg.im["R"], cfg.im["p_ic"], seed)
                else:
                    res = sel.select_random(net, k, seed)
                res.seed = seed
                for lam in cfg.lambdas:
                    out.append(sel.SelectionResult(res.subset, res.trace, method, k, lam,
                                                   seed, res.wall_ms))
    return out


def evaluate_seed(cfg: ExperimentConfig, seed: int, net, params, model,
                  selections) -> list[dict]:
    """Report rows (regret against oracle greedy, pool RMSE) for one seed."""
    k_max = max(max(cfg.budgets), max((r.budget for r in selections), default=0))
    oracle = sel.oracle_greedy(net, params, k_max)
    rmse = ""
    if model is not None and any(r.method in MODEL_METHODS for r in selections):
        pool = build_pool(net, max(1, k_max), cfg.pool_count, seed)
        rmse = repr(rmse_over_pool(model, net, params, pool, cfg.estimator.mc_passes, seed,
                                   cfg.rmse_dropout))
    rows = []
    for r in selections:
        regret = regret_at_k(net, params, r.subset, oracle.subset[:r.budget])
        if regret < -1e-12:
            warnings.warn(f"{r.method} beats oracle greedy at K={r.budget} (seed {seed}): "
                          f"regret {regret:.3g}", stacklevel=2)
        rows.append({"method": r.method, "dataset": cfg.name, "K": r.budget,
                     "lambda": repr(float(r.lam)), "seed": seed, "regret": repr(regret),
                     "rmse": rmse if r.method in MODEL_METHODS else "",
                     "wall_ms": f"{r.wall_ms:.1f}"})
    return rows


def run_seed(cfg: ExperimentConfig, seed: int) -> list[dict]:
    net, params, data = prepare_seed(cfg, seed)
    check_budgets(cfg, net)
    model = None
    if any(m in MODEL_METHODS for m in cfg.methods):
        model, _ = fit_seed(cfg, seed, net, data)
    return evaluate_seed(cfg, seed, net, params, model,
                         select_all(cfg, seed, net, model, params=params))


def thread_count() -> int:
    raw = os.environ.get("CAUMAX_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ParameterError(f"CAUMAX_THREADS must be an integer, got {raw!r}") from None


def map_seeds(fn, seeds, threads=None):
    """``[fn(s) for s in seeds]``, fanned out over up to ``threads`` workers."""
    threads = threads or thread_count()
    if threads <= 1 or len(seeds) <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=min(threads, len(seeds))) as pool:
        return list(pool.map(fn, seeds))


@dataclass
class ExperimentReport:
    rows: list
    config_hash: str = ""

    def aggregate(self) -> list[dict]:
        return aggregate_rows(self.rows, self.config_hash)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, REPORT_FIELDS, self.config_hash)


def run_experiment(cfg: ExperimentConfig, threads=None) -> ExperimentReport:
    """Full pipeline for every seed; rows come back in seed order."""
    per_seed = map_seeds(lambda s: run_seed(cfg, s), cfg.seeds, threads)
    return ExperimentReport([row for rows in per_seed for row in rows], cfg.config_hash())


# -- reporting ---------------------------------------------------------------

def rows_to_csv(rows, fields, config_hash: str = "") -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({**row, "config_hash": config_hash})
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return "", "", ""
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return repr(float(v.mean())), repr(std), repr(std / math.sqrt(len(v)))


def aggregate_rows(rows, config_hash: str = "") -> list[dict]:
    """Mean, sample std and standard error over seeds per (method, dataset, K, lambda)."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["method"], row["dataset"], int(row["K"]), float(row["lambda"]))
        groups.setdefault(key, []).append(row)
    order = {m: i for i, m in enumerate(ALL_METHODS)}
    out = []
    for key in sorted(groups, key=lambda k: (order.get(k[0], 99), k[0], k[1], k[2], k[3])):
        grp = groups[key]
        r_mean, r_std, r_se = _stats([float(g["regret"]) for g in grp])
        rm = [float(g["rmse"]) for g in grp if g["rmse"] not in ("", None)]
        m_mean, m_std, _ = _stats(rm)
        out.append({"method": key[0], "dataset": key[1], "K": key[2], "lambda": repr(key[3]),
                    "n_seeds": len({g["seed"] for g in grp}), "regret_mean": r_mean,
                    "regret_std": r_std, "regret_se": r_se, "rmse_mean": m_mean,
                    "rmse_std": m_std,
                    "wall_ms_mean": f"{np.mean([float(g['wall_ms']) for g in grp]):.1f}",
                    "config_hash": config_hash})
    return out


def lambda_sweep_rows(aggregate) -> dict[str, list[dict]]:
    """Per model-based method: one row per (dataset, K) with a column per lambda."""
    out = {}
    for method in MODEL_METHODS:
        sub = [a for a in aggregate if a["method"] == method]
        if not sub:
            continue
        lams = sorted({float(a["lambda"]) for a in sub})
        cells: dict[tuple, dict] = {}
        for a in sub:
            row = cells.setdefault((a["dataset"], int(a["K"])),
                                   {"dataset": a["dataset"], "K": int(a["K"])})
            row[f"regret_lambda_{float(a['lambda']):g}"] = a["regret_mean"]
            row[f"se_lambda_{float(a['lambda']):g}"] = a["regret_se"]
        fields = ["dataset", "K"] + [f"{p}_lambda_{lam:g}" for lam in lams
                                     for p in ("regret", "se")]
        out[method] = (fields, [cells[k] for k in sorted(cells)])
    return out


def strip_timing(csv_text: str) -> str:
    """CSV text with timing columns removed, for reproducibility comparisons."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        return ""
    keep = [i for i, h in enumerate(rows[0]) if h not in TIMING_FIELDS]
    return "\n".join(",".join(r[i] for i in keep) for r in rows)


def write_rows(path, rows, fields, config_hash: str = "") -> Path:
    return atomic_write_text(Path(path), rows_to_csv(rows, fields, config_hash))
