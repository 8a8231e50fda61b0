"""Semi-synthetic structural causal model on a two-group network.

Source node i is treated with probability ``sigmoid(w.X_i + b_i)``.  Target
node j has outcome

    y_j = w_y.X_j + beta * softplus(sum_i w_ij T_i / sqrt(d_j))
                  + alpha * softplus(sum_i w_ij w_x.X_i / sqrt(d_j)) + eps_j

where the sums run over the source neighbours of j.  Because noise enters
additively with zero mean, interventional means are available in closed
form by evaluating the noiseless part at the intervened treatment vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import TwoGroupNetwork
from .utils import FormatError, ParameterError, atomic_write_text, rng_stream

DATA_MAGIC = "CAUMAX-DATA v1"
CHUNK = 1024


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass
class ScmParams:
    w: np.ndarray
    w_y: np.ndarray
    w_x: np.ndarray
    b_scale: float = 0.1
    beta: float = 1.0
    alpha: float = 0.5
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.w_y = np.asarray(self.w_y, dtype=np.float64).reshape(-1)
        self.w_x = np.asarray(self.w_x, dtype=np.float64).reshape(-1)
        if self.b_scale < 0 or self.noise_sigma < 0:
            raise ParameterError("b_scale and noise_sigma must be non-negative")
        if not (len(self.w) == len(self.w_y) == len(self.w_x)):
            raise ParameterError("w, w_y and w_x must have the same length")

    @property
    def d_in(self) -> int:
        return len(self.w)

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "w_y": self.w_y.tolist(), "w_x": self.w_x.tolist(),
                "b_scale": self.b_scale, "beta": self.beta, "alpha": self.alpha,
                "noise_sigma": self.noise_sigma, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ScmParams":
        return cls(**d)


def draw_scm_params(d_in: int, seed: int, **overrides) -> ScmParams:
    """Weight vectors ~ N(0, I) from the ``scm`` stream of ``seed``."""
    if d_in < 1:
        raise ParameterError(f"d_in must be >= 1, got {d_in}")
    rng = rng_stream(seed, "scm-params")
    w, w_y, w_x = rng.standard_normal((3, d_in))
    return ScmParams(w=w, w_y=w_y, w_x=w_x, seed=seed, **overrides)


def synthesize_features(net: TwoGroupNetwork, d_in: int, seed: int) -> TwoGroupNetwork:
    """Replace covariates with i.i.d. standard normal draws (sources first)."""
    if d_in < 1:
        raise ParameterError(f"d_in must be >= 1, got {d_in}")
    x = np.random.default_rng(seed).standard_normal((net.n_source + net.n_target, d_in))
    return net.with_features(x[:net.n_source], x[net.n_source:])


def make_treatment_vector(S, t: float, n_A: int) -> np.ndarray:
    """Entry i is ``t`` for i in S and the control level 0 elsewhere."""
    vec = np.zeros(n_A)
    idx = np.asarray(list(S), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_A):
        raise IndexError(f"subset ids must lie in 0..{n_A - 1}")
    vec[idx] = t
    return vec


def _check(net: TwoGroupNetwork, params: ScmParams):
    if net.features_A is None:
        raise ParameterError("network has no covariates; call synthesize_features first")
    if net.d_in != params.d_in:
        raise ParameterError(f"covariates have width {net.d_in}, parameters expect {params.d_in}")


def propensities(net: TwoGroupNetwork, params: ScmParams, b=None) -> np.ndarray:
    _check(net, params)
    logits = net.features_A @ params.w
    if b is not None:
        logits = logits + b
    return sigmoid(logits)


def outcome_mean(net: TwoGroupNetwork, params: ScmParams, T) -> np.ndarray:
    """Noiseless target outcomes for treatment vector(s) ``T`` of shape (..., n_A).

    Fractional treatments are accepted.
    """
    _check(net, params)
    T = np.asarray(T, dtype=np.float64)
    spill = net.spillover_operator
    base = net.features_B @ params.w_y
    feat = params.alpha * softplus(spill @ (net.features_A @ params.w_x))
    treat = softplus((spill @ T.reshape(-1, net.n_source).T).T)
    out = base + feat + params.beta * treat
    return out.reshape(T.shape[:-1] + (net.n_target,))


def true_interventional_mean(net: TwoGroupNetwork, params: ScmParams, S, t: float) -> float:
    return float(outcome_mean(net, params, make_treatment_vector(S, t, net.n_source)).mean())


def true_co2g_batch(net: TwoGroupNetwork, params: ScmParams, T) -> np.ndarray:
    """Co2G for each treated-arm vector in ``T`` (control arm all zero).

    Only the treatment term survives the difference, so it is evaluated
    alone; an all-zero row gives exactly 0.
    """
    _check(net, params)
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    z = (net.spillover_operator @ T.T).T
    return params.beta * (softplus(z) - softplus(np.zeros_like(z))).mean(axis=1)


def true_co2g(net: TwoGroupNetwork, params: ScmParams, S) -> float:
    return float(true_co2g_batch(net, params, make_treatment_vector(S, 1.0, net.n_source))[0])


@dataclass
class ObservationalSample:
    treatment: np.ndarray
    outcomes: np.ndarray
    y_bar: float


@dataclass(eq=False)
class ObservationalData:
    """``n`` i.i.d. draws of (treatment vector, target outcomes) on one network.

    Indexing yields :class:`ObservationalSample` records.
    """

    treatments: np.ndarray
    outcomes: np.ndarray
    seed: int = 0
    y_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.treatments = np.asarray(self.treatments, dtype=np.int8)
        self.outcomes = np.asarray(self.outcomes, dtype=np.float64)
        self.y_bar = self.outcomes.mean(axis=1)

    def __len__(self):
        return len(self.treatments)

    def __getitem__(self, i) -> ObservationalSample:
        return ObservationalSample(self.treatments[i].astype(np.float64), self.outcomes[i],
                                   float(self.y_bar[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "ObservationalData":
        return ObservationalData(self.treatments[idx], self.outcomes[idx], self.seed)


def sample_observational(net: TwoGroupNetwork, params: ScmParams, n_samples: int,
                         seed: int) -> ObservationalData:
    """Draw observational samples under covariate-driven treatment assignment.

    Samples are generated in blocks of ``CHUNK`` rows, each block from its own
    named RNG stream, so any block-aligned parallel split reproduces the
    sequential result.
    """
    _check(net, params)
    if n_samples < 0:
        raise ParameterError("n_samples must be non-negative")
    base_logit = net.features_A @ params.w
    T_all = np.empty((n_samples, net.n_source), dtype=np.int8)
    Y_all = np.empty((n_samples, net.n_target))
    for block, start in enumerate(range(0, n_samples, CHUNK)):
        c = min(CHUNK, n_samples - start)
        rng = rng_stream(seed, "observational", block)
        b = rng.normal(0.0, params.b_scale, (c, net.n_source))
        T = (rng.random((c, net.n_source)) < sigmoid(base_logit + b)).astype(np.int8)
        eps = rng.normal(0.0, params.noise_sigma, (c, net.n_target))
        T_all[start:start + c] = T
        Y_all[start:start + c] = outcome_mean(net, params, T) + eps
    return ObservationalData(T_all, Y_all, seed)


def save_dataset(path, net_hash: str, params: ScmParams, data: ObservationalData,
                 config_hash: str = "") -> Path:
    body = {
        "config_hash": config_hash,
        "network": net_hash,
        "params": params.to_dict(),
        "seed": data.seed,
        "treatments": data.treatments.tolist(),
        "outcomes": data.outcomes.tolist(),
    }
    return atomic_write_text(path, DATA_MAGIC + "\n" + json.dumps(body) + "\n")


def load_dataset(path) -> tuple[ScmParams, ObservationalData, dict]:
    text = Path(path).read_text(encoding="utf-8")
    head, _, rest = text.partition("\n")
    if head.strip() != DATA_MAGIC:
        raise FormatError(f"{path}: expected header {DATA_MAGIC!r}, found {head[:40]!r}")
    body = json.loads(rest)
    params = ScmParams.from_dict(body["params"])
    n_a = len(body["treatments"][0]) if body["treatments"] else 0
    data = ObservationalData(np.array(body["treatments"]).reshape(-1, n_a),
                             np.array(body["outcomes"]).reshape(len(body["treatments"]), -1),
                             body["seed"])
    meta = {"config_hash": body.get("config_hash", ""), "network": body.get("network", "")}
    return params, data, meta
