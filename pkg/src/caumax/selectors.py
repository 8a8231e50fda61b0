"""Budgeted source-subset selection: model-driven, heuristic and oracle.

Model-driven selectors only need two methods on the model object:
``co2g_samples(net, T, passes, seed)`` returning an array (C, passes) of
Co2G samples for C treated-arm vectors, and ``relaxed_co2g(net, t, passes,
seed)`` returning a differentiable tensor of samples at a soft mask.  The
trained :class:`~caumax.estimator.EffectModel` provides both; tests use
small stubs.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, triu
from scipy.sparse.csgraph import connected_components

from . import diffgrad as dg
from .graph import TwoGroupNetwork
from .scm import ScmParams, softplus
from .utils import ParameterError, rng_stream

CSV_FIELDS = ["method", "K", "lambda", "seed", "subset", "J", "wall_ms"]


@dataclass
class SelectionResult:
    """Chosen ids in selection order plus the objective after each step."""

    subset: list[int]
    trace: list[float]
    method: str
    budget: int
    lam: float = 0.0
    seed: int = 0
    wall_ms: float = 0.0

    @property
    def objective(self) -> float:
        return self.trace[-1] if self.trace else float("nan")

    def prefix(self, k: int) -> "SelectionResult":
        """Result of the same greedy run stopped at budget ``k``."""
        return SelectionResult(self.subset[:k], self.trace[:k], self.method, k,
                               self.lam, self.seed, self.wall_ms)

    def csv_row(self) -> dict:
        return {"method": self.method, "K": self.budget, "lambda": repr(float(self.lam)),
                "seed": self.seed, "subset": ";".join(str(i) for i in self.subset),
                "J": repr(float(self.objective)), "wall_ms": f"{self.wall_ms:.1f}"}


@dataclass
class GumbelState:
    """Hyperparameters and logits of the relaxed subset search."""

    tau: float = 0.5
    gamma: float = 0.01
    lr: float = 0.2
    iterations: int = 500
    tau_final: float | None = None
    psi: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.tau <= 0 or (self.tau_final is not None and self.tau_final <= 0):
            raise ParameterError("temperature must be positive")
        if self.gamma < 0 or self.iterations < 0:
            raise ParameterError("gamma and iterations must be non-negative")

    def temperature(self, it: int) -> float:
        """Constant ``tau``, or geometric decay to ``tau_final`` when set."""
        if self.tau_final is None or self.iterations <= 1:
            return self.tau
        frac = it / (self.iterations - 1)
        return self.tau * (self.tau_final / self.tau) ** frac


def _check_budget(K: int, n: int):
    if K < 0 or K > n:
        raise ParameterError(f"budget K={K} must lie in 0..{n}")


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def top_k(scores, K: int) -> list[int]:
    """Indices of the K largest scores, ties to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_budget(K, len(scores))
    return [int(i) for i in np.argsort(-scores, kind="stable")[:K]]


def gumbel_noise(u):
    return -np.log(-np.log(u))


def lcb_of_samples(samples, lam: float) -> np.ndarray:
    """Row-wise mean minus ``lam`` times population std."""
    samples = np.atleast_2d(samples)
    d = samples - samples[:, :1]
    shift = d.mean(axis=1)
    return samples[:, 0] + shift - lam * d.std(axis=1)


def caumax_g(model, net: TwoGroupNetwork, K: int, lam: float = 0.5, passes: int = 20,
             seed: int = 0) -> SelectionResult:
    """Greedy maximisation of the LCB objective with early stopping.

    Each round scores J(S + v) for every unchosen v; the best node is added
    only if it raises J, otherwise the search ends.  Because every round uses
    the same per-pass dropout masks, a run to budget K contains the run to
    any smaller budget as a prefix.
    """
    start = time.perf_counter()
    n = net.n_source
    _check_budget(K, n)
    chosen: list[int] = []
    trace: list[float] = []
    current = np.zeros(n)
    best_j = float(lcb_of_samples(model.co2g_samples(net, current[None], passes, seed), lam)[0])
    while len(chosen) < K:
        cand = np.setdiff1d(np.arange(n), chosen)
        T = np.repeat(current[None], len(cand), axis=0)
        T[np.arange(len(cand)), cand] = 1.0
        J = lcb_of_samples(model.co2g_samples(net, T, passes, seed), lam)
        pick = int(np.argmax(J))
        if not J[pick] > best_j:
            break
        best_j = float(J[pick])
        chosen.append(int(cand[pick]))
        current[cand[pick]] = 1.0
        trace.append(best_j)
    return SelectionResult(chosen, trace, "caumax_g", K, lam, seed, _ms(start))


def caumax_d(model, net: TwoGroupNetwork, K: int, state: GumbelState | None = None,
             lam: float = 0.5, passes: int = 20, seed: int = 0) -> SelectionResult:
    """Relaxed search over Gumbel-sigmoid masks, projected to the top K logits.

    Minimises ``-J(T) + gamma * (sum(T) - K)**2`` in the logits by plain
    gradient descent, where ``T = sigmoid((psi + g) / tau)`` and ``g`` is
    fresh Gumbel noise each iteration.  J enters the loss in units of the
    model's ``y_scale`` (the training outcome std) when it has one, so
    ``gamma`` does not depend on the outcome scale.  ``state.psi`` holds the
    final logits; the trace records J in outcome units.
    """
    start = time.perf_counter()
    n = net.n_source
    _check_budget(K, n)
    state = state or GumbelState()
    rng = rng_stream(seed, "gumbel")
    psi = rng.normal(0.0, 0.1, n)
    unit = float(getattr(model, "y_scale", 1.0))
    trace = []
    tiny = np.finfo(np.float64).tiny
    for it in range(state.iterations):
        tau = state.temperature(it)
        g = gumbel_noise(np.clip(rng.random(n), tiny, 1.0))
        logits = dg.Tensor(psi, requires_grad=True)
        t_soft = dg.sigmoid(dg.scale(logits + g, 1.0 / tau))
        samples = model.relaxed_co2g(net, t_soft, passes, seed)
        mu = dg.mean_reduce(samples)
        sigma = dg.sqrt(dg.mean_reduce(dg.square(samples - mu)))
        J = mu - dg.scale(sigma, lam)
        excess = dg.sum_reduce(t_soft) - float(K)
        loss = dg.scale(J, -1.0 / unit) + dg.scale(dg.square(excess), state.gamma)
        loss.backward()
        psi = psi - state.lr * logits.grad
        trace.append(J.item())
    state.psi = psi
    return SelectionResult(top_k(psi, K), trace, "caumax_d", K, lam, seed, _ms(start))


def select_random(net: TwoGroupNetwork, K: int, seed: int = 0) -> SelectionResult:
    start = time.perf_counter()
    _check_budget(K, net.n_source)
    picked = rng_stream(seed, "random-select").choice(net.n_source, K, replace=False)
    return SelectionResult([int(i) for i in picked], [], "random", K, seed=seed,
                           wall_ms=_ms(start))


def select_degree(net: TwoGroupNetwork, K: int) -> SelectionResult:
    """Highest total degree (within-source plus cross-group)."""
    start = time.perf_counter()
    subset = top_k(net.source_degree, K)
    trace = list(np.cumsum(net.source_degree[subset]).astype(float))
    return SelectionResult(subset, trace, "degree", K, wall_ms=_ms(start))


def live_edge_components(net: TwoGroupNetwork, R: int, p_ic: float, seed: int):
    """Component labels and sizes of R random live-edge subgraphs.

    Under the independent cascade on an undirected graph each edge is tried
    at most once, so the activated set from seeds S has the same law as the
    union of components of S after keeping each edge with probability p_ic.
    Returns ``(labels (R, n), sizes list)`` on the sources-then-targets graph.
    """
    if R < 1 or not 0 < p_ic <= 1:
        raise ParameterError("need R >= 1 and p_ic in (0, 1]")
    full = triu(net.full_graph(), k=1).tocoo()
    n, edges = full.shape[0], np.column_stack([full.row, full.col])
    rng = rng_stream(seed, "live-edges")
    labels = np.empty((R, n), dtype=np.int64)
    sizes = []
    for r in range(R):
        keep = edges[rng.random(len(edges)) < p_ic]
        adj = coo_matrix((np.ones(len(keep)), (keep[:, 0], keep[:, 1])), shape=(n, n))
        _, lab = connected_components(adj, directed=False)
        labels[r] = lab
        sizes.append(np.bincount(lab))
    return labels, sizes


def cascade_spread(labels, sizes, S) -> float:
    """Mean activated count for seed set S over the live-edge samples."""
    S = list(S)
    if not S:
        return 0.0
    return float(np.mean([sizes[r][np.unique(labels[r, S])].sum() for r in range(len(sizes))]))


def select_im(net: TwoGroupNetwork, K: int, R: int = 100, p_ic: float = 0.1,
              seed: int = 0) -> SelectionResult:
    """Greedy cascade-spread maximisation over source nodes.

    All rounds share the same R live-edge samples, so the spread estimate
    is monotone in the seed set.
    """
    start = time.perf_counter()
    n = net.n_source
    _check_budget(K, n)
    labels, sizes = live_edge_components(net, R, p_ic, seed)
    src = labels[:, :n]
    gain_size = np.stack([sizes[r][src[r]] for r in range(R)]).astype(np.float64)
    covered = [np.zeros(len(s), dtype=bool) for s in sizes]
    chosen, trace, spread = [], [], 0.0
    available = np.ones(n, dtype=bool)
    for _ in range(K):
        gains = np.where(available, gain_size.mean(axis=0), -np.inf)
        v = int(np.argmax(gains))
        spread += float(gains[v])
        chosen.append(v)
        trace.append(spread)
        available[v] = False
        for r in range(R):
            covered[r][src[r, v]] = True
            gain_size[r] = np.where(covered[r][src[r]], 0.0, sizes[r][src[r]])
    return SelectionResult(chosen, trace, "im", K, seed=seed, wall_ms=_ms(start))


def oracle_greedy(net: TwoGroupNetwork, params: ScmParams, K: int) -> SelectionResult:
    """Greedy on the closed-form Co2G; runs to K since gains never go negative."""
    start = time.perf_counter()
    n = net.n_source
    _check_budget(K, n)
    spill = net.spillover_operator.toarray()
    z = np.zeros(net.n_target)
    base = softplus(z)
    available = np.ones(n, dtype=bool)
    chosen, trace = [], []
    for _ in range(K):
        gains = params.beta * (softplus(z[:, None] + spill) - softplus(z)[:, None]).mean(axis=0)
        gains[~available] = -np.inf
        v = int(np.argmax(gains))
        chosen.append(v)
        available[v] = False
        z = z + spill[:, v]
        trace.append(float(params.beta * (softplus(z) - base).mean()))
    return SelectionResult(chosen, trace, "oracle_greedy", K, wall_ms=_ms(start))


def exhaustive_optimum(value_fn, n: int, K: int) -> tuple[list[int], float]:
    """Best subset of size at most K under ``value_fn`` by enumeration.

    ``value_fn`` maps a (C, n) batch of 0/1 vectors to C values.  Ties go to
    the lexicographically first subset in (size, ids) order.
    """
    _check_budget(K, n)
    subsets = [c for k in range(K + 1) for c in itertools.combinations(range(n), k)]
    T = np.zeros((len(subsets), n))
    for row, c in enumerate(subsets):
        T[row, list(c)] = 1.0
    values = np.asarray(value_fn(T), dtype=np.float64)
    best = int(np.argmax(values))
    return list(subsets[best]), float(values[best])


class AdditiveModel:
    """Stub estimator whose Co2G is exactly ``sum(gains[S])`` in every pass."""

    def __init__(self, gains):
        self.gains = np.asarray(gains, dtype=np.float64)

    def co2g_samples(self, net, treatments, passes, seed, dropout=True):
        T = np.atleast_2d(np.asarray(treatments, dtype=np.float64))
        return np.repeat((T @ self.gains)[:, None], passes, axis=1)

    def relaxed_co2g(self, net, t_soft, passes, seed):
        value = dg.sum_reduce(dg.mul(t_soft, self.gains))
        return dg.concat([dg.reshape(value, (1,))] * passes, axis=0)
