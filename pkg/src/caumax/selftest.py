"""Fast invariant checks, run by ``caumax selftest`` and reused by the tests."""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from . import diffgrad as dg
from . import selectors as sel
from .estimator import (EffectModel, EstimatorConfig, Co2gStats, estimate_co2g, forward,
                        forward_tensor, load_model, save_model)
from .evaluation import identification_check, tiny_instance, two_source_instance
from .graph import RawGraph, TwoGroupNetwork, compute_coreness
from .scm import true_co2g
from .utils import rng_stream


def random_small_network(rng: np.random.Generator, d_in: int = 2, max_source: int = 5,
                         max_target: int = 6) -> TwoGroupNetwork:
    """A few sources and targets with random edges; every target has a source."""
    n_a, n_b = int(rng.integers(2, max_source + 1)), int(rng.integers(2, max_target + 1))
    pairs_a = [(i, j) for i in range(n_a) for j in range(i + 1, n_a) if rng.random() < 0.5]
    pairs_b = [(i, j) for i in range(n_b) for j in range(i + 1, n_b) if rng.random() < 0.4]
    cross = {(int(rng.integers(n_a)), j) for j in range(n_b)}
    cross |= {(i, j) for i in range(n_a) for j in range(n_b) if rng.random() < 0.3}
    cross = sorted(cross)
    return TwoGroupNetwork(
        source_ids=np.arange(n_a), target_ids=np.arange(n_a, n_a + n_b),
        edges_A=pairs_a, edges_B=pairs_b, edges_AB=cross,
        weights_AB=rng.uniform(0.5, 1.5, len(cross)),
        features_A=rng.standard_normal((n_a, d_in)),
        features_B=rng.standard_normal((n_b, d_in)))


def gradient_errors(model: EffectModel, net: TwoGroupNetwork, t, masks=None, h: float = 1e-4):
    """Relative error of reverse-mode against central-difference gradients.

    Returns ``(param_error, treatment_error)``, each the norm of the
    difference over the larger of the two gradient norms.
    """
    t = np.asarray(t, dtype=np.float64)

    def value(tt):
        return forward_tensor(model, net, tt[None], masks).item()

    t_var = dg.Tensor(t[None].copy(), requires_grad=True)
    for p in model.params.values():
        p.grad = None
    forward_tensor(model, net, t_var, masks).backward()
    analytic = np.concatenate([p.grad.ravel() for p in model.params.values()])
    numeric = []
    for p in model.params.values():
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            up = value(t)
            flat[k] = keep - h
            down = value(t)
            flat[k] = keep
            numeric.append((up - down) / (2 * h))
    t_num = np.empty_like(t)
    for k in range(t.size):
        e = np.zeros_like(t)
        e[k] = h
        t_num[k] = (value(t + e) - value(t - e)) / (2 * h)

    def rel(a, b):
        scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
        return float(np.linalg.norm(a - b) / scale)

    return rel(analytic, np.array(numeric)), rel(t_var.grad.ravel(), t_num)


def relu_inputs(out: dg.Tensor) -> np.ndarray:
    """Every value fed to a ReLU while computing ``out`` (walks the recorded graph)."""
    seen, stack, found = set(), [out], []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op in ("relu", "relu_dropout"):
            found.append(node._parents[0].data.ravel())
        stack.extend(node._parents)
    return np.concatenate(found) if found else np.zeros(0)


def random_gradient_case(seed: int, margin: float = 1e-3):
    """Random small network, random-width model with non-trivial weights and masks.

    Central differences are only meaningful away from ReLU kinks, so draws
    with any ReLU input closer than ``margin`` to zero are replaced by the
    next draw of the same stream.
    """
    rng = rng_stream(seed, "gradcheck")
    while True:
        case = _draw_gradient_case(rng, seed)
        model, net, t, masks = case
        z = relu_inputs(forward_tensor(model, net, t[None], masks))
        if np.abs(z).min(initial=np.inf) >= margin:
            return case


def _draw_gradient_case(rng, seed):
    d_in = int(rng.integers(1, 4))
    net = random_small_network(rng, d_in, 10, 16)
    cfg = EstimatorConfig(gcn_hidden=int(rng.integers(2, 7)),
                          mlp_hidden=(int(rng.integers(2, 9)), int(rng.integers(2, 5))),
                          dropout_rate=0.3, degree_scaler=bool(rng.integers(2)))
    model = EffectModel(d_in, cfg, seed)
    for p in model.params.values():
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    model.y_shift, model.y_scale = float(rng.normal()), float(rng.uniform(0.5, 2.0))
    masks = model.draw_masks(net, rng)
    t = rng.uniform(0.0, 1.0, net.n_source)
    return model, net, t, masks


def _check(name, ok, detail=""):
    return name, bool(ok), detail


def run_checks() -> list[tuple[str, bool, str]]:
    out = []

    errs = [gradient_errors(*random_gradient_case(s)) for s in range(3)]
    worst = max(max(e) for e in errs)
    out.append(_check("gradient vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}"))

    net, params = two_source_instance()
    a = true_co2g(net, params, [0])
    b = true_co2g(net, params, [0, 1])
    want_a = math.log1p(math.exp(1 / math.sqrt(2))) - math.log(2)
    want_b = math.log1p(math.exp(math.sqrt(2))) - math.log(2)
    out.append(_check("closed-form Co2G", abs(a - want_a) < 1e-12 and abs(b - want_b) < 1e-12
                      and true_co2g(net, params, []) == 0.0, f"{a:.4f}, {b:.4f}"))

    g = RawGraph(5, [(1, 2), (2, 3), (1, 3), (1, 4)])
    core = compute_coreness(g)
    out.append(_check("coreness of triangle plus pendant",
                      core[1:].tolist() == [2, 2, 2, 1], str(core.tolist())))

    net, params = tiny_instance(0)
    model = EffectModel(net.d_in, EstimatorConfig(gcn_hidden=4, mlp_hidden=(4, 3)), 0)
    empty = estimate_co2g(model, net, [], 20, seed=1)
    nodrop = EffectModel(net.d_in, EstimatorConfig(gcn_hidden=4, mlp_hidden=(4, 3),
                                                   dropout_rate=0.0), 0)
    flat = estimate_co2g(nodrop, net, [0, 2], 20, seed=1)
    stats = Co2gStats.from_samples([0.1, 0.3])
    out.append(_check("MC-dropout contracts",
                      empty.mean == 0.0 and empty.std == 0.0 and flat.std == 0.0
                      and abs(stats.std - 0.1) < 1e-15,
                      f"empty=({empty.mean}, {empty.std}) rate0 std={flat.std}"))

    class Tiny:
        n_source = 4
    greedy = sel.caumax_g(sel.AdditiveModel([0.0, 0.2, 0.0, 0.5]), Tiny, 2, lam=0.0, passes=1)
    stop = sel.caumax_g(sel.AdditiveModel([-1.0] * 4), Tiny, 3, lam=0.0, passes=1)
    out.append(_check("greedy order and early break",
                      greedy.subset == [3, 1] and stop.subset == [],
                      f"{greedy.subset}, {stop.subset}"))
    out.append(_check("top-K projection", sel.top_k([0.3, -1, 2, 0.5], 2) == [2, 3]))

    x = np.array([1.0])
    dg.adam_step([x], [np.array([1.0])], dg.AdamState(lr=1e-3))
    out.append(_check("first Adam step", abs(x[0] - 0.999) < 1e-9, f"{x[0] - 1:.6f}"))

    t = np.array([1.0, 0.0, 1.0])
    before = forward(model, net, t)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.txt"
        save_model(model, path)
        after = forward(load_model(path)[0], net, t)
    out.append(_check("checkpoint round trip", before == after, f"{before!r}"))

    net, params = tiny_instance(0, noise_sigma=0.0)
    res = identification_check(net, params, [0], 1.0, 5000, 0)
    out.append(_check("noise-free identification", res.adjustment == res.truth,
                      f"{res.matches} matches"))
    return out
