"""Small dense reverse-mode autodiff over numpy arrays, plus Adam.

Only the primitives needed by the Cross-GNN estimator and by gradient
search over treatment masks are provided. Every value is float64.

Each ``Tensor`` produced by a primitive keeps references to its parents
and a closure that pushes an output gradient back to them, so the
recorded graph plays the role of a tape: ``backward`` replays it in
reverse topological order. Graphs are per-call objects, so independent
forward passes can run in separate threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not attached to any "
                               "gradient-requiring input")
        if self.data.size != 1:
            raise RuntimeError(f"backward() needs a scalar loss, got shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, 1.0 / float(other))
        raise TypeError("only division by a python scalar is supported")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-d and ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with the bias added in place."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: shapes {x.shape} and {w.shape} do not align")
    out = x.data @ w.data
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} for {w.shape[1]} outputs")
        out += b.data
        parents = (x, w, b)

    def back(g):
        flat = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ flat if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, flat.sum(axis=0) if b.requires_grad else None

    return _make(out, parents, back, "linear")


def spmm(adj: sp.spmatrix, x) -> Tensor:
    """Propagate node features through a constant sparse operator.

    Node axis first: ``adj`` has shape (n_out, n_in), ``x`` has shape
    (n_in, ...) and the result has shape (n_out, ...).
    """
    x = as_tensor(x)
    n_out, n_in = adj.shape
    if x.ndim < 1 or x.shape[0] != n_in:
        raise DimensionError(f"spmm: operator {adj.shape} cannot act on {x.shape}")
    rest = x.shape[1:]

    def apply(op, arr, rows_in, rows_out):
        return np.asarray(op @ arr.reshape(rows_in, -1)).reshape((rows_out,) + rest)

    return _make(apply(adj, x.data, n_in, n_out), (x,),
                 lambda g: (apply(adj.T, g, n_out, n_in),), "spmm")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} on axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),),
                 "transpose")


def sum_reduce(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back, "sum")


def mean_reduce(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_reduce(a, axis), 1.0 / count)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    a = as_tensor(a)
    r = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        d = np.where(r > 0, 0.5 / np.where(r > 0, r, 1.0), 0.0)
    return _make(r, (a,), lambda g: (g * d,), "sqrt")


def l1_norm(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data).sum(), (a,), lambda g: (g * np.sign(a.data),), "l1")


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with prob ~``rate``, else 1/keep_prob.

    Units are dropped on a 16-bit grid, so the realised drop probability is
    ``round(rate * 2**16) / 2**16``; the rescale uses that exact value and
    the mask has expectation exactly 1.
    """
    if rate == 0:
        return np.ones(shape)
    cut = int(round(rate * 65536))
    keep = rng.integers(0, 65536, size=shape, dtype=np.uint16) >= cut
    return keep * (65536.0 / (65536 - cut))


def dropout(a, rate: float, seed=None, mask=None) -> Tensor:
    """Inverted dropout.  ``mask`` (already scaled) overrides ``seed``."""
    a = as_tensor(a)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0 and mask is None:
        return a
    if mask is None:
        mask = dropout_mask(a.shape, rate, np.random.default_rng(seed))
    _check_broadcast(a, Tensor(mask), "dropout")
    return _make(a.data * mask, (a,), lambda g: (_unbroadcast(g * mask, a.shape),), "dropout")


def relu_dropout(a, mask) -> Tensor:
    """``dropout(relu(a))`` with a precomputed inverted-dropout ``mask``."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    out *= mask

    def back(g):
        r = g * mask
        np.multiply(r, out > 0, out=r)
        return (_unbroadcast(r, a.shape),)

    return _make(out, (a,), back, "relu_dropout")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One in-place Adam update of the arrays in ``params``.

    Weight decay is the classic L2 form: ``weight_decay * p`` is added to
    the gradient before the moment updates.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(state.m):
        raise DimensionError("parameter list changed length between Adam steps")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
