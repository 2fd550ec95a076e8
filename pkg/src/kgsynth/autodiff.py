"""Small reverse-mode autodiff over dense float64 arrays.

Graphs are built eagerly: every op returns a :class:`Tensor` holding its value
and a closure mapping the upstream gradient to gradients of its operands.
:func:`backward` walks the graph once in reverse topological order.

Per-example mode keeps the leading (example) axis on parameter gradients.
It is only defined for losses that decompose row-wise, so parameters may
enter the graph through ``matmul``, ``matmul_t`` and broadcast ``add`` only,
and no op may reduce across rows.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class NotRowDecomposable(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "is_param", "name", "mixes_rows")

    def __init__(self, data, parents=(), backward_fn=None, is_param=False, name=None, mixes_rows=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.is_param = is_param
        self.name = name
        self.mixes_rows = mixes_rows

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x) -> Tensor:
    return Tensor(x)


def param(x, name=None) -> Tensor:
    return Tensor(x, is_param=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _param_rowwise(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Per-example gradient of a parameter broadcast along the example axis."""
    if g.ndim != len(shape) + 1:
        raise NotRowDecomposable("parameter must broadcast along the example axis")
    out = g
    for ax, n in enumerate(shape):
        if n == 1 and out.shape[ax + 1] != 1:
            out = out.sum(axis=ax + 1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def bw(g, pe):
        ga = gb = None
        if pe and a.is_param:
            ga = _param_rowwise(g, a.shape)
        else:
            ga = _unbroadcast(g, a.shape)
        if pe and b.is_param:
            gb = _param_rowwise(g, b.shape)
        else:
            gb = _unbroadcast(g, b.shape)
        return ga, gb

    return Tensor(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    _no_param(a, "neg")
    return Tensor(-a.data, (a,), lambda g, pe: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _no_param(a, "mul")
    _no_param(b, "mul")
    out = a.data * b.data

    def bw(g, pe):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, (a, b), bw)


def _no_param(t: Tensor, op: str):
    # marks ops whose per-example parameter gradient is not implemented
    if t.is_param:
        t.mixes_rows = True


def matmul(x, w) -> Tensor:
    """x @ w with x of shape (B, n) and w of shape (n, m)."""
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul shapes {x.shape} and {w.shape}")
    out = x.data @ w.data

    def bw(g, pe):
        gx = g @ w.data.T
        if pe and w.is_param:
            gw = np.einsum("bi,bj->bij", x.data, g)
        else:
            gw = x.data.T @ g
        return gx, gw

    return Tensor(out, (x, w), bw)


def matmul_t(x, w) -> Tensor:
    """x @ w.T with x of shape (B, m) and w of shape (n, m)."""
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"matmul_t shapes {x.shape} and {w.shape}")
    out = x.data @ w.data.T

    def bw(g, pe):
        gx = g @ w.data
        if pe and w.is_param:
            gw = np.einsum("bi,bj->bij", g, x.data)
        else:
            gw = g.T @ x.data
        return gx, gw

    return Tensor(out, (x, w), bw)


def affine(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def _unary(a: Tensor, value: np.ndarray, local_grad: np.ndarray | None, op: str) -> Tensor:
    _no_param(a, op)
    if local_grad is None:
        return Tensor(value, (a,), lambda g, pe: (None,))
    return Tensor(value, (a,), lambda g, pe: (g * local_grad,))


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    return _unary(a, y, 1.0 - y * y, "tanh")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = _lift(a)
    d = np.where(a.data > 0, 1.0, slope)
    return _unary(a, a.data * d, d, "leaky_relu")


def leaky_relu_deriv(a, slope: float = LEAKY_SLOPE) -> Tensor:
    """Derivative of leaky-ReLU as a node; piecewise constant, so it passes no gradient."""
    a = _lift(a)
    return _unary(a, np.where(a.data > 0, 1.0, slope), None, "leaky_relu_deriv")


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = _sigmoid(a.data)
    return _unary(a, y, y * (1.0 - y), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = _lift(a)
    y = np.logaddexp(0.0, a.data)
    return _unary(a, y, _sigmoid(a.data), "softplus")


def exp(a) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)
    return _unary(a, y, y, "exp")


def log(a) -> Tensor:
    a = _lift(a)
    return _unary(a, np.log(a.data), 1.0 / a.data, "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    y = np.sqrt(a.data)
    return _unary(a, y, 0.5 / y, "sqrt")


def square(a) -> Tensor:
    a = _lift(a)
    return _unary(a, a.data * a.data, 2.0 * a.data, "square")


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _lift(a)
    _no_param(a, "sum")
    out = a.data.sum(axis=axis)
    shape = a.shape

    def bw(g, pe):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor(out, (a,), bw, mixes_rows=axis is None or axis == 0)


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def row_sq_norm(a) -> Tensor:
    return sum(square(a), axis=1)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_lift(x) for x in xs]
    for x in xs:
        _no_param(x, "concat")
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g, pe):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(xs), bw)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    _no_param(a, "slice_cols")
    width = a.shape[1]

    def bw(g, pe):
        full = np.zeros(g.shape[:1] + (width,))
        full[:, start:stop] = g
        return (full,)

    return Tensor(a.data[:, start:stop], (a,), bw)


def softmax_segments(a, segments: Sequence[tuple[int, int]]) -> Tensor:
    """Softmax over each [start, stop) column block; other columns pass through."""
    a = _lift(a)
    _no_param(a, "softmax_segments")
    y = a.data.copy()
    for s, e in segments:
        z = a.data[:, s:e]
        z = np.exp(z - z.max(axis=1, keepdims=True))
        y[:, s:e] = z / z.sum(axis=1, keepdims=True)

    def bw(g, pe):
        gx = g.copy()
        for s, e in segments:
            ys = y[:, s:e]
            gs = g[:, s:e]
            gx[:, s:e] = ys * (gs - (gs * ys).sum(axis=1, keepdims=True))
        return (gx,)

    return Tensor(y, (a,), bw)


def log_softmax_segments(a, segments: Sequence[tuple[int, int]]) -> Tensor:
    """Log-softmax over each column block; columns outside every block are zeroed."""
    a = _lift(a)
    _no_param(a, "log_softmax_segments")
    y = np.zeros_like(a.data)
    probs = np.zeros_like(a.data)
    for s, e in segments:
        z = a.data[:, s:e]
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        y[:, s:e] = z - lse
        probs[:, s:e] = np.exp(y[:, s:e])

    def bw(g, pe):
        gx = np.zeros_like(g)
        for s, e in segments:
            gs = g[:, s:e]
            gx[:, s:e] = gs - probs[:, s:e] * gs.sum(axis=1, keepdims=True)
        return (gx,)

    return Tensor(y, (a,), bw)


def tanh_cols(a, cols: np.ndarray) -> Tensor:
    """tanh applied to the given columns only."""
    a = _lift(a)
    _no_param(a, "tanh_cols")
    y = a.data.copy()
    t = np.tanh(a.data[:, cols])
    y[:, cols] = t
    local = np.ones_like(a.data)
    local[:, cols] = 1.0 - t * t
    return Tensor(y, (a,), lambda g, pe: (g * local,))


# ---------------------------------------------------------------------------
# backward pass


def _toposort(out: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, seed: np.ndarray | float = 1.0, per_example: bool = False) -> dict[int, np.ndarray]:
    """Gradients of ``out`` (weighted by ``seed``) for every leaf, keyed by ``id(leaf)``."""
    order = _toposort(out)
    grads: dict[int, np.ndarray] = {id(out): np.broadcast_to(np.asarray(seed, dtype=np.float64), out.shape).copy()}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            leaves[id(node)] = g
            continue
        if per_example and node.mixes_rows:
            raise NotRowDecomposable("graph reduces across examples")
        for p, pg in zip(node.parents, node.backward_fn(g, per_example)):
            if pg is None:
                continue
            if per_example and p.is_param and p.mixes_rows:
                raise NotRowDecomposable(f"parameter {p.name!r} used by an op without per-example support")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return leaves


# ---------------------------------------------------------------------------
# parameter sets and drivers


class ParamSet(OrderedDict):
    """Named parameter arrays with a stable flatten order."""

    def tensors(self) -> dict[str, Tensor]:
        return {k: param(v, k) for k, v in self.items()}

    @property
    def size(self) -> int:
        return int(np.sum([v.size for v in self.values()])) if self else 0

    def flatten(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.values()])

    def unflatten(self, flat: np.ndarray) -> ParamSet:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ShapeError(f"expected {self.size} values, got {flat.size}")
        out, pos = ParamSet(), 0
        for k, v in self.items():
            out[k] = flat[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return out

    def copy(self) -> ParamSet:
        return ParamSet((k, v.copy()) for k, v in self.items())


Fn = Callable[..., Tensor]


def forward(fn: Fn, params: ParamSet, *inputs) -> np.ndarray:
    return fn(params.tensors(), *[_lift(x) for x in inputs]).data


def grad(fn: Fn, params: ParamSet, *inputs, wrt_inputs: bool = False):
    """Reverse-mode gradient of a scalar-valued ``fn(P, *inputs)``.

    Returns a ParamSet of gradients, plus a list of input gradients when
    ``wrt_inputs`` is set.
    """
    P = params.tensors()
    xs = [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    out = fn(P, *xs)
    if out.data.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {out.shape}")
    leaves = backward(out)
    g = ParamSet((k, leaves.get(id(t), np.zeros_like(t.data)).reshape(t.shape)) for k, t in P.items())
    if wrt_inputs:
        return g, [leaves.get(id(x), np.zeros_like(x.data)) for x in xs]
    return g


def value_and_grad(fn: Fn, params: ParamSet, *inputs) -> tuple[float, ParamSet]:
    P = params.tensors()
    out = fn(P, *[_lift(x) for x in inputs])
    if out.data.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {out.shape}")
    leaves = backward(out)
    return float(out.data), ParamSet((k, leaves.get(id(t), np.zeros_like(t.data))) for k, t in P.items())


def per_example_grads(fn: Fn, params: ParamSet, *inputs) -> tuple[np.ndarray, np.ndarray]:
    """Per-row gradients of a row-decomposable loss.

    ``fn`` returns per-row losses of shape (B,). Returns ``(losses, G)`` with
    G of shape (B, params.size) in ParamSet flatten order.
    """
    P = params.tensors()
    out = fn(P, *[_lift(x) for x in inputs])
    if out.data.ndim != 1:
        raise NotRowDecomposable(f"expected per-row losses of shape (B,), got {out.shape}")
    B = out.shape[0]
    leaves = backward(out, np.ones(B), per_example=True)
    blocks = []
    for t in P.values():
        g = leaves.get(id(t))
        blocks.append(np.zeros((B, t.data.size)) if g is None else g.reshape(B, -1))
    return out.data.copy(), np.concatenate(blocks, axis=1) if blocks else np.zeros((B, 0))


# ---------------------------------------------------------------------------
# dense networks


class MLP:
    """Dense stack: hidden layers with one activation, linear output layer."""

    ACTIVATIONS = ("leaky_relu", "tanh", "softplus", "relu")

    def __init__(self, sizes: Sequence[int], activation: str = "leaky_relu", prefix: str = ""):
        if len(sizes) < 2:
            raise ShapeError("an MLP needs input and output sizes")
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unsupported activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.prefix = prefix

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def names(self, i: int) -> tuple[str, str]:
        return f"{self.prefix}W{i}", f"{self.prefix}b{i}"

    def init(self, rng: np.random.Generator) -> ParamSet:
        ps = ParamSet()
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            w, b = self.names(i)
            ps[w] = rng.uniform(-bound, bound, size=(n_in, n_out))
            ps[b] = rng.uniform(-bound, bound, size=(n_out,))
        return ps

    def _act(self, a: Tensor) -> Tensor:
        if self.activation == "leaky_relu":
            return leaky_relu(a)
        if self.activation == "relu":
            return relu(a)
        if self.activation == "tanh":
            return tanh(a)
        return softplus(a)

    def _act_deriv(self, a: Tensor, h: Tensor) -> Tensor:
        if self.activation == "leaky_relu":
            return leaky_relu_deriv(a)
        if self.activation == "relu":
            return leaky_relu_deriv(a, 0.0)
        if self.activation == "tanh":
            return 1.0 - square(h)
        return sigmoid(a)

    def forward(self, P: dict[str, Tensor], x: Tensor, keep: list | None = None) -> Tensor:
        h = _lift(x)
        for i in range(self.n_layers):
            w, b = self.names(i)
            a = affine(h, P[w], P[b])
            if i == self.n_layers - 1:
                return a
            h = self._act(a)
            if keep is not None:
                keep.append((a, h))
        raise AssertionError("unreachable")

    def input_gradient(self, P: dict[str, Tensor], x: Tensor) -> tuple[Tensor, Tensor]:
        """(D(x), dD/dx) for a scalar-output stack; the gradient stays differentiable in P."""
        if self.sizes[-1] != 1:
            raise ShapeError("input_gradient needs a scalar-output network")
        acts: list = []
        out = self.forward(P, x, keep=acts)
        B = out.shape[0]
        w_last, _ = self.names(self.n_layers - 1)
        g = matmul_t(const(np.ones((B, 1))), P[w_last])
        for i in range(self.n_layers - 2, -1, -1):
            a, h = acts[i]
            g = g * self._act_deriv(a, h)
            w, _ = self.names(i)
            g = matmul_t(g, P[w])
        return out, g


class Adam:
    """Adaptive moment estimation over a ParamSet."""

    def __init__(self, params: ParamSet, lr: float = 2e-4, betas=(0.5, 0.9), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = ParamSet((k, np.zeros_like(v)) for k, v in params.items())
        self.v = ParamSet((k, np.zeros_like(v)) for k, v in params.items())
        self.t = 0

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        self.t += 1
        b1, b2 = self.betas
        out = ParamSet()
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def stack_params(psets: Iterable[ParamSet]) -> ParamSet:
    out = ParamSet()
    for ps in psets:
        for k, v in ps.items():
            if k in out:
                raise ValueError(f"duplicate parameter name {k!r}")
            out[k] = v
    return out
