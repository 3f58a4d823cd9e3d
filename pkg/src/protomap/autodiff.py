"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation on a :class:`Tensor` produces a new node that remembers its
parents and a closure that pushes the output gradient back to them.  Calling
:func:`backprop` on a scalar node walks that recorded graph in reverse
topological order.  The graph is kept after the backward pass (so the same
loss can be inspected again); gradients accumulate into ``.grad`` until
:func:`zero_grad` is called.

All values are float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, name={self.name!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    @property
    def tracks(self) -> bool:
        """True if gradient must flow into or through this node."""
        return self.requires_grad or bool(self._parents)

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    live = tuple(p for p in parents if p.tracks)
    out = Tensor(data, _parents=live, _op=op)
    if live:
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.tracks:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.tracks:
            b._accumulate(_unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), "add", bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.tracks:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.tracks:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        if a.tracks:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.tracks:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))
    return _node(out_data, (a, b), "div", bw)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _node(a.data ** p, (a,), "pow",
                 lambda g: a._accumulate(g * p * a.data ** (p - 1.0)))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), "square", lambda g: a._accumulate(2.0 * g * a.data))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), "sqrt", lambda g: a._accumulate(0.5 * g / out_data))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _node(out_data, (a,), "exp", lambda g: a._accumulate(g * out_data))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), "log", lambda g: a._accumulate(g / a.data))


def tabs(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), "abs", lambda g: a._accumulate(g * np.sign(a.data)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), "relu", lambda g: a._accumulate(g * mask))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    return _node(out_data, (a,), "sigmoid",
                 lambda g: a._accumulate(g * out_data * (1.0 - out_data)))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _node(out_data, (a,), "tanh", lambda g: a._accumulate(g * (1.0 - out_data ** 2)))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))
    return _node(s, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    s = np.exp(out_data)

    def bw(g):
        a._accumulate(g - s * g.sum(axis=axis, keepdims=True))
    return _node(out_data, (a,), "log_softmax", bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.tracks:
            a._accumulate(g @ b.data.T)
        if b.tracks:
            b._accumulate(a.data.T @ g)
    return _node(a.data @ b.data, (a, b), "matmul", bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: a._accumulate(g.reshape(old)))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), "transpose", lambda g: a._accumulate(g.T))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, shape))
    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", bw)


def take(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)
    return _node(a.data[idx], (a,), "take", bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.tracks:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])
    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, "concat", bw)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


def backprop(loss: Tensor) -> list[Tensor]:
    """Reverse-accumulate d(loss)/d(node) into every reachable trainable leaf.

    Returns the trainable leaves that received a gradient.
    """
    if loss.data.size != 1:
        raise UsageError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not loss._parents:
        raise UsageError("backprop called on a node with no recorded forward pass")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    # interior gradients are per-call scratch; leaves accumulate
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return [n for n in order if not n._parents and n.requires_grad]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# layers ------------------------------------------------------------------

ACTIVATIONS = ("identity", "relu", "sigmoid", "softmax", "tanh")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def activate(x: Tensor, activation: str) -> Tensor:
    if activation == "identity":
        return x
    if activation == "relu":
        return relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    if activation == "softmax":
        return softmax(x, axis=-1)
    if activation == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {activation!r}")


class DenseLayer:
    """Affine map ``activation(x @ W.T + b)`` over row-major batches."""

    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, name: str = "dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.name = name
        self.weight = Tensor(glorot_uniform(rng, n_in, n_out), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return affine_forward(self, x)


def affine_forward(layer: DenseLayer, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != layer.n_in:
        raise DimensionError(
            f"{layer.name}: input has {x.shape[-1]} features, layer expects {layer.n_in}")
    return activate(x @ layer.weight.T + layer.bias, layer.activation)


class MLP:
    """Stack of dense layers; ``hidden`` activation between, ``out_activation`` last."""

    def __init__(self, sizes: Sequence[int], hidden: str = "relu",
                 out_activation: str = "identity", rng: np.random.Generator | None = None,
                 name: str = "mlp"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = out_activation if i == len(sizes) - 2 else hidden
            self.layers.append(DenseLayer(a, b, act, rng=rng, name=f"{name}.{i}"))

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def set_trainable(params: Iterable[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def state_dict(params: Iterable[Tensor]) -> dict[str, list]:
    return {p.name: p.data.tolist() for p in params}


def load_state(params: Iterable[Tensor], state: dict) -> None:
    for p in params:
        arr = np.asarray(state[p.name], dtype=np.float64)
        if arr.shape != p.shape:
            raise DimensionError(f"{p.name}: stored shape {arr.shape} != {p.shape}")
        p.data = arr


def snapshot(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def restore(params: Iterable[Tensor], values: Sequence[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.data = v.copy()


# optimisation --------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return list(grads)
    scale = max_norm / total
    return [g * scale for g in grads]


def adam_update(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
                state: AdamState, lr: float, clip_norm: float | None = None) -> None:
    """One bias-corrected Adam step, in place.  ``None`` grads count as zero."""
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise DimensionError(f"{p.name}: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
    if clip_norm is not None:
        grads = clip_grad_norm(grads, clip_norm)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[i], state.v[i] = m, v
        if lr != 0.0:
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self, lr: float) -> None:
        adam_update(self.params, [p.grad for p in self.params], self.state, lr,
                    clip_norm=self.clip_norm)


@dataclass(frozen=True)
class LrSchedule:
    base: float
    factor: float = 1.0
    interval: int = 1

    def __post_init__(self):
        if not 0.0 < self.factor <= 1.0:
            raise ValueError(f"decay factor must be in (0, 1], got {self.factor}")
        if self.interval < 1:
            raise ValueError("decay interval must be >= 1 epoch")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.base * schedule.factor ** (epoch // schedule.interval)


def numeric_grad(f: Callable[[], float], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``param.data``."""
    param.data = np.ascontiguousarray(param.data)
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    # floor keeps near-zero entries from amplifying finite-difference roundoff
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(2.0 * np.abs(analytic - numeric) / denom))
