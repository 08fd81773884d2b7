"""Reverse-mode differentiation over dense 2-D float64 arrays.

A deliberately small op set: everything the forecaster needs and nothing
else.  Each op returns a :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  ``backward`` sorts
the recorded graph topologically (the tape) and replays it in reverse.

Optimizer pieces (AdamW, cosine schedule, global-norm clipping) live here
too so that a particle owns exactly one ``ParamSet`` plus one ``OptimState``.
"""
from __future__ import annotations

import builtins
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np
from scipy.special import expit

__all__ = [
    "ContractError",
    "DimensionError",
    "Tensor",
    "constant",
    "affine",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "square",
    "softplus",
    "elu",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "activation",
    "sum",
    "mean",
    "concat",
    "gather_rows",
    "transpose",
    "masked_softmax",
    "logistic_logpdf_sum",
    "backward",
    "grad_check",
    "ParamSet",
    "OptimState",
    "adamw_step",
    "cosine_lr",
    "clip_global_norm",
    "global_norm",
]

LEAKY_SLOPE = 0.2
_ids = itertools.count()


class ContractError(RuntimeError):
    """Raised when an API precondition (not a shape) is violated."""


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


def _as2d(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A node in the computation graph holding a (rows, cols) float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = _as2d(data)
        if not _parents and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in tensor input")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a} with {b}") from exc


def _node(data, parents, backward_fn, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out._id = next(_ids)
    out.op = op
    return out


# ---------------------------------------------------------------- linear ops

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` with ``b`` broadcast over rows."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine inner dims differ: {x.shape} @ {W.shape}")
    if b.shape != (1, W.shape[1]):
        raise DimensionError(f"bias shape {b.shape} does not match (1, {W.shape[1]})")

    def bw(g):
        _accumulate(x, g @ W.data.T)
        _accumulate(W, x.data.T @ g)
        _accumulate(b, g.sum(axis=0, keepdims=True))

    return _node(x.data @ W.data + b.data, (x, W, b), bw, "affine")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = _lift(a)
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


# ------------------------------------------------------------ elementwise ops

def _unary(a, value, local_grad, op):
    a = _lift(a)
    out_data = value(a.data)

    def bw(g):
        _accumulate(a, g * local_grad(a.data, out_data))

    return _node(out_data, (a,), bw, op)


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def square(a) -> Tensor:
    return _unary(a, np.square, lambda x, y: 2.0 * x, "square")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softplus(a) -> Tensor:
    """``log(1 + e^x)`` without overflow."""
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _stable_sigmoid(x), "softplus")


def elu(a) -> Tensor:
    return _unary(
        a,
        lambda x: np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0))),
        lambda x, y: np.where(x >= 0, 1.0, y + 1.0),
        "elu",
    )


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sigmoid(a) -> Tensor:
    return _unary(a, _stable_sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


# Kinks take the left-hand slope (x <= 0 branch).
def relu(a) -> Tensor:
    return _unary(a, lambda x: np.where(x > 0, x, 0.0), lambda x, y: (x > 0).astype(np.float64), "relu")


def leaky_relu(a) -> Tensor:
    return _unary(
        a,
        lambda x: np.where(x > 0, x, LEAKY_SLOPE * x),
        lambda x, y: np.where(x > 0, 1.0, LEAKY_SLOPE),
        "leaky_relu",
    )


_ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "elu": elu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "leakyrelu": leaky_relu,
    "leaky_relu": leaky_relu,
}


def activation(kind: str, u) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(u)


# ------------------------------------------------------------- reductions

def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _lift(a)
    if axis is None:
        data = np.array([[a.data.sum()]])
    else:
        data = a.data.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(data, (a,), bw, "sum")


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.data.size
        data = np.array([[a.data.mean()]])
    else:
        n = a.shape[axis]
        data = a.data.mean(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _node(data, (a,), bw, "mean")


# ------------------------------------------------------------ structural ops

def concat(parts: Iterable, axis: int = 1) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise DimensionError("concat of nothing")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"concat along axis {axis}: mismatched shapes {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accumulate(p, g[:, lo:hi] if axis == 1 else g[lo:hi, :])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


def gather_rows(a, index) -> Tensor:
    """Select rows ``a[index]``; repeated indices accumulate in backward."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _node(a.data[index], (a,), bw, "gather_rows")


def transpose(a) -> Tensor:
    a = _lift(a)
    return _node(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T), "transpose")


def masked_softmax(scores, mask) -> Tensor:
    """Row-wise softmax restricted to ``mask``; masked-out entries are 0.

    Every row must have at least one admissible entry.
    """
    scores = _lift(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise DimensionError(f"mask {mask.shape} vs scores {scores.shape}")
    if not np.all(mask.any(axis=1)):
        raise ContractError("masked_softmax row with empty support")
    s = np.where(mask, scores.data, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        _accumulate(scores, p * (g - inner))

    return _node(p, (scores,), bw, "masked_softmax")


def logistic_logpdf_sum(tensors: Iterable) -> Tensor:
    """Summed Logistic(0, 1) log-density over every entry of every tensor.

    ``log p(x) = -|x| - 2 log(1 + e^-|x|)``; its derivative is ``-tanh(x / 2)``.
    One node regardless of how many tensors are passed.
    """
    parts = tuple(_lift(t) for t in tensors)
    total = 0.0
    for t in parts:
        a = np.abs(t.data)
        total += float(np.sum(-a - 2.0 * np.log1p(np.exp(-a))))

    def bw(g):
        for t in parts:
            _accumulate(t, g[0, 0] * -np.tanh(0.5 * t.data))

    return _node(np.array([[total]]), parts, bw, "logistic_logpdf_sum")


# ------------------------------------------------------------------ backward

def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p._id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _topological(loss)
    for node in tape:
        if node is not loss:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ------------------------------------------------------------------ params

class ParamSet:
    """Named parameter arrays with same-shaped gradient slots."""

    def __init__(self, params: Optional[Mapping[str, np.ndarray]] = None):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = _as2d(value).copy()
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def size(self) -> int:
        return int(builtins.sum(v.size for v in self.params.values()))

    def leaves(self) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def collect(self, leaves: Mapping[str, Tensor]) -> None:
        """Copy leaf gradients into the gradient slots; unused params get zero."""
        for k, leaf in leaves.items():
            g = leaf.grad
            self.grads[k] = np.zeros_like(self.params[k]) if g is None else np.array(g)

    def zero_grad(self) -> None:
        for k in self.grads:
            self.grads[k] = np.zeros_like(self.params[k])

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.params.items():
            out.add(k, v)
        return out

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.params.values()])

    def manifest(self):
        return [[k, list(v.shape)] for k, v in self.params.items()]

    @classmethod
    def from_flat(cls, flat, manifest) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        out, pos = cls(), 0
        for name, shape in manifest:
            n = int(shape[0]) * int(shape[1])
            out.add(name, flat[pos:pos + n].reshape(shape))
            pos += n
        if pos != flat.size:
            raise DimensionError(f"flat vector has {flat.size} values, manifest needs {pos}")
        return out


# ------------------------------------------------------------------ grad check

def grad_check(f: Callable[[Dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray], eps: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a dict of tensors to a scalar tensor and must be deterministic.
    The relative error per coordinate uses ``max(|analytic|, |numeric|, 1e-8)``
    as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: _as2d(v).copy() for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    out = f(leaves)
    backward(out)
    worst = 0.0
    for name, arr in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            hi = f({k: Tensor(v) for k, v in base.items()}).item()
            arr[idx] = orig - eps
            lo = f({k: Tensor(v) for k, v in base.items()}).item()
            arr[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[idx]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# --------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr0: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    total_steps: int = 1
    lr_min: Optional[float] = None
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    initialized: bool = False

    def __post_init__(self):
        if self.lr_min is None:
            self.lr_min = self.lr0 / 100.0

    def init(self, params: ParamSet) -> "OptimState":
        self.m = {k: np.zeros_like(v) for k, v in params.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.params.items()}
        self.step = 0
        self.initialized = True
        return self


def adamw_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: OptimState, lr: Optional[float] = None) -> None:
    """One AdamW update in place; weight decay is decoupled from the moments."""
    if not state.initialized:
        raise ContractError("OptimState not initialized; call state.init(params)")
    lr = state.lr0 if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= lr * (update + state.weight_decay * p)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_min
    step = max(step, 0)
    return lr_min + (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(builtins.sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
