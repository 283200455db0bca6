"""Dense float64 tensors with a reverse-mode gradient tape.

Every op that touches a tensor with ``requires_grad`` appends a node with a
global sequence number. ``backward`` replays the reachable nodes in strictly
decreasing sequence order, so gradients of an intermediate are complete
before it propagates them further.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, NumericError, ShapeError

PROB_EPS = 1e-7

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class _Node:
    seq: int
    op: str
    parents: tuple
    backward: Callable


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

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


class Parameter(Tensor):
    """A trainable leaf tensor carrying a dotted name (``"towers.0.1.W"``)."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._node = _Node(next(_seq), op, tuple(parents), backward_fn)
    return out


@dataclass
class GradTape:
    """Reachable ops of one loss, ordered for replay (latest first)."""

    tensors: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "GradTape":
        seen = set()
        found = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(p for p in t._node.parents if p.requires_grad)
        found.sort(key=lambda t: t._node.seq, reverse=True)
        return cls(found)

    @property
    def ops(self) -> list:
        return [t._node.op for t in self.tensors]


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` of everything reachable from scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` in between.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = GradTape.from_loss(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for t in tape.tensors:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        node = t._node
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            elif id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg
    return tape


# ----------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) axes broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over the leading axes."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    out = np.matmul(x.data, w.data)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = _unbroadcast(np.matmul(g, np.swapaxes(w.data, -1, -2)), x.shape) if x.requires_grad else None
        gw = _unbroadcast(np.matmul(np.swapaxes(x.data, -1, -2), g), w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (_unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record(out, parents, bw, "linear")


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: operands must match or one must be scalar, got {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _record(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(~(x.data > 0)):
        raise NumericError("log of a non-positive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (max-subtracted)."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    moved = np.moveaxis(x.data, axis, -1)
    lead = moved.shape[:-1]
    flat = _kernels.softmax_rows(moved.reshape(-1, moved.shape[-1]))
    out = np.moveaxis(flat.reshape(lead + (moved.shape[-1],)), -1, axis)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), bw, "softmax")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {p.shape} along axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(parts)))

    return _record(out, parts, bw, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` at integer positions ``idx`` along ``axis``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    out = np.take(x.data, idx, axis=axis)

    def bw(g):
        if axis == 0:
            return (_kernels.scatter_add_rows(n, idx, g),)
        gm = np.moveaxis(g, axis, 0)
        full = _kernels.scatter_add_rows(n, idx, gm)
        return (np.moveaxis(full, 0, axis),)

    return _record(out, (x,), bw, "take")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(out, (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _record(x.data.mean(), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


def mixture(weights: Tensor, stack: Tensor) -> Tensor:
    """Per-row convex combination: ``out[b] = sum_k weights[b, k] * stack[k, b]``."""
    weights, stack = as_tensor(weights), as_tensor(stack)
    if weights.ndim != 2 or stack.ndim != 3 or weights.shape != (stack.shape[1], stack.shape[0]):
        raise ShapeError(f"mixture: weights {weights.shape} do not match expert stack {stack.shape}")
    out = _kernels.mixture_forward(weights.data, stack.data)

    def bw(g):
        return _kernels.mixture_backward(weights.data, stack.data, g)

    return _record(out, (weights, stack), bw, "mixture")


def insert_zero_diagonal(x: Tensor) -> Tensor:
    """Map ``[M, M-1]`` (row i lists columns != i in order) to ``[M, M]`` with a zero diagonal."""
    x = as_tensor(x)
    m = x.shape[0]
    if x.shape != (m, m - 1):
        raise ShapeError(f"insert_zero_diagonal expects [M, M-1], got {x.shape}")
    cols = np.array([[c for c in range(m) if c != r] for r in range(m)], dtype=np.int64).reshape(m, m - 1)
    rows = np.repeat(np.arange(m), m - 1).reshape(m, m - 1)
    out = np.zeros((m, m))
    out[rows, cols] = x.data
    return _record(out, (x,), lambda g: (g[rows, cols],), "insert_zero_diagonal")


def binary_cross_entropy(p: Tensor, y, weights=None) -> Tensor:
    """Sum of ``-w [y log p + (1-y) log(1-p)]`` with p clamped to [1e-7, 1-1e-7].

    Entries where the clamp is active get zero gradient.
    """
    p = as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: labels {y.shape} vs predictions {p.shape}")
    w = np.ones_like(y) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), y.shape)
    pc = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    losses = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    out = np.asarray((w * losses).sum())
    inside = (p.data > PROB_EPS) & (p.data < 1.0 - PROB_EPS)

    def bw(g):
        return (float(g) * w * inside * (pc - y) / (pc * (1.0 - pc)),)

    return _record(out, (p,), bw, "binary_cross_entropy")


# ----------------------------------------------------------------------------
# gradient checking


def numeric_grad(f: Callable[[], float], p: Tensor, eps: float = 1e-5, indices=None):
    """Central differences of ``f`` w.r.t. selected flat entries of ``p``.

    Returns ``(central, forward, backward)`` arrays, one value per index.
    """
    flat = p.data.reshape(-1)
    indices = np.arange(flat.size) if indices is None else np.asarray(indices)
    c, fw, bw = (np.empty(len(indices)) for _ in range(3))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        f0 = float(f())
        c[k] = (fp - fm) / (2 * eps)
        fw[k] = (fp - f0) / eps
        bw[k] = (f0 - fm) / eps
    return c, fw, bw


def relative_error(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f: Callable[[], Tensor], p: Tensor, eps: float = 1e-5, tol: float = 1e-4,
               indices=None, mask_kinks: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values. With
    ``mask_kinks`` an entry is skipped when its one-sided differences
    disagree beyond ``tol`` (the perturbation straddles a relu kink or the
    probability clamp), since the analytic gradient is one-sided there.
    ``tol`` only drives that masking; callers assert on the return value.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    p.grad = None
    loss = f()
    backward(loss)
    analytic = (np.zeros(p.size) if p.grad is None else p.grad.reshape(-1))
    indices = np.arange(p.size) if indices is None else np.asarray(indices)
    analytic = analytic[indices]
    central, fwd, bwd = numeric_grad(lambda: f().data, p, eps, indices)
    err = relative_error(analytic, central)
    if mask_kinks:
        keep = relative_error(fwd, bwd) <= max(tol, 100 * eps)
        err = err[keep]
    return float(err.max()) if err.size else 0.0


# ----------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float = 0.01):
        self.lr = lr
        self.step_count = 0

    def step(self, params):
        _check_finite(params)
        for p in params:
            if p.grad is not None:
                p.data -= self.lr * p.grad
        self.step_count += 1

    def state_dict(self) -> dict:
        return {"kind": "sgd", "lr": self.lr, "step": self.step_count, "tensors": {}}

    def load_state_dict(self, state: dict):
        self.lr = state["lr"]
        self.step_count = state["step"]


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params):
        _check_finite(params)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            if p.grad is None:
                continue
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        tensors = {f"m.{k}": v for k, v in self.m.items()}
        tensors.update({f"v.{k}": v for k, v in self.v.items()})
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step_count, "tensors": tensors}

    def load_state_dict(self, state: dict):
        self.lr, self.beta1, self.beta2, self.eps = state["lr"], state["beta1"], state["beta2"], state["eps"]
        self.step_count = state["step"]
        self.m = {k[2:]: np.array(v) for k, v in state["tensors"].items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state["tensors"].items() if k.startswith("v.")}


def _check_finite(params):
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {getattr(p, 'name', '?')!r}")


def make_optimizer(kind: str, **hyper):
    if kind == "sgd":
        return SGD(**hyper)
    if kind == "adam":
        return Adam(**hyper)
    raise ValueError(f"unknown optimizer {kind!r}")
