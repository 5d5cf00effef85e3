"""Dense-tensor numeric core with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float32 or float64). Operations
executed while a Tape is active are recorded with a backward rule; calling
Tape.backward(loss) runs the exact reverse of the recording order and
accumulates sum-over-paths gradients into every attached leaf's .grad.

There is deliberately no general broadcasting: binary ops require exact
shape match or a scalar operand, and broadcast_to() makes expansion
explicit so every backward rule stays a plain reduction.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []

# NaN/Inf detection after every forward op. On by default in tests, turned
# off for training speed via set_debug_checks(False).
_DEBUG_CHECKS = True


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


@contextlib.contextmanager
def debug_checks(enabled: bool):
    global _DEBUG_CHECKS
    prev = _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled
    try:
        yield
    finally:
        _DEBUG_CHECKS = prev


class AutodiffError(RuntimeError):
    pass


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._recorded = False

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Records ops in order; backward replays them exactly reversed."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _TAPES and _TAPES[-1] is self
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._leaves.clear()
        self._leaf_ids.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every attached leaf.

        The tape is consumed: a second backward requires re-recording.
        """
        if loss.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise AutodiffError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not _attached(parent):
                    continue
                if pg.shape != parent.data.shape:
                    pg = pg.reshape(parent.data.shape)
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg.astype(parent.data.dtype, copy=True)
                else:
                    acc += pg
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = g
            else:
                leaf.grad = leaf.grad + g
        self.reset()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _attached(t: Tensor) -> bool:
    return t._recorded or t.requires_grad


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record_op(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str = "op",
) -> Tensor:
    """Create the output tensor of a primitive and record it when needed.

    backward_fn receives the upstream gradient (same shape as out_data) and
    must return one gradient-or-None per parent. Other modules use this to
    register their own primitives (bilinear sampling, conv, compositing).
    """
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values in output of '{name}'")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(_attached(p) for p in parents):
        out._recorded = True
        tape._nodes.append(_Node(out, tuple(parents), backward_fn))
        for p in parents:
            if p.requires_grad and not p._recorded and id(p) not in tape._leaf_ids:
                tape._leaf_ids.add(id(p))
                tape._leaves.append(p)
    return out


def _binary_prep(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise AutodiffError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")
    return a, b


def _reduce_for(parent: Tensor, g: np.ndarray) -> np.ndarray:
    if parent.data.shape == g.shape:
        return g
    # scalar operand: sum over all positions
    return np.sum(g, dtype=g.dtype).reshape(parent.data.shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    out = a.data + b.data

    def bw(g):
        return _reduce_for(a, g), _reduce_for(b, g)

    return record_op(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    out = a.data - b.data

    def bw(g):
        return _reduce_for(a, g), _reduce_for(b, -g)

    return record_op(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    out = a.data * b.data

    def bw(g):
        return _reduce_for(a, g * b.data), _reduce_for(b, g * a.data)

    return record_op(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    if _DEBUG_CHECKS and np.any(b.data == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    out = a.data / b.data

    def bw(g):
        return _reduce_for(a, g / b.data), _reduce_for(b, -g * out / b.data)

    return record_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (-g,)

    return record_op(-a.data, (a,), bw, "neg")


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return record_op(out, (a,), bw, "power")


# -- matmul ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product. Supports (..., m, k) @ (k, n) and (..., m, k) @ (..., k, n)
    with identical leading dims."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutodiffError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul inner-dim mismatch {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise AutodiffError(f"matmul leading dims must match exactly: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim - 1))))
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record_op(out, (a, b), bw, "matmul")


# -- unary nonlinearities -----------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return record_op(out, (a,), bw, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if _DEBUG_CHECKS and np.any(a.data <= 0):
        raise ValueError("log of non-positive input")
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return record_op(out, (a,), bw, "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if _DEBUG_CHECKS and np.any(a.data < 0):
        raise ValueError("sqrt of negative input")
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out),)

    return record_op(out, (a,), bw, "sqrt")


def sin(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (g * np.cos(a.data),)

    return record_op(np.sin(a.data), (a,), bw, "sin")


def cos(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (-g * np.sin(a.data),)

    return record_op(np.cos(a.data), (a,), bw, "cos")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))

    def bw(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (a,), bw, "sigmoid")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))

    def bw(g):
        return (g / (1.0 + np.exp(-np.clip(x, -60.0, 60.0))),)

    return record_op(out.astype(x.dtype), (a,), bw, "softplus")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0),)

    return record_op(out, (a,), bw, "relu")


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return record_op(out.copy(), (a,), bw, "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")


def broadcast_to(a, shape) -> Tensor:
    """Explicit expansion (the only broadcasting in this core)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    in_shape = a.data.shape
    pad = len(shape) - len(in_shape)
    if pad < 0:
        raise AutodiffError(f"cannot broadcast {in_shape} to {shape}")
    padded = (1,) * pad + in_shape
    sum_axes = tuple(i for i, (s_in, s_out) in enumerate(zip(padded, shape)) if s_in != s_out)
    for i, (s_in, s_out) in enumerate(zip(padded, shape)):
        if s_in != s_out and s_in != 1:
            raise AutodiffError(f"cannot broadcast {in_shape} to {shape}")

    def bw(g):
        gg = g.sum(axis=sum_axes, keepdims=True) if sum_axes else g
        return (gg.reshape(in_shape),)

    return record_op(np.ascontiguousarray(out), (a,), bw, "broadcast_to")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(idx)]))
        return pieces

    return record_op(out, tuple(tensors), bw, "concat")


def slice_(a, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return record_op(np.ascontiguousarray(out), (a,), bw, "slice")


def gather(a, indices, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise AutodiffError("gather expects a 1-D index vector")
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return record_op(out, (a,), bw, "gather")


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return record_op(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def std(a, axis: int, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Population standard deviation along one axis (tape-composed)."""
    m = mean(a, axis=axis, keepdims=True)
    centered = sub(a, broadcast_to(m, a.shape))
    var = mean(mul(centered, centered), axis=axis, keepdims=keepdims)
    if eps:
        var = add(var, eps)
    return sqrt(var)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    # detached max shift: constant w.r.t. the tape, gradient unaffected
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, broadcast_to(shift, a.shape)))
    denom = sum_(e, axis=axis, keepdims=True)
    return div(e, broadcast_to(denom, a.shape))


def layer_norm(a, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis, then apply an affine map of that axis' width."""
    a = _as_tensor(a)
    m = mean(a, axis=axis, keepdims=True)
    centered = sub(a, broadcast_to(m, a.shape))
    var = mean(mul(centered, centered), axis=axis, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    normed = mul(centered, broadcast_to(inv, a.shape))
    g = broadcast_to(reshape(gain, _affine_shape(a.shape, axis)), a.shape)
    b = broadcast_to(reshape(bias, _affine_shape(a.shape, axis)), a.shape)
    return add(mul(normed, g), b)


def _affine_shape(shape, axis):
    axis = axis % len(shape)
    return tuple(shape[i] if i == axis else 1 for i in range(len(shape)))


def stop_gradient(a) -> Tensor:
    """Identity forward; zero contribution to ancestors in backward."""
    a = _as_tensor(a)
    return Tensor(a.data.copy())
