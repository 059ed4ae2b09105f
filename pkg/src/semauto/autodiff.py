"""Reverse-mode automatic differentiation on float32 numpy arrays.

A small tape-based engine: every differentiable primitive records a backward
rule on the active :class:`Tape`, and :func:`backward` replays the tape in
reverse to accumulate gradients. The primitive set is exactly what a small
transformer encoder-decoder plus a straight-through estimator needs, including
a :func:`stop_gradient` operator that is identity in the forward direction and
blocks all gradient flow in the backward direction.

Design constraints:
  * float32 data and gradients throughout
  * a fresh tape per forward pass, no persistent graph
  * any non-finite value produced by an op raises immediately
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base error for engine misuse or numerical failure."""


class ShapeMismatch(AutodiffError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {' and '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError):
    """Raised when an op produces NaN or Inf (data or gradient)."""


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of one forward pass.

    Ops append in execution order, which is a topological order by
    construction. One tape per thread may be active at a time.
    """

    def __init__(self):
        self.ops: list[_TapeOp] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise AutodiffError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self) -> int:
        return len(self.ops)


class _TapeOp:
    __slots__ = ("name", "inputs", "output", "backward_rule")

    def __init__(self, name, inputs, output, backward_rule):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class Tensor:
    """A float32 array with an optional gradient of identical shape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap op output, check finiteness, and record on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{name}: op produced non-finite values")
    arr = np.asarray(out_data, dtype=np.float32)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out._tape = None
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._tape = tape
        tape.ops.append(_TapeOp(name, tuple(inputs), out, backward_rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D x 2-D, N-D x 2-D, and equal-batch N-D x N-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch("matmul", ad.shape, bd.shape, detail="operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch("matmul", ad.shape, bd.shape, detail="inner dimensions differ")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeMismatch("matmul", ad.shape, bd.shape, detail="batch dimensions differ")
    out = ad @ bd

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _finish("matmul", out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finish("add", out, (a, b), rule)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch("multiply", a.shape, b.shape) from None

    def rule(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _finish("multiply", out, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    x = _as_tensor(x)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError(f"scale: constant {c!r} is not finite")
    return _finish("scale", x.data * np.float32(c), (x,), lambda g: (g * np.float32(c),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along one axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise AutodiffError("concat: need at least one tensor")
    base = list(ts[0].data.shape)
    for t in ts[1:]:
        other = list(t.data.shape)
        if len(other) != len(base) or any(
                i != (axis % len(base)) and other[i] != base[i] for i in range(len(base))):
            raise ShapeMismatch("concat", ts[0].shape, t.shape, detail=f"axis={axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", out, tuple(ts), rule)


def slice_(x: Tensor, index) -> Tensor:
    """Basic slice (ints and slice objects); gradient scatters back as zeros-fill."""
    x = _as_tensor(x)
    out = x.data[index]

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _finish("slice", out, (x,), rule)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a (v, d) table by an integer id array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeMismatch("embedding_lookup", table.shape, ids.shape,
                            detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise AutodiffError(
            f"embedding_lookup: id out of range for table with {table.data.shape[0]} rows")
    out = table.data[ids]

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _finish("embedding_lookup", out, (table,), rule)


def _softmax_data(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_data(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    y = _softmax_data(x.data)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", y, (x,), rule)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    x = _as_tensor(x)
    y = _log_softmax_data(x.data)

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", y, (x,), rule)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no learned affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = (x.data - mu) * istd

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (istd * (g - gm - xhat * gx),)

    return _finish("layer_norm", xhat, (x,), rule)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)
    mask = (x.data > 0).astype(np.float32)
    return _finish("relu", out, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, tuple(shape)) from None
    return _finish("reshape", out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes (reversal when axes is None)."""
    x = _as_tensor(x)
    out = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _finish("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(a % len(shape) for a in axes):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        return (_restore_axes(g, x.data.shape, axis, keepdims).astype(np.float32),)

    return _finish("reduce_sum", np.asarray(out), (x,), rule)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a % x.data.ndim] for a in ((axis,) if isinstance(axis, int) else axis)])

    def rule(g):
        full = _restore_axes(g, x.data.shape, axis, keepdims)
        return ((full / np.float32(count)).astype(np.float32),)

    return _finish("reduce_mean", np.asarray(out), (x,), rule)


def one_hot(ids, depth: int) -> Tensor:
    """Constant one-hot tensor; a scalar id yields a (depth,) vector."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= depth):
        raise AutodiffError(f"one_hot: id out of range for depth {depth}")
    return Tensor(np.eye(depth, dtype=np.float32)[ids])


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of integer targets over mask==1 positions.

    logits has shape (..., v); targets and mask have the leading shape.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    mask_arr = np.asarray(mask, dtype=np.float32)
    lead = logits.data.shape[:-1]
    if targets.shape != lead or mask_arr.shape != lead:
        raise ShapeMismatch("masked_cross_entropy", logits.shape, targets.shape,
                            detail="targets/mask must match logits leading shape")
    msum = mask_arr.sum()
    if msum <= 0:
        raise AutodiffError("masked_cross_entropy: mask selects no positions")
    logp = _log_softmax_data(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask_arr).sum() / msum

    def rule(g):
        p = np.exp(logp)
        hot = np.eye(logits.data.shape[-1], dtype=np.float32)[targets]
        return ((np.float32(g) * mask_arr[..., None] * (p - hot) / np.float32(msum)),)

    return _finish("masked_cross_entropy", np.asarray(loss), (logits,), rule)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; backward contributes exactly zero to the input."""
    x = _as_tensor(x)
    return _finish("stop_gradient", x.data.copy(), (x,),
                   lambda g: (np.zeros_like(x.data),))


# ---------------------------------------------------------------------------
# backward pass and optimizer


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(tensor) for every tensor on root's tape.

    Returns a map keyed by ``id(tensor)``; every tensor with requires_grad
    also gets its ``grad`` field populated (added onto any existing grad).
    """
    if root.data.size != 1:
        raise AutodiffError(f"backward: root must be scalar, got shape {root.shape}")
    tape = root._tape
    if tape is None:
        raise AutodiffError("backward: root is not attached to a tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    holders: dict[int, Tensor] = {id(root): root}
    for op in reversed(tape.ops):
        g_out = grads.get(id(op.output))
        if g_out is None:
            continue
        contribs = op.backward_rule(g_out)
        for t, c in zip(op.inputs, contribs):
            if c is None:
                continue
            c = np.asarray(c, dtype=np.float32).reshape(t.data.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
                holders[key] = t
    for key, t in holders.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("backward: non-finite gradient produced")
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
    return {key: grads[key] for key, t in holders.items() if t.requires_grad}


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              grads: Mapping[str, np.ndarray] | None = None) -> AdamState:
    """One Adam update, in place on params. Gradients default to each param's .grad."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise AutodiffError(f"adam_step: parameter {name!r} has no gradient")
        g = np.asarray(g, dtype=np.float32)
        if g.shape != p.data.shape:
            raise ShapeMismatch("adam_step", p.data.shape, g.shape, detail=name)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"adam_step: parameter {name!r} became non-finite")
    return state


def zero_grads(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None
