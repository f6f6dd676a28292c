"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations executed inside an active :class:`Tape` context are recorded in
execution order.  :func:`backward` walks the tape in reverse and accumulates
gradients into every ``requires_grad`` tensor reachable from the loss.

    >>> with Tape() as tape:
    ...     x = Tensor([1.0, 2.0], requires_grad=True)
    ...     loss = (x * x).sum()
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4.], dtype=float32)

Outside a tape, operations run forward only and produce constant tensors.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, GraphError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "precision",
    "default_dtype",
    "conv2d",
    "maxpool2d",
    "relu",
    "linear",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "kl_divergence",
    "dropout",
    "pick",
    "stable_log_softmax",
]

_local = threading.local()
_ids = itertools.count(1)


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    float32 is the working precision; float64 exists for gradient checking.
    """
    previous = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, even inside an enclosing tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """N-dimensional array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; every operator is a recorded op
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are appended in topological (execution) order.  ``guided_relu`` switches
    every ReLU backward rule to the guided-backpropagation mask.
    ``retain_grads=False`` skips storing gradients on intermediate results
    (leaves still receive theirs), which training loops use for speed.
    """

    def __init__(self, guided_relu: bool = False, retain_grads: bool = True):
        self.records: list[_Record] = []
        self.guided_relu = guided_relu
        self.retain_grads = retain_grads
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def contains(self, t: Tensor) -> bool:
        return t.node_id is not None and t.node_id in self._outputs

    def clear(self) -> None:
        """Drop all records; grads of recorded tensors are invalidated."""
        for rec in self.records:
            for t in (*rec.inputs, rec.output):
                if t is None:
                    continue
                t.grad = None
                if t.data.flags.owndata:
                    t.data.flags.writeable = True
        self.records.clear()
        self._outputs.clear()

    def _record(self, op, inputs, out, backward_fn) -> None:
        for t in inputs:
            if t is not None:
                if t.node_id is None:
                    t.node_id = next(_ids)
                if t.data.flags.writeable:
                    t.data.flags.writeable = False
        out.node_id = next(_ids)
        self._outputs.add(out.node_id)
        self.records.append(_Record(tuple(inputs), out, backward_fn, op))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t is not None and t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    if needs:
        tape._record(op, inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls; zero them between optimizer steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.contains(loss):
        raise GraphError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {loss.node_id: loss}
    prev_guided = getattr(_local, "guided", False)
    _local.guided = tape.guided_relu
    try:
        for rec in reversed(tape.records):
            g = grads.pop(rec.output.node_id, None)
            if g is None:
                continue
            if tape.retain_grads:
                _store(rec.output, g)
            in_grads = rec.backward_fn(g)
            for t, gi in zip(rec.inputs, in_grads):
                if t is None or gi is None or not t.requires_grad:
                    continue
                if t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + gi
                else:
                    grads[t.node_id] = gi
                    tensors[t.node_id] = t
    finally:
        _local.guided = prev_guided
    # leaves: whatever was never consumed as a record output
    for nid, g in grads.items():
        _store(tensors[nid], g)


def _store(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _guided() -> bool:
    return getattr(_local, "guided", False)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a trailing-axis bias or a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    if out.shape != a.shape:
        raise ShapeError(f"add cannot broadcast {b.shape} into {a.shape}")

    def bw(g):
        gb = g
        if b.shape != g.shape:
            lead = g.ndim - b.ndim
            gb = g.sum(axis=tuple(range(lead))) if lead else g
            keep = tuple(i for i, n in enumerate(b.shape) if n == 1 and gb.shape[i] != 1)
            if keep:
                gb = gb.sum(axis=keep, keepdims=True)
        return g, gb

    return _finish("add", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or tensor times scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = a.data.dtype.type(b)
        return _finish("scale", a.data * s, (a,), lambda g: (g * s,))
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _finish("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _finish("sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _finish("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def pick(logits: Tensor, index) -> Tensor:
    """Select ``logits[n, index[n]]`` for every row; returns shape [N]."""
    idx = np.broadcast_to(np.asarray(index, dtype=np.int64), (logits.shape[0],))
    rows = np.arange(logits.shape[0])
    out = logits.data[rows, idx]

    def bw(g):
        gl = np.zeros_like(logits.data)
        np.add.at(gl, (rows, idx), g)
        return (gl,)

    return _finish("pick", out, (logits,), bw)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0.

    Under a guided tape the backward also zeroes negative incoming gradient.
    """
    mask = x.data > 0

    def bw(g):
        if _guided():
            return (g * (mask & (g > 0)),)
        return (g * mask,)

    return _finish("relu", x.data * mask, (x,), bw)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    m = keep.astype(x.data.dtype) * scale
    return _finish("dropout", x.data * m, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------- dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return _finish("linear", out, (x, weight, bias), bw)


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Patches as [N, C·K·K, H_out·W_out] so a batched matmul yields NCHW."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and [C_out, C_in, K, K] weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {cin}")
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels are supported, got {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape} (padding {padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def bw(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        if not x.requires_grad:
            return None, gw, gb
        gcols = np.matmul(wmat.T, g3).reshape(n, c, k, k, ho, wo)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    return _finish("conv2d", out, (x, weight, bias), bw)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max over k×k windows.  Ties send the gradient to the lowest flat index."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} exceeds input {x.shape}")
    if stride == k and h % k == 0 and w % k == 0:
        return _maxpool_tiled(x, k)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        sel = (np.arange(k * k, dtype=np.int64) == arg[..., None]) * g[..., None]
        sel = sel.reshape(n, c, ho, wo, k, k)
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += sel[..., i, j]
        return (gx,)

    return _finish("maxpool2d", out, (x,), bw)


def _maxpool_tiled(x: Tensor, k: int) -> Tensor:
    """Non-overlapping windows: the max of k² strided views, ties to the first view."""
    views = [x.data[:, :, i::k, j::k] for i in range(k) for j in range(k)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def bw(g):
        gx = np.zeros_like(x.data)
        free = np.ones(out.shape, dtype=bool)
        for idx, v in enumerate(views):
            hit = free & (v == out)
            gx[:, :, idx // k::k, idx % k::k] = g * hit
            free &= ~hit
        return (gx,)

    return _finish("maxpool2d", out, (x,), bw)


# ---------------------------------------------------------------- probabilities


def _check_finite(z: np.ndarray, op: str) -> None:
    bad = ~np.isfinite(z)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"{op}: non-finite value at index {idx}")


def stable_log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    _check_finite(logits.data, "softmax")
    e = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", s, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    _check_finite(logits.data, "log_softmax")
    out = stable_log_softmax(logits.data)
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", out, (logits,), bw)


def _reduce_scale(n: int, reduction: str, dtype) -> np.floating:
    if reduction == "mean":
        return dtype.type(1.0 / n)
    if reduction == "sum":
        return dtype.type(1.0)
    raise ConfigError(f"unknown reduction {reduction!r}")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or summed) negative log-likelihood of integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: label out of range [0, {k})")
    _check_finite(logits.data, "cross_entropy")
    ls = stable_log_softmax(logits.data)
    rows = np.arange(n)
    scale = _reduce_scale(n, reduction, ls.dtype)
    out = np.asarray(-ls[rows, labels].sum() * scale, dtype=ls.dtype)

    def bw(g):
        d = np.exp(ls)
        d[rows, labels] -= 1
        return (d * (g * scale),)

    return _finish("cross_entropy", out, (logits,), bw)


def kl_divergence(p_log_target: Tensor, q_logits: Tensor, reduction: str = "mean") -> Tensor:
    """KL(p ‖ softmax(q_logits)) averaged (or summed) over rows.

    ``p_log_target`` holds log-probabilities and is treated as a constant:
    gradients flow to ``q_logits`` only.
    """
    if p_log_target.shape != q_logits.shape or q_logits.ndim != 2:
        raise ShapeError(f"kl_divergence shapes differ: {p_log_target.shape} vs {q_logits.shape}")
    _check_finite(q_logits.data, "kl_divergence")
    logp = p_log_target.data.astype(q_logits.data.dtype, copy=False)
    p = np.exp(logp)
    logq = stable_log_softmax(q_logits.data)
    n = q_logits.shape[0]
    terms = np.where(p > 0, p * (logp - logq), 0.0)
    scale = _reduce_scale(n, reduction, logq.dtype)
    out = np.asarray(terms.sum() * scale, dtype=logq.dtype)

    def bw(g):
        return None, (np.exp(logq) - p) * (g * scale)

    return _finish("kl_divergence", out, (p_log_target, q_logits), bw)
