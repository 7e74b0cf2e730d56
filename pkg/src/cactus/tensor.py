"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Tape` records every primitive operation whose inputs are tracked on it;
`Tape.gradient(scalar)` then walks the recording backwards and returns the
gradient for every watched leaf. Tapes nest: operations always record on the
innermost active tape, and tensors tracked on an outer tape act as constants
inside an inner one. That property is what lets attack inner loops
differentiate with respect to inputs while the surrounding training tape
differentiates with respect to weights.

Conventions:
  * every Tensor wraps a float64 ndarray; `.data` may be rebound but must
    never be mutated in place once the tensor has entered a tape,
  * gradients use the same shape as the value they correspond to,
  * nondifferentiable points use the subgradient 0 (relu/abs at 0, clamp at
    its boundaries),
  * backward accumulation order is the reverse of recording order, so
    repeated runs produce bit-identical gradients.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ShapeError

_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class stop_recording:
    """Context manager that hides any active tape from operations inside it.

    Opening a new Tape inside the block re-enables recording for that tape
    only. Used by the attack inner loops so their trial evaluations never
    pollute a caller's tape.
    """

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not None:
            raise RuntimeError("tape stack corrupted: exiting stop_recording out of order")
        stack.pop()


class Tensor:
    """A float64 array plus its position (if any) on a recording tape."""

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self._tape = None
        self._node = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _item_error(self)

    def numpy(self) -> np.ndarray:
        """A defensive copy of the underlying array."""
        return np.array(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, tracked={self._node is not None})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, c):
        return scale(self, 1.0 / float(c))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return scale(tensor_sum(self, axis=axis), 1.0 / n)

    def reshape(self, shape):
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)


def _item_error(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.data.shape}")


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents: tuple, backward: "Callable | None") -> None:
        self.parents = parents
        self.backward = backward


class Tape:
    """Records operations for one reverse pass.

    Use as a context manager:

        with Tape() as tape:
            tape.watch(w)
            loss = f(w)
        grads = tape.gradient(loss)

    `gradient` may be called after the `with` block closes and may be called
    more than once; each call replays the same recording.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._watched: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def _register(self, node: _Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def watch(self, t: Tensor) -> None:
        """Mark `t` differentiable on this tape.

        Watching a tensor already produced by an operation on this tape is
        allowed and requests its (intermediate) gradient.
        """
        if not isinstance(t, Tensor):
            raise TypeError(f"watch() expects a Tensor, got {type(t).__name__}")
        if t._tape is self and t._node is not None:
            self._watched.setdefault(t._node, t)
            return
        idx = self._register(_Node((), None))
        t._tape = self
        t._node = idx
        self._watched[idx] = t

    def gradient(self, output: Tensor) -> dict:
        """Gradients of scalar `output` for every watched tensor.

        Returns a dict mapping each watched Tensor object to a Tensor of the
        same shape; tensors with no path to `output` map to zeros.
        """
        if not isinstance(output, Tensor) or output._tape is not self or output._node is None:
            raise ValueError("gradient target was not computed on this tape")
        if output.data.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {output.data.shape}")

        adjoint: dict[int, np.ndarray] = {output._node: np.ones_like(output.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        for idx in range(output._node, -1, -1):
            g = adjoint.pop(idx, None)
            if g is None:
                continue
            if idx in self._watched:
                leaf_grads[idx] = g
            node = self._nodes[idx]
            if node.backward is None:
                continue
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                if pid in adjoint:
                    adjoint[pid] = adjoint[pid] + pg
                else:
                    adjoint[pid] = pg

        out = {}
        for idx, t in self._watched.items():
            g = leaf_grads.get(idx)
            out[t] = Tensor(g if g is not None else np.zeros_like(t.data))
        return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap `out_data`; register a node if any input is tracked on the active tape.

    `backward(grad)` must return per-input gradients aligned with `inputs`
    (None for inputs that get no gradient).
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    parents = tuple(
        t._node if (isinstance(t, Tensor) and t._tape is tape and t._node is not None) else None
        for t in inputs
    )
    if all(p is None for p in parents):
        return out
    out._tape = tape
    out._node = tape._register(_Node(parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a, b, "add")
    a_shape, b_shape = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a, b, "sub")
    a_shape, b_shape = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return _record(a.data - b.data, (a, b), backward)


def neg(t) -> Tensor:
    t = _coerce(t)
    return _record(-t.data, (t,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape(a, b, "mul")
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _record(a_data * b_data, (a, b), backward)


def scale(t, c: float) -> Tensor:
    """Multiply by a python scalar (not differentiable in `c`)."""
    t = _coerce(t)
    c = float(c)
    return _record(t.data * c, (t,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands (numpy `@` semantics)."""
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, got {ad.shape} @ {bd.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0] if bd.ndim >= 1 else None
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dimensions disagree: {ad.shape} @ {bd.shape}")

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad  # 1-D @ 1-D -> scalar

    return _record(ad @ bd, (a, b), backward)


def relu(t) -> Tensor:
    t = _coerce(t)
    mask = t.data > 0.0

    def backward(g):
        return (g * mask,)

    return _record(np.maximum(t.data, 0.0), (t,), backward)


def absolute(t) -> Tensor:
    t = _coerce(t)
    sign = np.sign(t.data)

    def backward(g):
        return (g * sign,)

    return _record(np.abs(t.data), (t,), backward)


def clamp(t, lo, hi) -> Tensor:
    """Clip to [lo, hi]; lo/hi are constants (scalars or broadcastable arrays).

    Gradient is 1 strictly inside the interval and 0 at or beyond either
    boundary.
    """
    t = _coerce(t)
    lo_a = np.asarray(lo, dtype=np.float64)
    hi_a = np.asarray(hi, dtype=np.float64)
    if np.any(lo_a > hi_a):
        raise ValueError("clamp: lower bound exceeds upper bound")
    mask = (t.data > lo_a) & (t.data < hi_a)

    def backward(g):
        return (g * mask,)

    return _record(np.clip(t.data, lo_a, hi_a), (t,), backward)


def tensor_sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _coerce(t)
    in_shape = t.data.shape
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, in_shape),)

    return _record(np.sum(t.data, axis=axis, keepdims=keepdims), (t,), backward)


def reshape(t, shape) -> Tensor:
    t = _coerce(t)
    in_shape = t.data.shape
    out = np.reshape(t.data, shape)

    def backward(g):
        return (np.reshape(g, in_shape),)

    return _record(out, (t,), backward)


def log_sum_exp(t, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log(sum(exp(t))) along one axis."""
    t = _coerce(t)
    m = np.max(t.data, axis=axis, keepdims=True)
    exp_shift = np.exp(t.data - m)
    total = np.sum(exp_shift, axis=axis, keepdims=True)
    out = m + np.log(total)
    soft = exp_shift / total
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (g * soft,)

    return _record(out, (t,), backward)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    logits: (N, K); labels: (N,) ints in [0, K). reduction "mean" gives a
    scalar, "none" the per-sample vector.
    """
    logits = _coerce(logits)
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K), got {ld.shape}")
    y = np.asarray(labels)
    if y.shape != (ld.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {y.shape} does not match batch {ld.shape[0]}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        raise TypeError("softmax_cross_entropy: labels must be integers")
    n, k = ld.shape
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"softmax_cross_entropy: labels out of range [0, {k})")
    if reduction not in ("mean", "none"):
        raise ValueError(f"softmax_cross_entropy: unknown reduction {reduction!r}")

    m = np.max(ld, axis=1, keepdims=True)
    exp_shift = np.exp(ld - m)
    total = np.sum(exp_shift, axis=1, keepdims=True)
    soft = exp_shift / total
    per_sample = (m[:, 0] + np.log(total[:, 0])) - ld[np.arange(n), y]

    if reduction == "mean":
        out_data = np.asarray(per_sample.mean())

        def backward(g):
            gl = soft * (float(g) / n)
            gl[np.arange(n), y] -= float(g) / n
            return (gl,)

    else:
        out_data = per_sample

        def backward(g):
            gl = soft * g[:, None]
            gl[np.arange(n), y] -= g
            return (gl,)

    return _record(out_data, (logits,), backward)


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout.

    x: (N, C, H, W); w: (O, C, kh, kw); b: (O,) or None. `stride` and
    `padding` are ints or (h, w) pairs. Dispatches to the compiled kernel
    backend when available.
    """
    x, w = _coerce(x), _coerce(w)
    if b is not None:
        b = _coerce(b)
    sh, sw = _pair(stride, "stride")
    ph, pw = _pair(padding, "padding")
    xd, wd = x.data, w.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be (N, C, H, W), got {xd.shape}")
    if wd.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (O, C, kh, kw), got {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {xd.shape[1]} != weight channels {wd.shape[1]}"
        )
    if b is not None and b.data.shape != (wd.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({wd.shape[0]},)")
    n, c, h, width = xd.shape
    o, _, kh, kw = wd.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (width + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0 or h + 2 * ph < kh or width + 2 * pw < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{width} with padding ({ph}, {pw})"
        )

    xd_c = np.ascontiguousarray(xd)
    wd_c = np.ascontiguousarray(wd)
    out = _kernels.conv2d_forward(xd_c, wd_c, sh, sw, ph, pw)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv2d_backward_x(g, wd_c, h, width, sh, sw, ph, pw)
        gw = _kernels.conv2d_backward_w(g, xd_c, kh, kw, sh, sw, ph, pw)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, backward)


def _pair(v, name: str) -> tuple:
    if isinstance(v, int):
        if v < 0 or (name == "stride" and v == 0):
            raise ValueError(f"conv2d: invalid {name} {v}")
        return (v, v)
    a, b = v
    if a < 0 or b < 0 or (name == "stride" and (a == 0 or b == 0)):
        raise ValueError(f"conv2d: invalid {name} {v}")
    return (int(a), int(b))


__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "stop_recording",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "relu",
    "absolute",
    "clamp",
    "tensor_sum",
    "reshape",
    "log_sum_exp",
    "softmax_cross_entropy",
    "conv2d",
]
