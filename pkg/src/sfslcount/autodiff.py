"""Minimal define-by-run reverse-mode differentiation on float64 numpy arrays.

A :class:`Tape` records every op applied while it is active. Tensors that
carry ``requires_grad=True`` become leaves the first time a recording op
touches them; everything else is a constant.  ``Tape.backward`` walks the
recorded nodes once, in reverse insertion order, accumulating adjoints.

    with Tape() as tape:
        y = (x * x).sum()
    grads = tape.backward(y)
    tape.grad(x)
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DIV_GUARD = 1e-12
COSINE_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class Tensor:
    """Immutable float64 array, optionally attached to a recording tape."""

    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.node: tuple[Tape, int] | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if not arr.flags.owndata or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
            if not arr.flags.owndata:
                arr = arr.copy()
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other: "Tensor") -> "Tensor":
        return apply_op("add", [self, other])

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply_op("sub", [self, other])

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, (int, float)):
            return apply_op("scale", [self], factor=float(other))
        return apply_op("mul", [self, other])

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return apply_op("div", [self, other])

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply_op("matmul", [self, other])

    def __neg__(self) -> "Tensor":
        return apply_op("scale", [self], factor=-1.0)

    def sum(self, axis: int | None = None) -> "Tensor":
        return apply_op("sum", [self], axis=axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return apply_op("mean", [self], axis=axis)

    def relu(self) -> "Tensor":
        return apply_op("relu", [self])

    def exp(self) -> "Tensor":
        return apply_op("exp", [self])

    def sqrt(self) -> "Tensor":
        return apply_op("sqrt", [self])

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_op("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes: int) -> "Tensor":
        return apply_op("transpose", [self], axes=tuple(axes) or None)


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _stack() -> list["Tape"]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


@dataclass(slots=True)
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    ctx: Any
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of the ops executed while the tape is active."""

    nodes: list[Node] = field(default_factory=list)
    _leaves: dict[int, tuple[int, Tensor]] = field(default_factory=dict)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _stack().remove(self)

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf and return its node id."""
        hit = self._leaves.get(id(t))
        if hit is not None:
            return hit[0]
        idx = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, t.shape))
        self._leaves[id(t)] = (idx, t)
        return idx

    def _input_id(self, t: Tensor) -> int | None:
        if t.node is not None and t.node[0] is self:
            return t.node[1]
        if t.requires_grad:
            return self.watch(t)
        return None

    def node_id(self, t: Tensor) -> int | None:
        if t.node is not None and t.node[0] is self:
            return t.node[1]
        hit = self._leaves.get(id(t))
        return hit[0] if hit is not None else None

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Accumulate d(loss)/d(node) for every node and return the leaf table."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        root = self.node_id(loss)
        if root is None:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {root: np.ones(loss.shape)}
        for idx in range(root, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.kind == "leaf":
                continue
            needs = tuple(i is not None for i in node.inputs)
            in_grads = _OPS[node.kind].backward(g, node.ctx, needs)
            for i, gi in zip(node.inputs, in_grads):
                if i is None or gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(f"non-finite gradient flowing out of {node.kind!r} (node {idx})")
                prev = grads.get(i)
                grads[i] = gi if prev is None else prev + gi
        self.grads = grads
        return {i: Tensor._wrap(np.asarray(grads[i], dtype=np.float64)) for i, _ in self._leaves.values() if i in grads}

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last ``backward`` call w.r.t. ``t`` (zeros if unreached)."""
        idx = self.node_id(t)
        if idx is None or idx not in self.grads:
            return np.zeros(t.shape)
        return np.asarray(self.grads[idx], dtype=np.float64).reshape(t.shape)


def backward(loss: Tensor) -> dict[int, Tensor]:
    if loss.node is None:
        raise ValueError("loss is not attached to a tape")
    return loss.node[0].backward(loss)


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------


@dataclass
class OpDef:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[np.ndarray, Any, tuple[bool, ...]], tuple[np.ndarray | None, ...]]
    arity: int | None


_OPS: dict[str, OpDef] = {}


def _op(kind: str, arity: int | None):
    def deco(fwd):
        def register(bwd):
            _OPS[kind] = OpDef(fwd, bwd, arity)
            return bwd

        fwd.backward = register
        return fwd

    return deco


def op_kinds() -> list[str]:
    return sorted(_OPS)


def apply_op(kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Run op ``kind`` forward and record it on the active tape, if any."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if op.arity is not None and len(inputs) != op.arity:
        raise ShapeError(f"{kind} takes {op.arity} inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    with np.errstate(over="ignore", invalid="ignore"):  # reported below as NonFiniteError
        out, ctx = op.forward(*arrays, **attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        ids = tuple(tape._input_id(t) for t in inputs)
        if any(i is not None for i in ids):
            tape.nodes.append(Node(kind, ids, ctx, result.shape))
            result.node = (tape, len(tape.nodes) - 1)
            result.requires_grad = True
    return result


@contextlib.contextmanager
def inject_adjoint_fault(kind: str, factor: float) -> Iterator[None]:
    """Temporarily scale every input adjoint of ``kind`` by ``factor``."""
    op = _OPS[kind]
    original = op.backward

    def faulty(g, ctx, needs):
        return tuple(None if gi is None else gi * factor for gi in original(g, ctx, needs))

    op.backward = faulty
    try:
        yield
    finally:
        op.backward = original


def _same_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------


@_op("add", 2)
def _add_f(a, b):
    _same_shape("add", a, b)
    return a + b, None


@_add_f.backward
def _add_b(g, ctx, needs):
    return g, g


@_op("sub", 2)
def _sub_f(a, b):
    _same_shape("sub", a, b)
    return a - b, None


@_sub_f.backward
def _sub_b(g, ctx, needs):
    return g, -g


@_op("mul", 2)
def _mul_f(a, b):
    _same_shape("mul", a, b)
    return a * b, (a, b)


@_mul_f.backward
def _mul_b(g, ctx, needs):
    a, b = ctx
    return (g * b if needs[0] else None), (g * a if needs[1] else None)


@_op("div", 2)
def _div_f(a, b):
    _same_shape("div", a, b)
    if np.any(np.abs(b) < DIV_GUARD):
        raise ZeroDivisionError(f"div: denominator has elements with |x| < {DIV_GUARD:g}")
    return a / b, (a, b)


@_div_f.backward
def _div_b(g, ctx, needs):
    a, b = ctx
    ga = g / b if needs[0] else None
    gb = -g * a / (b * b) if needs[1] else None
    return ga, gb


@_op("scale", 1)
def _scale_f(a, factor: float):
    return a * factor, factor


@_scale_f.backward
def _scale_b(g, factor, needs):
    return (g * factor,)


@_op("relu", 1)
def _relu_f(a):
    mask = a > 0
    return np.where(mask, a, 0.0), mask


@_relu_f.backward
def _relu_b(g, mask, needs):
    return (np.where(mask, g, 0.0),)


@_op("exp", 1)
def _exp_f(a):
    out = np.exp(a)
    return out, out


@_exp_f.backward
def _exp_b(g, out, needs):
    return (g * out,)


@_op("sqrt", 1)
def _sqrt_f(a):
    if np.any(a < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a)
    return out, out


@_sqrt_f.backward
def _sqrt_b(g, out, needs):
    if np.any(out < DIV_GUARD):
        raise ZeroDivisionError("sqrt: derivative undefined at 0")
    return (g / (2.0 * out),)


# reductions and shape ------------------------------------------------------------


def _norm_axis(axis: int | None, ndim: int) -> int | None:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


@_op("sum", 1)
def _sum_f(a, axis: int | None = None):
    axis = _norm_axis(axis, a.ndim)
    return np.sum(a, axis=axis), (a.shape, axis)


@_sum_f.backward
def _sum_b(g, ctx, needs):
    shape, axis = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


@_op("mean", 1)
def _mean_f(a, axis: int | None = None):
    axis = _norm_axis(axis, a.ndim)
    count = a.size if axis is None else a.shape[axis]
    return np.mean(a, axis=axis), (a.shape, axis, count)


@_mean_f.backward
def _mean_b(g, ctx, needs):
    shape, axis, count = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, shape).copy(),)


@_op("concat", None)
def _concat_f(*arrays, axis: int = 0):
    if not arrays:
        raise ShapeError("concat: no inputs")
    ref = arrays[0]
    axis = _norm_axis(axis, ref.ndim)
    for a in arrays[1:]:
        if a.ndim != ref.ndim or any(a.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis):
            raise ShapeError(f"concat: shape mismatch {ref.shape} vs {a.shape} along axis {axis}")
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), (axis, np.cumsum(sizes)[:-1])


@_concat_f.backward
def _concat_b(g, ctx, needs):
    axis, cuts = ctx
    return tuple(np.split(g, cuts, axis=axis))


@_op("transpose", 1)
def _transpose_f(a, axes: tuple[int, ...] | None = None):
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need ndim >= 2, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.transpose(a, axes), np.argsort(axes)


@_transpose_f.backward
def _transpose_b(g, inverse, needs):
    return (np.transpose(g, inverse),)


@_op("reshape", 1)
def _reshape_f(a, shape: tuple[int, ...]):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return out, a.shape


@_reshape_f.backward
def _reshape_b(g, shape, needs):
    return (g.reshape(shape),)


@_op("broadcast", 1)
def _broadcast_f(a, shape: tuple[int, ...]):
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return out, a.shape


@_broadcast_f.backward
def _broadcast_b(g, shape, needs):
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    keep = tuple(d for d, n in enumerate(shape) if n == 1 and g.shape[d] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return (g,)


@_op("take", 1)
def _take_f(a, indices: Sequence[int], axis: int = 0):
    axis = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= a.shape[axis]:
        raise ShapeError(f"take: indices out of range for axis of size {a.shape[axis]}")
    return np.take(a, idx, axis=axis), (a.shape, idx, axis)


@_take_f.backward
def _take_b(g, ctx, needs):
    shape, idx, axis = ctx
    out = np.zeros(shape)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, idx, np.moveaxis(g, axis, 0))
    return (out,)


# linear algebra ------------------------------------------------------------


@_op("matmul", 2)
def _matmul_f(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    return a @ b, (a, b)


@_matmul_f.backward
def _matmul_b(g, ctx, needs):
    a, b = ctx
    ga = g @ np.swapaxes(b, -1, -2) if needs[0] else None
    gb = None
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


@_op("softmax-rows", 1)
def _softmax_f(a):
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    s = z / z.sum(axis=-1, keepdims=True)
    return s, s


@_softmax_f.backward
def _softmax_b(g, s, needs):
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


@_op("conv2d", None)
def _conv_f(x, w, *bias, stride: int = 1, padding: int = 0):
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected CHW/NCHW input and OCkk kernels, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {ci}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: zero-size output")
    if bias and bias[0].shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias[0].shape} != ({o},)")
    # channels-last im2col: each row is one output position, columns ordered (kh, kw, c)
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c))
    xp[:, padding : padding + h, padding : padding + wd, :] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wm = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols @ wm
    if bias:
        out += bias[0]
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    ctx = (cols, wm, xp.shape, x.shape, w.shape, stride, padding, squeeze, bool(bias))
    return (out[0] if squeeze else out), ctx


@_conv_f.backward
def _conv_b(g, ctx, needs):
    cols, wm, xp_shape, x_shape, w_shape, stride, padding, squeeze, has_bias = ctx
    if squeeze:
        g = g[None]
    n, o, ho, wo = g.shape
    _, c, kh, kw = w_shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (cols.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1) if needs[1] else None
    gx = None
    if needs[0]:
        dcols = (gm @ wm.T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[:, :, :, i, j, :]
        h, wd = x_shape[2], x_shape[3]
        gx = dxp[:, padding : padding + h, padding : padding + wd, :].transpose(0, 3, 1, 2)
        if squeeze:
            gx = gx[0]
    out = (gx, gw)
    if has_bias:
        out += (gm.sum(axis=0) if needs[2] else None,)
    return out


def _seq_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed left-to-right reduction over the last axis; keeps results bit-identical
    # to a scalar loop regardless of the leading shape
    acc = a[..., 0] * b[..., 0]
    for j in range(1, a.shape[-1]):
        acc = acc + a[..., j] * b[..., j]
    return acc


@_op("cosine", 2)
def _cosine_f(f, v, eps: float = COSINE_EPS):
    if v.ndim != 1 or f.shape[-1:] != v.shape:
        raise ShapeError(f"cosine: feature shape {f.shape} incompatible with reference {v.shape}")
    dot = _seq_dot(f, v)
    nf = np.sqrt(_seq_dot(f, f))
    nv = np.sqrt(_seq_dot(v, v))
    den = np.maximum(nf * nv, eps)
    out = dot / (2.0 * den) + 0.5
    return out, (f, v, dot, nf, nv, den, eps)


@_cosine_f.backward
def _cosine_b(g, ctx, needs):
    f, v, dot, nf, nv, den, eps = ctx
    live = nf * nv > eps
    safe_nf = np.where(live, nf, 1.0)
    safe_nv = nv if nv > 0 else 1.0
    ge = (g / (2.0 * den))[..., None]
    gf = gv = None
    if needs[0]:
        radial = np.where(live, dot / (safe_nf * safe_nf), 0.0)[..., None]
        gf = ge * (v - radial * f)
    if needs[1]:
        radial = np.where(live, dot / (safe_nv * safe_nv), 0.0)[..., None]
        gv = (ge * (f - radial * v)).reshape(-1, v.shape[0]).sum(axis=0)
    return gf, gv


# ---------------------------------------------------------------------------
# functional helpers
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_op("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_op("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_op("mul", [a, b])


def div(a: Tensor, b: Tensor) -> Tensor:
    return apply_op("div", [a, b])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_op("matmul", [a, b])


def relu(a: Tensor) -> Tensor:
    return apply_op("relu", [a])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_op("concat", list(tensors), axis=axis)


def softmax_rows(a: Tensor) -> Tensor:
    return apply_op("softmax-rows", [a])


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_op("broadcast", [a], shape=tuple(shape))


def take(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    return apply_op("take", [a], indices=list(indices), axis=axis)


def square(a: Tensor) -> Tensor:
    return apply_op("mul", [a, a])


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over leading axes."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, broadcast_to(bias, out.shape))
    return out


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    inputs = [x, kernels] if bias is None else [x, kernels, bias]
    return apply_op("conv2d", inputs, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


class GradCheckError(NonFiniteError):
    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


def grad_check(
    function: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``max_coords`` limits the check to a seeded random subset of coordinates.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = function(leaf)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: function must return a scalar, got {out.shape}")
    if out.node is None:
        analytic = np.zeros(base.shape)
    else:
        tape.backward(out)
        analytic = tape.grad(leaf)

    flat = np.arange(base.size)
    if max_coords is not None and max_coords < base.size:
        flat = np.sort(np.random.default_rng(seed).choice(base.size, size=max_coords, replace=False))

    worst = 0.0
    for k in flat:
        index = np.unravel_index(k, base.shape)
        vals = []
        for sign in (1.0, -1.0):
            probe = base.copy()
            probe[index] += sign * step
            try:
                v = function(Tensor(probe)).item()
            except NonFiniteError as exc:
                raise GradCheckError(f"non-finite value at coordinate {index}", index) from exc
            if not np.isfinite(v):
                raise GradCheckError(f"non-finite value at coordinate {index}", index)
            vals.append(v)
        fd = (vals[0] - vals[1]) / (2.0 * step)
        err = abs(analytic[index] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
