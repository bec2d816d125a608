"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Usage::

    with Tape() as tape:
        y = matmul(x, w)
        loss = mse_reduce(y, target)
    grads = backward(loss, tape)

Only tensors created while a tape is active (and depending on at least one
``requires_grad`` input) are recorded.  Broadcasting is not supported apart
from ``scale`` (scalar times tensor) and the explicit ``bias_add`` primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class Tensor:
    """A dense array of 64-bit floats, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = array
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    primitive: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: object
    attrs: dict


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they are evaluated, so inputs always precede the
    node consuming them.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


# ---------------------------------------------------------------------------
# primitives: forward(*arrays, **attrs) -> (out, saved); vjp(g, saved, *arrays, **attrs)

@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable
    arity: int | None  # None: variadic


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, arity: int | None):
    def deco(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.vjp, arity)
        return cls
    return deco


def _shape_fail(prim: str, msg: str) -> None:
    raise ShapeError(f"{prim}: {msg}")


@_register("matmul", 2)
class _MatMul:
    @staticmethod
    def forward(a, b):
        if a.ndim not in (2, 3) or a.ndim != b.ndim:
            _shape_fail("matmul", f"expected two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
        if a.shape[:-2] != b.shape[:-2]:
            _shape_fail("matmul", f"batch dims differ: {a.shape[:-2]} vs {b.shape[:-2]}")
        if a.shape[-1] != b.shape[-2]:
            _shape_fail("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(g, saved, a, b):
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


@_register("add", 2)
class _Add:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            _shape_fail("add", f"operand shapes differ: {a.shape} vs {b.shape}")
        return a + b, None

    @staticmethod
    def vjp(g, saved, a, b):
        return g, g


@_register("bias_add", 2)
class _BiasAdd:
    @staticmethod
    def forward(x, b):
        if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
            _shape_fail("bias_add", f"bias {b.shape} does not match last dim of {x.shape}")
        return x + b, None

    @staticmethod
    def vjp(g, saved, x, b):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)


@_register("scale", 1)
class _Scale:
    @staticmethod
    def forward(x, factor):
        return x * factor, None

    @staticmethod
    def vjp(g, saved, x, factor):
        return (g * factor,)


@_register("relu", 1)
class _Relu:
    @staticmethod
    def forward(x):
        return np.maximum(x, 0.0), None

    @staticmethod
    def vjp(g, saved, x):
        return (g * (x > 0),)


_GELU_C = math.sqrt(2.0 / math.pi)


@_register("gelu", 1)
class _Gelu:
    # tanh approximation
    @staticmethod
    def forward(x):
        x2 = x * x
        th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
        return 0.5 * x * (1.0 + th), th

    @staticmethod
    def vjp(g, th, x):
        du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * du),)


LAYER_NORM_EPS = 1e-5


@_register("layer_norm", 3)
class _LayerNorm:
    """Normalise the last axis (optionally per channel group), then gain/bias."""

    @staticmethod
    def forward(x, gain, bias, groups=1, eps=LAYER_NORM_EPS):
        c = x.shape[-1]
        if gain.shape != (c,) or bias.shape != (c,):
            _shape_fail("layer_norm", f"gain {gain.shape}/bias {bias.shape} must be ({c},)")
        if c % groups:
            _shape_fail("layer_norm", f"{groups} groups do not divide {c} channels")
        xg = x.reshape(x.shape[:-1] + (groups, c // groups))
        mu = xg.mean(axis=-1, keepdims=True)
        xc = xg - mu
        var = (xc ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xc * inv).reshape(x.shape)
        return xhat * gain + bias, (xhat, inv)

    @staticmethod
    def vjp(g, saved, x, gain, bias, groups=1, eps=LAYER_NORM_EPS):
        xhat, inv = saved
        c = x.shape[-1]
        gflat = g.reshape(-1, c)
        ggain = (gflat * xhat.reshape(-1, c)).sum(axis=0)
        gbias = gflat.sum(axis=0)
        gx_hat = (g * gain).reshape(x.shape[:-1] + (groups, c // groups))
        xh = xhat.reshape(gx_hat.shape)
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xh * (gx_hat * xh).mean(axis=-1, keepdims=True))
        return gx.reshape(x.shape), ggain, gbias


@_register("softmax_rows", 1)
class _SoftmaxRows:
    """Softmax over the last axis; ``mask`` (boolean, broadcastable) zeroes entries."""

    @staticmethod
    def forward(x, mask=None):
        if mask is not None:
            if mask.shape != x.shape[-mask.ndim:]:
                _shape_fail("softmax_rows", f"mask {mask.shape} does not match trailing dims of {x.shape}")
            if not mask.any(axis=-1).all():
                _shape_fail("softmax_rows", "mask has a row with no allowed entry")
            x = np.where(mask, x, -np.inf)
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        y = z / z.sum(axis=-1, keepdims=True)
        return y, y

    @staticmethod
    def vjp(g, y, x, mask=None):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@_register("mse_reduce", 2)
class _MseReduce:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            _shape_fail("mse_reduce", f"operand shapes differ: {a.shape} vs {b.shape}")
        d = a - b
        return np.asarray(np.mean(d * d)), d

    @staticmethod
    def vjp(g, d, a, b):
        ga = g * (2.0 / d.size) * d
        return ga, -ga


@_register("transpose", 1)
class _Transpose:
    @staticmethod
    def forward(x, axes=None):
        if axes is None:
            if x.ndim != 2:
                _shape_fail("transpose", f"axes required for {x.ndim}-D input")
            axes = (1, 0)
        if sorted(axes) != list(range(x.ndim)):
            _shape_fail("transpose", f"axes {axes} invalid for shape {x.shape}")
        return np.ascontiguousarray(np.transpose(x, axes)), axes

    @staticmethod
    def vjp(g, perm, x, axes=None):
        return (np.transpose(g, np.argsort(perm)),)


@_register("reshape", 1)
class _Reshape:
    @staticmethod
    def forward(x, shape):
        if math.prod(shape) != x.size:
            _shape_fail("reshape", f"cannot reshape {x.shape} to {tuple(shape)}")
        return x.reshape(shape), None

    @staticmethod
    def vjp(g, saved, x, shape):
        return (g.reshape(x.shape),)


@_register("slice", 1)
class _Slice:
    @staticmethod
    def forward(x, index):
        if not isinstance(index, tuple):
            index = (index,)
        if len(index) > x.ndim:
            _shape_fail("slice", f"{len(index)} indices for {x.ndim}-D input")
        for i, s in enumerate(index):
            if isinstance(s, int) and not -x.shape[i] <= s < x.shape[i]:
                _shape_fail("slice", f"index {s} out of range for dim {i} of {x.shape}")
        out = np.array(x[index])
        if out.size == 0:
            _shape_fail("slice", f"empty result for {index} on {x.shape}")
        return out, None

    @staticmethod
    def vjp(g, saved, x, index):
        gx = np.zeros_like(x)
        gx[index if isinstance(index, tuple) else (index,)] = g
        return (gx,)


@_register("concat", None)
class _Concat:
    @staticmethod
    def forward(*xs, axis=0):
        ref = xs[0]
        for x in xs[1:]:
            if x.ndim != ref.ndim or any(
                    a != b for i, (a, b) in enumerate(zip(x.shape, ref.shape)) if i != axis % ref.ndim):
                _shape_fail("concat", f"shapes {ref.shape} and {x.shape} differ off axis {axis}")
        return np.concatenate(xs, axis=axis), np.cumsum([x.shape[axis] for x in xs])[:-1]

    @staticmethod
    def vjp(g, splits, *xs, axis=0):
        return tuple(np.split(g, splits, axis=axis))


@_register("embed_lookup", 1)
class _EmbedLookup:
    @staticmethod
    def forward(table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if table.ndim != 2:
            _shape_fail("embed_lookup", f"table must be 2-D, got {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            _shape_fail("embed_lookup", f"ids outside [0, {table.shape[0]})")
        return table[ids], ids

    @staticmethod
    def vjp(g, idx, table, ids=None):
        gt = np.zeros_like(table)
        np.add.at(gt, idx, g)
        return (gt,)


@_register("unfold", 1)
class _Unfold:
    """Sliding windows over the time axis of an (N, C) signal -> (L, K*C)."""

    @staticmethod
    def forward(x, kernel, stride, pad_left=0, pad_right=0):
        if x.ndim != 2:
            _shape_fail("unfold", f"expected (time, channels), got {x.shape}")
        n, c = x.shape
        padded = np.concatenate([np.zeros((pad_left, c)), x, np.zeros((pad_right, c))])
        if padded.shape[0] < kernel:
            _shape_fail("unfold", f"{n} frames (+{pad_left + pad_right} pad) shorter than kernel {kernel}")
        win = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=0)[::stride]
        # win: (L, C, K) -> (L, K, C) so that rows read [x_t, x_t+1, ...]
        out = np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(win.shape[0], kernel * c)
        return out, padded.shape[0]

    @staticmethod
    def vjp(g, n_padded, x, kernel, stride, pad_left=0, pad_right=0):
        length = g.shape[0]
        c = x.shape[1]
        g3 = g.reshape(length, kernel, c)
        gp = np.zeros((n_padded, c))
        for k in range(kernel):
            gp[k:k + stride * (length - 1) + 1:stride] += g3[:, k, :]
        return (gp[pad_left:pad_left + x.shape[0]],)


@_register("external_scalar", 1)
class _ExternalScalar:
    """Scalar computed outside the tape with a known gradient w.r.t. its input."""

    @staticmethod
    def forward(x, value, grad):
        if np.shape(grad) != x.shape:
            _shape_fail("external_scalar", f"grad {np.shape(grad)} does not match input {x.shape}")
        return np.asarray(float(value)), None

    @staticmethod
    def vjp(g, saved, x, value, grad):
        return (g * grad,)


# ---------------------------------------------------------------------------

def apply(primitive: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate a primitive and record it on the active tape if needed."""
    try:
        prim = PRIMITIVES[primitive]
    except KeyError:
        raise AutodiffError(f"unknown primitive {primitive!r}") from None
    inputs = tuple(as_tensor(x) for x in inputs)
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(f"{primitive}: expected {prim.arity} inputs, got {len(inputs)}")
    if not inputs:
        raise ShapeError(f"{primitive}: no inputs")
    for i, x in enumerate(inputs):
        if not np.isfinite(x.data).all():
            raise NonFiniteError(f"{primitive}: input {i} contains non-finite values")
    out, saved = prim.forward(*(x.data for x in inputs), **attrs)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{primitive}: produced non-finite output")
    tape = active_tape()
    track = tape is not None and any(x.requires_grad for x in inputs)
    result = Tensor._wrap(out, track)
    if track:
        tape.nodes.append(Node(primitive, inputs, result, saved, attrs))
    return result


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] = (),
             accumulate: bool = True) -> dict[Tensor, Tensor]:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns a map from every leaf tensor with ``requires_grad`` (plus any
    extra ``params``, which get zeros if unused) to its gradient.  With
    ``accumulate`` the gradients are also added into ``leaf.grad``.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    producers = {id(n.output) for n in tape.nodes}
    if id(loss) not in producers:
        raise AutodiffError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        prim = PRIMITIVES[node.primitive]
        in_grads = prim.vjp(g, node.saved, *(x.data for x in node.inputs), **node.attrs)
        for x, gx in zip(node.inputs, in_grads):
            if not x.requires_grad or gx is None:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
            if id(x) not in producers:
                leaves[key] = x

    result: dict[Tensor, Tensor] = {}
    for key, leaf in leaves.items():
        result[leaf] = Tensor._wrap(grads[key], False)
    for p in params:
        if p not in result:
            result[p] = Tensor._wrap(np.zeros_like(p.data), False)
    if accumulate:
        for leaf, gt in result.items():
            leaf.grad = gt.data.copy() if leaf.grad is None else leaf.grad + gt.data
    return result


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               epsilon: float = 1e-4) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with Tape() as tape:
        loss = fn(params)
    analytic = backward(loss, tape, params, accumulate=False)
    base = loss.item()
    again = fn(params).item()
    if base != again:
        raise AutodiffError(f"fn is not deterministic: {base!r} != {again!r}")

    worst = 0.0
    for p in params:
        original = p.data
        ga = analytic[p].data.ravel()
        for i in range(original.size):
            probe = original.copy()
            flat = probe.reshape(-1)
            flat[i] += epsilon
            p.data = probe
            up = fn(params).item()
            flat[i] = original.flat[i] - epsilon
            down = fn(params).item()
            p.data = original
            fd = (up - down) / (2 * epsilon)
            worst = max(worst, abs(ga[i] - fd) / max(1.0, abs(ga[i])))
    return worst


# ---------------------------------------------------------------------------
# thin wrappers

def matmul(a, b):
    return apply("matmul", (a, b))


def add(a, b):
    return apply("add", (a, b))


def sub(a, b):
    return apply("add", (a, apply("scale", (b,), factor=-1.0)))


def bias_add(x, b):
    return apply("bias_add", (x, b))


def scale(x, factor: float):
    return apply("scale", (x,), factor=float(factor))


def relu(x):
    return apply("relu", (x,))


def gelu(x):
    return apply("gelu", (x,))


def layer_norm(x, gain, bias, groups: int = 1):
    return apply("layer_norm", (x, gain, bias), groups=groups)


def softmax_rows(x, mask=None):
    return apply("softmax_rows", (x,), mask=mask)


def mse_reduce(a, b=0.0):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.broadcast_to(np.asarray(b, dtype=np.float64), a.shape))
    return apply("mse_reduce", (a, b))


def transpose(x, axes=None):
    return apply("transpose", (x,), axes=None if axes is None else tuple(axes))


def reshape(x, shape):
    return apply("reshape", (x,), shape=tuple(shape))


def slice_(x, index):
    return apply("slice", (x,), index=index)


def concat(xs, axis: int = 0):
    return apply("concat", tuple(xs), axis=axis)


def embed_lookup(table, ids):
    return apply("embed_lookup", (table,), ids=np.asarray(ids, dtype=np.int64))


def unfold(x, kernel: int, stride: int, pad_left: int = 0, pad_right: int = 0):
    return apply("unfold", (x,), kernel=kernel, stride=stride, pad_left=pad_left, pad_right=pad_right)


def external_scalar(x, value: float, grad: np.ndarray):
    return apply("external_scalar", (x,), value=value, grad=np.asarray(grad, dtype=np.float64))


def weighted_sum(terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    """sum_k w_k * t_k over same-shape tensors (terms with weight 0 are skipped)."""
    live = [(w, t) for w, t in terms if w != 0.0]
    if not live:
        t0 = terms[0][1]
        return scale(t0, 0.0)
    out = scale(live[0][1], live[0][0])
    for w, t in live[1:]:
        out = add(out, scale(t, w))
    return out
