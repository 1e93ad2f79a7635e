"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape nothing is recorded, which
makes plain inference cheap.

Primitive set: matmul, conv2d, relu, gelu, layer_norm, softmax, add, add_bias,
mul, scale, sum, mean, reshape, transpose, embedding, concat, take and the
fused softmax_cross_entropy. Everything else is composed from these.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{label})"

    # operator sugar, all routed through the primitives below
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; tapes are thread-local, so concurrent callers
    each own a private tape.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def reset(self) -> None:
        self.nodes.clear()

    def _check_root(self, root: Tensor) -> None:
        if root.size != 1:
            raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
        if not root.requires_grad:
            raise ContractError("backward root is not on the tape (no input requires grad)")

    def _propagate(self, root: Tensor, relevant: set[int] | None) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        keep: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            key = id(node.out)
            g = grads.pop(key, None)
            if g is None:
                continue
            keep[key] = g
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if relevant is not None and k not in relevant:
                    continue
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        # whatever is left was never produced on this tape: leaves
        keep.update(grads)
        return keep

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        self._check_root(root)
        produced = {id(n.out) for n in self.nodes}
        if id(root) not in produced:
            if root.grad is None:
                root.grad = np.ones_like(root.data)
            else:
                root.grad = root.grad + 1
            return
        leaves: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        grads = self._propagate(root, None)
        for k, t in leaves.items():
            g = grads.get(k)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g

    def grad(self, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``root`` w.r.t. arbitrary recorded tensors; leaf ``.grad`` untouched.

        Only the part of the graph downstream of ``wrt`` is traversed.
        """
        self._check_root(root)
        relevant = {id(t) for t in wrt}
        for n in self.nodes:
            if any(id(t) in relevant for t in n.inputs):
                relevant.add(id(n.out))
        if id(root) not in relevant:
            return [np.zeros_like(t.data) for t in wrt]
        grads = self._propagate(root, relevant)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, tuple(inputs), out, backward))
    return out


def custom_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Record a user-defined op. ``backward(g)`` returns one gradient (or None) per input."""
    return _record(op, inputs, np.asarray(out_data), backward)


def backward(root: Tensor, tape: Tape | None = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("no tape: run the forward pass inside `with Tape():`")
    tape.backward(root)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """x + b with ``b`` (1-D) broadcast along every axis except ``axis``."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _record("add_bias", (x, b), x.data + b.data.reshape(shape), lambda g: (g, g.sum(axis=others)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", (x,), np.where(pos, x.data, 0).astype(x.data.dtype), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    inner = c * (xd + xd.dtype.type(0.044715) * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def bw(g):
        dinner = c * (1 + xd.dtype.type(3 * 0.044715) * xd**2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _record("gelu", (x,), out, bw)


# ----------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = np.asarray(x.data.sum(axis=axes), dtype=x.data.dtype)
    return _record("sum", (x,), out, lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes), 1.0 / count)


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    ref = xs[0].shape
    axis = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))]

    return _record("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=axis), bw)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    axis = axis % x.ndim
    if not 0 <= index < x.shape[axis]:
        raise IndexError(f"take: index {index} out of range for axis {axis} of size {x.shape[axis]}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record("take", (x,), np.ascontiguousarray(np.take(x.data, index, axis=axis)), bw)


def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding: table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding: index out of range")
    n = table.shape[0]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    if n == 0:
        raise DimensionError("embedding: empty table")
    return _record("embedding", (table,), table.data[idx], bw)


# ------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, k] @ b[..., k, n] with equal leading dims, or b[k, n] shared across them."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ ({a.shape} @ {b.shape})")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm: gamma/beta must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record("layer_norm", (x, gamma, beta), out, bw)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    s = _softmax(x.data)
    return _record("softmax", (x,), s, lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"softmax_cross_entropy: labels must lie in [0, {C})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = np.asarray((lse - shifted[rows, labels]).mean(), dtype=z.dtype)

    def bw(g):
        p = _softmax(z)
        p[rows, labels] -= 1
        return (p * (g / B),)

    return _record("softmax_cross_entropy", (logits,), loss, bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. ``x`` is C×H×W or N×C×H×W; ``w`` is F×C×k×k."""
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d: expected C×H×W (or N×C×H×W) input and F×C×k×k kernels")
    N, C, H, W = xd.shape
    F, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise DimensionError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if k > Hp or k > Wp:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {Hp}×{Wp}")
    Ho, Wo = (Hp - k) // stride + 1, (Wp - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    w2 = w.data.reshape(F, C * k * k)
    out = (cols @ w2.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if single else out)

    def bw(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ w2).reshape(N, Ho, Wo, C, k, k)
        gxp = np.zeros((N, C, Hp, Wp), dtype=gcols.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        gx = np.ascontiguousarray(gx[0] if single else gx)
        return gx, gw

    return _record("conv2d", (x, w), out, bw)


# ---------------------------------------------------------------- optimizers


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float, weight_decay: float = 0.0) -> None:
    """In place: p <- p - lr * (g + weight_decay * p), in the given order."""
    if lr <= 0:
        raise ContractError("sgd_step: lr must be > 0")
    if weight_decay < 0:
        raise ContractError("sgd_step: weight_decay must be >= 0")
    if len(params) != len(grads):
        raise ContractError("sgd_step: params and grads differ in length")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"sgd_step: grad {g.shape} does not match param {p.shape}")
        dt = p.data.dtype.type
        p.data -= dt(lr) * (g.astype(p.data.dtype, copy=False) + dt(weight_decay) * p.data)


# -------------------------------------------------------------- grad checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: int
    worst_index: tuple[int, ...]
    checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    n_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
    shadow64: bool = True,
) -> GradCheckReport:
    """Compare autodiff gradients with central differences.

    ``fn`` rebuilds the scalar loss from ``params`` on every call. With
    ``shadow64`` the perturbed evaluations run on float64 copies of the params,
    so the numeric side is free of 32-bit cancellation noise. The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not eps > 0:
        raise ContractError("finite_diff_check: eps must be > 0")
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    auto = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), size=n_coords, replace=False))]

    originals = [p.data for p in params]
    if shadow64:
        for p in params:
            p.data = p.data.astype(np.float64)
    worst = (0.0, 0, ())
    try:
        for pi, idx in coords:
            p = params[pi]
            x0 = p.data[idx]
            p.data[idx] = x0 + eps
            fp = fn().item()
            p.data[idx] = x0 - eps
            fm = fn().item()
            p.data[idx] = x0
            num = (fp - fm) / (2 * eps)
            a = float(auto[pi][idx])
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            if rel > worst[0] or not worst[2]:
                worst = (rel, pi, tuple(int(i) for i in idx))
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return GradCheckReport(worst[0], worst[1], worst[2], len(coords))
