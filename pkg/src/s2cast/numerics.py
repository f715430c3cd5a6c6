"""Small dense-tensor autodiff on top of numpy.

Operations executed while a :class:`Tape` is active are recorded together with
a vector-Jacobian closure; :func:`backward` replays them in reverse. Outside a
tape the same functions simply compute values (inference mode).
"""

from __future__ import annotations

import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32 if os.environ.get("S2CAST_FLOAT32") == "1" else np.float64


class NumericalError(FloatingPointError):
    """Non-finite value produced by an operation, or an invalid differentiation request."""


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, shape={self.shape})"


class Parameter(Tensor):
    """Leaf tensor whose gradient accumulates across backward calls until zeroed."""

    __slots__ = ("grad",)

    def __init__(self, value, name: str | None = None, requires_grad: bool = True):
        super().__init__(value, requires_grad=requires_grad, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op, self.out, self.inputs, self.vjp = op, out, inputs, vjp


class Tape:
    """Ordered record of differentiable operations."""

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev, Tape._active = Tape._active, self
        return self

    def __exit__(self, *exc):
        Tape._active = self._prev


def _check(op: str, value: np.ndarray) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NumericalError(f"{op}: non-finite output")
    return value


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check(op, value)
    tape = Tape._active
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, name=op)
    if needs:
        tape.nodes.append(_Node(op, out, tuple(inputs), vjp))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``."""
    if loss.value.size != 1:
        raise NumericalError("backward requires a scalar loss")
    if not tape.nodes or not any(node.out is loss for node in tape.nodes):
        raise NumericalError("backward called before a forward pass recorded the loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# --------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.value > 0
    return _record("relu", np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", av @ bv, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight + bias``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    xv, wv = x.value, weight.value
    lead = xv.shape[:-1]
    out = (xv.reshape(-1, xv.shape[-1]) @ wv).reshape(lead + (wv.shape[1],))
    if bias is not None:
        out = out + bias.value

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv.T).reshape(xv.shape)
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, vjp)


def ffn(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Linear -> ReLU -> linear, no biases."""
    return linear(relu(linear(x, w1)), w2)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swap_last(a: Tensor) -> Tensor:
    return _record("swap_last", np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    """``table.value[index]`` for a 1-D table; backward scatters with accumulation."""
    index = np.asarray(index)
    size = table.shape[0]

    def vjp(g):
        return (np.bincount(index.ravel(), weights=g.ravel(), minlength=size),)

    return _record("gather", table.value[index], (table,), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# --------------------------------------------------------------------------
# attention primitives


def masked_softmax(scores: Tensor, bias: Tensor | None, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis of ``scores + bias`` restricted to valid keys.

    ``mask`` (broadcastable to ``scores.shape[:-1]``, i.e. ``(..., M)``) marks real
    slots; it masks key columns, and rows of masked queries are set to the
    uniform distribution over valid keys with zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    s = scores.value if bias is None else scores.value + bias.value
    key_ok = np.broadcast_to(mask[..., None, :], s.shape)
    n_valid = key_ok.sum(axis=-1, keepdims=True)
    if (n_valid == 0).any():
        raise NumericalError("masked_softmax: row without any valid key")
    s = np.where(key_ok, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(key_ok, np.exp(s), 0.0)
    w = e / e.sum(axis=-1, keepdims=True)
    q_ok = np.broadcast_to(mask[..., :, None], s.shape)
    w = np.where(q_ok, w, key_ok / n_valid)

    def vjp(g):
        g = np.where(q_ok, g, 0.0)
        gs = w * (g - (g * w).sum(axis=-1, keepdims=True))
        gs = np.where(q_ok, gs, 0.0)
        if bias is None:
            return (gs,)
        return gs, _unbroadcast(gs, bias.shape)

    inputs = (scores,) if bias is None else (scores, bias)
    return _record("masked_softmax", w, inputs, vjp)


def attention_weights(x: Tensor, wq: Tensor, wk: Tensor, bias: Tensor | None, mask: np.ndarray,
                      heads: int = 1) -> Tensor:
    """Biased, masked attention map ``(..., heads, M, M)`` (heads axis omitted when 1)."""
    d_model = wq.shape[1]
    if d_model % heads:
        raise ValueError(f"width {d_model} not divisible by {heads} heads")
    d = d_model // heads
    q, k = linear(x, wq), linear(x, wk)
    if heads > 1:
        q, k = _split_heads(q, heads), _split_heads(k, heads)
        mask = np.asarray(mask)[..., None, :]
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    return masked_softmax(scores, bias, mask)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, m, dm = t.shape
    t = reshape(t, tuple(lead) + (m, heads, dm // heads))
    nd = len(t.shape)
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return transpose(t, axes)


def _merge_heads(t: Tensor) -> Tensor:
    nd = len(t.shape)
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    t = transpose(t, axes)
    *lead, m, h, d = t.shape
    return reshape(t, tuple(lead) + (m, h * d))


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, bias: Tensor | None, mask: np.ndarray,
              heads: int = 1) -> Tensor:
    """Scaled dot-product attention ``softmax(QK^T/sqrt(d) + bias) V`` over axis -2 of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != wq.shape[0]:
        raise ValueError(f"attention: input width {x.shape[-1]} does not match {wq.shape}")
    alpha = attention_weights(x, wq, wk, bias, mask, heads)
    v = linear(x, wv)
    if heads == 1:
        return matmul(alpha, v)
    return _merge_heads(matmul(alpha, _split_heads(v, heads)))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``(..., P, M, D)`` using only slots where ``mask`` (P x M) is set."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        raise NumericalError("masked_mean: a row has no valid slot")
    wts = (mask / counts[..., None])[..., None]
    out = (np.where(mask[..., None], x.value, 0.0) * wts).sum(axis=-2)

    def vjp(g):
        return (np.broadcast_to(g[..., None, :] * wts, x.shape).copy(),)

    return _record("masked_mean", out, (x,), vjp)


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero every slot whose mask entry is false; ``mask`` covers all but the last axis."""
    keep = np.asarray(mask, dtype=bool)[..., None]
    return _record("apply_mask", np.where(keep, x.value, 0.0), (x,), lambda g: (np.where(keep, g, 0.0),))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    da = a.shape[-1]
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_last: leading shapes differ {a.shape} vs {b.shape}")
    return _record("concat_last", np.concatenate([a.value, b.value], axis=-1), (a, b),
                   lambda g: (g[..., :da], g[..., da:]))


def broadcast_expand(s: Tensor, m: int) -> Tensor:
    """``(..., P, D) -> (..., P, M, D)`` by repetition; backward sums over M."""
    out = np.broadcast_to(s.value[..., None, :], s.shape[:-1] + (m, s.shape[-1])).copy()
    return _record("broadcast_expand", out, (s,), lambda g: (g.sum(axis=-2),))


def layout_scatter(x: Tensor, perm: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """``(B, N, D) -> (B, P, M, D)`` along a partition layout; padded slots are zero."""
    b, n, d = x.shape
    p, m = pad_mask.shape
    out = np.zeros((b, p, m, d), dtype=x.value.dtype)
    out[:, pad_mask, :] = x.value[:, perm, :]

    def vjp(g):
        gx = np.empty((b, n, d), dtype=g.dtype)
        gx[:, perm, :] = g[:, pad_mask, :]
        return (gx,)

    return _record("layout_scatter", out, (x,), vjp)


def layout_gather(y: Tensor, perm: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """Inverse of :func:`layout_scatter`: ``(B, P, M, D) -> (B, N, D)``."""
    b, p, m, d = y.shape
    n = len(perm)
    out = np.empty((b, n, d), dtype=y.value.dtype)
    out[:, perm, :] = y.value[:, pad_mask, :]

    def vjp(g):
        gy = np.zeros((b, p, m, d), dtype=g.dtype)
        gy[:, pad_mask, :] = g[:, perm, :]
        return (gy,)

    return _record("layout_gather", out, (y,), vjp)


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient of |.| at 0 is taken as 0."""
    tv = target.value if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != tv.shape:
        raise ValueError(f"mae_loss: shapes differ {pred.shape} vs {tv.shape}")
    diff = pred.value - tv
    n = diff.size
    return _record("mae_loss", np.asarray(np.abs(diff).mean()), (pred,),
                   lambda g: (g * np.sign(diff) / n,))


# --------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias correction. Frozen parameters (``requires_grad=False``) are skipped."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            _check(f"adam[{p.name}]", p.value)
