"""Reverse-mode autodiff over dense float64 numpy arrays.

Every operation records a closure on the output node; ``backward`` walks the
recorded graph once and then discards it (no graph reuse). Inputs that do not
require gradients are pruned from the tape, so inference builds no graph.
Broadcasting is restricted to adding a 1-D bias over leading axes.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from ..errors import ConfigurationError, DimensionError, EmptyMemoryError, UsageError

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "backward",
    "bce_with_logits",
    "concat",
    "cross_entropy",
    "layer_norm",
    "matmul",
    "mean",
    "mha_cross",
    "mha_self",
    "mse",
    "narrow",
    "reshape",
    "scale",
    "silu",
    "softmax",
    "square",
    "take_rows",
    "transpose",
    "tsum",
]


class Tensor:
    """A dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A graph-free copy of this tensor's values."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b where b is a tensor of equal shape, a 1-D bias over the last
    axis, or a python scalar."""
    if isinstance(b, (int, float)):
        a_t = a
        c = float(b)
        out = _node(a_t.data + c, (a_t,), None)
        if out.requires_grad:

            def back():
                if a_t.requires_grad:
                    _acc(a_t, out.grad)

            out._backward = back
        return out
    b = _as_tensor(b)
    if a.shape == b.shape:
        out = _node(a.data + b.data, (a, b), None)
        if out.requires_grad:

            def back():
                if a.requires_grad:
                    _acc(a, out.grad)
                if b.requires_grad:
                    _acc(b, out.grad)

            out._backward = back
        return out
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = _node(a.data + b.data, (a, b), None)
        if out.requires_grad:
            lead = tuple(range(a.ndim - 1))

            def back():
                if a.requires_grad:
                    _acc(a, out.grad)
                if b.requires_grad:
                    _acc(b, out.grad.sum(axis=lead) if lead else out.grad)

            out._backward = back
        return out
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = _node(a.data * b.data, (a, b), None)
    if out.requires_grad:

        def back():
            if a.requires_grad:
                _acc(a, out.grad * b.data)
            if b.requires_grad:
                _acc(b, out.grad * a.data)

        out._backward = back
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _node(x.data * c, (x,), None)
    if out.requires_grad:

        def back():
            if x.requires_grad:
                _acc(x, out.grad * c)

        out._backward = back
    return out


def square(x: Tensor) -> Tensor:
    out = _node(x.data * x.data, (x,), None)
    if out.requires_grad:

        def back():
            if x.requires_grad:
                _acc(x, out.grad * 2.0 * x.data)

        out._backward = back
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot matmul shapes {a.shape} and {b.shape}")
    out = _node(a.data @ b.data, (a, b), None)
    if out.requires_grad:

        def back():
            if a.requires_grad:
                _acc(a, out.grad @ b.data.T)
            if b.requires_grad:
                _acc(b, a.data.T @ out.grad)

        out._backward = back
    return out


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = _node(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), None)
    if out.requires_grad:

        def back():
            if x.requires_grad:
                _acc(x, np.transpose(out.grad, inverse))

        out._backward = back
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _node(x.data.reshape(shape), (x,), None)
    if out.requires_grad:
        orig = x.shape

        def back():
            if x.requires_grad:
                _acc(x, out.grad.reshape(orig))

        out._backward = back
    return out


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UsageError("concat of zero tensors")
    out = _node(np.concatenate([p.data for p in parts], axis=axis), parts, None)
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def back():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    _acc(p, out.grad[tuple(sl)])

        out._backward = back
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """A contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of shape {x.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = _node(np.ascontiguousarray(x.data[sl]), (x,), None)
    if out.requires_grad:

        def back():
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[sl] += out.grad

        out._backward = back
    return out


def take_rows(x: Tensor, indices) -> Tensor:
    """Row lookup by integer index (embedding gather)."""
    idx = np.asarray(indices, dtype=np.int64)
    out = _node(x.data[idx], (x,), None)
    if out.requires_grad:

        def back():
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                np.add.at(x.grad, idx, out.grad)

        out._backward = back
    return out


def tsum(x: Tensor) -> Tensor:
    out = _node(np.asarray(x.data.sum()), (x,), None)
    if out.requires_grad:

        def back():
            if x.requires_grad:
                _acc(x, np.full_like(x.data, float(out.grad)))

        out._backward = back
    return out


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite input
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    out = _node(x.data * sig, (x,), None)
    if out.requires_grad:

        def back():
            if x.requires_grad:
                _acc(x, out.grad * sig * (1.0 + x.data * (1.0 - sig)))

        out._backward = back
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (x,), None)
    if out.requires_grad:

        def back():
            if x.requires_grad:
                g = out.grad
                _acc(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

        out._backward = back
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the
    elementwise affine ``gain * xhat + bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _node(gain.data * xhat + bias.data, (x, gain, bias), None)
    if out.requires_grad:

        def back():
            g = out.grad
            if bias.requires_grad:
                _acc(bias, g.reshape(-1, d).sum(axis=0))
            if gain.requires_grad:
                _acc(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gh = g * gain.data
                m1 = gh.mean(axis=-1, keepdims=True)
                m2 = (gh * xhat).mean(axis=-1, keepdims=True)
                _acc(x, inv * (gh - m1 - xhat * m2))

        out._backward = back
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token-level cross-entropy of row-wise logits against integer ids."""
    idx = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise UsageError(
            f"cross_entropy expects (n, vocab) logits with n targets, got {logits.shape} and {idx.shape}"
        )
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(n), idx]
    out = _node(np.asarray((lse - picked).mean()), (logits,), None)
    if out.requires_grad:

        def back():
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(n), idx] -= 1.0
            _acc(logits, float(out.grad) * probs / n)

        out._backward = back
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy against {0,1} targets, numerically stable."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"bce target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _node(np.asarray(loss.mean()), (logits,), None)
    if out.requires_grad:

        def back():
            _acc(logits, float(out.grad) * (_sigmoid(z) - t) / z.size)

        out._backward = back
    return out


def mse(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return mean(square(a - b))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _attention(qp: Tensor, kp: Tensor, vp: Tensor, heads: int, mask: Tensor | None) -> Tensor:
    d = qp.shape[1]
    dh = d // heads
    inv = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        qh = narrow(qp, 1, h * dh, dh)
        kh = narrow(kp, 1, h * dh, dh)
        vh = narrow(vp, 1, h * dh, dh)
        scores = scale(matmul(qh, transpose(kh)), inv)
        if mask is not None:
            scores = add(scores, mask)
        outs.append(matmul(softmax(scores, axis=-1), vh))
    return concat(outs, axis=1)


def _project(x: Tensor, params: dict, name: str) -> Tensor:
    return add(matmul(x, params[f"w{name}"]), params[f"b{name}"])


def mha_cross(q: Tensor, kv: Tensor, params: dict, heads: int) -> Tensor:
    """Multi-head scaled dot-product cross-attention with learned Q/K/V/out
    projections. ``params`` maps wq/bq/wk/bk/wv/bv/wo/bo to tensors."""
    d = q.shape[1]
    if d % heads != 0:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    if kv.shape[0] == 0:
        raise EmptyMemoryError("attention memory has zero rows")
    if kv.shape[1] != d:
        raise DimensionError(f"query width {q.shape} vs memory width {kv.shape}")
    qp = _project(q, params, "q")
    kp = _project(kv, params, "k")
    vp = _project(kv, params, "v")
    ctx = _attention(qp, kp, vp, heads, None)
    return add(matmul(ctx, params["wo"]), params["bo"])


def mha_self(x: Tensor, params: dict, heads: int, mask: Tensor | None = None) -> Tensor:
    """Self-attention over ``x`` with an optional additive score mask."""
    d = x.shape[1]
    if d % heads != 0:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    qp = _project(x, params, "q")
    kp = _project(x, params, "k")
    vp = _project(x, params, "v")
    ctx = _attention(qp, kp, vp, heads, mask)
    return add(matmul(ctx, params["wo"]), params["bo"])


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable tensor with requires_grad=True.

    The tape is discarded afterwards; running backward twice on the same
    graph is an error.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any parameter (or its tape was discarded)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    for node in order:
        if node._parents:
            # intermediates: free tape and buffers, keep leaf grads
            node._parents = ()
            node._backward = None
            node.grad = None
