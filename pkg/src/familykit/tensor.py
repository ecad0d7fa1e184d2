"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 supported for test
twins); every operation is a pure function that records its parents and a
backward closure on the output. The numeric kernels live in module-level
`k_*` functions shared with the no-grad inference path, so a value computed
through the graph is bit-identical to one computed directly.

All matrix products go through `np.einsum` without the optimizer: its
accumulation order for a given output element depends only on the
contracted extent, never on how many other rows are computed in the same
call. That row-stability is what makes incremental decoding bit-equal to
full-prefix forward passes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateBatchError, GraphError, InputError, ShapeError

Array = np.ndarray


# ---------------------------------------------------------------------------
# numeric kernels (no autodiff; shared with inference)
# ---------------------------------------------------------------------------

def k_matmul(a: Array, b: Array) -> Array:
    """Row-stable matrix product for 2d x 2d, nd x 2d and 4d x 4d operands."""
    if a.ndim == 2 and b.ndim == 2:
        return np.einsum("ij,jk->ik", a, b)
    if a.ndim >= 2 and b.ndim == 2:
        lead = a.shape[:-1]
        out = np.einsum("ij,jk->ik", a.reshape(-1, a.shape[-1]), b)
        return out.reshape(*lead, b.shape[-1])
    if a.ndim == 4 and b.ndim == 4:
        return np.einsum("bhij,bhjk->bhik", a, b)
    if a.ndim == 3 and b.ndim == 3:
        return np.einsum("bij,bjk->bik", a, b)
    raise ShapeError(f"unsupported matmul arity: {a.shape} @ {b.shape}")


def k_rmsnorm(x: Array, gamma: Array, eps: float) -> Array:
    inv = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + np.asarray(eps, x.dtype))
    return x * inv.astype(x.dtype) * gamma


def k_softmax(x: Array, axis: int) -> Array:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def k_masked_softmax(scores: Array, allowed: Array) -> Array:
    """Softmax over the last axis restricted to `allowed` (bool) entries.

    Disallowed entries get probability exactly 0.0 without ever forming
    non-finite intermediates, so causality holds bit-exactly. The
    denominator is a strictly sequential (cumsum) reduction: trailing
    zero entries are exact no-ops, which keeps a row's probabilities
    bit-identical whether its key axis is truncated or zero-padded --
    the property that makes cached decoding match full-prefix forwards.
    """
    masked = np.where(allowed, scores, np.asarray(-np.inf, scores.dtype))
    m = np.max(masked, axis=-1, keepdims=True)
    # clamp keeps exp from overflowing on disallowed entries; allowed ones
    # already satisfy scores <= m so the clamp never changes them
    e = np.where(allowed, np.exp(np.minimum(scores - m, np.asarray(0.0, scores.dtype))),
                 np.asarray(0.0, scores.dtype))
    den = np.cumsum(e, axis=-1)[..., -1:]
    return e / den


def k_silu(x: Array) -> Array:
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig


def k_rope(x: Array, cos: Array, sin: Array) -> Array:
    """Rotate head channels pairwise: x is (..., T, Dh), cos/sin (T, Dh/2)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def rope_tables(positions: Array, head_dim: int, base: float, dtype=np.float32):
    """cos/sin tables for absolute `positions`, shaped (len, head_dim // 2)."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def k_repeat_heads(x: Array, n_rep: int) -> Array:
    """(B, Hkv, T, Dh) -> (B, Hkv * n_rep, T, Dh), groups kept adjacent."""
    if n_rep == 1:
        return x
    b, h, t, d = x.shape
    return np.broadcast_to(x[:, :, None], (b, h, n_rep, t, d)).reshape(b, h * n_rep, t, d)


# ---------------------------------------------------------------------------
# autodiff
# ---------------------------------------------------------------------------

class Tensor:
    """An immutable-by-convention array plus its place in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=np.float32):
        self.data: Array = np.asarray(data, dtype=dtype)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[Array], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}, name={self.name})"

    # convenience arithmetic used by tests and losses
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t: Tensor, g: Array) -> None:
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.shape != t.data.shape else g
    else:
        t.grad = t.grad + g


def _make(data: Array, parents: Sequence[Tensor], bwd) -> Tensor:
    data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _reduce_broadcast(g: Array, shape) -> Array:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Graph:
    """Topologically ordered view of the computation reaching a root tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._bwd is None]


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into `.grad`."""
    if loss.data.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every trainable parameter")
    graph = Graph(loss)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(graph.nodes):
        if node._bwd is not None:
            node._bwd(node.grad)
            node.grad = None  # free intermediate grads; leaves keep theirs


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out_data = k_matmul(a.data, b.data)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            if b.data.ndim == 2:
                ga = k_matmul(g, np.ascontiguousarray(b.data.T))
            else:
                ga = np.einsum("...ik,...jk->...ij", g, b.data)
            _accumulate(a, _reduce_broadcast(ga, a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2:
                g2 = g.reshape(-1, g.shape[-1])
                a2 = a.data.reshape(-1, a.data.shape[-1])
                gb = np.einsum("ij,ik->jk", a2, g2)
            else:
                gb = _reduce_broadcast(np.einsum("...ij,...ik->...jk", a.data, g), b.data.shape)
            _accumulate(b, gb)

    return _make(out_data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data + b.data, (a, b), None)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_broadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_broadcast(g, b.data.shape))

    out._bwd = bwd if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data * b.data, (a, b), None)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_broadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_broadcast(g * a.data, b.data.shape))

    out._bwd = bwd if out.requires_grad else None
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _make(a.data * np.asarray(s, a.data.dtype), (a,), None)

    def bwd(g: Array) -> None:
        _accumulate(a, g * np.asarray(s, a.data.dtype))

    out._bwd = bwd if out.requires_grad else None
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g: Array) -> None:
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g: Array) -> None:
        _accumulate(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def bwd(g: Array) -> None:
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out_data, (a,), bwd)


def rmsnorm(x: Tensor, gamma: Tensor, eps: float) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gamma over the last axis."""
    if eps <= 0:
        raise InputError("rmsnorm eps must be > 0")
    inv = (1.0 / np.sqrt(np.mean(np.square(x.data), axis=-1, keepdims=True)
                         + np.asarray(eps, x.data.dtype))).astype(x.data.dtype)
    out_data = x.data * inv * gamma.data

    def bwd(g: Array) -> None:
        d = x.data.shape[-1]
        gg = g * gamma.data
        if x.requires_grad:
            dot = np.sum(gg * x.data, axis=-1, keepdims=True)
            _accumulate(x, gg * inv - x.data * (inv ** 3) * (dot / d))
        if gamma.requires_grad:
            gain_grad = g * x.data * inv
            _accumulate(gamma, gain_grad.reshape(-1, d).sum(axis=0))

    return _make(out_data, (x, gamma), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rejects non-finite inputs outright."""
    if not np.all(np.isfinite(x.data)):
        raise InputError("softmax requires finite inputs")
    p = k_softmax(x.data, axis)

    def bwd(g: Array) -> None:
        dot = np.sum(g * p, axis=axis, keepdims=True)
        _accumulate(x, p * (g - dot))

    return _make(p, (x,), bwd)


def masked_softmax(scores: Tensor, allowed: Array) -> Tensor:
    """Softmax over the last axis confined to `allowed` (bool, broadcastable)."""
    allowed = np.broadcast_to(allowed, scores.data.shape)
    p = k_masked_softmax(scores.data, allowed)

    def bwd(g: Array) -> None:
        dot = np.sum(g * p, axis=-1, keepdims=True)
        _accumulate(scores, p * (g - dot))

    return _make(p, (scores,), bwd)


def causal_mask(t_q: int, t_k: int, offset: int = 0) -> Array:
    """allowed[i, j] = (key position j) <= (query position offset + i)."""
    qpos = np.arange(offset, offset + t_q)[:, None]
    kpos = np.arange(t_k)[None, :]
    return kpos <= qpos


def rope(x: Tensor, cos: Array, sin: Array) -> Tensor:
    out_data = k_rope(x.data, cos, sin)

    def bwd(g: Array) -> None:
        half = g.shape[-1] // 2
        g1, g2 = g[..., :half], g[..., half:]
        _accumulate(x, np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1))

    return _make(out_data, (x,), bwd)


def repeat_heads(x: Tensor, n_rep: int) -> Tensor:
    out_data = k_repeat_heads(x.data, n_rep)
    if n_rep == 1:
        return x

    def bwd(g: Array) -> None:
        b, h, t, d = x.data.shape
        _accumulate(x, g.reshape(b, h, n_rep, t, d).sum(axis=2))

    return _make(out_data, (x,), bwd)


def embedding(table: Tensor, ids: Array) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InputError(f"token id out of range [0, {table.data.shape[0]})")
    out_data = table.data[ids]

    def bwd(g: Array) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _accumulate(table, gt)

    return _make(out_data, (table,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g: Array) -> None:
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum(), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g: Array) -> None:
        _accumulate(a, np.broadcast_to(g / np.asarray(n, a.data.dtype), a.data.shape))

    return _make(a.data.mean(), (a,), bwd)


def cross_entropy(logits: Tensor, targets: Array, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax of target classes over non-ignored positions.

    The per-position reductions run in float64 and the returned scalar stays
    float64 so that downstream loss aggregation is stable.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.data.shape[:-1]}")
    vocab = logits.data.shape[-1]
    keep = targets != ignore_index
    if not keep.any():
        raise DegenerateBatchError("cross_entropy over zero effective positions")
    if targets[keep].min() < 0 or targets[keep].max() >= vocab:
        raise InputError("target id outside [0, vocab)")

    flat = logits.data.reshape(-1, vocab).astype(np.float64)
    tflat = targets.reshape(-1)
    kflat = keep.reshape(-1)
    m = np.max(flat, axis=-1)
    lse = m + np.log(np.sum(np.exp(flat - m[:, None]), axis=-1))
    safe_t = np.where(kflat, tflat, 0)
    nll = lse - flat[np.arange(flat.shape[0]), safe_t]
    n_eff = int(kflat.sum())
    loss = np.float64(nll[kflat].sum() / n_eff)

    def bwd(g: Array) -> None:
        p = k_softmax(logits.data.reshape(-1, vocab), axis=-1).astype(np.float64)
        p[np.arange(p.shape[0]), safe_t] -= 1.0
        p[~kflat] = 0.0
        p *= float(g) / n_eff
        _accumulate(logits, p.reshape(logits.data.shape))

    out = _make(np.asarray(loss), (logits,), bwd)
    return out


def finite_difference_grads(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                            h: float = 1e-3) -> dict[int, Array]:
    """Central-difference gradients of `loss_fn` w.r.t. each parameter tensor.

    Independent of the reverse-mode path: only re-evaluates the forward.
    Returns a map keyed by id(param).
    """
    grads: dict[int, Array] = {}
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * h)
        grads[id(p)] = g
    return grads
