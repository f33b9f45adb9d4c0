"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op returns a :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.  Node ids increase
monotonically at creation, so sorting reachable nodes by id gives a valid
topological order without an explicit graph walk at record time.

Shapes must match exactly.  The only broadcast allowed is a trailing-dimension
affine (``linear``, ``add_bias``, ``layer_norm`` gain/bias).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DegenerateError, DimensionError, NumericError

_ids = itertools.count()
_grad_enabled = True
_dtype = np.float32

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def default_dtype():
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float64 for gradient checks)."""
    old = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Ops executed inside record nothing on the tape."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.name = name

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single element, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")
    lead = x.ndim - 1

    def bw(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0) if lead else g

    return _record(x.data + b.data, (x, b), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = ndtr(xd).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + xd * pdf),)

    return _record(xd * cdf, (x,), bw)


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same values, no tape edge."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.name = x.name
    out._id = next(_ids)
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = (slice(None),) * axis + (slice(start, stop),)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _record(np.ascontiguousarray(x.data[idx]), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _record(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of a 2D tensor: out[...] = x[index[...]].

    Backward scatters with summation, so repeated indices accumulate.
    """
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2D table, got {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    n, d = x.shape
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError("gather_rows: index out of range")

    flat = index.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_idx = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]]) if flat.size else flat

    def bw(g):
        full = np.zeros((n, d), dtype=g.dtype)
        if flat.size:
            # segment sums in a fixed order keep the reduction deterministic
            full[sorted_idx[starts]] = np.add.reduceat(g.reshape(-1, d)[order], starts, axis=0)
        return (full,)

    return _record(x.data[index], (x,), bw)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _record(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    n = x.data.size

    def bw(g):
        return (np.full(shape, g / n, dtype=dtype),)

    return _record(np.asarray(x.data.mean(), dtype=dtype), (x,), bw)


def l1_loss_masked(pred: Tensor, target: Tensor, mask) -> Tensor:
    """Mean |pred - target| over the rows selected by ``mask`` and all features.

    The subgradient of |.| at zero is taken as 0.
    """
    _same_shape("l1_loss_masked", pred, target)
    if pred.ndim != 2:
        raise DimensionError(f"l1_loss_masked expects N x d, got {pred.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pred.shape[0],):
        raise DimensionError(f"mask shape {mask.shape} does not match {pred.shape[0]} rows")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateError("l1_loss_masked: mask selects no tokens")
    diff = pred.data[mask] - target.data[mask]
    denom = count * pred.shape[1]
    dtype = pred.dtype
    value = np.asarray(np.abs(diff).sum(dtype=np.float64) / denom, dtype=dtype)

    def bw(g):
        sign = np.sign(diff) * (g / denom)
        full = np.zeros(pred.shape, dtype=dtype)
        full[mask] = sign
        return full, -full

    return _record(value, (pred, target), bw)


def mse_loss_masked(pred: Tensor, target: Tensor, mask) -> Tensor:
    """Mean (pred - target)^2 over the rows selected by ``mask`` and all features."""
    _same_shape("mse_loss_masked", pred, target)
    if pred.ndim != 2:
        raise DimensionError(f"mse_loss_masked expects N x d, got {pred.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pred.shape[0],):
        raise DimensionError(f"mask shape {mask.shape} does not match {pred.shape[0]} rows")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateError("mse_loss_masked: mask selects no tokens")
    diff = pred.data[mask] - target.data[mask]
    denom = count * pred.shape[1]
    dtype = pred.dtype
    value = np.asarray(np.square(diff).sum(dtype=np.float64) / denom, dtype=dtype)

    def bw(g):
        full = np.zeros(pred.shape, dtype=dtype)
        full[mask] = diff * (2.0 * g / denom)
        return full, -full

    return _record(value, (pred, target), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, C]`` against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x C logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = np.asarray(-logp[np.arange(b), labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return _record(value, (logits,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, k] @ b[..., k, n] with identical leading dimensions."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., k] @ w[k, n] (+ b[n])."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: {x.shape} x {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear bias {b.shape} for weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
    lead = x.shape[:-1]

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    assert out.shape == lead + (w.shape[1],)
    return _record(out, parents, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise DimensionError("layer_norm: last dimension must be >= 1")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: affine params {gain.shape}/{bias.shape} for d={d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gain.data

    def bw(g):
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        gbias = g2.sum(axis=0)
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _record(xhat * gd + bias.data, (x, gain, bias), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (x,), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, key_valid=None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over q, k, v of shape [B, H, L, d].

    ``key_valid`` is an optional boolean [B, L] array; invalid keys receive no
    attention weight.  Fused so only the probability tensor is kept for backward.
    """
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 4:
        raise DimensionError(f"attention: q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    dt = qd.dtype.type
    sc = dt(1.0 / np.sqrt(q.shape[-1]))
    s = (qd @ np.swapaxes(kd, -1, -2)) * sc
    if key_valid is not None:
        key_valid = np.asarray(key_valid, dtype=bool)
        if key_valid.shape != (q.shape[0], q.shape[2]):
            raise DimensionError(f"attention: key mask {key_valid.shape} for {q.shape}")
        s = np.where(key_valid[:, None, None, :], s, dt(-np.inf))
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    p = s

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= sc
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    return _record(p @ vd, (q, k, v), bw)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs (2i, 2i+1) of ``x[..., d]`` by fixed angles.

    ``cos``/``sin`` hold one value per pair and must broadcast against
    ``x[..., d/2]``; they are constants, not tape nodes.
    """
    d = x.shape[-1]
    if d % 2:
        raise DimensionError("rotate_pairs: channel count must be even")
    xd = x.data
    x0, x1 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def bw(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen.add(node._id)
        order.append(node)
        stack.extend(node._parents)
    order.sort(key=lambda t: t._id, reverse=True)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients are summed into existing ``.grad`` buffers; call ``zero_grad`` on
    parameters between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor with no tape")
    pending: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in _collect(loss):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(f"internal: grad {pg.shape} for tensor {parent.shape}")
            prev = pending.get(parent._id)
            pending[parent._id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def check_finite(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    arr = as_array(x)
    if not np.isfinite(arr).all():
        bad = int((~np.isfinite(arr)).sum())
        raise NumericError(f"{what}: {bad} non-finite values")
