"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`.  When any input requires a gradient
the output keeps a reference to its parents and a closure mapping the
output gradient to input gradients.  ``Tensor.backward`` linearises that
graph into a :class:`Tape` and replays it in reverse.

Broadcasting is limited to leading dimensions: an operand of shape ``(C,)``
may be combined with ``(N, H, W, C)`` but ``(N, 1, 1, C)`` may not.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "tensor", "zeros",
    "set_default_dtype", "get_default_dtype", "precision", "no_grad",
    "add", "sub", "mul", "matmul", "relu", "gelu", "softmax", "log_softmax",
    "cross_entropy", "cross_entropy_2class", "layer_norm", "concat",
    "reshape", "transpose", "roll", "masked", "embedding", "conv2d",
    "upsample", "grad_check", "grad_check_inputs", "save_tensor", "load_tensor",
]

MAGIC = b"MQT1"


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_local = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float64))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _local.dtype = dtype


def resolve_dtype(dtype=None) -> np.dtype:
    """``dtype`` as an ``np.dtype``, or the thread default when None.

    (``np.dtype`` objects are falsy, so ``dtype or default`` is wrong.)
    """
    return get_default_dtype() if dtype is None else np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread (inference / finite differences)."""
    old = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            floating = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if floating else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._consumed = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------
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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis) * (1.0 / n)

    # -- differentiation ------------------------------------------------
    def backward(self, grad=None, retain_graph: bool = False) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        Tape(self).backward(np.asarray(grad, dtype=self.dtype), retain_graph=retain_graph)


class Tape:
    """Operations reachable from ``root`` in topological order.

    ``backward`` walks the list in reverse, so every node's gradient is
    complete before it is propagated to its parents.
    """

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
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def backward(self, seed: np.ndarray, retain_graph: bool = False) -> None:
        if any(n._consumed for n in self.nodes):
            raise RuntimeError("backward called twice on the same graph; "
                               "pass retain_graph=True to the first call")
        if not self.root.requires_grad:
            raise RuntimeError("tensor does not require grad")
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._backward(g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op}: backward produced {pg.shape} for input {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node._consumed = True
                node._backward = _consumed_backward
                node._parents = ()


def _consumed_backward(g):
    raise RuntimeError("graph already consumed by backward")


# ----------------------------------------------------------------------
# helpers


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=resolve_dtype(dtype)), requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=resolve_dtype(dtype)), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_leading_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} only broadcast over leading dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# ----------------------------------------------------------------------
# element-wise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Hadamard product (or scaling by a constant)."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def masked(x: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask (numpy broadcasting allowed for the mask)."""
    keep = np.asarray(keep).astype(x.dtype)
    out = x.data * keep
    if out.shape != x.shape:
        raise ShapeError(f"masked: mask {keep.shape} would change shape {x.shape}")

    def backward(g):
        return (g * keep,)

    return _result(out, (x,), backward, "masked")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return _result(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), backward, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward, "gelu")


# ----------------------------------------------------------------------
# contractions and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, N]``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    _check_leading_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (bool, broadcastable) excludes entries.

    Excluded entries get probability 0.  A slice with no admissible entry
    yields all zeros rather than NaN.
    """
    axis = _check_axis(x, axis, "softmax")
    xd = x.data
    if mask is None:
        shifted = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        top = np.where(mask, xd, -np.inf).max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(np.where(mask, xd - top, 0.0)), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        y = e / np.where(s > 0, s, 1.0)
    y = y.astype(x.dtype, copy=False)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under ``softmax(logits, -1)``."""
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: target {target.shape} vs logits {logits.shape}")
    if target.size == 0:
        raise ShapeError("cross_entropy: empty target")
    k = logits.shape[-1]
    if target.min() < 0 or target.max() >= k:
        raise ValueError(f"cross_entropy: target values must lie in [0, {k})")
    flat = logits.data.reshape(-1, k)
    t = target.reshape(-1).astype(np.intp)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = t.size
    nll = lse - shifted[np.arange(n), t]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _result(loss, (logits,), backward, "cross_entropy")


def cross_entropy_2class(logits: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-mean two-class cross entropy; ``logits`` is ``[..., H, W, 2]``."""
    target = np.asarray(target)
    if logits.shape[-1] != 2:
        raise ShapeError(f"cross_entropy_2class: expected 2 logit channels, got {logits.shape}")
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy_2class: mask {target.shape} vs logits {logits.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("cross_entropy_2class: mask values must be 0 or 1")
    return cross_entropy(logits, target)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    c = xd.shape[-1]

    def backward(g):
        lead = g.reshape(-1, c)
        dgamma = (lead * xhat.reshape(-1, c)).sum(axis=0)
        dbeta = lead.sum(axis=0)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "layer_norm")


# ----------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}") from exc

    def backward(g):
        return (g.reshape(old),)

    return _result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def _getitem(x: Tensor, key) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(x.data[key]), (x,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    axis = _check_axis(ref, axis, "concat")
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis):
            raise ShapeError(f"concat: {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)

    def backward(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return _result(np.roll(x.data, shifts, axis=axes), (x,), backward, "roll")


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id outside [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


# ----------------------------------------------------------------------
# spatial ops (channels-last, optional leading batch axis)


def _shifted_rows(xp: np.ndarray, ky: int, kx: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(xp[:, ky:ky + h, kx:kx + w, :]).reshape(-1, xp.shape[-1])


def _correlate(xd: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Same-padded correlation of ``[N, H, W, Cin]`` with ``[k, k, Cin, Cout]``, one
    matmul per kernel tap."""
    n, h, w, cin = xd.shape
    k, _, _, cout = kern.shape
    if k == 1:
        return (xd.reshape(-1, cin) @ kern[0, 0]).reshape(n, h, w, cout)
    r = k // 2
    xp = np.pad(xd, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.zeros((n * h * w, cout), dtype=np.result_type(xd, kern))
    for ky in range(k):
        for kx in range(k):
            out += _shifted_rows(xp, ky, kx, h, w) @ kern[ky, kx]
    return out.reshape(n, h, w, cout)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    ``x`` is ``[N, H, W, Cin]`` or ``[H, W, Cin]``; ``kernel`` is ``[k, k, Cin, Cout]``
    with ``k`` odd.
    """
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kernel.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[-1]} vs kernel {kernel.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, h, w, _ = xd.shape
    r = k // 2
    kd = kernel.data
    out = _correlate(xd, kd)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(-1, cout)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            xp = np.pad(xd, ((0, 0), (r, r), (r, r), (0, 0))) if k > 1 else xd
            for ky in range(k):
                for kx in range(k):
                    gk[ky, kx] = _shifted_rows(xp, ky, kx, h, w).T @ g2
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            # transposed correlation: flip taps, swap channel roles
            gxd = _correlate(g4, np.ascontiguousarray(kd[::-1, ::-1].transpose(0, 1, 3, 2)))
            gx = gxd[0] if squeeze else gxd
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _result(out[0] if squeeze else out, parents, backward, "conv2d")


def _interp_matrix(n_in: int, factor: int, mode: str, dtype) -> np.ndarray:
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "nearest":
        m[np.arange(n_out), np.arange(n_out) // factor] = 1.0
        return m
    # half-pixel centres, source clamped at the borders
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def upsample(x: Tensor, factor: int = 2, mode: str = "bilinear") -> Tensor:
    """Upscale the two spatial axes of ``[N, H, W, C]`` or ``[H, W, C]`` by ``factor``."""
    if factor not in (2, 4):
        raise ValueError(f"upsample: factor must be 2 or 4, got {factor}")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"upsample: unknown mode {mode!r}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    _, h, w, _ = xd.shape
    mh = _interp_matrix(h, factor, mode, x.dtype)
    mw = _interp_matrix(w, factor, mode, x.dtype)
    if mode == "nearest":
        out = np.repeat(np.repeat(xd, factor, axis=1), factor, axis=2)
    else:
        out = np.einsum("ia,nabc->nibc", mh, xd, optimize=True)
        out = np.einsum("jb,nibc->nijc", mw, out, optimize=True)

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = np.einsum("ia,nibc->nabc", mh, g4, optimize=True)
        gx = np.einsum("jb,najc->nabc", mw, gx, optimize=True)
        return (gx[0] if squeeze else gx,)

    return _result(out[0] if squeeze else out, (x,), backward, f"upsample_{mode}")


# ----------------------------------------------------------------------
# verification


def grad_check_inputs(loss_fn: Callable[[], Tensor], inputs: dict[str, Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None
                      ) -> dict[str, float]:
    """Compare backprop gradients against central differences for each named input.

    ``loss_fn`` is re-evaluated with each coordinate perturbed in place.
    Returns ``{name: max |analytic - numeric| / max(1, |numeric|)}``.
    """
    for t in inputs.values():
        t.requires_grad = True
        t.zero_grad()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check: function must return a scalar, got shape {loss.shape}")
    loss.backward()
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, t in inputs.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        errors[name] = worst
    return errors


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5,
               max_coords: int | None = None) -> float:
    """Max relative error between the backprop gradient of scalar ``f`` at ``point`` and
    central finite differences."""
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64))
    return grad_check_inputs(lambda: f(x), {"x": x}, eps=eps, max_coords=max_coords)["x"]


# ----------------------------------------------------------------------
# serialisation


def save_tensor(path, t) -> None:
    """Write ``MQT1``, u32 rank, u32 dims, then little-endian scalars."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> Tensor:
    """Read a tensor written by :func:`save_tensor`; precision is inferred from the payload size."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    off = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = len(raw) - off
    if count == 0 or payload % count or payload // count not in (4, 8):
        raise ValueError(f"{path}: payload of {payload} bytes does not fit shape {dims}")
    dtype = "<f4" if payload // count == 4 else "<f8"
    arr = np.frombuffer(raw, dtype=dtype, offset=off).reshape(dims)
    return Tensor(arr.astype(arr.dtype.newbyteorder("=")))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
