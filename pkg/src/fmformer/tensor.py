"""Minimal N-dimensional tensor with reverse-mode automatic differentiation.

Arrays live in row-major numpy buffers. Every differentiable op records its
inputs and a backward rule on the output tensor; :meth:`Tensor.backward`
linearises that graph into a tape (topological order) and replays it in
reverse, visiting each op exactly once.

Training runs in float32. Gradient oracles switch to float64 with
:func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

GELU_TANH_CONST = 0.7978845608  # sqrt(2 / pi), tanh approximation
GELU_CUBIC = 0.044715

_dtype: type = np.float32
_grad_enabled = True
_check_finite = False


def get_default_dtype() -> type:
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors."""
    prev = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def check_finite() -> Iterator[None]:
    """Raise FloatingPointError as soon as any op produces NaN/Inf."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    """Value-semantic array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_op", "_spent", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        target = np.dtype(dtype).type if dtype is not None else _dtype
        if arr.dtype != target:
            arr = arr.astype(target)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._spent = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    # -- reverse mode ---------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar unless an explicit seed gradient is given.
        The recorded graph is released afterwards; calling backward a second
        time on the same result raises.
        """
        if self._spent:
            raise RuntimeError("backward() already called on this graph; rebuild it with a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad (empty tape)")

        tape = _build_tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._prev, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in tape:
            if node._backward is not None:
                node._prev = ()
                node._backward = None
                node._spent = True
        self._spent = True


def _build_tape(root: Tensor) -> list[Tensor]:
    """Topological order of the graph ending at ``root`` (producers first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._spent = False
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._prev = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` the input is clamped from below first."""
    x = a.data
    if floor > 0.0:
        clamped = np.maximum(x, floor)
        mask = x > floor

        def backward(g):
            return (np.where(mask, g / clamped, 0.0).astype(x.dtype),)

        return _result(np.log(clamped), (a,), backward, "log")
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return _result(np.where(mask, x, 0).astype(x.dtype), (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(GELU_TANH_CONST * x * (1.0 + GELU_CUBIC * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = GELU_TANH_CONST * (1.0 + 3.0 * GELU_CUBIC * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(a.data[idx]), (a,), backward, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; the 2-D case is plain a @ b."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if b.ndim == 2:
            if a.requires_grad:
                ga = g @ bd.T
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# normalisation and softmax
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward, "layer_norm")


def batch_norm_2d(x: Tensor, gain: Tensor, bias: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                  training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of a B×H×W×C map.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode the running statistics are used.
    """
    xd = x.data
    axes = (0, 1, 2)
    c = xd.shape[-1]
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu = running_mean.astype(xd.dtype)
        xc = xd - mu
        var = running_var.astype(xd.dtype)
    rstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        g2 = g.reshape(-1, c)
        ggain = (g2 * xhat.reshape(-1, c)).sum(axis=0) if gain.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            if training:
                gx = rstd * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
            else:
                gx = dxhat * rstd
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward, "batch_norm_2d")


# ---------------------------------------------------------------------------
# convolution (NHWC)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with 'same' zero padding.

    ``x`` is B×H×W×Cin and ``w`` is k×k×Cin×Cout with odd k (1 or 3).
    """
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d expects an odd square kernel, got {w.shape}")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    bsz, h, wd, _ = x.shape
    if k == 1:
        out = matmul(x, reshape(w, (cin, cout)))
    else:
        out = _conv_kxk(x, w)
    if b is not None:
        out = add(out, b)
    return out


def _conv_kxk(x: Tensor, w: Tensor) -> Tensor:
    k, _, cin, cout = w.shape
    p = k // 2
    xd = x.data
    bsz, h, wd, _ = xd.shape
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    # rows ordered (ki, kj, cin) to match the k×k×Cin×Cout kernel layout
    cols = np.empty((bsz, h, wd, k, k, cin), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + wd, :]
    cols = cols.reshape(bsz * h * wd, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(bsz, h, wd, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = gx = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(k, k, cin, cout)
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(bsz, h, wd, k, k, cin)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, p:p + h, p:p + wd, :]
        return gx, gw

    return _result(out, (x, w), backward, "conv2d")


def deconv2d_2x2(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution, 2×2 kernel, stride 2, no padding.

    ``x`` is B×H×W×Cin, ``w`` is Cin×2×2×Cout; output is B×2H×2W×Cout with
    ``out[b, 2i+a, 2j+c] = x[b, i, j] @ w[:, a, c]``.
    """
    cin, kh, kw, cout = w.shape
    if (kh, kw) != (2, 2):
        raise ValueError(f"deconv2d_2x2 expects a Cin×2×2×Cout kernel, got {w.shape}")
    if x.shape[-1] != cin:
        raise ValueError(f"deconv2d channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    bsz, h, wd, _ = x.shape
    xd = x.data.reshape(-1, cin)
    wmat = w.data.reshape(cin, 4 * cout)
    out = (xd @ wmat).reshape(bsz, h, wd, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(bsz, 2 * h, 2 * wd, cout)

    def backward(g):
        g2 = g.reshape(bsz, h, 2, wd, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
        gx = (g2 @ wmat.T).reshape(bsz, h, wd, cin) if x.requires_grad else None
        gw = (xd.T @ g2).reshape(cin, 2, 2, cout) if w.requires_grad else None
        return gx, gw

    res = _result(out, (x, w), backward, "deconv2d_2x2")
    if b is not None:
        res = add(res, b)
    return res


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def interp_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """Linear interpolation weights (n_out × n_in), half-pixel centres, edge clamp."""
    if n_in <= 0 or n_out <= 0:
        raise ValueError(f"interpolation extents must be positive, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m.astype(dtype or _dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of a B×H×W×C map (half-pixel centres)."""
    _, h, wd, _ = x.shape
    if (h, wd) == (out_h, out_w):
        return x
    rh = interp_matrix(h, out_h, x.dtype.type)
    rw = interp_matrix(wd, out_w, x.dtype.type)
    out = np.einsum("oh,bhwc->bowc", rh, x.data)
    out = np.einsum("pw,bowc->bopc", rw, out)

    def backward(g):
        gx = np.einsum("pw,bopc->bowc", rw, g)
        gx = np.einsum("oh,bowc->bhwc", rh, gx)
        return (gx,)

    return _result(out, (x,), backward, "resize_bilinear")


def resize_axis(x: Tensor, axis: int, n_out: int) -> Tensor:
    """Linear resampling along one axis (half-pixel centres)."""
    ax = axis % x.ndim
    n_in = x.shape[ax]
    if n_in == n_out:
        return x
    r = interp_matrix(n_in, n_out, x.dtype.type)
    moved = np.moveaxis(x.data, ax, -1)
    out = np.moveaxis(moved @ r.T, -1, ax)

    def backward(g):
        gm = np.moveaxis(g, ax, -1) @ r
        return (np.moveaxis(gm, -1, ax),)

    return _result(np.ascontiguousarray(out), (x,), backward, "resize_axis")


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
