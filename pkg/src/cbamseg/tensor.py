"""Dense float64 tensors with reverse-mode differentiation.

Only the operators the attention block and the toy segmenter need are
provided.  Spatial operators accept either a single sample ``[C, H, W]`` or a
batch ``[N, C, H, W]``.
"""
from __future__ import annotations

import math
import struct
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward=None, op: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable leaf; ``grad`` always has the value's shape."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def _node(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents),
                  _backward=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


# float64 rounds sigmoid to exactly 0 or 1 far out; keep gates strictly inside (0, 1)
_OPEN_LO = np.finfo(np.float64).tiny
_OPEN_HI = np.nextafter(1.0, 0.0)


def sigmoid(a: Tensor) -> Tensor:
    s = np.clip(_sigmoid(a.data), _OPEN_LO, _OPEN_HI)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _node(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _node(np.array(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bw, "concat")


def take(a: Tensor, index) -> Tensor:
    """Gather ``a[index]`` with ``index`` any numpy fancy index."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), bw, "take")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), bw, "matmul")


# ---------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, target, weight=None) -> Tensor:
    """Summed (optionally weighted) binary cross-entropy on raw logits."""
    x = logits.data
    t = np.asarray(target, dtype=np.float64)
    w = np.ones_like(x) if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), x.shape)
    # log(1 + exp(-|x|)) form stays finite for any logit
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _node(np.array((w * per).sum()), (logits,),
                 lambda g: (g * w * (s - t),), "bce")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Summed softmax cross-entropy; ``logits`` is [M, K], ``labels`` int [M]."""
    x = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(x.shape[0])
    p = np.exp(logp)

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (g * d,)

    return _node(np.array(-logp[rows, labels].sum()), (logits,), bw, "xent")


# ---------------------------------------------------------------- spatial

def _as4d(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what} expects [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-d cross-correlation."""
    xd, single = _as4d(x.data, "conv2d")
    wd = weight.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ShapeError(f"conv2d weight must be [C_out,C_in,k,k], got {wd.shape}")
    c_out, c_in, k, _ = wd.shape
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {c_in}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    wmat = wd.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if single:
        out = out[0]

    def bw(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(wd.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                gx = _conv_input_grad(g4, wd, xp.shape, pad)
            else:
                dcols = np.ascontiguousarray(
                    (g2 @ wmat).reshape(n, ho, wo, c_in, k, k).transpose(0, 3, 4, 5, 1, 2))
                gxp = np.zeros(xp.shape)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            if single:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(np.ascontiguousarray(out), parents, bw, "conv2d")


def _conv_input_grad(g: np.ndarray, wd: np.ndarray, padded_shape: tuple, pad: int) -> np.ndarray:
    """Stride-1 input gradient as a full correlation of ``g`` with the flipped kernel."""
    c_out, c_in, k, _ = wd.shape
    n, _, ho, wo = g.shape
    gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    win = sliding_window_view(gp, (k, k), axis=(2, 3))  # [N, O, Hp, Wp, k, k]
    hp, wp = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hp * wp, c_out * k * k)
    wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
    gxp = (cols @ wflip.T).reshape(n, hp, wp, c_in).transpose(0, 3, 1, 2)
    h, w = padded_shape[2] - 2 * pad, padded_shape[3] - 2 * pad
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w])


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce each channel plane to a scalar: [C,H,W] -> [C], [N,C,H,W] -> [N,C]."""
    xd, single = _as4d(x.data, "global_pool")
    n, c, h, w = xd.shape
    if h * w < 1:
        raise ShapeError("global_pool: empty spatial plane")
    flat = xd.reshape(n, c, h * w)
    if mode == "avg":
        out = flat.mean(axis=2)

        def bw(g):
            g2 = g[None] if single else g
            gx = np.broadcast_to((g2 / (h * w))[:, :, None, None], xd.shape).copy()
            return (gx[0] if single else gx,)
    elif mode == "max":
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

        def bw(g):
            g2 = g[None] if single else g
            gx = np.zeros((n, c, h * w))
            np.put_along_axis(gx, idx[:, :, None], g2[:, :, None], axis=2)
            gx = gx.reshape(xd.shape)
            return (gx[0] if single else gx,)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return _node(out[0] if single else out, (x,), bw, f"gpool_{mode}")


def channel_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce across channels per pixel: [C,H,W] -> [1,H,W]."""
    xd, single = _as4d(x.data, "channel_pool")
    n, c, h, w = xd.shape
    if c < 1:
        raise ShapeError("channel_pool: no channels")
    if mode == "avg":
        out = xd.mean(axis=1, keepdims=True)

        def bw(g):
            g2 = g[None] if single else g
            gx = np.broadcast_to(g2 / c, xd.shape).copy()
            return (gx[0] if single else gx,)
    elif mode == "max":
        idx = xd.argmax(axis=1)[:, None]
        out = np.take_along_axis(xd, idx, axis=1)

        def bw(g):
            g2 = g[None] if single else g
            gx = np.zeros(xd.shape)
            np.put_along_axis(gx, idx, g2, axis=1)
            return (gx[0] if single else gx,)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return _node(out[0] if single else out, (x,), bw, f"cpool_{mode}")


def mlp_forward(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Bias-free two-layer perceptron with a rectifier hidden layer.

    ``x`` is ``[C]`` or ``[N, C]``; ``w1`` is ``[C/r, C]`` and ``w2`` is ``[C, C/r]``.
    Returns pre-sigmoid logits with the shape of ``x``.
    """
    single = x.data.ndim == 1
    c = x.shape[-1]
    if w1.shape[1] != c or w2.shape != (c, w1.shape[0]):
        raise ShapeError(f"mlp_forward: weights {w1.shape}, {w2.shape} do not fit input width {c}")
    x2 = reshape(x, (1, c)) if single else x
    hidden = relu(matmul(x2, transpose(w1, (1, 0))))
    out = matmul(hidden, transpose(w2, (1, 0)))
    return reshape(out, (c,)) if single else out


# ---------------------------------------------------------------- gradient check

def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                      step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``point`` is perturbed in place and restored; it may be a Parameter the
    function closes over.  Non-finite evaluations make the check fail (inf).
    """
    was_required = point.requires_grad
    saved_grad = point.grad
    point.requires_grad = True
    point.grad = np.zeros_like(point.data)
    try:
        out = fn(point)
        if out.data.size != 1:
            raise ShapeError("finite_diff_check: fn must return a scalar")
        if not np.all(np.isfinite(out.data)):
            warnings.warn("finite_diff_check: non-finite function value")
            return math.inf
        backward(out)
        analytic = point.grad.copy()
        flat = point.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(point).data.item()
            flat[i] = orig - step
            lo = fn(point).data.item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                warnings.warn(f"finite_diff_check: non-finite value at coordinate {i}")
                return math.inf
            numeric[i] = (hi - lo) / (2.0 * step)
    finally:
        point.requires_grad = was_required
        point.grad = saved_grad if isinstance(point, Parameter) else None
        if isinstance(point, Parameter) and point.grad is None:
            point.grad = np.zeros_like(point.data)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))


# ---------------------------------------------------------------- serialization

_MAGIC = b"CBT1"


def tensor_to_bytes(arr) -> bytes:
    """Header (magic, ndim, extents) then row-major little-endian float64 values."""
    a = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    head = _MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}q", *a.shape)
    return head + a.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != _MAGIC:
        raise ValueError("not a tensor record")
    offset += 4
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}q", buf, offset)
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
    return arr, offset + 8 * count


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())[0]
