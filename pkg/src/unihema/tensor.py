"""Dense float64 tensors with reverse-mode differentiation.

Every architecture equation in the model is assembled from the primitives
here. Values are numpy arrays in row-major layout; gradients are computed
by walking the recorded graph in reverse topological order. Summation
orders are fixed so that runs are reproducible bit-for-bit per seed.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import DataFormatError, DimensionError, UsageError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A node in the computation graph.

    Leaf tensors hold data and optionally accumulate gradients; op outputs
    additionally record their parents and a backward closure. ``grad`` is
    populated only on leaves with ``requires_grad`` set, and repeated
    backward passes accumulate into it until ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(data, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties split the gradient evenly between operands."""
    a, b = _lift(a), _lift(b)
    data = np.maximum(a.data, b.data)

    def backward(g):
        wa = (a.data > b.data) + 0.5 * (a.data == b.data)
        return (
            _unbroadcast(g * wa, a.data.shape),
            _unbroadcast(g * (1.0 - wa), b.data.shape),
        )

    return _make(data, (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = np.minimum(a.data, b.data)

    def backward(g):
        wa = (a.data < b.data) + 0.5 * (a.data == b.data)
        return (
            _unbroadcast(g * wa, a.data.shape),
            _unbroadcast(g * (1.0 - wa), b.data.shape),
        )

    return _make(data, (a, b), backward, "minimum")


def exp(a) -> Tensor:
    a = _lift(a)
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _make(data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _lift(a)
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(data, (a,), backward, "log")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), backward, "sigmoid")


def gelu(a) -> Tensor:
    """Exact erf-form GELU."""
    a = _lift(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * phi

    def backward(g):
        return (g * (phi + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI),)

    return _make(data, (a,), backward, "gelu")


def softplus(a) -> Tensor:
    """Numerically stable log(1 + e^x); gradient is the logistic function."""
    a = _lift(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _make(data, (a,), backward, "softplus")


# -- reductions and shaping ----------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_rows(a) -> Tensor:
    """Column means of a 2-d tensor via exactly-rounded summation.

    ``math.fsum`` makes the result independent of row order bit-for-bit,
    which the permutation-invariance contract of the global feature
    extractor relies on.
    """
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError(f"mean_rows expects a 2-d tensor, got shape {a.data.shape}")
    n, d = a.data.shape
    data = np.array([[math.fsum(a.data[:, j]) / n for j in range(d)]])

    def backward(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make(data, (a,), backward, "mean_rows")


def reshape(a, *shape) -> Tensor:
    a = _lift(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), backward, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    data = np.transpose(a.data, axes)

    def backward(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return _make(data, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward, "concat")


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    data = a.data[start:stop].copy()

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[start:stop] = g
        return (buf,)

    return _make(data, (a,), backward, "slice_rows")


def gather_rows(a, indices) -> Tensor:
    """Select rows by index; repeated indices accumulate gradient."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx].copy()

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(data, (a,), backward, "gather_rows")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product for 2-d operands or stacked 3-d operands."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul needs matching 2-d or 3-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return _make(data, (a, b), backward, "matmul")


def contract(mask_emb, fmap) -> Tensor:
    """Einstein summation out[q,h,w] = sum_c mask_emb[q,c] * fmap[c,h,w]."""
    mask_emb, fmap = _lift(mask_emb), _lift(fmap)
    if mask_emb.data.ndim != 2 or fmap.data.ndim != 3:
        raise DimensionError(f"contract expects (q,c) and (c,h,w), got {mask_emb.data.shape} and {fmap.data.shape}")
    q, c = mask_emb.data.shape
    c2, h, w = fmap.data.shape
    if c != c2:
        raise DimensionError(f"contract channel mismatch: {mask_emb.data.shape} vs {fmap.data.shape}")
    flat = fmap.data.reshape(c, h * w)
    data = (mask_emb.data @ flat).reshape(q, h, w)

    def backward(g):
        gf = g.reshape(q, h * w)
        return (gf @ flat.T, (mask_emb.data.T @ gf).reshape(c, h, w))

    return _make(data, (mask_emb, fmap), backward, "contract")


# -- normalization and attention kernels ----------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    if a.data.shape == () or a.data.shape[axis] == 0:
        raise DimensionError(f"softmax along an empty axis of shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    if a.data.shape == () or a.data.shape[axis] == 0:
        raise DimensionError(f"log_softmax along an empty axis of shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match feature dim {d}")
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(data, (x, gain, bias), backward, "layer_norm")


# -- convolutions ----------------------------------------------------------

def _conv_out_extent(extent: int, k: int, stride: int, pad: int, what: str) -> int:
    from .errors import ConfigurationError

    span = extent + 2 * pad - k
    if span < 0:
        raise ConfigurationError(f"kernel {k} exceeds padded {what} extent {extent + 2 * pad}")
    if span % stride != 0:
        raise ConfigurationError(
            f"conv {what}: ({extent} + 2*{pad} - {k}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, oh * ow))
    for di in range(kh):
        for dj in range(kw):
            sub = xp[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride]
            cols[:, di, dj, :] = sub.reshape(cin, -1)
    return cols.reshape(cin * kh * kw, oh * ow)


def conv2d(x, kernels, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution of a single c_in x h x w image (zero padding)."""
    x, kernels = _lift(x), _lift(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects (c,h,w) and (co,ci,kh,kw), got {x.data.shape} and {kernels.data.shape}")
    cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernels.data.shape
    if cin != cin_k:
        raise DimensionError(f"conv2d channel mismatch: input {x.data.shape} vs kernels {kernels.data.shape}")
    oh = _conv_out_extent(h, kh, stride, pad, "height")
    ow = _conv_out_extent(w, kw, stride, pad, "width")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w_mat = kernels.data.reshape(cout, -1)
    data = (w_mat @ cols).reshape(cout, oh, ow)

    def backward(g):
        g_mat = g.reshape(cout, -1)
        dk = (g_mat @ cols.T).reshape(kernels.data.shape)
        dcols = (w_mat.T @ g_mat).reshape(cin, kh, kw, oh, ow)
        dxp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
        for di in range(kh):
            for dj in range(kw):
                dxp[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += dcols[:, di, dj]
        dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dk

    return _make(data, (x, kernels), backward, "conv2d")


def conv2d_transpose(x, kernels, stride: int = 2) -> Tensor:
    """Transposed convolution (fractional stride upsampling), no padding."""
    x, kernels = _lift(x), _lift(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose expects (ci,h,w) and (ci,co,kh,kw), got {x.data.shape} and {kernels.data.shape}"
        )
    cin, h, w = x.data.shape
    cin_k, cout, kh, kw = kernels.data.shape
    if cin != cin_k:
        raise DimensionError(f"conv2d_transpose channel mismatch: {x.data.shape} vs {kernels.data.shape}")
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw
    k_mat = kernels.data.reshape(cin, cout * kh * kw)
    x_mat = x.data.reshape(cin, h * w)
    cols = (k_mat.T @ x_mat).reshape(cout, kh, kw, h, w)
    data = np.zeros((cout, oh, ow))
    for di in range(kh):
        for dj in range(kw):
            data[:, di : di + stride * h : stride, dj : dj + stride * w : stride] += cols[:, di, dj]

    def backward(g):
        dcols = np.empty((cout, kh, kw, h, w))
        for di in range(kh):
            for dj in range(kw):
                dcols[:, di, dj] = g[:, di : di + stride * h : stride, dj : dj + stride * w : stride]
        dcols_mat = dcols.reshape(cout * kh * kw, h * w)
        dx = (k_mat @ dcols_mat).reshape(x.data.shape)
        dk = (x_mat @ dcols_mat.T).reshape(kernels.data.shape)
        return dx, dk

    return _make(data, (x, kernels), backward, "conv2d_transpose")


# -- backward pass ---------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls accumulate. Fan-out sums contributions.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = flowing.get(id(parent))
                flowing[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g


# -- raw tensor file format -------------------------------------------------

UHTN_MAGIC = b"UHTN"
UHTN_VERSION = 1


def uhtn_bytes(array: np.ndarray) -> bytes:
    """Encode an array: magic, version u32 LE, ndim u32, dims u64[], f64 payload."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    return (UHTN_MAGIC + struct.pack("<II", UHTN_VERSION, arr.ndim)
            + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes())


def read_uhtn_stream(fh, where: str) -> np.ndarray:
    """Decode one tensor blob from an open binary stream."""
    magic = fh.read(4)
    if magic != UHTN_MAGIC:
        raise DataFormatError(f"{where}: bad tensor magic {magic!r}, expected {UHTN_MAGIC!r}")
    header = fh.read(8)
    if len(header) != 8:
        raise DataFormatError(f"{where}: truncated tensor header")
    version, ndim = struct.unpack("<II", header)
    if version != UHTN_VERSION:
        raise DataFormatError(f"{where}: unsupported tensor version {version}")
    dims_raw = fh.read(8 * ndim)
    if len(dims_raw) != 8 * ndim:
        raise DataFormatError(f"{where}: truncated dims")
    dims = struct.unpack(f"<{ndim}Q", dims_raw)
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise DataFormatError(f"{where}: truncated payload ({len(payload)} of {8 * count} bytes)")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def save_uhtn(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(uhtn_bytes(array))


def load_uhtn(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_uhtn_stream(fh, str(path))
