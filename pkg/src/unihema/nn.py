"""Reusable network blocks: projections, attention, MLPs, positional tables.

All learnable state lives in a ParamRegistry keyed by dotted names
(`<module>.<block>.<field>`); training stages freeze and thaw parameters
by glob patterns over those names, and checkpoints store them verbatim.
"""

from __future__ import annotations

import fnmatch
import math
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor


class ParamRegistry:
    """Ordered name -> Tensor map for every learnable in a model."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def match(self, globs: Sequence[str]) -> list[str]:
        out = []
        for name in self._params:
            if any(fnmatch.fnmatchcase(name, g) for g in globs):
                out.append(name)
        return out

    def total_size(self) -> int:
        return sum(p.size for p in self._params.values())


def _init_weight(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim))


class LinearLayer:
    """Affine map x -> x W^T + b with registry-tracked weight and bias."""

    def __init__(self, reg: ParamRegistry, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, zero_init: bool = False):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        w = np.zeros((out_dim, in_dim)) if zero_init else _init_weight(rng, out_dim, in_dim)
        self.weight = reg.register(f"{name}.weight", w)
        self.bias = reg.register(f"{name}.bias", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(
            f"{layer.name}: input shape {x.shape} does not match weight shape {layer.weight.shape}"
        )
    return T.matmul(x, T.transpose(layer.weight)) + layer.bias


class Conv2dLayer:
    """Convolution with bias over a single (c,h,w) image."""

    def __init__(self, reg: ParamRegistry, name: str, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0, zero_init: bool = False):
        self.name = name
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * kernel * kernel
        w = np.zeros((out_ch, in_ch, kernel, kernel)) if zero_init else \
            rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(out_ch, in_ch, kernel, kernel))
        self.weight = reg.register(f"{name}.weight", w)
        self.bias = reg.register(f"{name}.bias", np.zeros(out_ch))

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        return out + T.reshape(self.bias, (self.bias.shape[0], 1, 1))


class LayerNormBlock:
    def __init__(self, reg: ParamRegistry, name: str, dim: int, eps: float = 1e-5):
        self.gain = reg.register(f"{name}.gain", np.ones(dim))
        self.bias = reg.register(f"{name}.bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention:
    """Scaled dot-product attention with per-head split and output projection."""

    def __init__(self, reg: ParamRegistry, name: str, model_dim: int, head_count: int,
                 rng: np.random.Generator):
        if model_dim % head_count != 0:
            raise ConfigurationError(f"{name}: model_dim {model_dim} not divisible by {head_count} heads")
        self.model_dim = model_dim
        self.head_count = head_count
        self.head_dim = model_dim // head_count
        self.q = LinearLayer(reg, f"{name}.q", model_dim, model_dim, rng)
        self.k = LinearLayer(reg, f"{name}.k", model_dim, model_dim, rng)
        self.v = LinearLayer(reg, f"{name}.v", model_dim, model_dim, rng)
        self.out = LinearLayer(reg, f"{name}.out", model_dim, model_dim, rng)

    def __call__(self, q: Tensor, kv: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
        return mha_forward(self, q, kv, additive_mask)


def mha_forward(att: MultiHeadAttention, q: Tensor, kv: Tensor,
                additive_mask: Optional[np.ndarray] = None,
                return_weights: bool = False):
    d = att.model_dim
    if q.shape[-1] != d or kv.shape[-1] != d:
        raise DimensionError(f"attention inputs {q.shape} / {kv.shape} must have {d} columns")
    t_q, t_k = q.shape[0], kv.shape[0]
    if t_k == 0:
        raise UsageError("attention over an empty key/value set")

    def split(x: Tensor, t: int) -> Tensor:
        # (t, d) -> (heads, t, head_dim)
        return T.transpose(T.reshape(x, (t, att.head_count, att.head_dim)), (1, 0, 2))

    qh = split(att.q(q), t_q)
    kh = split(att.k(kv), t_k)
    vh = split(att.v(kv), t_k)
    scores = T.matmul(qh, T.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(att.head_dim))
    if additive_mask is not None:
        scores = scores + additive_mask
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, vh)  # (heads, t_q, head_dim)
    merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (t_q, d))
    out = att.out(merged)
    if return_weights:
        return out, weights.data.copy()
    return out


class MlpBlock:
    """Two projections with a GELU between; shape-preserving on the token axis."""

    def __init__(self, reg: ParamRegistry, name: str, dim: int, hidden: int,
                 rng: np.random.Generator):
        if hidden < 1:
            raise ConfigurationError(f"{name}: hidden dim must be >= 1")
        self.fc1 = LinearLayer(reg, f"{name}.fc1", dim, hidden, rng)
        self.fc2 = LinearLayer(reg, f"{name}.fc2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(block: MlpBlock, x: Tensor) -> Tensor:
    return block.fc2(T.gelu(block.fc1(x)))


def positional_encoding(kind: str, extents, dim: int) -> np.ndarray:
    """Deterministic sinusoid tables added to token embeddings.

    kind "sinusoidal-1d": extents is a length, returns (length, dim).
    kind "sinusoidal-2d": extents is (rows, cols), returns (rows*cols, dim)
    built by concatenating independent row and column tables of dim/2 each.
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"positional encoding dim must be even, got {dim}")
    if kind == "sinusoidal-1d":
        length = int(extents)
        pos = np.arange(length)[:, None]
        i = np.arange(dim // 2)[None, :]
        angles = pos / np.power(10000.0, 2.0 * i / dim)
        table = np.zeros((length, dim))
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        return table
    if kind == "sinusoidal-2d":
        rows, cols = extents
        half = dim // 2
        if half % 2 != 0:
            raise ConfigurationError(f"2-d positional encoding needs dim divisible by 4, got {dim}")
        row_t = positional_encoding("sinusoidal-1d", rows, half)
        col_t = positional_encoding("sinusoidal-1d", cols, half)
        table = np.zeros((rows * cols, dim))
        for r in range(rows):
            table[r * cols:(r + 1) * cols, :half] = row_t[r]
            table[r * cols:(r + 1) * cols, half:] = col_t
        return table
    raise ConfigurationError(f"unknown positional encoding kind: {kind}")


class TransformerBlock:
    """Pre-norm residual block: self-attention then MLP.

    With the attention and MLP output projections zeroed the block is the
    identity map bit-for-bit, which the structural tests rely on.
    """

    def __init__(self, reg: ParamRegistry, name: str, dim: int, heads: int, hidden: int,
                 rng: np.random.Generator):
        self.norm1 = LayerNormBlock(reg, f"{name}.norm1", dim)
        self.attn = MultiHeadAttention(reg, f"{name}.attn", dim, heads, rng)
        self.norm2 = LayerNormBlock(reg, f"{name}.norm2", dim)
        self.mlp = MlpBlock(reg, f"{name}.mlp", dim, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        x = x + self.mlp(self.norm2(x))
        return x


class DecoderBlock:
    """Pre-norm block with self-attention, cross-attention over a memory, MLP.

    Zeroing all three residual output projections makes the block an exact
    identity, like TransformerBlock.
    """

    def __init__(self, reg: ParamRegistry, name: str, dim: int, heads: int, hidden: int,
                 rng: np.random.Generator):
        self.norm1 = LayerNormBlock(reg, f"{name}.norm1", dim)
        self.self_attn = MultiHeadAttention(reg, f"{name}.self_attn", dim, heads, rng)
        self.norm2 = LayerNormBlock(reg, f"{name}.norm2", dim)
        self.cross_attn = MultiHeadAttention(reg, f"{name}.cross_attn", dim, heads, rng)
        self.norm3 = LayerNormBlock(reg, f"{name}.norm3", dim)
        self.mlp = MlpBlock(reg, f"{name}.mlp", dim, hidden, rng)

    def __call__(self, x: Tensor, memory: Tensor,
                 self_mask: Optional[np.ndarray] = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, additive_mask=self_mask)
        x = x + self.cross_attn(self.norm2(x), memory)
        x = x + self.mlp(self.norm3(x))
        return x
