"""Image backbone and spatial encoder.

The backbone is a small strided conv stack producing three feature levels
(strides 4/8/16 by default); the levels are projected to a shared embedding
width, flattened, tagged with 2-d positional and level embeddings, and
refined by a pre-norm self-attention encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .nn import Conv2dLayer, LinearLayer, ParamRegistry, TransformerBlock, positional_encoding
from .tensor import Tensor


@dataclass
class MultiScaleFeatures:
    levels: list  # Tensor per level, shape (c_i, m_i, n_i), fine to coarse


@dataclass
class SpatialEmbeddings:
    tokens: Tensor                      # (V_t, M)
    token_origin: list                  # (level, row, col) per token
    level_extents: list                 # (m_i, n_i) per level


class Backbone:
    """Three-level conv feature extractor: stem stride S, then two stride-2 stages."""

    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 channels=(32, 64, 128), stem_stride: int = 4):
        if len(channels) != 3:
            raise ConfigurationError(f"backbone expects 3 channel extents, got {channels}")
        self.channels = tuple(channels)
        self.stem_stride = stem_stride
        self.total_stride = stem_stride * 4
        c0, c1, c2 = channels
        self.stem = Conv2dLayer(reg, "backbone.stem.conv", 3, c0, stem_stride, rng, stride=stem_stride)
        self.stem_refine = Conv2dLayer(reg, "backbone.stem.refine", c0, c0, 3, rng, pad=1)
        self.down1 = Conv2dLayer(reg, "backbone.stage1.down", c0, c1, 2, rng, stride=2)
        self.refine1 = Conv2dLayer(reg, "backbone.stage1.refine", c1, c1, 3, rng, pad=1)
        self.down2 = Conv2dLayer(reg, "backbone.stage2.down", c1, c2, 2, rng, stride=2)
        self.refine2 = Conv2dLayer(reg, "backbone.stage2.refine", c2, c2, 3, rng, pad=1)

    def __call__(self, image: Tensor) -> MultiScaleFeatures:
        c, h, w = image.shape
        if c != 3:
            raise ConfigurationError(f"backbone expects a 3-channel image, got shape {image.shape}")
        s = self.total_stride
        if h % s != 0 or w % s != 0:
            raise ConfigurationError(f"image extents {h}x{w} must be divisible by {s}")
        f0 = T.gelu(self.stem_refine(T.gelu(self.stem(image))))
        f1 = T.gelu(self.refine1(T.gelu(self.down1(f0))))
        f2 = T.gelu(self.refine2(T.gelu(self.down2(f1))))
        return MultiScaleFeatures(levels=[f0, f1, f2])


class TokenProjector:
    """Flatten multi-scale maps into one token matrix with positions and level tags."""

    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 channels=(32, 64, 128), model_dim: int = 64):
        self.model_dim = model_dim
        self.projections = [
            LinearLayer(reg, f"token_proj.level{i}", c, model_dim, rng)
            for i, c in enumerate(channels)
        ]
        self.level_embed = reg.register("token_proj.level_embed", np.zeros((len(channels), model_dim)))

    def __call__(self, feats: MultiScaleFeatures) -> SpatialEmbeddings:
        pieces = []
        origin = []
        extents = []
        for i, fmap in enumerate(feats.levels):
            c, m, n = fmap.shape
            flat = T.reshape(T.transpose(fmap, (1, 2, 0)), (m * n, c))
            tokens = self.projections[i](flat)
            pe = positional_encoding("sinusoidal-2d", (m, n), self.model_dim)
            tokens = tokens + pe + T.slice_rows(self.level_embed, i, i + 1)
            pieces.append(tokens)
            origin.extend((i, r, col) for r in range(m) for col in range(n))
            extents.append((m, n))
        return SpatialEmbeddings(tokens=T.concat(pieces, axis=0), token_origin=origin,
                                 level_extents=extents)


class ImageEncoder:
    """Stack of pre-norm self-attention blocks over the spatial tokens."""

    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 model_dim: int, heads: int, layers: int, mlp_ratio: int = 2):
        if layers < 1:
            raise ConfigurationError(f"image encoder needs at least 1 layer, got {layers}")
        self.blocks = [
            TransformerBlock(reg, f"image_encoder.layer{i}", model_dim, heads,
                             model_dim * mlp_ratio, rng)
            for i in range(layers)
        ]

    def __call__(self, emb: SpatialEmbeddings) -> SpatialEmbeddings:
        x = emb.tokens
        for block in self.blocks:
            x = block(x)
        return SpatialEmbeddings(tokens=x, token_origin=emb.token_origin,
                                 level_extents=emb.level_extents)


def pooled_top_level(feats: MultiScaleFeatures) -> Tensor:
    """Global average over the coarsest feature map, shape (1, c_top)."""
    top = feats.levels[-1]
    c, m, n = top.shape
    flat = T.reshape(top, (c, m * n))
    return T.transpose(T.tmean(flat, axis=1, keepdims=True))
