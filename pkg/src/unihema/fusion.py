"""Fusion stage bridging visual and textual token streams.

Four submodules operate at different granularities:

* CrossModalFusion: learnable queries attend text then image tokens through
  two residual cross-attention stages, producing the tokens the text
  decoder conditions on.
* TextGuidedRefinement: injects prompt semantics into the Top-K
  objectness-selected image tokens to seed the image decoder queries.
* SingleCellExtractor: text-independent global image feature from a
  learned query concatenated with the exact token mean.
* QueryMaskFormer: synthesizes per-query segmentation logits by
  contracting query mask embeddings against a fused feature map; the first
  query's map is the binary output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .nn import Conv2dLayer, LinearLayer, MlpBlock, MultiHeadAttention, LayerNormBlock, ParamRegistry
from .tensor import Tensor
from .text import TextEmbeddings
from .vision import SpatialEmbeddings


@dataclass
class TopKQueries:
    k: Tensor                    # (K, M) gathered token rows
    source_indices: np.ndarray   # distinct token indices, score-descending
    objectness: np.ndarray       # scores, non-increasing


@dataclass
class SegmentationLogits:
    y: Tensor                    # (D_t, m, n)
    extent: tuple                # (m, n) of the level-0 grid


class CrossModalFusion:
    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 model_dim: int, text_dim: int, heads: int, query_count: int):
        if query_count < 1:
            raise ConfigurationError(f"fusion query count must be >= 1, got {query_count}")
        self.queries = reg.register(
            "hema_former.cmf.queries",
            rng.normal(0.0, 1.0 / np.sqrt(model_dim), size=(query_count, model_dim)))
        self.text_proj = LinearLayer(reg, "hema_former.cmf.text_proj", text_dim, model_dim, rng)
        self.vis_proj = LinearLayer(reg, "hema_former.cmf.vis_proj", model_dim, model_dim, rng)
        self.attn_text = MultiHeadAttention(reg, "hema_former.cmf.attn_text", model_dim, heads, rng)
        self.attn_vis = MultiHeadAttention(reg, "hema_former.cmf.attn_vis", model_dim, heads, rng)
        self.norm1 = LayerNormBlock(reg, "hema_former.cmf.norm1", model_dim)
        self.norm2 = LayerNormBlock(reg, "hema_former.cmf.norm2", model_dim)
        self.out_proj = LinearLayer(reg, "hema_former.cmf.out_proj", model_dim, text_dim, rng)

    def fuse(self, text: Optional[TextEmbeddings], vis_tokens: Tensor) -> Tensor:
        """Two post-norm residual cross-attention stages, then project to text width."""
        if text is None:
            raise UsageError("cross-modal fusion requires a text prompt")
        projected_text = self.text_proj(text.tokens)
        j = self.norm1(self.queries + self.attn_text(self.queries, projected_text))
        fused = self.norm2(j + self.attn_vis(j, self.vis_proj(vis_tokens)))
        return self.out_proj(fused)


def select_topk(vis: SpatialEmbeddings, k: int, objectness_head: LinearLayer) -> TopKQueries:
    """Pick the K tokens whose max class logit is largest; stable ties by index."""
    v_t = vis.tokens.shape[0]
    if k > v_t:
        raise ConfigurationError(f"top-K {k} exceeds token count {v_t}")
    logits = vis.tokens.data @ objectness_head.weight.data.T + objectness_head.bias.data
    scores = logits.max(axis=1)
    order = np.argsort(-scores, kind="stable")
    idx = order[:k]
    return TopKQueries(k=T.gather_rows(vis.tokens, idx),
                       source_indices=idx.copy(),
                       objectness=scores[idx].copy())


class TextGuidedRefinement:
    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 model_dim: int, text_dim: int, heads: int):
        self.text_proj = LinearLayer(reg, "hema_former.tgvr.text_proj", text_dim, model_dim, rng)
        self.attn = MultiHeadAttention(reg, "hema_former.tgvr.attn", model_dim, heads, rng)
        self.merge = LinearLayer(reg, "hema_former.tgvr.merge", 2 * model_dim, model_dim, rng)

    def refine(self, topk: TopKQueries, text: Optional[TextEmbeddings]) -> Tensor:
        """Cross-attend queries over projected text, concat along features, project back."""
        if text is None:
            raise UsageError("text-guided refinement requires a disease prompt")
        attended = self.attn(topk.k, self.text_proj(text.tokens))
        return self.merge(T.concat([topk.k, attended], axis=1))


class SingleCellExtractor:
    def __init__(self, reg: ParamRegistry, rng: np.random.Generator, model_dim: int):
        self.query = reg.register("hema_former.scfe.query",
                                  rng.normal(0.0, 1.0 / np.sqrt(model_dim), size=(1, model_dim)))
        self.proj = LinearLayer(reg, "hema_former.scfe.proj", 2 * model_dim, model_dim, rng)

    def extract(self, vis_tokens: Tensor) -> Tensor:
        """Exact token mean concatenated with the learned query, projected to (1, M)."""
        return self.proj(T.concat([T.mean_rows(vis_tokens), self.query], axis=1))


class QueryMaskFormer:
    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 level0_channels: int, model_dim: int, mask_channels: int):
        self.model_dim = model_dim
        self.mask_channels = mask_channels
        self.fmap_proj = Conv2dLayer(reg, "hema_former.qgmf.fmap_proj",
                                     level0_channels, model_dim, 1, rng)
        self.fuse_proj = Conv2dLayer(reg, "hema_former.qgmf.fuse_proj",
                                     model_dim, mask_channels, 1, rng)
        self.mask_mlp = MlpBlock(reg, "hema_former.qgmf.mask_mlp", model_dim, model_dim, rng)
        self.mask_proj = LinearLayer(reg, "hema_former.qgmf.mask_proj",
                                     model_dim, mask_channels, rng)

    def masks(self, f1: Tensor, vis: SpatialEmbeddings, obj: Tensor) -> SegmentationLogits:
        m, n = vis.level_extents[0]
        if f1.shape[1:] != (m, n):
            raise DimensionError(
                f"backbone map extent {f1.shape[1:]} does not match level-0 token grid ({m}, {n})")
        token_map = T.transpose(
            T.reshape(T.slice_rows(vis.tokens, 0, m * n), (m, n, self.model_dim)), (2, 0, 1))
        fused = self.fmap_proj(f1) + token_map
        g_proj = self.fuse_proj(fused)
        mask_emb = self.mask_proj(self.mask_mlp(obj))
        return SegmentationLogits(y=T.contract(mask_emb, g_proj), extent=(m, n))


def binary_mask(seg: SegmentationLogits) -> np.ndarray:
    """Sigmoid of the first query's logits, strict 0.5 threshold (ties are background)."""
    probs = 1.0 / (1.0 + np.exp(-seg.y.data[0]))
    return probs > 0.5


def _interp_matrix(dst: int, src: int) -> np.ndarray:
    """Linear interpolation weights mapping src samples onto dst positions.

    Endpoints align, so dst == src yields the identity exactly.
    """
    w = np.zeros((dst, src))
    if src == 1:
        w[:, 0] = 1.0
        return w
    for i in range(dst):
        pos = i * (src - 1) / (dst - 1) if dst > 1 else 0.0
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        w[i, lo] += 1.0 - frac
        if hi != lo:
            w[i, hi] += frac
    return w


def _bilinear(y: Tensor, target: tuple) -> Tensor:
    q, m, n = y.shape
    out_h, out_w = target
    wh = _interp_matrix(out_h, m)
    ww = _interp_matrix(out_w, n)
    rows = T.reshape(T.matmul(Tensor(wh), T.reshape(T.transpose(y, (1, 0, 2)), (m, q * n))),
                     (out_h, q, n))
    cols = T.reshape(T.transpose(rows, (2, 1, 0)), (n, q * out_h))
    out = T.reshape(T.matmul(Tensor(ww), cols), (out_w, q, out_h))
    return T.transpose(out, (1, 2, 0))


class MaskUpsampler:
    """Resolution recovery for mask logits.

    bilinear mode is parameter-free. learnable mode adds a residual branch
    of two stride-2 transposed convolutions (last one zero-initialized, so
    an untrained upsampler equals plain interpolation) and covers any
    remaining scale gap bilinearly.
    """

    def __init__(self, reg: ParamRegistry, rng: np.random.Generator, hidden_channels: int = 8):
        self.hidden = hidden_channels
        self.w1 = reg.register("hema_former.qgmf.upsampler.tconv1.weight",
                               rng.normal(0.0, 1.0 / 4.0, size=(1, hidden_channels, 4, 4)))
        self.b1 = reg.register("hema_former.qgmf.upsampler.tconv1.bias", np.zeros(hidden_channels))
        self.w2 = reg.register("hema_former.qgmf.upsampler.tconv2.weight",
                               np.zeros((hidden_channels, 1, 4, 4)))
        self.b2 = reg.register("hema_former.qgmf.upsampler.tconv2.bias", np.zeros(1))

    def _residual(self, channel: Tensor) -> Tensor:
        h = T.conv2d_transpose(channel, self.w1, stride=2)
        h = T.gelu(h + T.reshape(self.b1, (self.hidden, 1, 1)))
        h = T.conv2d_transpose(h, self.w2, stride=2) + T.reshape(self.b2, (1, 1, 1))
        return h

    def upsample(self, y: Tensor, target: tuple, mode: str) -> Tensor:
        q, m, n = y.shape
        out_h, out_w = target
        if out_h < m or out_w < n:
            raise UsageError(f"target {target} smaller than source ({m}, {n})")
        base = _bilinear(y, target)
        if mode == "bilinear":
            return base
        if mode != "learnable":
            raise UsageError(f"unknown upsampling mode: {mode}")
        pieces = []
        for ch in range(q):
            r = self._residual(T.slice_rows(y, ch, ch + 1))
            # two stride-2 tconvs with kernel 4 grow (m) to 4m+6; crop the 3-wide border
            r2 = T.reshape(r, (r.shape[1], r.shape[2]))
            r2 = T.slice_rows(r2, 3, 3 + 4 * m)
            r2 = T.transpose(T.slice_rows(T.transpose(r2), 3, 3 + 4 * n))
            pieces.append(T.reshape(r2, (1, 4 * m, 4 * n)))
        resid = pieces[0] if q == 1 else T.concat(pieces, axis=0)
        return base + _bilinear(resid, target)
