"""Image decoder over the refined queries, plus the task heads and losses.

Detection follows the set-prediction recipe: queries decode into object
embeddings, a Hungarian assignment pairs predictions with ground truth,
and the loss combines class cross-entropy, L1 box distance, generalized
IoU and per-attribute binary cross-entropy for morphology.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import DataFormatError
from .nn import DecoderBlock, LinearLayer, ParamRegistry
from .tensor import Tensor


@dataclass
class DetectionOutput:
    boxes: Tensor         # (D, 4) cxcywh in [0,1]
    class_logits: Tensor  # (D, C+1), last column is "no-object"
    class_probs: Tensor   # softmax of the above
    morph_logits: Tensor  # (D, 6)
    morph_probs: Tensor


@dataclass
class Detection:
    box: tuple            # (cx, cy, w, h)
    class_id: int
    score: float
    morph: list

    def to_json(self) -> str:
        return json.dumps({"box": [round(v, 6) for v in self.box], "class": self.class_id,
                           "score": round(self.score, 6), "morph": [round(m, 6) for m in self.morph]})


@dataclass
class MatchResult:
    pairs: list           # (query index, ground-truth index), injective both ways
    unmatched: list       # query indices without a ground truth


@dataclass
class MatchWeights:
    w_class: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_morph: float = 1.0


class ImageDecoder:
    """Cross-attention decoder stack refining disease-guided queries."""

    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 model_dim: int, heads: int, layers: int, mlp_ratio: int = 2):
        from .errors import ConfigurationError

        if layers < 1:
            raise ConfigurationError(f"image decoder needs at least 1 layer, got {layers}")
        self.blocks = [
            DecoderBlock(reg, f"image_decoder.layer{i}", model_dim, heads,
                         model_dim * mlp_ratio, rng)
            for i in range(layers)
        ]

    def __call__(self, queries: Tensor, vis_tokens: Tensor) -> Tensor:
        x = queries
        for block in self.blocks:
            x = block(x, vis_tokens)
        return x


class DetectHead:
    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 model_dim: int, num_classes: int, num_morph: int):
        self.num_classes = num_classes
        self.box_fc1 = LinearLayer(reg, "heads.detect.box.fc1", model_dim, model_dim, rng)
        self.box_fc2 = LinearLayer(reg, "heads.detect.box.fc2", model_dim, 4, rng)
        self.cls = LinearLayer(reg, "heads.detect.cls", model_dim, num_classes + 1, rng)
        self.morph = LinearLayer(reg, "heads.detect.morph", model_dim, num_morph, rng)

    def __call__(self, obj: Tensor) -> DetectionOutput:
        boxes = T.sigmoid(self.box_fc2(T.gelu(self.box_fc1(obj))))
        class_logits = self.cls(obj)
        morph_logits = self.morph(obj)
        return DetectionOutput(boxes=boxes, class_logits=class_logits,
                               class_probs=T.softmax(class_logits, axis=-1),
                               morph_logits=morph_logits, morph_probs=T.sigmoid(morph_logits))


def detections_from_output(out: DetectionOutput, score_threshold: Optional[float] = None) -> list:
    """Materialize plain Detection records; score excludes the no-object column."""
    probs = out.class_probs.data
    fg = probs[:, :-1]
    result = []
    for i in range(probs.shape[0]):
        score = float(fg[i].max())
        if score_threshold is not None and score < score_threshold:
            continue
        result.append(Detection(box=tuple(float(v) for v in out.boxes.data[i]),
                                class_id=int(fg[i].argmax()), score=score,
                                morph=[float(m) for m in out.morph_probs.data[i]]))
    return result


# -- box geometry -----------------------------------------------------------

def _cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Generalized IoU between every pair of cxcywh boxes: (len(a), len(b))."""
    ax = _cxcywh_to_xyxy(a)[:, None, :]
    bx = _cxcywh_to_xyxy(b)[None, :, :]
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0, None)
    inter = iw * ih
    area_a = (ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1])
    area_b = (bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1])
    union = area_a + area_b - inter
    cw = np.maximum(ax[..., 2], bx[..., 2]) - np.minimum(ax[..., 0], bx[..., 0])
    ch = np.maximum(ax[..., 3], bx[..., 3]) - np.minimum(ax[..., 1], bx[..., 1])
    hull = cw * ch
    return inter / union - (hull - union) / hull


def _box_columns(boxes: Tensor):
    cols = []
    for j in range(4):
        sel = np.zeros((4, 1))
        sel[j, 0] = 1.0
        cols.append(T.matmul(boxes, Tensor(sel)))
    return cols  # cx, cy, w, h as (K,1) tensors


def giou_pairs(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable row-wise gIoU of predicted boxes against fixed targets."""
    cx, cy, w, h = _box_columns(pred)
    ax1, ay1 = cx - w * 0.5, cy - h * 0.5
    ax2, ay2 = cx + w * 0.5, cy + h * 0.5
    g = _cxcywh_to_xyxy(gt)
    bx1, by1, bx2, by2 = (g[:, j:j + 1] for j in range(4))
    iw = T.maximum(T.minimum(ax2, bx2) - T.maximum(ax1, bx1), 0.0)
    ih = T.maximum(T.minimum(ay2, by2) - T.maximum(ay1, by1), 0.0)
    inter = iw * ih
    area_a = w * h
    area_b = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = area_a + area_b[:, None] - inter
    cw = T.maximum(ax2, bx2) - T.minimum(ax1, bx1)
    ch = T.maximum(ay2, by2) - T.minimum(ay1, by1)
    hull = cw * ch
    return inter / union - (hull - union) / hull


# -- matching and losses ------------------------------------------------------

def hungarian_match(pred_boxes: np.ndarray, pred_class_probs: np.ndarray,
                    gt_boxes: np.ndarray, gt_classes: np.ndarray,
                    weights: MatchWeights = MatchWeights()) -> MatchResult:
    """Minimum-cost bipartite assignment of queries to ground truths.

    Cost per pair: w_class*(1 - p_class) + w_l1*L1(box) + w_giou*(1 - gIoU).
    A vanishing per-query bias prefers lower query indices among exact ties.
    """
    num_preds = pred_boxes.shape[0]
    num_gts = gt_boxes.shape[0]
    if num_gts > num_preds:
        raise DataFormatError(f"{num_gts} ground truths exceed {num_preds} queries")
    if num_gts == 0:
        return MatchResult(pairs=[], unmatched=list(range(num_preds)))
    cost = (weights.w_class * (1.0 - pred_class_probs[:, gt_classes])
            + weights.w_l1 * np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
            + weights.w_giou * (1.0 - giou_matrix(pred_boxes, gt_boxes)))
    bias = 1e-12 * max(1.0, float(np.abs(cost).max())) * np.arange(num_preds)[:, None]
    rows, cols = linear_sum_assignment(cost + bias)
    pairs = sorted(((int(r), int(c)) for r, c in zip(rows, cols)), key=lambda p: p[1])
    matched = {r for r, _ in pairs}
    return MatchResult(pairs=pairs, unmatched=[q for q in range(num_preds) if q not in matched])


def _abs(x: Tensor) -> Tensor:
    return T.maximum(x, -x)


def _pick_entries(matrix: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    n, m = matrix.shape
    flat = T.reshape(matrix, (n * m, 1))
    return T.gather_rows(flat, np.asarray(rows) * m + np.asarray(cols))


def detection_loss(out: DetectionOutput, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                   gt_morph: np.ndarray, match: MatchResult,
                   weights: MatchWeights = MatchWeights()) -> Tensor:
    """Set-prediction loss; unmatched queries are pushed toward "no-object"."""
    num_preds, num_cols = out.class_logits.shape
    no_object = num_cols - 1
    targets = np.full(num_preds, no_object, dtype=np.intp)
    for q, g in match.pairs:
        targets[q] = gt_classes[g]
    log_probs = T.log_softmax(out.class_logits, axis=-1)
    ce = -_pick_entries(log_probs, np.arange(num_preds), targets).mean()
    total = weights.w_class * ce
    if match.pairs:
        qi = np.array([q for q, _ in match.pairs])
        gi = np.array([g for _, g in match.pairs])
        sel_boxes = T.gather_rows(out.boxes, qi)
        l1 = T.tsum(_abs(sel_boxes - gt_boxes[gi]), axis=1).mean()
        giou_term = (1.0 - giou_pairs(sel_boxes, gt_boxes[gi])).mean()
        sel_morph = T.gather_rows(out.morph_logits, qi)
        flags = gt_morph[gi].astype(np.float64)
        bce = (T.softplus(sel_morph) - sel_morph * flags).mean()
        total = total + weights.w_l1 * l1 + weights.w_giou * giou_term + weights.w_morph * bce
    return total


class ClassifyHead:
    """Single-cell classifier over the global feature, optionally concatenating
    the pooled top backbone level."""

    def __init__(self, reg: ParamRegistry, rng: np.random.Generator,
                 model_dim: int, pooled_dim: int, num_classes: int):
        self.direct = LinearLayer(reg, "heads.classify.direct", model_dim, num_classes, rng)
        self.integrated = LinearLayer(reg, "heads.classify.integrated",
                                      model_dim + pooled_dim, num_classes, rng)

    def logits(self, z: Tensor, backbone_pool: Tensor, integrate: bool) -> Tensor:
        if integrate:
            return self.integrated(T.concat([z, backbone_pool], axis=1))
        return self.direct(z)


def classify_cell(head: ClassifyHead, z: Tensor, backbone_pool: Tensor, integrate: bool) -> Tensor:
    return T.softmax(head.logits(z, backbone_pool, integrate), axis=-1)


def classification_loss(head: ClassifyHead, z: Tensor, backbone_pool: Tensor,
                        integrate: bool, class_id: int) -> Tensor:
    logits = head.logits(z, backbone_pool, integrate)
    return -_pick_entries(T.log_softmax(logits, axis=-1), np.array([0]), np.array([class_id])).mean()


def segmentation_loss(upsampled_logits: Tensor, gt_mask: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Mean of pixelwise binary cross-entropy and soft-Dice losses."""
    x = T.reshape(upsampled_logits, (upsampled_logits.size, 1))
    t = np.asarray(gt_mask, dtype=np.float64).reshape(-1, 1)
    bce = (T.softplus(x) - x * t).mean()
    p = T.sigmoid(x)
    dice = 1.0 - (2.0 * (p * t).sum() + eps) / (p.sum() + float(t.sum()) + eps)
    return 0.5 * (bce + dice)
