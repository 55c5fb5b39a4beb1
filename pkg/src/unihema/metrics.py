"""Evaluation metrics with documented conventions.

Conventions (also echoed in every report so numbers are comparable):
all-point precision-envelope AP integration, add-one smoothing of zero
n-gram counts in BLEU, and Dice = 1.0 when both masks are empty.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .errors import DimensionError

CONVENTIONS = [
    "AP: all-point precision-envelope integration at IoU >= 0.5",
    "BLEU-4: add-one smoothing applied to zero clipped counts",
    "Dice: both-empty masks score 1.0",
    "exact-match: case-sensitive after whitespace normalization",
]


def iou_cxcywh(a, b) -> float:
    ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax2, ay2 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx2, by2 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def average_precision(flags, num_gt: int) -> float:
    """All-point interpolated AP from TP/FP flags in score order."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def _match_class(preds_per_image, gts_per_image, cls: int, iou_threshold: float):
    """Greedy score-descending matching for one class; returns (flags, num_gt).

    Ties in score break deterministically by image then insertion order; a
    prediction claims the unmatched ground truth with the highest IoU.
    """
    entries = []
    for img, preds in enumerate(preds_per_image):
        for order, (box, class_id, score) in enumerate(preds):
            if int(class_id) == cls:
                entries.append((-float(score), img, order, box))
    entries.sort(key=lambda e: e[:3])
    gt_open = {}
    num_gt = 0
    for img, (boxes, gt_classes) in enumerate(gts_per_image):
        idx = [i for i, c in enumerate(gt_classes) if int(c) == cls]
        gt_open[img] = {i: boxes[i] for i in idx}
        num_gt += len(idx)
    flags = []
    for _, img, _, box in entries:
        best_iou, best_gt = 0.0, None
        for gi, gt_box in gt_open[img].items():
            iou = iou_cxcywh(box, gt_box)
            if iou > best_iou:
                best_iou, best_gt = iou, gi
        if best_gt is not None and best_iou >= iou_threshold:
            del gt_open[img][best_gt]
            flags.append(True)
        else:
            flags.append(False)
    return flags, num_gt


def _gt_classes(gts_per_image):
    return sorted({int(c) for _, gt_classes in gts_per_image for c in gt_classes})


def map50(preds_per_image, gts_per_image, iou_threshold: float = 0.5):
    """Mean AP at the IoU threshold over classes present in the ground truth.

    preds_per_image: per image, a list of (box cxcywh, class_id, score).
    gts_per_image: per image, (boxes array, classes array).
    Returns (map value, {class_id: ap}).
    """
    if len(preds_per_image) != len(gts_per_image):
        raise DimensionError(f"{len(preds_per_image)} prediction lists vs "
                             f"{len(gts_per_image)} ground-truth lists")
    per_class = {}
    for cls in _gt_classes(gts_per_image):
        flags, num_gt = _match_class(preds_per_image, gts_per_image, cls, iou_threshold)
        per_class[cls] = average_precision(flags, num_gt)
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return value, per_class


def pr_curves(preds_per_image, gts_per_image, iou_threshold: float = 0.5):
    """Raw precision/recall point arrays per class, for plotting and export."""
    curves = {}
    for cls in _gt_classes(gts_per_image):
        flags, num_gt = _match_class(preds_per_image, gts_per_image, cls, iou_threshold)
        if num_gt == 0 or not flags:
            continue
        tp = np.cumsum(flags)
        fp = np.cumsum(~np.asarray(flags, dtype=bool))
        curves[cls] = (tp / num_gt, tp / np.maximum(tp + fp, 1))
    return curves


def dice(pred_mask, gt_mask) -> float:
    """2|A and B| / (|A| + |B|); both empty scores 1.0 by convention."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def f1_macro(pred_labels, gt_labels, classes):
    """Unweighted mean of per-class F1.

    Classes absent from both predictions and ground truth are skipped;
    classes predicted but never present score 0.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise DimensionError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    per_class = {}
    for cls in classes:
        tp = int(((pred == cls) & (gt == cls)).sum())
        fp = int(((pred == cls) & (gt != cls)).sum())
        fn = int(((pred != cls) & (gt == cls)).sum())
        if tp + fp + fn == 0:
            continue
        per_class[cls] = 2.0 * tp / (2.0 * tp + fp + fn)
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return value, per_class


def _ngrams(tokens, n: int):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu4(candidate, reference) -> float:
    """Geometric mean of 1..4-gram clipped precisions times brevity penalty."""
    if len(candidate) == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = Counter(_ngrams(candidate, n))
        ref_counts = Counter(_ngrams(reference, n))
        total = sum(cand_counts.values())
        clipped = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        if clipped == 0:
            p = 1.0 / (total + 1.0)
        else:
            p = clipped / total
        log_sum += 0.25 * math.log(p)
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def exact_match(candidate: str, reference: str) -> int:
    """1 when the whitespace-normalized strings are identical (case-sensitive)."""
    norm = lambda s: " ".join(s.split())
    return int(norm(candidate) == norm(reference))
