"""Bipartite matching between predictions and ground truth, losses, metrics.

Boxes are (cx, cy, w, h) in normalized [0, 1] coordinates throughout. The
matcher returns the minimum-cost injective assignment of ground-truth
instances to predictions; ties resolve to the lexicographically smallest
prediction indices so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import label as _label_components
from scipy.optimize import linear_sum_assignment

from .errors import (
    DegenerateBox,
    EmptyGroundTruth,
    NonFiniteCost,
    ResolutionMismatch,
    TooFewPredictions,
)

DEFAULT_CLASS_WEIGHT = 1.0
DEFAULT_L1_WEIGHT = 5.0
DEFAULT_GIOU_WEIGHT = 2.0
DEFAULT_MASK_WEIGHT = 1.0

_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class Assignment:
    """Injective map ground-truth index -> prediction index with its cost."""

    gt_to_pred: tuple[int, ...]
    total_cost: float


def _lap_cost(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost) -> Assignment:
    """Minimum-total-cost assignment of each row to a distinct column.

    Requires at least as many columns (predictions) as rows (ground truths).
    Among equal-cost optima the lowest prediction indices win, checked row by
    row against the optimal total.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise NonFiniteCost(f"cost must be a matrix, got shape {cost.shape}")
    n_gt, n_pred = cost.shape
    if n_gt == 0:
        return Assignment(gt_to_pred=(), total_cost=0.0)
    if not np.isfinite(cost).all():
        raise NonFiniteCost("cost matrix contains non-finite entries")
    if n_pred < n_gt:
        raise TooFewPredictions(f"{n_pred} predictions for {n_gt} ground truths")

    best = _lap_cost(cost)
    tol = _TIE_RTOL * max(1.0, abs(best))
    chosen: list[int] = []
    available = list(range(n_pred))
    for g in range(n_gt):
        remaining_rows = np.arange(g + 1, n_gt)
        for idx, p in enumerate(available):
            rest_cols = available[:idx] + available[idx + 1:]
            tail = _lap_cost(cost[np.ix_(remaining_rows, rest_cols)]) \
                if remaining_rows.size else 0.0
            fixed = sum(cost[i, chosen[i]] for i in range(g)) + cost[g, p]
            if fixed + tail <= best + tol:
                chosen.append(p)
                available = rest_cols
                break
        else:  # pragma: no cover - the optimum always admits a completion
            raise NonFiniteCost("failed to reconstruct an optimal assignment")
    total = float(sum(cost[g, p] for g, p in enumerate(chosen)))
    return Assignment(gt_to_pred=tuple(chosen), total_cost=total)


def _to_corners(box):
    cx, cy, w, h = np.moveaxis(np.asarray(box, dtype=float), -1, 0)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _to_corners(a)
    bx0, by0, bx1, by1 = _to_corners(b)
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def giou(a, b) -> float:
    """Generalized IoU: IoU minus the enclosing-box dead area fraction."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a[..., 2:] <= 0) or np.any(b[..., 2:] <= 0):
        raise DegenerateBox("boxes need positive width and height")
    ax0, ay0, ax1, ay1 = _to_corners(a)
    bx0, by0, bx1, by1 = _to_corners(b)
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    iou = inter / union
    cw = np.maximum(ax1, bx1) - np.minimum(ax0, bx0)
    ch = np.maximum(ay1, by1) - np.minimum(ay0, by0)
    enclosing = cw * ch
    return iou - (enclosing - union) / enclosing


def _softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def matching_cost(pred_boxes, pred_logits, gt_boxes,
                  class_weight: float = DEFAULT_CLASS_WEIGHT,
                  l1_weight: float = DEFAULT_L1_WEIGHT,
                  giou_weight: float = DEFAULT_GIOU_WEIGHT) -> np.ndarray:
    """(G, P) matrix of weighted class + L1 + GIoU matching costs.

    Predictions score only {plume, no-object}; the class term uses the plume
    probability for every ground-truth instance.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=float)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    prob_plume = _softmax_rows(np.asarray(pred_logits, dtype=float))[:, 0]
    n_gt, n_pred = gt_boxes.shape[0], pred_boxes.shape[0]
    cost = np.zeros((n_gt, n_pred))
    for g in range(n_gt):
        l1 = np.abs(pred_boxes - gt_boxes[g]).sum(axis=1)
        gvals = np.array([giou(pred_boxes[p], gt_boxes[g]) for p in range(n_pred)])
        cost[g] = (class_weight * (1.0 - prob_plume)
                   + l1_weight * l1 + giou_weight * (1.0 - gvals))
    return cost


def downsample_mask(mask: np.ndarray, out_shape) -> np.ndarray:
    """Area-majority downsampling of a binary mask to a coarser grid."""
    mask = np.asarray(mask, dtype=bool)
    oh, ow = out_shape
    if mask.shape[0] % oh or mask.shape[1] % ow:
        raise ResolutionMismatch(f"{mask.shape} not a multiple of {out_shape}")
    fh, fw = mask.shape[0] // oh, mask.shape[1] // ow
    frac = mask.reshape(oh, fh, ow, fw).mean(axis=(1, 3))
    return frac > 0.5


def set_loss(pred_boxes, pred_logits, gt_boxes, assignment: Assignment,
             class_weight: float = DEFAULT_CLASS_WEIGHT,
             l1_weight: float = DEFAULT_L1_WEIGHT,
             giou_weight: float = DEFAULT_GIOU_WEIGHT,
             mask_weight: float = DEFAULT_MASK_WEIGHT,
             pred_heatmaps=None, gt_masks=None) -> dict:
    """Weighted loss components for a matched prediction set.

    Matched pairs contribute box L1, (1 - GIoU), class cross-entropy on the
    plume probability and, when masks are given, per-pixel binary
    cross-entropy between the heatmap and the area-majority-downsampled
    ground-truth mask. Unmatched predictions contribute no-object
    cross-entropy. Each reported component carries its weight.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=float)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    probs = _softmax_rows(np.asarray(pred_logits, dtype=float))
    n_pred = pred_boxes.shape[0]
    matched_preds = set(assignment.gt_to_pred)
    eps = 1e-12

    ce = np.empty(n_pred)
    for p in range(n_pred):
        target = 0 if p in matched_preds else 1  # column 0 = plume, 1 = no-object
        ce[p] = -np.log(max(probs[p, target], eps))
    loss_class = class_weight * float(ce.mean()) if n_pred else 0.0

    l1_terms, giou_terms, mask_terms = [], [], []
    for g, p in enumerate(assignment.gt_to_pred):
        l1_terms.append(np.abs(pred_boxes[p] - gt_boxes[g]).sum())
        giou_terms.append(1.0 - giou(pred_boxes[p], gt_boxes[g]))
        if pred_heatmaps is not None and gt_masks is not None:
            heat = np.clip(np.asarray(pred_heatmaps[p], dtype=float), eps, 1 - eps)
            target = downsample_mask(gt_masks[g], heat.shape).astype(float)
            bce = -(target * np.log(heat) + (1 - target) * np.log(1 - heat))
            mask_terms.append(float(bce.mean()))

    out = {
        "loss_class": loss_class,
        "loss_l1": l1_weight * float(np.mean(l1_terms)) if l1_terms else 0.0,
        "loss_giou": giou_weight * float(np.mean(giou_terms)) if giou_terms else 0.0,
    }
    if pred_heatmaps is not None and gt_masks is not None:
        out["loss_mask"] = mask_weight * float(np.mean(mask_terms)) if mask_terms else 0.0
    return out


def instance_ious(pred_mask: np.ndarray, gt_masks) -> list[float]:
    """Best-component IoU for each ground-truth instance.

    ``pred_mask`` is one binary field; its 8-connected components are the
    candidate predictions for every instance. Empty instances are skipped.
    """
    gt_list = [np.asarray(m, dtype=bool) for m in gt_masks]
    gt_list = [m for m in gt_list if m.any()]
    if not gt_list:
        return []
    pred_mask = np.asarray(pred_mask, dtype=bool)
    if pred_mask.shape != gt_list[0].shape:
        raise ResolutionMismatch(f"{pred_mask.shape} vs {gt_list[0].shape}")
    labels, n_comp = _label_components(pred_mask, structure=np.ones((3, 3), int))
    scores = []
    for gt in gt_list:
        best = 0.0
        for comp_id in range(1, n_comp + 1):
            comp = labels == comp_id
            inter = np.logical_and(comp, gt).sum()
            if inter == 0:
                continue
            union = np.logical_or(comp, gt).sum()
            best = max(best, inter / union)
        scores.append(best)
    return scores


def miou(pred_mask: np.ndarray, gt_masks) -> float:
    """Mean IoU over ground-truth instances vs their best predicted component."""
    scores = instance_ious(pred_mask, gt_masks)
    if not scores:
        raise EmptyGroundTruth("no ground-truth instances")
    return float(np.mean(scores))


def average_precision(detections, gt_boxes, iou_threshold: float = 0.5) -> float:
    """Area under the interpolated precision-recall curve for one class.

    ``detections`` is a list of (box, score). Matching is greedy by
    descending score; each detection takes the highest-IoU unmatched ground
    truth at or above the threshold.
    """
    n_gt = len(gt_boxes)
    if not detections:
        return 0.0
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i][1], i))
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        box = detections[i][0]
        ious = np.array([box_iou(box, gt) if not taken[g] else -1.0
                         for g, gt in enumerate(gt_boxes)])
        g_best = int(np.argmax(ious)) if n_gt else -1
        if n_gt and ious[g_best] >= iou_threshold:
            taken[g_best] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    # precision envelope, then sum rectangle areas at each recall step
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p, hit in zip(recall, env, tp):
        if hit:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def evaluate_detections(preds, gts, iou_threshold: float = 0.5) -> dict:
    """Per-class AP and their mean.

    ``preds`` are (box, score, class_name) and ``gts`` are (box, class_name).
    A class with no predictions carrying its label is evaluated against the
    full prediction set, which covers class-blind detectors.
    """
    classes = sorted({c for _, c in gts})
    if not classes:
        raise EmptyGroundTruth("no ground-truth boxes")
    pred_classes = {c for _, _, c in preds}
    per_class = {}
    for cls in classes:
        gt_boxes = [b for b, c in gts if c == cls]
        if cls in pred_classes:
            dets = [(b, s) for b, s, c in preds if c == cls]
        else:
            dets = [(b, s) for b, s, _ in preds]
        per_class[cls] = average_precision(dets, gt_boxes, iou_threshold)
    return {"map": float(np.mean(list(per_class.values()))),
            "per_class_ap": per_class}
