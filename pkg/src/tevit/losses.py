"""Sequence-level matching cost and the training loss.

Classification uses sigmoid focal loss, boxes use L1 (normalised cxcywh) and
GIoU (absolute corners), masks use dice.  Matching cost and loss both average
over the frames in which a ground-truth instance is annotated; frames where it
is absent still supply negative classification targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tevit.core import tensor as tt
from tevit.core.errors import ConfigError, NumericError
from tevit.core.tensor import Tensor
from tevit.head import PredictionSet
from tevit.matching import Assignment, hungarian

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class CostWeights:
    lambda_cls: float = 2.0
    lambda_L1: float = 5.0
    lambda_giou: float = 2.0
    lambda_dice: float = 8.0
    alpha: float = 0.25
    gamma: float = 2.0
    dice_eps: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_L1", "lambda_giou", "lambda_dice"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class GroundTruth:
    """Annotations of a clip: T frames by N_gt video instances."""

    categories: np.ndarray  # (N_gt,) int
    boxes: np.ndarray  # (T, N_gt, 4) absolute x1y1x2y2; ignored where not visible
    masks: np.ndarray  # (T, N_gt, H, W) bool
    visible: np.ndarray  # (T, N_gt) bool
    track_ids: np.ndarray | None = None

    @property
    def num_instances(self) -> int:
        return int(len(self.categories))

    @property
    def num_frames(self) -> int:
        return int(self.visible.shape[0])

    def select(self, keep: np.ndarray) -> "GroundTruth":
        tid = None if self.track_ids is None else self.track_ids[keep]
        return GroundTruth(self.categories[keep], self.boxes[:, keep], self.masks[:, keep],
                           self.visible[:, keep], tid)


# -- unit losses (work on numpy arrays or Tensors) -----------------------------------

def _clamp_p(p):
    if isinstance(p, Tensor):
        return tt.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise sigmoid focal loss on probabilities ``p`` and 0/1 labels ``y``."""
    p = _clamp_p(p)
    if isinstance(p, Tensor):
        y = np.asarray(y, dtype=np.float64)
        pos = -alpha * (1.0 - p) ** gamma * tt.log(p)
        neg = -(1.0 - alpha) * p ** gamma * tt.log(1.0 - p)
        return pos * y + neg * (1.0 - y)
    y = np.asarray(y, dtype=np.float64)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
    return pos * y + neg * (1.0 - y)


def focal_class_cost(p, alpha: float = 0.25, gamma: float = 2.0):
    """Matching cost of the GT class probability: focal(p, 1) - focal(p, 0), shifted >= 0.

    The clamp bounds focal(p, 0) by ``(1 - alpha) * -ln(PROB_CLAMP)``; adding
    that constant keeps every entry non-negative without changing the argmin.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
    return pos - neg + (1.0 - alpha) * -np.log(PROB_CLAMP)


def _box_parts(b):
    return b[..., 0], b[..., 1], b[..., 2], b[..., 3]


def giou(a, b):
    """Generalised IoU of corner boxes (broadcasting over leading dims)."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return _giou_tensor(tt.as_tensor(a), tt.as_tensor(b))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1, ay1, ax2, ay2 = _box_parts(a)
    bx1, by1, bx2, by2 = _box_parts(b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    enclose = (np.maximum(ax2, bx2) - np.minimum(ax1, bx1)) * (np.maximum(ay2, by2) - np.minimum(ay1, by1))
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        pen = np.where(enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1.0), 0.0)
    return iou - pen


def _giou_tensor(a: Tensor, b: Tensor) -> Tensor:
    ax1, ay1, ax2, ay2 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx1, by1, bx2, by2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    iw = tt.clip(tt.minimum(ax2, bx2) - tt.maximum(ax1, bx1), 0.0, None)
    ih = tt.clip(tt.minimum(ay2, by2) - tt.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    enclose = (tt.maximum(ax2, bx2) - tt.minimum(ax1, bx1)) * (tt.maximum(ay2, by2) - tt.minimum(ay1, by1))
    # guard degenerate boxes; the tiny floor only matters when both areas vanish
    union = tt.clip(union, 1e-9, None)
    enclose = tt.clip(enclose, 1e-9, None)
    return inter / union - (enclose - union) / enclose


def giou_loss(a, b):
    return 1.0 - giou(a, b)


def l1_box_loss(a, b):
    """Mean absolute difference over the 4 normalised cxcywh coordinates."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return tt.absolute(tt.as_tensor(a) - b).mean(axis=-1)
    return np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).mean(axis=-1)


def dice_loss(pred, gt, eps: float = 1.0):
    """1 - (2 sum(p g) + eps) / (sum p + sum g + eps) over the trailing pixel axis."""
    if isinstance(pred, Tensor):
        g = np.asarray(gt, dtype=np.float64)
        num = (pred * g).sum(axis=-1) * 2.0 + eps
        den = pred.sum(axis=-1) + g.sum(axis=-1) + eps
        return 1.0 - num / den
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    return 1.0 - (2.0 * (p * g).sum(axis=-1) + eps) / (p.sum(axis=-1) + g.sum(axis=-1) + eps)


def normalize_cxcywh(boxes, image_size):
    """Absolute corners -> cxcywh divided by the image size."""
    hgt, wid = image_size
    scale = np.array([wid, hgt, wid, hgt], dtype=np.float64)
    if isinstance(boxes, Tensor):
        x1, y1, x2, y2 = boxes[..., 0:1], boxes[..., 1:2], boxes[..., 2:3], boxes[..., 3:4]
        out = tt.concat([(x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1], axis=-1)
        return out * (1.0 / scale)
    b = np.asarray(boxes, dtype=np.float64)
    out = np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2,
                    b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]], axis=-1)
    return out / scale


# -- mask resampling ------------------------------------------------------------------

def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """(out, in) interpolation weights, half-pixel centres, edge-clamped."""
    pos = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    pos = np.clip(pos, 0.0, in_size - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = pos - lo
    mat = np.zeros((out_size, in_size))
    mat[np.arange(out_size), lo] += 1.0 - frac
    mat[np.arange(out_size), hi] += frac
    return mat


def upsample_masks(mask_logits, image_size):
    """Bilinear (..., h, w) -> (..., H, W); works on Tensors (differentiable) or arrays."""
    h, w = mask_logits.shape[-2:]
    uy = bilinear_matrix(image_size[0], h)
    ux = bilinear_matrix(image_size[1], w)
    if isinstance(mask_logits, Tensor):
        return tt.matmul(tt.matmul(uy, mask_logits, label="mask_upsample"), ux.T, label="mask_upsample")
    return uy @ mask_logits @ ux.T


# -- matching cost -------------------------------------------------------------------

def cost_matrix(pred: PredictionSet, gt: GroundTruth, w: CostWeights, image_size) -> np.ndarray:
    """(N_q, N_gt) matching cost; values only, no gradient."""
    nq = pred.num_queries
    ngt = gt.num_instances
    if ngt == 0:
        return np.zeros((nq, 0))
    probs = pred.probs()  # (T, N, K)
    vis = gt.visible.astype(np.float64)  # (T, G)
    nvis = np.maximum(vis.sum(axis=0), 1.0)  # (G,)
    p_gt = probs[:, :, gt.categories]  # (T, N, G)
    cls = (focal_class_cost(p_gt, w.alpha, w.gamma) * vis[:, None, :]).sum(axis=0) / nvis
    pb = pred.boxes.data  # (T, N, 4)
    l1 = l1_box_loss(normalize_cxcywh(pb, image_size)[:, :, None, :],
                     normalize_cxcywh(gt.boxes, image_size)[:, None, :, :])
    l1 = (l1 * vis[:, None, :]).sum(axis=0) / nvis
    gl = giou_loss(pb[:, :, None, :], gt.boxes[:, None, :, :])
    gl = (gl * vis[:, None, :]).sum(axis=0) / nvis
    return w.lambda_cls * cls + w.lambda_L1 * l1 + w.lambda_giou * gl


# -- training loss ---------------------------------------------------------------------

def stage_loss(pred: PredictionSet, gt: GroundTruth, assignment: Assignment, w: CostWeights,
               image_size) -> dict[str, Tensor]:
    """Loss terms of one head stage, each normalised by the number of GT instances."""
    t, nq, k = pred.logits.shape
    norm = 1.0 / max(gt.num_instances, 1)
    target = np.zeros((t, nq, k))
    rows, cols = assignment.rows, assignment.cols
    if len(rows):
        target[:, rows, gt.categories[cols]] = gt.visible[:, cols].astype(np.float64)
    p = tt.sigmoid(pred.logits)
    cls = focal_loss(p, target, w.alpha, w.gamma).sum() * (norm / t)
    terms = {"cls": cls * w.lambda_cls}
    if not len(rows):
        zero = tt.Tensor(0.0)
        terms.update(L1=zero, giou=zero, dice=zero)
        return terms
    vis = gt.visible[:, cols].astype(np.float64)  # (T, P)
    wts = vis / np.maximum(vis.sum(axis=0), 1.0)  # per-pair frame average
    pb = pred.boxes[:, rows]  # (T, P, 4)
    gb = gt.boxes[:, cols]
    l1 = l1_box_loss(normalize_cxcywh(pb, image_size), normalize_cxcywh(gb, image_size))
    terms["L1"] = (l1 * wts).sum() * (norm * w.lambda_L1)
    gl = giou_loss(pb, np.where(vis[..., None] > 0, gb, pb.data))
    terms["giou"] = (gl * wts).sum() * (norm * w.lambda_giou)
    ml = pred.mask_logits[:, rows]  # (T, P, h, w)
    full = upsample_masks(ml, image_size)
    probs = tt.sigmoid(full).reshape(t, len(rows), -1)
    gm = gt.masks[:, cols].reshape(t, len(rows), -1)
    dl = dice_loss(probs, gm, w.dice_eps)
    terms["dice"] = (dl * wts).sum() * (norm * w.lambda_dice)
    return terms


def total_loss(stage_preds: list[PredictionSet], gt: GroundTruth, w: CostWeights, image_size,
               assignments: list[Assignment] | None = None):
    """Deep-supervised loss: per-stage matching, equal stage weights.

    Returns the scalar loss, a float breakdown per term, and the assignments.
    """
    if assignments is None:
        costs = [cost_matrix(p, gt, w, image_size) for p in stage_preds]
        if not all(np.all(np.isfinite(c)) for c in costs):
            raise NumericError("non-finite matching cost")
        assignments = [hungarian(c) for c in costs]
    total = None
    breakdown = {"cls": 0.0, "L1": 0.0, "giou": 0.0, "dice": 0.0}
    for pred, asg in zip(stage_preds, assignments):
        terms = stage_loss(pred, gt, asg, w, image_size)
        for name, val in terms.items():
            breakdown[name] += val.item()
            total = val if total is None else total + val
    breakdown["total"] = sum(breakdown[k] for k in ("cls", "L1", "giou", "dice"))
    return total, breakdown, assignments
