"""Video instance segmentation metrics under the COCO-style video protocol.

Tracks are compared through spatiotemporal mask IoU: pixel intersections and
unions are summed over all frames before dividing.  Precision is integrated
at 101 recall points and averaged over the IoU thresholds 0.50, 0.55, ...,
0.95.  Matching is class-aware and greedy in descending score order, with
the input order breaking score ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tevit import rle
from tevit.core.errors import ContractError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class EvalTrack:
    category: int
    masks: np.ndarray  # (T, H, W) bool, absent frames empty
    score: float = 1.0


def st_iou(pred: EvalTrack, gt: EvalTrack) -> float:
    if pred.masks.shape != gt.masks.shape:
        raise ContractError(f"track shapes differ: {pred.masks.shape} vs {gt.masks.shape}")
    inter = np.logical_and(pred.masks, gt.masks).sum()
    union = np.logical_or(pred.masks, gt.masks).sum()
    return float(inter / union) if union > 0 else 0.0


def st_iou_matrix(preds: list[EvalTrack], gts: list[EvalTrack]) -> np.ndarray:
    """Pairwise spatiotemporal IoU, (len(preds), len(gts))."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    p = np.stack([t.masks.reshape(-1) for t in preds]).astype(np.float64)
    g = np.stack([t.masks.reshape(-1) for t in gts]).astype(np.float64)
    inter = p @ g.T  # integer counts, exact in float64
    union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1.0), 0.0)


def _match(ious: np.ndarray, thr: float) -> np.ndarray:
    """Greedy matching of score-sorted predictions; returns a TP flag per prediction."""
    n_pred, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_pred, dtype=bool)
    for i in range(n_pred):
        best, best_iou = -1, thr
        for j in range(n_gt):
            if taken[j]:
                continue
            if ious[i, j] >= best_iou:
                # strictly better only, so the first of equal candidates wins
                if best == -1 or ious[i, j] > best_iou:
                    best, best_iou = j, ious[i, j]
        if best >= 0:
            taken[best] = True
            tp[i] = True
    return tp


def _interp_ap(tp: np.ndarray, scores: np.ndarray, npos: int) -> float:
    order = np.argsort(-scores, kind="stable")
    tp = tp[order].astype(np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def evaluate(preds_per_video: list[list[EvalTrack]], gts_per_video: list[list[EvalTrack]],
             categories, max_dets: int = MAX_DETS) -> dict:
    """AP, AP50, AP75, AR1, AR10 per category and averaged over categories with ground truth.

    Arguments are aligned lists, one entry per video.  GT tracks with no
    foreground pixel at all are invalid and dropped.
    """
    if len(preds_per_video) != len(gts_per_video):
        raise ContractError("prediction and ground-truth video lists differ in length")
    categories = list(categories)
    per_cat = {}
    for cat in categories:
        npos = 0
        # per threshold: concatenated TP flags / scores; per k: matched counts
        tps = {thr: [] for thr in IOU_THRESHOLDS}
        scores = []
        recall_hits = {k: np.zeros(len(IOU_THRESHOLDS)) for k in (1, 10)}
        for preds, gts in zip(preds_per_video, gts_per_video):
            g = [t for t in gts if t.category == cat and t.masks.any()]
            p = [t for t in preds if t.category == cat]
            order = sorted(range(len(p)), key=lambda i: -p[i].score)[:max_dets]
            p = [p[i] for i in order]
            npos += len(g)
            if not p:
                continue
            ious = st_iou_matrix(p, g)
            s = np.array([t.score for t in p])
            scores.append(s)
            for ti, thr in enumerate(IOU_THRESHOLDS):
                flags = _match(ious, thr)
                tps[thr].append(flags)
                for k in recall_hits:
                    recall_hits[k][ti] += _match(ious[:k], thr).sum()
        if npos == 0:
            continue
        all_scores = np.concatenate(scores) if scores else np.zeros(0)
        aps = []
        for thr in IOU_THRESHOLDS:
            flags = np.concatenate(tps[thr]) if tps[thr] else np.zeros(0, dtype=bool)
            aps.append(_interp_ap(flags, all_scores, npos) if len(flags) else 0.0)
        per_cat[cat] = {
            "AP": float(np.mean(aps)),
            "AP50": aps[IOU_THRESHOLDS.index(0.5)],
            "AP75": aps[IOU_THRESHOLDS.index(0.75)],
            "AR1": float(np.mean(recall_hits[1] / npos)),
            "AR10": float(np.mean(recall_hits[10] / npos)),
        }
    keys = ("AP", "AP50", "AP75", "AR1", "AR10")
    if per_cat:
        summary = {k: float(np.mean([v[k] for v in per_cat.values()])) for k in keys}
    else:
        summary = {k: 0.0 for k in keys}
    summary["per_category"] = per_cat
    return summary


# -- JSON adapters ----------------------------------------------------------------------

def tracks_from_results(records: list[dict], num_frames: int, image_size) -> list[EvalTrack]:
    """EvalTracks from linker result records (per-frame RLE or ``None``)."""
    h, w = image_size
    out = []
    for r in records:
        m = np.zeros((num_frames, h, w), dtype=bool)
        for f, seg in enumerate(r["segmentations"]):
            if seg is not None:
                m[f] = rle.decode(seg)
        out.append(EvalTrack(int(r["category_id"]), m, float(r.get("score", 1.0))))
    return out


def tracks_from_gt(gt) -> list[EvalTrack]:
    """EvalTracks from a ``GroundTruth`` covering a whole video."""
    masks = gt.masks & gt.visible[:, :, None, None]
    return [EvalTrack(int(gt.categories[j]), masks[:, j].copy(), 1.0) for j in range(gt.num_instances)]
