"""Backbone plus head cascade, and the per-clip inference decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tevit.backbone import Backbone, BackboneConfig
from tevit.core.flops import count_flops
from tevit.core.nn import Module
from tevit.core.tensor import no_grad
from tevit.head import HeadConfig, PredictionSet, QueryHead
from tevit.losses import upsample_masks


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)


class TeViT(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.backbone = Backbone(cfg.backbone, rng)
        self.head = QueryHead(cfg.head, [s.channels for s in cfg.backbone.stages], rng)

    def __call__(self, frames, messenger_init: str = "learned") -> list[PredictionSet]:
        return self.head(self.backbone(frames, messenger_init))

    def backbone_parameters(self):
        return self.backbone.parameters()

    def head_parameters(self):
        return self.head.parameters()


@dataclass
class ClipInstance:
    """One decoded query of a clip."""

    query: int
    category: int
    score: float
    frame_probs: np.ndarray  # (T, K)
    boxes: np.ndarray  # (T, 4)
    masks: np.ndarray  # (T, H, W) bool


def decode_clip(pred: PredictionSet, image_size, score_threshold: float = 0.05,
                max_instances: int | None = None) -> list[ClipInstance]:
    """Turn the last-stage predictions into video instances for the clip.

    The video-level class is the argmax of frame-averaged probabilities and
    its averaged probability is the score.  Instances below the threshold
    are dropped; ordering is by score, ties by query index.
    """
    probs = pred.probs()  # (T, N, K)
    avg = probs.mean(axis=0)  # (N, K)
    cats = avg.argmax(axis=1)
    scores = avg[np.arange(len(cats)), cats]
    order = sorted(range(len(cats)), key=lambda i: (-scores[i], i))
    out = []
    masks = None
    for i in order:
        if scores[i] < score_threshold:
            continue
        if masks is None:
            masks = upsample_masks(pred.mask_logits.data, image_size) > 0.0
        out.append(ClipInstance(i, int(cats[i]), float(scores[i]), probs[:, i].copy(),
                                pred.boxes.data[:, i].copy(), masks[:, i].copy()))
        if max_instances is not None and len(out) >= max_instances:
            break
    return out


def predict_clip(model: TeViT, frames, score_threshold: float = 0.05, messenger_init: str = "learned"):
    with no_grad():
        preds = model(frames, messenger_init)
    return decode_clip(preds[-1], model.config.head.image_size, score_threshold)


def model_flops(cfg: ModelConfig, num_frames: int = 1, seed: int = 0) -> tuple[int, int, dict[str, int]]:
    """Multiply-add FLOPs (2 per MAC) and parameter count for one forward."""
    model = TeViT(cfg, seed)
    frames = np.zeros((num_frames, 3) + tuple(cfg.backbone.image_size))
    with no_grad(), count_flops() as fc:
        model(frames)
    return fc.total, model.num_parameters(), dict(fc.breakdown)
