"""Spatiotemporal query interaction head cascade.

Each head runs one attention module twice with the same weights: first over
the queries of every frame, then over the frames of every query.  The
enhanced queries interact with their RoI features through query-generated
dynamic kernels, and linear task heads emit per-frame class logits, refined
boxes and mask logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tevit.core import tensor as tt
from tevit.core.errors import ConfigError, NumericError
from tevit.core.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from tevit.core.tensor import Tensor

INTERACTIONS = ("stqi", "spatial", "fused")
DELTA_CLAMP = 4.0


@dataclass(frozen=True)
class HeadConfig:
    image_size: tuple[int, int] = (64, 64)
    num_queries: int = 20
    num_stages: int = 6
    dim: int = 64
    attn_heads: int = 4
    roi_size: int = 7
    num_classes: int = 3
    ffn_ratio: int = 4
    mask_dim: int = 16
    mask_level: int = 1  # index into the pyramid; level 1 has stride 8
    interaction: str = "stqi"
    prior_prob: float = 0.01

    def __post_init__(self):
        if self.dim % self.attn_heads:
            raise ConfigError(f"{self.attn_heads} heads do not divide head dim {self.dim}")
        if self.dim % 4:
            raise ConfigError("head dim must be divisible by 4 for the dynamic bottleneck")
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"unknown query interaction {self.interaction!r}")
        if not 0 <= self.mask_level < 4:
            raise ConfigError("mask_level must index one of the 4 pyramid levels")


@dataclass
class PredictionSet:
    """Predictions of one head stage for a clip: N_q x T entries."""

    logits: Tensor  # (T, N, K) sigmoid logits
    boxes: Tensor  # (T, N, 4) absolute x1y1x2y2
    mask_logits: Tensor  # (T, N, h, w) at the mask feature stride
    mask_stride: int

    @property
    def num_frames(self) -> int:
        return self.logits.shape[0]

    @property
    def num_queries(self) -> int:
        return self.logits.shape[1]

    def probs(self) -> np.ndarray:
        return tt._sigmoid(self.logits.data)

    def __len__(self) -> int:
        return self.num_frames * self.num_queries


# -- box utilities --------------------------------------------------------------

def cxcywh_to_xyxy(b):
    cx, cy, w, h = b[..., 0:1], b[..., 1:2], b[..., 2:3], b[..., 3:4]
    return tt.concat([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(b):
    x1, y1, x2, y2 = b[..., 0:1], b[..., 1:2], b[..., 2:3], b[..., 3:4]
    return tt.concat([(x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1], axis=-1)


def apply_deltas(boxes_xyxy: Tensor, deltas: Tensor, image_size) -> Tensor:
    """Refine corner boxes with (dx*w, dy*h, exp(dw), exp(dh)) deltas, clipped to the image."""
    b = xyxy_to_cxcywh(boxes_xyxy)
    cx, cy, w, h = b[..., 0:1], b[..., 1:2], b[..., 2:3], b[..., 3:4]
    dx, dy = deltas[..., 0:1], deltas[..., 1:2]
    dw = tt.clip(deltas[..., 2:3], -DELTA_CLAMP, DELTA_CLAMP)
    dh = tt.clip(deltas[..., 3:4], -DELTA_CLAMP, DELTA_CLAMP)
    ncx = cx + dx * w
    ncy = cy + dy * h
    nw = w * tt.exp(dw)
    nh = h * tt.exp(dh)
    out = cxcywh_to_xyxy(tt.concat([ncx, ncy, nw, nh], axis=-1))
    return clip_boxes(out, image_size)


def clip_boxes(boxes: Tensor, image_size) -> Tensor:
    hgt, wid = image_size
    x1 = tt.clip(boxes[..., 0:1], 0.0, float(wid))
    y1 = tt.clip(boxes[..., 1:2], 0.0, float(hgt))
    x2 = tt.clip(boxes[..., 2:3], 0.0, float(wid))
    y2 = tt.clip(boxes[..., 3:4], 0.0, float(hgt))
    return tt.concat([x1, y1, x2, y2], axis=-1)


# -- query interaction -----------------------------------------------------------

def broadcast_queries(q: Tensor, num_frames: int) -> Tensor:
    if num_frames < 1:
        raise ConfigError("need at least one frame")
    return tt.broadcast_to(q, (num_frames,) + q.shape)


class QueryInteraction(Module):
    """One attention record (plus its norm) reused for the spatial and temporal passes."""

    def __init__(self, rng, dim: int, heads: int):
        self.attn = MultiHeadAttention(rng, dim, heads, label="head_mhsa")
        self.norm = LayerNorm(dim)

    def _block(self, x: Tensor) -> Tensor:
        return self.norm(x + self.attn(x))

    def spatial(self, q: Tensor) -> Tensor:
        """Attend over the queries of each frame: (T, N, C) -> (T, N, C)."""
        return self._block(q)

    def temporal(self, q: Tensor) -> Tensor:
        """Attend over the frames of each query, same weights as ``spatial``."""
        return tt.swapaxes(self._block(tt.swapaxes(q, 0, 1)), 0, 1)

    def fused(self, q: Tensor) -> Tensor:
        t, n, c = q.shape
        return self._block(q.reshape(1, t * n, c)).reshape(t, n, c)

    def __call__(self, q: Tensor, mode: str = "stqi") -> Tensor:
        if mode == "fused":
            return self.fused(q)
        q = self.spatial(q)
        if mode == "stqi":
            q = self.temporal(q)
        return q


def spatial_query_mhsa(q: Tensor, shared: QueryInteraction) -> Tensor:
    return shared.spatial(q)


def temporal_query_mhsa(q_hat: Tensor, shared: QueryInteraction) -> Tensor:
    return shared.temporal(q_hat)


# -- RoI feature extraction -------------------------------------------------------

def fpn_levels(boxes: np.ndarray, image_size, num_levels: int = 4) -> np.ndarray:
    """Pyramid index (0-based, stride 4 * 2**idx) per box by the FPN scale rule.

    The canonical 224-pixel scale is expressed relative to an 800-pixel short
    side, so the rule keeps its meaning on small synthetic frames.
    """
    canonical = 224.0 * min(image_size) / 800.0
    w = np.maximum(boxes[..., 2] - boxes[..., 0], 0.0)
    h = np.maximum(boxes[..., 3] - boxes[..., 1], 0.0)
    scale = np.sqrt(w * h)
    with np.errstate(divide="ignore"):
        k = np.floor(4.0 + np.log2(np.maximum(scale, 1e-6) / canonical))
    return (np.clip(k, 2, 1 + num_levels) - 2).astype(np.int64)


def roi_tokens(levels: list[Tensor], boxes: np.ndarray, image_size, resolution: int = 7,
               level_of: np.ndarray | None = None):
    """Sample an R x R grid per box as tokens: (T, N, R*R, C), plus degenerate-box flags.

    ``levels`` are (T, C, h, w) maps; ``boxes`` are absolute corners (T, N, 4)
    treated as constants.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if not np.all(np.isfinite(boxes)):
        raise NumericError("non-finite box coordinates reached RoI sampling")
    t, n, _ = boxes.shape
    r = resolution
    if level_of is None:
        level_of = fpn_levels(boxes, image_size, len(levels))
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    degenerate = (w <= 0) | (h <= 0)
    frac = (np.arange(r) + 0.5) / r
    gy = boxes[..., 1, None] + frac * np.maximum(h, 0.0)[..., None]  # (T, N, R)
    gx = boxes[..., 0, None] + frac * np.maximum(w, 0.0)[..., None]
    frame_idx = np.broadcast_to(np.arange(t)[:, None], (t, n))
    parts, order = [], []
    flat_level = level_of.reshape(-1)
    for li, fmap in enumerate(levels):
        sel = np.nonzero(flat_level == li)[0]
        if sel.size == 0:
            continue
        stride = image_size[0] / fmap.shape[2]
        ys = gy.reshape(t * n, r)[sel] / stride - 0.5
        xs = gx.reshape(t * n, r)[sel] / stride - 0.5
        yy = np.repeat(ys, r, axis=1).reshape(-1)
        xx = np.tile(xs, (1, r)).reshape(-1)
        bi = np.repeat(frame_idx.reshape(-1)[sel], r * r)
        feat = tt.transpose(fmap, (0, 2, 3, 1))  # (T, h, w, C)
        parts.append(tt.bilinear_gather(feat, bi, yy, xx).reshape(sel.size, r * r, fmap.shape[1]))
        order.append(sel)
    stacked = tt.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    inv = np.argsort(np.concatenate(order), kind="stable")
    out = tt.index(stacked, inv, unique=True) if not np.array_equal(inv, np.arange(inv.size)) else stacked
    return out.reshape(t, n, r * r, levels[0].shape[1]), degenerate


def roi_extract(pyramid, boxes: np.ndarray, image_size, resolution: int = 7):
    """RoI features shaped (T, N, C, R, R) and a degenerate-box mask (T, N)."""
    tokens, degenerate = roi_tokens(list(pyramid), boxes, image_size, resolution)
    t, n, rr, c = tokens.shape
    feats = tt.transpose(tokens, (0, 1, 3, 2)).reshape(t, n, c, resolution, resolution)
    return feats, degenerate


# -- dynamic interaction and task heads -------------------------------------------

class DynamicConv(Module):
    def __init__(self, rng, dim: int, roi_size: int, ffn_ratio: int):
        self._dim = dim
        self._hidden = dim // 4
        self.params = Linear(rng, dim, 2 * dim * self._hidden, label="dynamic_conv")
        self.norm1 = LayerNorm(self._hidden)
        self.norm2 = LayerNorm(dim)
        self.out = Linear(rng, dim * roi_size * roi_size, dim, label="dynamic_conv")
        self.norm3 = LayerNorm(dim)
        self.post_norm = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, dim * ffn_ratio, label="head_ffn")
        self.ffn_norm = LayerNorm(dim)

    def interact(self, q: Tensor, tokens: Tensor) -> Tensor:
        t, n, rr, c = tokens.shape
        d = self._hidden
        p = self.params(q)  # (T, N, 2*C*d)
        k1 = p[..., : c * d].reshape(t, n, c, d)
        k2 = p[..., c * d:].reshape(t, n, d, c)
        f = tt.gelu(self.norm1(tt.matmul(tokens, k1, label="dynamic_conv")))
        f = tt.gelu(self.norm2(tt.matmul(f, k2, label="dynamic_conv")))
        f = tt.gelu(self.norm3(self.out(f.reshape(t, n, rr * c))))
        q = self.post_norm(q + f)
        return self.ffn_norm(q + self.ffn(q))

    def __call__(self, q: Tensor, roi: Tensor) -> Tensor:
        t, n, c, r, _ = roi.shape
        tokens = tt.transpose(roi.reshape(t, n, c, r * r), (0, 1, 3, 2))
        return self.interact(q, tokens)


def dynamic_conv_interact(q_tilde: Tensor, roi: Tensor, weights: DynamicConv) -> Tensor:
    return weights(q_tilde, roi)


def relative_coords(boxes: np.ndarray, grid_hw, stride: float, image_size) -> np.ndarray:
    """(T, N, 3, h*w): x and y offsets from each box centre and their squared radius.

    Offsets are in units of a quarter image side so values stay O(1).
    """
    gh, gw = grid_hw
    ys = (np.arange(gh) + 0.5) * stride
    xs = (np.arange(gw) + 0.5) * stride
    cx = 0.5 * (boxes[..., 0] + boxes[..., 2])
    cy = 0.5 * (boxes[..., 1] + boxes[..., 3])
    sx, sy = image_size[1] / 4.0, image_size[0] / 4.0
    rx = (xs[None, None, None, :] - cx[..., None, None]) / sx
    ry = (ys[None, None, :, None] - cy[..., None, None]) / sy
    rx = np.broadcast_to(rx, boxes.shape[:2] + (gh, gw))
    ry = np.broadcast_to(ry, boxes.shape[:2] + (gh, gw))
    rr = rx * rx + ry * ry
    return np.stack([rx, ry, rr], axis=2).reshape(boxes.shape[:2] + (3, gh * gw))


class TaskHeads(Module):
    def __init__(self, rng, cfg: HeadConfig):
        self.cls = Linear(rng, cfg.dim, cfg.num_classes, label="task_heads")
        self.cls.bias.data[:] = -np.log((1.0 - cfg.prior_prob) / cfg.prior_prob)
        self.box = Linear(rng, cfg.dim, 4, label="task_heads")
        self.box.weight.data *= 0.1
        self.mask_kernel = Linear(rng, cfg.dim, cfg.mask_dim + 4, label="task_heads")
        # start every mask as a disc of radius 1/8 image side around its box centre (logit 2 - 8 * r^2,
        # r in quarter-image units); from an all-zero logit map the dice gradient drives every pixel
        # negative and the sigmoid saturates before any shape is learned
        md = cfg.mask_dim
        self.mask_kernel.bias.data[md + 2] = -8.0
        self.mask_kernel.bias.data[md + 3] = 2.0
        self._cfg = cfg

    def __call__(self, q: Tensor, mask_feats: Tensor, boxes_in: Tensor) -> PredictionSet:
        """``mask_feats`` is (T, mask_dim, h, w); ``boxes_in`` absolute corners (T, N, 4)."""
        cfg = self._cfg
        logits = self.cls(q)
        boxes = apply_deltas(boxes_in, self.box(q), cfg.image_size)
        t, md, gh, gw = mask_feats.shape
        stride = cfg.image_size[0] / gh
        coords = relative_coords(tt.stop_gradient(boxes), (gh, gw), stride, cfg.image_size)  # (T, N, 3, hw)
        kernel = self.mask_kernel(q)  # (T, N, md + 4)
        feat = mask_feats.reshape(t, 1, md, gh * gw)
        logit = tt.matmul(kernel[..., None, :md], feat, label="mask_head").reshape(t, -1, gh * gw)
        geo = (kernel[..., md:md + 3, None] * coords).sum(axis=2)
        logit = logit + geo + kernel[..., md + 3:md + 4]
        return PredictionSet(logits, boxes, logit.reshape(t, -1, gh, gw), int(stride))


def task_heads(q: Tensor, mask_feats: Tensor, boxes_in: Tensor, heads: TaskHeads) -> PredictionSet:
    return heads(q, mask_feats, boxes_in)


class HeadStage(Module):
    def __init__(self, rng, cfg: HeadConfig):
        self.interaction = QueryInteraction(rng, cfg.dim, cfg.attn_heads)
        self.dynamic = DynamicConv(rng, cfg.dim, cfg.roi_size, cfg.ffn_ratio)
        self.heads = TaskHeads(rng, cfg)


class Neck(Module):
    """Lateral 1x1 projections to the head width, a top-down pathway, and the mask branch."""

    def __init__(self, rng, in_channels, cfg: HeadConfig):
        self.lateral = [Linear(rng, c, cfg.dim, label="neck") for c in in_channels]
        self.mask_proj = Linear(rng, cfg.dim, cfg.mask_dim, label="neck")
        self._mask_level = cfg.mask_level

    def __call__(self, pyramid) -> tuple[list[Tensor], Tensor]:
        lat = []
        for f, proj in zip(pyramid, self.lateral):
            lat.append(proj(tt.transpose(f, (0, 2, 3, 1))))  # (T, h, w, C)
        outs = [None] * len(lat)
        outs[-1] = lat[-1]
        for i in range(len(lat) - 2, -1, -1):
            outs[i] = lat[i] + upsample2(outs[i + 1])
        mask = self.mask_proj(outs[self._mask_level])
        levels = [tt.transpose(o, (0, 3, 1, 2)) for o in outs]
        return levels, tt.transpose(mask, (0, 3, 1, 2))


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 on (T, h, w, C)."""
    t, h, w, c = x.shape
    y = tt.broadcast_to(x.reshape(t, h, 1, w, 1, c), (t, h, 2, w, 2, c))
    return y.reshape(t, 2 * h, 2 * w, c)


class QueryHead(Module):
    def __init__(self, cfg: HeadConfig, in_channels, rng: np.random.Generator):
        self.config = cfg
        self.queries = tt.parameter(rng.normal(0.0, 0.02, size=(cfg.num_queries, cfg.dim)))
        init = np.tile([0.5, 0.5, 1.0, 1.0], (cfg.num_queries, 1))
        self.proposals = tt.parameter(init)
        self.neck = Neck(rng, in_channels, cfg)
        self.stages = [HeadStage(rng, cfg) for _ in range(cfg.num_stages)]

    def proposal_boxes(self, num_frames: int) -> Tensor:
        """Learnable normalised cxcywh proposals as absolute corners, broadcast per frame."""
        hgt, wid = self.config.image_size
        b = self.proposals
        cx = tt.clip(b[:, 0:1], 0.0, 1.0)
        cy = tt.clip(b[:, 1:2], 0.0, 1.0)
        w = tt.clip(b[:, 2:3], 1e-3, 1.0)
        h = tt.clip(b[:, 3:4], 1e-3, 1.0)
        scale = np.array([wid, hgt, wid, hgt], dtype=np.float64)
        xyxy = cxcywh_to_xyxy(tt.concat([cx, cy, w, h], axis=-1)) * scale
        return broadcast_queries(clip_boxes(xyxy, self.config.image_size), num_frames)

    def __call__(self, pyramid) -> list[PredictionSet]:
        return cascade_forward(self, pyramid)


def cascade_forward(head: QueryHead, pyramid) -> list[PredictionSet]:
    """Run all head stages; each stage refines the previous stage's (detached) boxes."""
    cfg = head.config
    levels, mask_feats = head.neck(list(pyramid))
    t = levels[0].shape[0]
    q = broadcast_queries(head.queries, t)
    boxes = head.proposal_boxes(t)
    outputs = []
    for stage in head.stages:
        q = stage.interaction(q, cfg.interaction)
        tokens, _ = roi_tokens(levels, tt.stop_gradient(boxes), cfg.image_size, cfg.roi_size)
        q = stage.dynamic.interact(q, tokens)
        pred = stage.heads(q, mask_feats, boxes)
        outputs.append(pred)
        boxes = Tensor(tt.stop_gradient(pred.boxes))
    return outputs
