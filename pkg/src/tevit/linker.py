"""Clip-wise inference and cross-clip track linking.

A video is cut into clips of ``T`` frames taken every ``S`` frames.  Each
clip is decoded into instances on its own; instances of consecutive clips
are associated through their box/mask overlap on the shared frames by a
minimum-cost assignment, and unmatched or weakly similar instances open new
tracks.  With a single clip (``T`` at least the video length) the clip's
instances are the tracks, with no association step at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from tevit import rle
from tevit.core.errors import ConfigError, ContractError
from tevit.matching import hungarian


@dataclass(frozen=True)
class LinkConfig:
    clip_len: int = 5
    stride: int = 3
    score_threshold: float = 0.05
    w_box: float = 0.5
    w_mask: float = 0.5
    tau_link: float = 0.3
    keep_earlier: bool = True  # overlap frames keep the existing track's outputs

    def __post_init__(self):
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if not 1 <= self.stride <= self.clip_len:
            raise ConfigError("stride must satisfy 1 <= stride <= clip_len")
        if self.w_box < 0 or self.w_mask < 0 or abs(self.w_box + self.w_mask - 1.0) > 1e-9:
            raise ConfigError("similarity weights must be non-negative and sum to 1")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("score_threshold must lie in [0, 1]")


def split_video(num_frames: int, clip_len: int, stride: int) -> list[tuple[int, int]]:
    """Ordered ``[start, end)`` clip ranges covering every frame.

    The last clip is shifted back so it still spans ``clip_len`` frames when
    the video is long enough.  ``stride == clip_len`` tiles without overlap,
    in which case no linking is possible and every clip starts new tracks.
    """
    if num_frames < 1:
        raise ContractError("video must have at least one frame")
    if clip_len < 1 or not 1 <= stride <= clip_len:
        raise ContractError("need clip_len >= 1 and 1 <= stride <= clip_len")
    if num_frames <= clip_len:
        return [(0, num_frames)]
    ranges = []
    start = 0
    while True:
        end = start + clip_len
        if end >= num_frames:
            ranges.append((num_frames - clip_len, num_frames))
            break
        ranges.append((start, end))
        start += stride
    if len(ranges) >= 2 and ranges[-1] == ranges[-2]:
        ranges.pop()
    return ranges


# -- overlap measures ------------------------------------------------------------

def box_iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Binary mask IoU; two empty masks agree perfectly (1), empty against non-empty is 0."""
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(inter / union)


def pair_iou(box_a, mask_a, box_b, mask_b) -> tuple[float, float]:
    return box_iou(box_a, box_b), mask_iou(mask_a, mask_b)


# -- clip and track containers ---------------------------------------------------------

@dataclass
class ClipInstanceResult:
    category: int
    score: float
    boxes: np.ndarray  # (L, 4)
    masks: np.ndarray  # (L, H, W) bool
    frame_probs: np.ndarray  # (L, K)
    present: np.ndarray | None = None  # (L,) bool; None means every frame

    def is_present(self, i: int) -> bool:
        return True if self.present is None else bool(self.present[i])


@dataclass
class ClipResult:
    start: int
    end: int
    instances: list[ClipInstanceResult] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ContractError(f"bad clip range [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class Track:
    track_id: int
    score: float
    num_clips: int
    boxes: dict[int, np.ndarray] = field(default_factory=dict)  # frame -> (4,)
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # frame -> (H, W)
    probs: dict[int, np.ndarray] = field(default_factory=dict)  # frame -> (K,)

    @property
    def category(self) -> int:
        """Argmax of the class probabilities averaged over the track's frames."""
        return int(np.mean([self.probs[f] for f in sorted(self.probs)], axis=0).argmax())

    def frames(self) -> list[int]:
        return sorted(self.masks)


class TrackStore:
    """Video-level tracks, plus the most recent clip needed for the next association."""

    def __init__(self, num_frames: int, image_size):
        self.num_frames = num_frames
        self.image_size = tuple(image_size)
        self.tracks: dict[int, Track] = {}
        self.last_clip: ClipResult | None = None
        self.last_ids: list[int] = []
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.tracks)

    def new_track(self, clip: ClipResult, inst: ClipInstanceResult) -> int:
        tid = self._next_id
        self._next_id += 1
        track = Track(tid, float(inst.score), 1)
        self._write(track, clip, inst, overwrite=True)
        self.tracks[tid] = track
        return tid

    def extend(self, tid: int, clip: ClipResult, inst: ClipInstanceResult, keep_earlier: bool = True) -> None:
        track = self.tracks[tid]
        track.num_clips += 1
        track.score += (float(inst.score) - track.score) / track.num_clips
        self._write(track, clip, inst, overwrite=not keep_earlier)

    @staticmethod
    def _write(track: Track, clip: ClipResult, inst: ClipInstanceResult, overwrite: bool) -> None:
        for i in range(clip.length):
            f = clip.start + i
            if not inst.is_present(i):
                continue
            if f in track.masks and not overwrite:
                continue
            track.boxes[f] = np.asarray(inst.boxes[i], dtype=np.float64).copy()
            track.masks[f] = np.asarray(inst.masks[i], dtype=bool).copy()
            track.probs[f] = np.asarray(inst.frame_probs[i], dtype=np.float64).copy()

    def to_json(self) -> list[dict]:
        """Result records: one per track, per-frame RLE masks and boxes (``None`` where absent)."""
        out = []
        for tid in sorted(self.tracks):
            tr = self.tracks[tid]
            segs, boxes = [], []
            for f in range(self.num_frames):
                if f in tr.masks:
                    segs.append(rle.encode(tr.masks[f]))
                    boxes.append([float(x) for x in tr.boxes[f]])
                else:
                    segs.append(None)
                    boxes.append(None)
            out.append({"track_id": tid, "category_id": tr.category, "score": float(tr.score),
                        "segmentations": segs, "boxes": boxes})
        return out

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode()

    def full_masks(self, tid: int) -> np.ndarray:
        h, w = self.image_size
        m = np.zeros((self.num_frames, h, w), dtype=bool)
        for f, mk in self.tracks[tid].masks.items():
            m[f] = mk
        return m


# -- association -------------------------------------------------------------------

def similarity_matrix(prev: ClipResult, nxt: ClipResult, w_box: float = 0.5, w_mask: float = 0.5) -> np.ndarray:
    """(len(prev), len(next)) mean weighted IoU over the shared frames.

    A frame where either instance is absent contributes 0.
    """
    lo, hi = max(prev.start, nxt.start), min(prev.end, nxt.end)
    if hi <= lo:
        raise ContractError(f"clips [{prev.start},{prev.end}) and [{nxt.start},{nxt.end}) do not overlap; "
                            "use a stride smaller than the clip length")
    sim = np.zeros((len(prev.instances), len(nxt.instances)))
    n = hi - lo
    for a, ia in enumerate(prev.instances):
        for b, ib in enumerate(nxt.instances):
            acc = 0.0
            for f in range(lo, hi):
                i, j = f - prev.start, f - nxt.start
                if not (ia.is_present(i) and ib.is_present(j)):
                    continue
                bi, mi = pair_iou(ia.boxes[i], ia.masks[i], ib.boxes[j], ib.masks[j])
                acc += w_box * bi + w_mask * mi
            sim[a, b] = acc / n
    return sim


def link_clips(store: TrackStore, nxt: ClipResult, cfg: LinkConfig) -> TrackStore:
    """Fold one more clip into the store (in place; the store is also returned)."""
    if not nxt.instances:
        return store
    ids = [None] * len(nxt.instances)
    prev = store.last_clip
    if prev is not None and prev.instances and min(prev.end, nxt.end) > max(prev.start, nxt.start):
        sim = similarity_matrix(prev, nxt, cfg.w_box, cfg.w_mask)
        asg = hungarian(-sim)
        for a, b in asg.pairs:
            if sim[a, b] >= cfg.tau_link:
                ids[b] = store.last_ids[a]
                store.extend(ids[b], nxt, nxt.instances[b], cfg.keep_earlier)
    for b, inst in enumerate(nxt.instances):
        if ids[b] is None:
            ids[b] = store.new_track(nxt, inst)
    store.last_clip = nxt
    store.last_ids = ids
    return store


# -- model-driven inference ---------------------------------------------------------------

def clip_result_from_instances(start: int, end: int, instances) -> ClipResult:
    """Wrap decoded model instances (see ``tevit.model.decode_clip``) as a ClipResult."""
    return ClipResult(start, end, [ClipInstanceResult(ci.category, ci.score, ci.boxes, ci.masks, ci.frame_probs)
                                   for ci in instances])


def run_inference(model, frames: np.ndarray, cfg: LinkConfig, messenger_init: str = "learned") -> TrackStore:
    """Offline when the video fits one clip, otherwise clip-by-clip with linking."""
    from tevit.model import predict_clip

    t = frames.shape[0]
    store = TrackStore(t, frames.shape[2:])
    for start, end in split_video(t, cfg.clip_len, cfg.stride):
        inst = predict_clip(model, frames[start:end], cfg.score_threshold, messenger_init)
        link_clips(store, clip_result_from_instances(start, end, inst), cfg)
    return store
