"""Synthetic moving-shapes videos with instance annotations.

Each video holds 1-4 shapes (circle, square, triangle) with random colours,
constant velocities (bouncing off the borders) and per-frame scale jitter.
Shapes later in the draw order occlude earlier ones, and optional occluder
bars hide parts of the scene, so a single frame can be ambiguous.  Masks are
the visible pixels; boxes are their tight bounds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from tevit import rle
from tevit.core import tvt as tvt_io
from tevit.core.errors import ConfigError
from tevit.losses import GroundTruth

CATEGORIES = ("circle", "square", "triangle")
FORMAT = "tevit-synth-1"
_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seeds(master: int, count: int) -> list[int]:
    state = master & _MASK64
    out = []
    for _ in range(count):
        state, z = splitmix64(state)
        out.append(z)
    return out


@dataclass(frozen=True)
class SyntheticSceneConfig:
    image_size: tuple[int, int] = (64, 64)
    min_frames: int = 5
    max_frames: int = 36
    min_instances: int = 1
    max_instances: int = 4
    min_radius: float = 6.0
    max_radius: float = 11.0
    max_speed: float = 3.0
    scale_jitter: float = 0.08
    occlusion_prob: float = 0.3
    noise: float = 0.04
    min_visible_area: int = 6
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 1 <= min_frames <= max_frames")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError("occlusion_prob must lie in [0, 1]")
        if self.min_radius <= 0 or self.max_radius < self.min_radius:
            raise ConfigError("bad radius range")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Video:
    name: str
    frames: np.ndarray  # (T, 3, H, W) float64 in [0, 1]
    gt: GroundTruth  # whole-video annotations

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def shape_mask(kind: int, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    dx, dy = xs - cx, ys - cy
    if kind == 0:
        return dx * dx + dy * dy <= r * r
    if kind == 1:
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    # upward triangle: apex above the centre, flat base below
    top, base = -r, 0.8 * r
    half = 0.95 * r
    inside = dy <= base
    frac = (dy - top) / (base - top)
    return inside & (dy >= top) & (np.abs(dx) <= half * frac)


def render_video(cfg: SyntheticSceneConfig, seed: int, name: str = "video") -> Video:
    rng = np.random.default_rng(seed)
    h, w = cfg.image_size
    for _ in range(100):
        video = _try_render(cfg, rng, name, h, w)
        if video is not None:
            return video
    raise ConfigError("could not place instances so that every one is visible; relax the scene config")


def _try_render(cfg, rng, name, h, w):
    t = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    k = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    kinds = rng.integers(0, len(CATEGORIES), size=k)
    radius = rng.uniform(cfg.min_radius, cfg.max_radius, size=k)
    pos = np.stack([rng.uniform(radius, w - radius), rng.uniform(radius, h - radius)], axis=1)
    vel = rng.uniform(-cfg.max_speed, cfg.max_speed, size=(k, 2))
    colors = rng.uniform(0.25, 1.0, size=(k, 3))
    bg_a, bg_b = rng.uniform(0.0, 0.3, size=3), rng.uniform(0.0, 0.3, size=3)
    ramp = np.linspace(0.0, 1.0, w)[None, :, None]
    background = (bg_a * (1 - ramp) + bg_b * ramp) * np.ones((h, 1, 1))  # (H, W, 3)

    frames = np.empty((t, 3, h, w))
    masks = np.zeros((t, k, h, w), dtype=bool)
    for f in range(t):
        img = background.copy()
        owner = -np.ones((h, w), dtype=np.int64)
        for i in range(k):
            r = radius[i] * (1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
            m = shape_mask(int(kinds[i]), pos[i, 0], pos[i, 1], r, h, w)
            img[m] = colors[i]
            owner[m] = i
        if rng.random() < cfg.occlusion_prob:
            bar_w = int(rng.integers(4, 9))
            if rng.random() < 0.5:
                x0 = int(rng.integers(0, w - bar_w))
                region = (slice(None), slice(x0, x0 + bar_w))
            else:
                y0 = int(rng.integers(0, h - bar_w))
                region = (slice(y0, y0 + bar_w), slice(None))
            img[region] = rng.uniform(0.0, 0.15, size=3)
            owner[region] = -1
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
        frames[f] = np.clip(img, 0.0, 1.0).transpose(2, 0, 1)
        for i in range(k):
            masks[f, i] = owner == i
        pos += vel
        for axis, lim in ((0, w), (1, h)):
            lo = pos[:, axis] < radius
            hi = pos[:, axis] > lim - radius
            vel[lo | hi, axis] *= -1
            pos[:, axis] = np.clip(pos[:, axis], radius, lim - radius)

    areas = masks.reshape(t, k, -1).sum(axis=2)
    visible = areas >= cfg.min_visible_area
    if not visible.any(axis=0).all():
        return None
    masks &= visible[:, :, None, None]
    boxes = np.zeros((t, k, 4))
    for f in range(t):
        for i in range(k):
            if visible[f, i]:
                boxes[f, i] = mask_box(masks[f, i])
    gt = GroundTruth(kinds.astype(np.int64), boxes, masks, visible, np.arange(k))
    return Video(name, frames, gt)


def mask_box(mask: np.ndarray) -> np.ndarray:
    """Tight corner box over the mask's pixel squares: [xmin, ymin, xmax + 1, ymax + 1]."""
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


# -- on-disk layout ----------------------------------------------------------------

def generate_dataset(cfg: SyntheticSceneConfig, count: int, out_dir: str | Path) -> Path:
    """Write ``annotations.json`` plus one TVT1 frame tensor per video under ``videos/``."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    seeds = derive_seeds(cfg.seed, count)
    videos = []
    for idx, s in enumerate(seeds):
        name = f"video_{idx:04d}"
        v = render_video(cfg, s, name)
        rel = f"videos/{name}.tvt"
        tvt_io.save(out / rel, v.frames.astype(np.float32))
        videos.append(video_record(idx, v, rel))
    doc = {
        "format": FORMAT,
        "categories": [{"id": i, "name": n} for i, n in enumerate(CATEGORIES)],
        "scene_config": _jsonable(asdict(cfg)),
        "videos": videos,
    }
    (out / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return out


def video_record(idx: int, v: Video, frames_file: str) -> dict:
    t, _, h, w = v.frames.shape
    tracks = []
    for j in range(v.gt.num_instances):
        segs, boxes = [], []
        for f in range(t):
            if v.gt.visible[f, j]:
                segs.append(rle.encode(v.gt.masks[f, j]))
                boxes.append([float(x) for x in v.gt.boxes[f, j]])
            else:
                segs.append(None)
                boxes.append(None)
        tracks.append({"track_id": int(v.gt.track_ids[j]), "category_id": int(v.gt.categories[j]),
                       "segmentations": segs, "boxes": boxes})
    return {"id": idx, "name": v.name, "length": t, "height": h, "width": w,
            "frames_file": frames_file, "tracks": tracks}


def gt_from_record(rec: dict) -> GroundTruth:
    t, h, w = rec["length"], rec["height"], rec["width"]
    tracks = rec["tracks"]
    k = len(tracks)
    masks = np.zeros((t, k, h, w), dtype=bool)
    boxes = np.zeros((t, k, 4))
    visible = np.zeros((t, k), dtype=bool)
    for j, tr in enumerate(tracks):
        for f in range(t):
            seg = tr["segmentations"][f]
            if seg is not None:
                masks[f, j] = rle.decode(seg)
                boxes[f, j] = tr["boxes"][f]
                visible[f, j] = True
    cats = np.array([tr["category_id"] for tr in tracks], dtype=np.int64)
    tids = np.array([tr["track_id"] for tr in tracks], dtype=np.int64)
    return GroundTruth(cats, boxes, masks, visible, tids)


def load_annotations(data_dir: str | Path) -> dict:
    doc = json.loads((Path(data_dir) / "annotations.json").read_text())
    if doc.get("format") != FORMAT:
        raise ConfigError(f"{data_dir}: unsupported annotation format {doc.get('format')!r}")
    return doc


def load_dataset(data_dir: str | Path) -> list[Video]:
    root = Path(data_dir)
    doc = load_annotations(root)
    out = []
    for rec in doc["videos"]:
        frames = tvt_io.load(root / rec["frames_file"]).astype(np.float64)
        out.append(Video(rec["name"], frames, gt_from_record(rec)))
    return out


def clip_ground_truth(gt: GroundTruth, start: int, end: int) -> GroundTruth:
    """Frames [start, end) of a video's annotations, dropping instances absent throughout."""
    sub = GroundTruth(gt.categories, gt.boxes[start:end], gt.masks[start:end], gt.visible[start:end],
                      gt.track_ids)
    keep = np.nonzero(sub.visible.any(axis=0))[0]
    return sub.select(keep)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d
