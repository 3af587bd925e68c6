"""Component ablation on the synthetic benchmark.

Three model variants share one training recipe: ``neither`` (no messengers,
spatial-only query interaction), ``stqi`` (no messengers, spatiotemporal
query interaction) and ``full`` (shifted messengers plus spatiotemporal
interaction).  Each variant is trained from several seeds on a fixed set of
training videos and scored on a fixed evaluation set.

Results are cached in a JSON file keyed by a digest of the run settings and
of the package source, so a finished run is reused only while neither
changes.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tevit import config as config_mod
from tevit.synth import SyntheticSceneConfig, derive_seeds, render_video
from tevit.train import evaluate_model, train

VARIANTS = {
    "neither": {"messengers": 0, "messenger_mode": "none", "interaction": "spatial"},
    "stqi": {"messengers": 0, "messenger_mode": "none", "interaction": "stqi"},
    "full": {"messengers": 8, "messenger_mode": "shift", "interaction": "stqi"},
}

# a narrow model so one run trains in a few CPU minutes; the head reads the stride-4 map,
# since on 64x64 frames the stride-8 mask features are too coarse for the small shapes
BASE_MODEL = {"channels": [16, 32, 64, 64], "depths": [1, 1, 1, 1], "heads": [1, 1, 2, 2], "mlp_ratio": 2,
              "head_dim": 32, "head_stages": 3, "head_ffn_ratio": 2, "num_queries": 10, "mask_dim": 8,
              "mask_level": 0}
# base_lr is quoted at the reference batch of 16; at batch 2 the step size is 0.002
BASE_OPTIM = {"base_lr": 0.016, "epochs": 16, "backbone_lr_mult": 1.0}


@dataclass(frozen=True)
class AblationConfig:
    train_videos: int = 200
    eval_videos: int = 50
    seeds: tuple[int, ...] = (0, 1, 2)
    train_data_seed: int = 1
    eval_data_seed: int = 2
    frames: int = 5
    model: dict = field(default_factory=lambda: dict(BASE_MODEL))
    optim: dict = field(default_factory=lambda: dict(BASE_OPTIM))

    def scene(self) -> SyntheticSceneConfig:
        return SyntheticSceneConfig(min_frames=self.frames, max_frames=self.frames)

    def run_config(self, variant: str, seed: int) -> config_mod.RunConfig:
        raw = {"seed": seed, "model": {**self.model, **VARIANTS[variant]}, "optim": dict(self.optim),
               "train": {"clip_len": self.frames}, "link": {"clip_len": self.frames, "stride": self.frames}}
        return config_mod.from_dict(raw, env={})

    def to_dict(self) -> dict:
        return {"train_videos": self.train_videos, "eval_videos": self.eval_videos, "seeds": list(self.seeds),
                "train_data_seed": self.train_data_seed, "eval_data_seed": self.eval_data_seed,
                "frames": self.frames, "model": self.model, "optim": self.optim}


# modules with no influence on training or scoring results
_DIGEST_SKIP = {"cli.py", "bench.py"}


def source_digest() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        if p.name in _DIGEST_SKIP:
            continue
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def run_key(cfg: AblationConfig, variant: str, seed: int) -> str:
    doc = json.dumps({"ablation": cfg.to_dict(), "variant": variant, "seed": seed}, sort_keys=True)
    return hashlib.sha256((doc + source_digest()).encode()).hexdigest()[:16]


def build_datasets(cfg: AblationConfig):
    scene = cfg.scene()
    train_set = [render_video(scene, s, f"train_{i:04d}")
                 for i, s in enumerate(derive_seeds(cfg.train_data_seed, cfg.train_videos))]
    eval_set = [render_video(scene, s, f"eval_{i:04d}")
                for i, s in enumerate(derive_seeds(cfg.eval_data_seed, cfg.eval_videos))]
    return train_set, eval_set


def run_one(cfg: AblationConfig, variant: str, seed: int, datasets=None, log=None) -> dict:
    train_set, eval_set = datasets or build_datasets(cfg)
    run = cfg.run_config(variant, seed)
    t0 = time.perf_counter()
    res = train(run, train_set, log=log)
    metrics = evaluate_model(res.model, eval_set, run.link)
    return {"variant": variant, "seed": seed, "steps": res.steps, "seconds": time.perf_counter() - t0,
            "final_loss": res.epochs[-1]["loss"]["total"],
            "metrics": {k: metrics[k] for k in ("AP", "AP50", "AP75", "AR1", "AR10")}}


def load_cache(path: str | Path) -> dict:
    p = Path(path)
    return json.loads(p.read_text()) if p.exists() else {}


def run_ablation(cfg: AblationConfig, cache_path: str | Path | None = None, log=None,
                 variants=tuple(VARIANTS)) -> dict[str, list[dict]]:
    """Per-variant lists of run records (one per seed), reusing cached runs whose key still matches."""
    cache = load_cache(cache_path) if cache_path else {}
    datasets = None
    out: dict[str, list[dict]] = {v: [] for v in variants}
    for v in variants:
        for s in cfg.seeds:
            key = run_key(cfg, v, s)
            if key not in cache:
                if datasets is None:
                    datasets = build_datasets(cfg)
                if log:
                    log(f"training {v} seed {s}")
                cache[key] = run_one(cfg, v, s, datasets)
                if cache_path:
                    Path(cache_path).parent.mkdir(parents=True, exist_ok=True)
                    Path(cache_path).write_text(json.dumps(cache, indent=1, sort_keys=True))
            out[v].append(cache[key])
            if log:
                log(f"{v} seed {s}: AP {cache[key]['metrics']['AP']:.4f} ({cache[key]['seconds']:.0f} s)")
    return out


def summarize(results: dict[str, list[dict]]) -> dict:
    """Mean and spread of AP (in points) per variant."""
    rows = {}
    for v, runs in results.items():
        ap = np.array([100 * r["metrics"]["AP"] for r in runs])
        rows[v] = {"AP_mean": float(ap.mean()), "AP_std": float(ap.std()), "AP_runs": ap.tolist(),
                   "max_seconds": max(r["seconds"] for r in runs)}
    return rows
