"""Training loop, checkpoints and the evaluation pipeline.

One optimizer step draws ``batch_size`` clips of ``clip_len`` consecutive
frames, sums their deep-supervised losses (averaged over the batch), clips
the global gradient norm and applies AdamW, with the backbone at a reduced
learning rate.  The rate drops by ``decay_factor`` once training passes each
configured fraction of the epochs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tevit import config as config_mod
from tevit.config import RunConfig
from tevit.core import tvt
from tevit.core.errors import ConfigError, NumericError
from tevit.core.optim import AdamWState, adamw_step, clip_grad_norm
from tevit.core.tensor import backward, zero_grads
from tevit.linker import LinkConfig, run_inference
from tevit.losses import total_loss
from tevit.metrics import evaluate, tracks_from_gt, tracks_from_results
from tevit.model import TeViT, model_flops
from tevit.synth import CATEGORIES, Video, clip_ground_truth, derive_seeds, load_dataset

CKPT_FORMAT = "tevit-ckpt-1"
REPORT_FORMAT = "tevit-metrics-1"


@dataclass
class TrainResult:
    model: TeViT
    epochs: list[dict] = field(default_factory=list)  # per-epoch mean loss terms
    step_losses: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def lr_multiplier(epoch: int, epochs: int, fractions, factor: float) -> float:
    """Step decay: one factor per fraction of training already completed."""
    passed = sum(1 for f in fractions if epoch >= round(f * epochs))
    return factor ** passed


def sample_clip(video: Video, clip_len: int, rng: np.random.Generator) -> tuple[np.ndarray, object]:
    t = video.num_frames
    if t <= clip_len:
        start, end = 0, t
    else:
        start = int(rng.integers(0, t - clip_len + 1))
        end = start + clip_len
    return video.frames[start:end], clip_ground_truth(video.gt, start, end)


def train(run: RunConfig, videos: list[Video], log=None, model: TeViT | None = None) -> TrainResult:
    """Train from scratch (or continue ``model``) on in-memory videos."""
    if not videos:
        raise ConfigError("no training videos")
    if run.train.train_videos is not None:
        videos = videos[:run.train.train_videos]
    seeds = derive_seeds(run.seed, 2)
    model = model or TeViT(run.model_config(), seed=seeds[0] % (2 ** 32))
    rng = np.random.default_rng(seeds[1])
    params = model.parameters()
    backbone_ids = {id(p) for p in model.backbone_parameters()}
    lr_scale = [run.optim.backbone_lr_mult if id(p) in backbone_ids else 1.0 for p in params]
    opt = AdamWState(learning_rate=run.optim.lr, weight_decay=run.optim.weight_decay)
    image_size = tuple(run.model.image_size)
    bs = run.optim.batch_size
    result = TrainResult(model)
    t0 = time.perf_counter()
    for epoch in range(run.optim.epochs):
        opt.learning_rate = run.optim.lr * lr_multiplier(epoch, run.optim.epochs, run.optim.decay_fractions,
                                                         run.optim.decay_factor)
        order = rng.permutation(len(videos))
        sums: dict[str, float] = {}
        nsteps = 0
        for b0 in range(0, len(order), bs):
            if run.optim.max_steps is not None and result.steps >= run.optim.max_steps:
                break
            batch_seed = int(rng.integers(0, 2 ** 63))
            brng = np.random.default_rng(batch_seed)
            zero_grads(params)
            step_terms: dict[str, float] = {}
            members = order[b0:b0 + bs]
            for vi in members:
                frames, gt = sample_clip(videos[vi], run.train.clip_len, brng)
                try:
                    loss, terms, _ = total_loss(model(frames), gt, run.loss, image_size)
                except NumericError as exc:
                    raise NumericError(json.dumps({"error": str(exc), "epoch": epoch, "step": result.steps,
                                                   "batch_seed": batch_seed, "video": videos[vi].name})) from exc
                if not np.isfinite(loss.item()):
                    raise NumericError(json.dumps({"error": "non-finite loss", "epoch": epoch,
                                                   "step": result.steps, "batch_seed": batch_seed,
                                                   "video": videos[vi].name, "terms": terms}))
                backward(loss * (1.0 / len(members)))
                for k, v in terms.items():
                    step_terms[k] = step_terms.get(k, 0.0) + v / len(members)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros(p.shape)
                elif not np.all(np.isfinite(p.grad)):
                    raise NumericError(json.dumps({"error": "non-finite gradient", "epoch": epoch,
                                                   "step": result.steps, "batch_seed": batch_seed}))
            clip_grad_norm(params, run.optim.clip_norm)
            adamw_step(params, opt, lr_scale)
            result.steps += 1
            nsteps += 1
            result.step_losses.append(step_terms["total"])
            for k, v in step_terms.items():
                sums[k] = sums.get(k, 0.0) + v
        if nsteps:
            result.epochs.append({"epoch": epoch, "lr": opt.learning_rate, "steps": nsteps,
                                  "loss": {k: v / nsteps for k, v in sums.items()}})
            if log:
                log(f"epoch {epoch}: loss {sums['total'] / nsteps:.4f} lr {opt.learning_rate:.3g}")
    result.seconds = time.perf_counter() - t0
    return result


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(out_dir: str | Path, run: RunConfig, result: TrainResult) -> Path:
    """Weights as one float64 TVT1 file per parameter, plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in result.model.state_dict().items():
        rel = f"weights/{name}.tvt"
        tvt.save(out / rel, arr.astype(np.float64))
        entries.append({"name": name, "file": rel, "shape": list(arr.shape)})
    manifest = {"format": CKPT_FORMAT, "config": run.to_dict(), "seed": run.seed, "steps": result.steps,
                "parameters": entries, "epochs": result.epochs, "step_losses": result.step_losses}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_checkpoint(path: str | Path) -> tuple[TeViT, RunConfig, dict]:
    root = Path(path)
    if root.is_file():
        root = root.parent
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no checkpoint manifest under {root}") from exc
    if manifest.get("format") != CKPT_FORMAT:
        raise ConfigError(f"{root}: unsupported checkpoint format {manifest.get('format')!r}")
    run = config_mod.from_dict(manifest["config"], env={})
    model = TeViT(run.model_config(), seed=0)
    state = {e["name"]: tvt.load(root / e["file"]) for e in manifest["parameters"]}
    model.load_state_dict(state)
    return model, run, manifest


# -- evaluation ------------------------------------------------------------------------

def infer_videos(model: TeViT, videos: list[Video], link: LinkConfig, messenger_init: str = "learned"):
    """Linker result records per video."""
    return [run_inference(model, v.frames, link, messenger_init).to_json() for v in videos]


def score_results(results: list[list[dict]], videos: list[Video], num_classes: int | None = None) -> dict:
    preds, gts = [], []
    for recs, v in zip(results, videos):
        h, w = v.frames.shape[2:]
        preds.append(tracks_from_results(recs, v.num_frames, (h, w)))
        gts.append(tracks_from_gt(v.gt))
    cats = range(num_classes if num_classes is not None else len(CATEGORIES))
    metrics = evaluate(preds, gts, cats)
    metrics["per_category"] = {CATEGORIES[c] if c < len(CATEGORIES) else str(c): v
                               for c, v in metrics["per_category"].items()}
    return metrics


def evaluate_model(model: TeViT, videos: list[Video], link: LinkConfig, messenger_init: str = "learned") -> dict:
    return score_results(infer_videos(model, videos, link, messenger_init), videos,
                         model.config.head.num_classes)


def build_report(metrics: dict, run: RunConfig, manifest: dict, link: LinkConfig, num_videos: int,
                 flops: tuple[int, int] | None = None) -> dict:
    """MetricsReport document; no wall-clock values, so identical inputs give identical bytes."""
    report = {
        "format": REPORT_FORMAT,
        "metrics": {k: metrics[k] for k in ("AP", "AP50", "AP75", "AR1", "AR10")},
        "per_category": metrics["per_category"],
        "train": {"steps": manifest.get("steps", 0), "epochs": manifest.get("epochs", [])},
        "eval": {"videos": num_videos, "clip_len": link.clip_len, "stride": link.stride,
                 "score_threshold": link.score_threshold, "w_box": link.w_box, "w_mask": link.w_mask,
                 "tau_link": link.tau_link},
        "seeds": {"master": run.seed, "data": run.data.seed},
    }
    if flops is not None:
        report["model"] = {"flops_per_clip": flops[0], "parameters": flops[1]}
    return report


def evaluate_pipeline(ckpt: str | Path, data_dir: str | Path, link: LinkConfig | None = None,
                      timing: dict | None = None) -> dict:
    model, run, manifest = load_checkpoint(ckpt)
    link = link or run.link
    videos = load_dataset(data_dir)
    t0 = time.perf_counter()
    metrics = evaluate_model(model, videos, link)
    if timing is not None:
        timing["eval_seconds"] = time.perf_counter() - t0
    fl, npar, _ = model_flops(run.model_config(), num_frames=run.train.clip_len)
    return build_report(metrics, run, manifest, link, len(videos), (fl, npar))
