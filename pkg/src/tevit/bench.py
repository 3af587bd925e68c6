"""FLOP, parameter and latency comparison of the messenger variants.

Variants: ``baseline`` (no messengers), ``shift`` (shifted messengers),
``mhsa_ffn`` (attention plus FFN over all T x M messengers after each block)
and ``conv`` (a width-3 temporal convolution over messengers).  FLOPs are
the counted matmul multiply-adds (2 per MAC) of one forward pass.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from tevit.backbone import TokenSequence, messenger_parameter_count, msg_shift
from tevit.core.flops import count_flops
from tevit.core.tensor import Tensor, no_grad
from tevit.model import ModelConfig, TeViT

VARIANTS = ("baseline", "shift", "mhsa_ffn", "conv")


def variant_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    bb = cfg.backbone
    if variant == "baseline":
        return replace(cfg, backbone=replace(bb, messengers=0, messenger_mode="shift"))
    return replace(cfg, backbone=replace(bb, messenger_mode=variant))


def shift_cost(cfg: ModelConfig, num_frames: int) -> tuple[int, int]:
    """FLOPs and learnable parameters of the shift operation alone."""
    bb = cfg.backbone
    c = bb.stages[0].channels
    tokens = TokenSequence(Tensor(np.zeros((num_frames, 4, c)), requires_grad=True),
                           Tensor(np.ones((num_frames, max(bb.messengers, bb.schedule.num_groups), c)),
                                  requires_grad=True), 1)
    with count_flops() as fc:
        msg_shift(tokens, bb.schedule, "even")
    return fc.total, 0  # the shift is an index permutation; it owns no parameters


def measure(cfg: ModelConfig, num_frames: int, repeats: int = 1, seed: int = 0) -> dict:
    model = TeViT(cfg, seed)
    frames = np.random.default_rng(seed).uniform(size=(num_frames, 3) + tuple(cfg.backbone.image_size))
    with no_grad(), count_flops() as fc:
        model(frames)
    backbone_flops = sum(v for k, v in fc.breakdown.items() if k.startswith("backbone"))
    times = []
    with no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(frames)
            times.append(time.perf_counter() - t0)
    return {"flops": fc.total, "backbone_flops": backbone_flops, "parameters": model.num_parameters(),
            "backbone_parameters": model.backbone.num_parameters(),
            "seconds": float(np.median(times)) if times else 0.0}


def bench(run, num_frames: int = 5, repeats: int = 3):
    """Returns (report, timing); the report holds only deterministic counts."""
    cfg = run.model_config()
    rows, timing = {}, {}
    for v in VARIANTS:
        r = measure(variant_config(cfg, v), num_frames, repeats, seed=run.seed)
        timing[v] = {"seconds_per_forward": r.pop("seconds")}
        rows[v] = r
    base = rows["baseline"]
    for v, r in rows.items():
        r["flop_overhead"] = (r["flops"] - base["flops"]) / base["flops"]
        r["backbone_flop_overhead"] = (r["backbone_flops"] - base["backbone_flops"]) / base["backbone_flops"]
        r["parameter_delta"] = r["parameters"] - base["parameters"]
    sf, sp = shift_cost(cfg, num_frames)
    report = {
        "frames": num_frames,
        "image_size": list(cfg.backbone.image_size),
        "messengers": cfg.backbone.messengers,
        "stage1_patch_tokens": (cfg.backbone.image_size[0] // 4) * (cfg.backbone.image_size[1] // 4),
        "variants": rows,
        "shift_op": {"flops": sf, "parameters": sp},
        "expected_shift_parameter_delta": messenger_parameter_count(cfg.backbone),
    }
    return report, timing


# Widths, depths and head sizes of the reference PVT-B1 based model, at the largest frame size with
# the reference 9:16 aspect ratio that full attention fits in a few GB (9216 stage-1 patch tokens).
PAPER_LIKE = {"image_size": [288, 512], "channels": [64, 128, 320, 512], "depths": [2, 2, 2, 2],
              "heads": [1, 2, 5, 8], "mlp_ratio": 8, "messengers": 32, "num_queries": 100, "head_stages": 6,
              "head_dim": 256, "head_attn_heads": 8, "num_classes": 40}


def overhead_at(model: dict, num_frames: int = 1, seed: int = 0) -> dict:
    """Whole-model and backbone-only messenger FLOP overhead against the same model with M=0."""
    from tevit.config import from_dict

    cfg = from_dict({"model": model, "data": {"image_size": model["image_size"]}}, env={}).model_config()
    with_m = measure(cfg, num_frames, repeats=0, seed=seed)
    base = measure(variant_config(cfg, "baseline"), num_frames, repeats=0, seed=seed)
    sf, sp = shift_cost(cfg, num_frames)
    return {"stage1_patch_tokens": (cfg.backbone.image_size[0] // 4) * (cfg.backbone.image_size[1] // 4),
            "messengers": cfg.backbone.messengers,
            "flops": with_m["flops"], "baseline_flops": base["flops"],
            "flop_overhead": (with_m["flops"] - base["flops"]) / base["flops"],
            "backbone_flop_overhead": (with_m["backbone_flops"] - base["backbone_flops"]) / base["backbone_flops"],
            "parameter_delta": with_m["parameters"] - base["parameters"],
            "expected_parameter_delta": messenger_parameter_count(cfg.backbone),
            "shift_op": {"flops": sf, "parameters": sp}}
