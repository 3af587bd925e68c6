"""Command-line entry point: ``tevit {gen-data,train,eval,infer,bench}``.

Exit codes: 0 on success, 2 for configuration or usage errors, 3 when
training or inference hits a non-finite value.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from tevit import config as config_mod
from tevit.core.errors import ConfigError, ContractError, NumericError

log = logging.getLogger("tevit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _write_json(path: str | Path, doc) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(doc, indent=1, sort_keys=True))


def _timing_path(report: str | Path) -> Path:
    p = Path(report)
    return p.with_name(p.stem + ".timing.json")


def cmd_gen_data(args) -> int:
    from tevit.synth import generate_dataset

    run = config_mod.load(args.config)
    scene = run.data
    env_seed = os.environ.get(config_mod.SEED_ENV, "")
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    elif env_seed != "":
        scene = replace(scene, seed=run.seed)  # run.seed already carries the override
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    out = generate_dataset(scene, args.count, args.out)
    log.info("wrote %d videos to %s", args.count, out)
    return EXIT_OK


def cmd_train(args) -> int:
    from tevit.synth import load_dataset
    from tevit.train import save_checkpoint, train

    run = config_mod.load(args.config)
    videos = load_dataset(args.data)
    res = train(run, videos, log=log.info)
    save_checkpoint(args.out, run, res)
    _write_json(Path(args.out) / "timing.json", {"train_seconds": res.seconds, "steps": res.steps})
    log.info("checkpoint written to %s (%d steps)", args.out, res.steps)
    return EXIT_OK


def _link_from_args(args, run):
    clip_len = run.link.clip_len if args.clip_len is None else args.clip_len
    stride = run.link.stride if args.stride is None else args.stride
    if args.stride is None:
        stride = min(stride, clip_len)  # a shorter --clip-len alone keeps clips overlapping or adjacent
    return replace(run.link, clip_len=clip_len, stride=stride)


def cmd_eval(args) -> int:
    from tevit.train import evaluate_pipeline, load_checkpoint

    _, run, _ = load_checkpoint(args.ckpt)
    link = _link_from_args(args, run)
    timing: dict = {}
    t0 = time.perf_counter()
    report = evaluate_pipeline(args.ckpt, args.data, link, timing)
    timing["total_seconds"] = time.perf_counter() - t0
    _write_json(args.report, report)
    _write_json(_timing_path(args.report), timing)
    m = report["metrics"]
    log.info("AP %.4f AP50 %.4f AP75 %.4f AR1 %.4f AR10 %.4f", m["AP"], m["AP50"], m["AP75"], m["AR1"], m["AR10"])
    return EXIT_OK


def cmd_infer(args) -> int:
    from tevit.core import tvt
    from tevit.linker import run_inference
    from tevit.train import load_checkpoint

    model, run, _ = load_checkpoint(args.ckpt)
    link = _link_from_args(args, run)
    src = Path(args.video)
    files = sorted(src.glob("*.tvt")) if src.is_dir() else [src]
    if not files:
        raise ConfigError(f"no .tvt frame tensors found under {src}")
    doc = {}
    for f in files:
        frames = tvt.load(f).astype("float64")
        if frames.ndim != 4:
            raise ConfigError(f"{f}: expected a (T, 3, H, W) tensor, got rank {frames.ndim}")
        doc[f.stem] = run_inference(model, frames, link).to_json()
    _write_json(args.out, doc)
    log.info("wrote tracks for %d videos to %s", len(doc), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from tevit.bench import bench

    run = config_mod.load(args.config)
    report, timing = bench(run, num_frames=args.frames, repeats=args.repeats)
    _write_json(args.report, report)
    _write_json(_timing_path(args.report), timing)
    for name, row in report["variants"].items():
        log.info("%-9s flops %12d params %9d overhead %.4f%%", name, row["flops"], row["parameters"],
                 100 * row["flop_overhead"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tevit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, help="data seed (overrides data.seed)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--clip-len", type=int)
    e.add_argument("--stride", type=int)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="track instances in TVT1 frame tensors")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True, help="a .tvt file or a directory of them")
    i.add_argument("--out", required=True)
    i.add_argument("--clip-len", type=int)
    i.add_argument("--stride", type=int)
    i.set_defaults(fn=cmd_infer)

    b = sub.add_parser("bench", help="FLOP/parameter/latency comparison of messenger variants")
    b.add_argument("--config")
    b.add_argument("--report", required=True)
    b.add_argument("--frames", type=int, default=5)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        dump = {"error": str(exc)}
        try:
            dump = json.loads(str(exc))
        except ValueError:
            pass
        out = getattr(args, "out", None) or getattr(args, "report", None)
        if out:
            target = Path(out)
            target = (target / "failure.json") if target.suffix == "" else target.with_name("failure.json")
            _write_json(target, dump)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
