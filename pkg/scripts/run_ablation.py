#!/usr/bin/env python3
"""Train the three ablation variants over all seeds and print mean AP per variant.

Finished runs are cached in artifacts/ablation_cache.json (relative to the
repository root); the acceptance suite reads the same cache.
"""

import argparse
import json
import sys
from pathlib import Path

from tevit.ablation import VARIANTS, AblationConfig, run_ablation, summarize

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default=str(ROOT / "artifacts" / "ablation_cache.json"))
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--summary", default=str(ROOT / "artifacts" / "ablation_summary.json"))
    args = p.parse_args(argv)
    cfg = AblationConfig() if args.seeds is None else AblationConfig(seeds=tuple(args.seeds))
    results = run_ablation(cfg, args.cache, log=lambda m: print(m, flush=True), variants=tuple(args.variants))
    summary = summarize(results)
    Path(args.summary).parent.mkdir(parents=True, exist_ok=True)
    Path(args.summary).write_text(json.dumps(summary, indent=1, sort_keys=True))
    for v, row in summary.items():
        print(f"{v:8s} AP {row['AP_mean']:6.2f} +- {row['AP_std']:.2f}  runs {row['AP_runs']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
