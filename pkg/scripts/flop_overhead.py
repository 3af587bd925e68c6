#!/usr/bin/env python3
"""Messenger FLOP/parameter overhead at reference-model widths, over a few frame sizes."""

import argparse
import json

from tevit.bench import PAPER_LIKE, overhead_at


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sizes", nargs="+", default=["224x224", "256x448", "288x512"])
    p.add_argument("--messengers", type=int, default=32)
    p.add_argument("--out")
    args = p.parse_args(argv)
    rows = []
    for s in args.sizes:
        h, w = (int(x) for x in s.split("x"))
        r = overhead_at({**PAPER_LIKE, "image_size": [h, w], "messengers": args.messengers})
        r["image_size"] = [h, w]
        rows.append(r)
        print(f"{s:>8s} tokens {r['stage1_patch_tokens']:6d}  GFLOPs {r['baseline_flops'] / 1e9:7.2f} -> "
              f"{r['flops'] / 1e9:7.2f}  overhead {100 * r['flop_overhead']:.2f}% "
              f"(backbone {100 * r['backbone_flop_overhead']:.2f}%)  params +{r['parameter_delta']}", flush=True)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
