"""GRIT vs STE vs EMA-VQ on the collapse-prone preset, several seeds."""

import argparse
import json

from gritvq.harness import collapse_preset, compare_methods


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--cache-T", type=int, default=8)
    ap.add_argument("--out", default="runs/collapse")
    args = ap.parse_args()

    names = ["GRIT", "STE", "EMAVQ"]
    cfgs = [collapse_preset(m, steps=args.steps, cache_T=args.cache_T) for m in names]
    rows = compare_methods(cfgs, seeds=args.seeds, names=names, out_dir=args.out)
    for r in rows:
        if r["metric"] in ("utilization", "quant_mse"):
            print(json.dumps({k: r[k] for k in ("method", "metric", "mean", "std", "per_seed")}))


if __name__ == "__main__":
    main()
