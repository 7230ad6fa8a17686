"""Finite-difference sweep over every radius family and transform kind."""

import argparse
import json

from gritvq.codebook import TRANSFORM_KINDS
from gritvq.gradcheck import FDConfig, check_pipeline_gradients, check_transform_gradients
from gritvq.radius import FAMILIES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()

    reports = []
    for fam in FAMILIES:
        for kind in TRANSFORM_KINDS:
            rep = check_pipeline_gradients(fam, kind, trials=args.trials, cfg=FDConfig(seed=args.seed))
            reports.append(rep)
            print(f"{fam:<20}{kind:<18}{rep['max_rel_err']:10.2e}  skip {rep['skip_rate']:.1%}")
    for kind in ("LinearLowRank", "LowRankNormalized", "AttentionTopK"):
        rep = check_transform_gradients(kind, trials=100, cfg=FDConfig(h=1e-6, seed=args.seed))
        reports.append(rep)
        worst = max(rep["max_rel_err"].values())
        print(f"{'params':<20}{kind:<18}{worst:10.2e}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(reports, fh, indent=2)


if __name__ == "__main__":
    main()
