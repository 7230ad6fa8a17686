"""Timing of apply_transform as K doubles, plus one rank-doubling point."""

import argparse
import json

from gritvq.harness import bench_rank_doubling, bench_transform_scaling


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--k", default="256,512,1024,2048,4096")
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--r", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out")
    args = ap.parse_args()

    rows = bench_transform_scaling([int(k) for k in args.k.split(",")], d=args.d, r=args.r,
                                   repeats=args.repeats)
    for row in rows:
        print(f"K={row['K']:>5}  {1e6 * row['time']:9.1f} us  ratio {row['ratio']:.2f}")
    rank = bench_rank_doubling(K=2048, d=args.d, r=8, repeats=args.repeats)
    print(f"rank 8 -> 16 at K=2048: ratio {rank:.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"scaling": rows, "rank_doubling": rank}, fh, indent=2)


if __name__ == "__main__":
    main()
