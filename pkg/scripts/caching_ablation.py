"""Final utilization and quantization MSE of GRIT for several cache refresh intervals."""

import argparse

from gritvq.harness import collapse_preset, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--intervals", default="1,8,16")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=5000)
    args = ap.parse_args()

    Ts = [int(t) for t in args.intervals.split(",")]
    print(f"{'seed':>4}" + "".join(f"{'util T=' + str(t):>12}{'mse T=' + str(t):>14}" for t in Ts))
    for seed in range(args.seeds):
        cells = []
        for T in Ts:
            f = run_experiment(collapse_preset("GRIT", seed, args.steps, cache_T=T),
                               keep_state=False, persist=False).final
            cells.append(f"{f['utilization']:>12.3f}{f['quant_mse']:>14.5g}")
        print(f"{seed:>4}" + "".join(cells))


if __name__ == "__main__":
    main()
