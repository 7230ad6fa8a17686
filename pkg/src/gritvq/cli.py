"""Command-line entry point: train, compare, gradcheck, bench, inspect."""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .codebook import TRANSFORM_KINDS, apply_transform, build_cache, codebook_from_json
from .errors import ConfigError, DomainError, NaNAbort, ShapeError
from .gradcheck import FDConfig, check_pipeline_gradients
from .harness import ExperimentConfig, bench_transform_scaling, compare_methods, run_experiment
from .numerics import row_norms, spectral_norm
from .radius import FAMILIES

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NAN = 3


def _set_path(doc, dotted, value):
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path, overrides=(), seed=None, out=None):
    with open(path) as fh:
        doc = json.load(fh)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        _set_path(doc, key, _parse_value(val))
    cfg = ExperimentConfig.from_dict(doc)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if out is not None:
        cfg = dataclasses.replace(cfg, out_path=out)
    return cfg


def cmd_train(args):
    cfg = load_config(args.config, args.set, args.seed, args.out)
    if cfg.out_path is None:
        cfg = dataclasses.replace(cfg, out_path="runs/latest")
    res = run_experiment(cfg, keep_state=False)
    print(json.dumps({"final": res.final, "out": res.out_dir}, indent=2))


def cmd_compare(args):
    cfgs = [load_config(p) for p in args.configs]
    names = [os.path.splitext(os.path.basename(p))[0] for p in args.configs]
    rows = compare_methods(cfgs, seeds=args.seeds, names=names, out_dir=args.out)
    print(f"{'method':<16}{'metric':<14}{'mean':>12}{'std':>12}{'paired':>12}")
    for r in rows:
        print(f"{r['method']:<16}{r['metric']:<14}{r['mean']:>12.5g}{r['std']:>12.3g}"
              f"{r['paired_diff_mean']:>12.3g}")


def cmd_gradcheck(args):
    fams = [args.family] if args.family else list(FAMILIES)
    kinds = [args.transform] if args.transform else list(TRANSFORM_KINDS)
    for f in fams:
        if f not in FAMILIES:
            raise DomainError(f"unknown family {f!r}")
    for k in kinds:
        if k not in TRANSFORM_KINDS:
            raise DomainError(f"unknown transform {k!r}")
    cfg = FDConfig(seed=args.seed)
    ok = True
    for f in fams:
        for k in kinds:
            rep = check_pipeline_gradients(f, k, trials=args.trials, cfg=cfg)
            ok &= rep["max_rel_err"] <= args.tol
            print(json.dumps(rep, sort_keys=True))
    return EXIT_OK if ok else EXIT_INVALID


def cmd_bench(args):
    Ks = [int(k) for k in args.k.split(",")]
    rows = bench_transform_scaling(Ks, d=args.d, r=args.r, repeats=args.repeats)
    print(f"{'K':>6}{'time_ms':>12}{'ratio':>8}")
    for row in rows:
        print(f"{row['K']:>6}{1e3 * row['time']:>12.4f}{row['ratio']:>8.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


def cmd_inspect(args):
    path = args.run
    with open(os.path.join(path, "codebook.json")) as fh:
        doc = json.load(fh)
    E, spec = codebook_from_json(doc)
    Ep = apply_transform(spec, E)
    cache = build_cache(Ep)
    n = row_norms(cache.Eprime)
    info = {
        "K": int(E.shape[0]),
        "d": int(E.shape[1]),
        "transform": spec.kind,
        "row_norm_min": float(n.min()),
        "row_norm_max": float(n.max()),
        "sigma_w": float(spectral_norm(spec.W)) if spec.W is not None else None,
        "min_pairwise_dist": float(np.sqrt(np.min(
            np.sum((Ep[:, None] - Ep[None]) ** 2, axis=2)[np.triu_indices(len(Ep), 1)]))),
    }
    res = os.path.join(path, "result.json")
    if os.path.exists(res):
        with open(res) as fh:
            info["final"] = json.load(fh)["final"]
    print(json.dumps(info, indent=2))


def build_parser():
    p = argparse.ArgumentParser(prog="gritvq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="run one experiment from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.steps=200")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compare", help="compare configs over several seeds")
    c.add_argument("--configs", nargs="+", required=True)
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of encoder gradients")
    g.add_argument("--family")
    g.add_argument("--transform")
    g.add_argument("--trials", type=int, default=200)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", help="time apply_transform against K")
    b.add_argument("--k", default="256,512,1024,2048")
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--r", type=int, default=32)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench)

    i = sub.add_parser("inspect", help="codebook statistics of a saved run")
    i.add_argument("run")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.fn(args)
    except NaNAbort as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NAN
    except (ConfigError, DomainError, ShapeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
