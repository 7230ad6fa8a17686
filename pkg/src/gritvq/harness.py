"""Synthetic tasks, experiment runner, method comparison and timing benchmarks."""

import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .codebook import (
    TRANSFORM_KINDS,
    apply_transform,
    batch_assign,
    build_cache,
    codebook_to_json,
    init_codebook,
    init_transform,
)
from .errors import ConfigError, DomainError
from .numerics import make_rng, mat_to_json, row_norms
from .radius import RadiusSpec
from .training import (
    METHODS,
    METRIC_COLUMNS,
    TrainConfig,
    assignment_entropy,
    init_state,
    train_step,
)

log = logging.getLogger(__name__)

TASK_KINDS = ("GMMDirect", "LinearAE")
INIT_MODES = ("gaussian", "kmeans", "clustered")
FINAL_METRICS = ("quant_mse", "recon_mse", "utilization", "dead_rate", "entropy")


def _strict(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(doc) - names
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return doc


@dataclass
class SyntheticTask:
    kind: str = "GMMDirect"
    components: int = 8
    means: list = None
    scale: float = 0.05
    weights: list = None
    mean_radius: float = 1.0
    D: int = 32
    d: int = 16
    n_train: int = 20000
    n_eval: int = 2000
    seed: int = 0
    well_separated: bool = False

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.components < 1 or self.d < 1 or self.D < 1:
            raise ConfigError("components, d and D must be >= 1")
        if self.scale < 0:
            raise ConfigError("scale must be >= 0")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.components,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigError("weights must be non-negative, one per component, summing to 1")
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            if m.shape != (self.components, self.data_dim):
                raise ConfigError(f"means must be {self.components}x{self.data_dim}")
        if self.well_separated and self.components > 1:
            m = self.mixture_means()
            gaps = np.linalg.norm(m[:, None] - m[None], axis=2)[np.triu_indices(self.components, 1)]
            if gaps.min() < 2 * self.scale:
                raise ConfigError("means are closer than twice the covariance scale")

    @property
    def data_dim(self):
        return self.d if self.kind == "GMMDirect" else self.D

    def mixture_means(self):
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        rng = make_rng(self.seed * 7919 + 1)
        m = rng.standard_normal((self.components, self.data_dim))
        return self.mean_radius * m / row_norms(m)[:, None]

    def mixture_weights(self):
        if self.weights is None:
            return np.full(self.components, 1.0 / self.components)
        return np.asarray(self.weights, dtype=np.float64)

    @classmethod
    def from_dict(cls, doc):
        return cls(**_strict(cls, doc, "task"))


def gen_gmm(task, rng, n=None):
    """``n`` i.i.d. mixture samples (default ``task.n_train``)."""
    n = task.n_train if n is None else int(n)
    means = task.mixture_means()
    comp = rng.choice(task.components, size=n, p=task.mixture_weights())
    noise = rng.standard_normal((n, task.data_dim))
    return means[comp] + task.scale * noise


def task_data(task):
    """Train and eval sets drawn from the task seed."""
    rng = make_rng(task.seed)
    return gen_gmm(task, rng, task.n_train), gen_gmm(task, rng, task.n_eval)


@dataclass
class MethodConfig:
    name: str = "GRIT"
    radius: dict = field(default_factory=lambda: {"family": "Euclidean", "params": {}})
    transform: str = "LinearLowRank"
    rank: int = 16
    k: int = 16
    temp: float = 1.0
    row_normalize: bool = True

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}")
        if self.transform not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform {self.transform!r}")
        self.radius_spec()

    def radius_spec(self):
        return RadiusSpec.from_json(self.radius)

    @classmethod
    def from_dict(cls, doc):
        return cls(**_strict(cls, doc, "method"))


@dataclass
class ExperimentConfig:
    task: SyntheticTask = field(default_factory=SyntheticTask)
    method: MethodConfig = field(default_factory=MethodConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    K: int = 64
    init: str = "gaussian"
    init_scale: float = 0.05
    log_every: int = 100
    out_path: str = None

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.init not in INIT_MODES:
            raise ConfigError(f"unknown init mode {self.init!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.method.transform in ("LinearLowRank", "LowRankNormalized") and \
                self.method.rank > min(self.K, self.task.d):
            raise ConfigError(f"rank {self.method.rank} exceeds min(K, d)")
        if self.method.transform == "AttentionTopK" and not 1 <= self.method.k <= self.K:
            raise ConfigError("attention k must be in [1, K]")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(_strict(cls, doc, "config"))
        try:
            if "task" in doc:
                doc["task"] = SyntheticTask.from_dict(doc["task"])
            if "method" in doc:
                doc["method"] = MethodConfig.from_dict(doc["method"])
            if "train" in doc:
                doc["train"] = TrainConfig(**_strict(TrainConfig, doc["train"], "train"))
            return cls(**doc)
        except (DomainError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_seed(self, seed):
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))


@dataclass
class RunResult:
    final: dict
    metrics: list
    timings: dict
    state: object = None
    out_dir: str = None

    def series(self, key):
        return [row[key] for row in self.metrics]


# ---------------------------------------------------------------------------
# running


def _initial_codebook(cfg, train_latents, rng):
    K, d = cfg.K, cfg.task.d
    if cfg.init == "gaussian":
        return init_codebook(K, d, "gaussian", rng).E
    if cfg.init == "kmeans":
        warm = train_latents[: max(K * 20, 1000)]
        return init_codebook(K, d, "kmeans", rng, warmup=warm).E
    # clustered: every code near one mixture component
    centre = train_latents[0]
    E = centre + cfg.init_scale * rng.standard_normal((K, d))
    return E


def _latents(state, X):
    return X @ state.encoder.T if state.encoder is not None else X


def evaluate(state, X):
    """Final metrics of ``state`` on the inputs ``X``."""
    Z = _latents(state, X)
    cache = build_cache(apply_transform(state.transform, state.E))
    assign = batch_assign(cache, Z)
    diff = assign.zhat - Z
    quant = float(np.mean(diff * diff))
    if state.decoder is not None:
        r = assign.zhat @ state.decoder.T - X
        recon = float(np.mean(r * r))
    else:
        recon = quant
    counts = np.bincount(assign.index, minlength=state.K)
    used = int(np.count_nonzero(counts))
    return {
        "quant_mse": quant,
        "recon_mse": recon,
        "utilization": used / state.K,
        "dead_rate": (state.K - used) / state.K,
        "entropy": assignment_entropy(counts),
    }


def _fmt(v):
    return repr(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def metrics_jsonl(rows):
    return "".join(json.dumps({c: row[c] for c in METRIC_COLUMNS}) + "\n" for row in rows)


def build_state(cfg, train_X):
    rng = make_rng(cfg.train.seed)
    task = cfg.task
    encoder = decoder = None
    if task.kind == "LinearAE":
        encoder = rng.standard_normal((task.d, task.D)) / np.sqrt(task.D)
        decoder = rng.standard_normal((task.D, task.d)) / np.sqrt(task.d)
    Z = train_X @ encoder.T if encoder is not None else train_X
    E = _initial_codebook(cfg, Z, rng)
    m = cfg.method
    spec = init_transform(m.transform, E, rng=rng, rank=m.rank, k=m.k, temp=m.temp,
                          tau_w=cfg.train.tau_w, row_normalize=m.row_normalize)
    return init_state(E, spec, m.radius_spec(), cfg.train, method=m.name,
                      encoder=encoder, decoder=decoder), rng


def run_experiment(cfg, keep_state=True, persist=True):
    t0 = time.perf_counter()
    train_X, eval_X = task_data(cfg.task)
    state, rng = build_state(cfg, train_X)
    timings = {"setup": time.perf_counter() - t0, "train": 0.0, "eval": 0.0}
    rows = []
    tc = cfg.train
    t1 = time.perf_counter()
    n = train_X.shape[0]
    for step in range(tc.steps):
        idx = rng.integers(n, size=tc.batch)
        state, stats = train_step(state, train_X[idx], tc)
        if state.step % cfg.log_every == 0:
            rows.append(stats.metrics_row())
    timings["train"] = time.perf_counter() - t1
    t2 = time.perf_counter()
    final = evaluate(state, eval_X)
    timings["eval"] = time.perf_counter() - t2
    out_dir = None
    if persist and cfg.out_path:
        out_dir = cfg.out_path
        write_run(out_dir, cfg, state, rows, final, timings)
    return RunResult(final=final, metrics=rows, timings=timings,
                     state=state if keep_state else None, out_dir=out_dir)


def write_run(out_dir, cfg, state, rows, final, timings):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json() + "\n")
    with open(os.path.join(out_dir, "codebook.json"), "w") as fh:
        json.dump(codebook_to_json(state.E, state.transform), fh)
    model = {"radius": state.radius.to_json(), "method": state.method}
    if state.encoder is not None:
        model["encoder"] = mat_to_json(state.encoder)
        model["decoder"] = mat_to_json(state.decoder)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        fh.write(metrics_csv(rows))
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        fh.write(metrics_jsonl(rows))
    with open(os.path.join(out_dir, "result.json"), "w") as fh:
        json.dump({"final": final, "timings": timings, "steps": state.step, "model": model},
                  fh, indent=2)


# ---------------------------------------------------------------------------
# comparison


def compare_methods(cfgs, seeds=5, names=None, out_dir=None):
    """Run every config over ``seeds`` seeds; mean, std and paired differences
    against the first config for each final metric."""
    if len(cfgs) < 2:
        raise ConfigError("need at least two configs to compare")
    task = cfgs[0].task
    for c in cfgs[1:]:
        if c.task != task:
            raise ConfigError("configs do not share the same task")
    names = names or [f"{c.method.name}:{i}" for i, c in enumerate(cfgs)]
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    finals = {name: [] for name in names}
    for name, cfg in zip(names, cfgs):
        for s in seed_list:
            res = run_experiment(dataclasses.replace(cfg.with_seed(s), out_path=None),
                                 keep_state=False, persist=False)
            finals[name].append(res.final)
    base = names[0]
    rows = []
    for name in names:
        for metric in FINAL_METRICS:
            vals = np.array([f[metric] for f in finals[name]])
            ref = np.array([f[metric] for f in finals[base]])
            diff = vals - ref
            rows.append({
                "method": name,
                "metric": metric,
                "mean": float(vals.mean()),
                "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                "paired_diff_mean": float(diff.mean()),
                "paired_diff_std": float(diff.std(ddof=1)) if len(diff) > 1 else 0.0,
                "per_seed": [float(v) for v in vals],
                "paired_diffs": [float(v) for v in diff],
            })
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "comparison.json"), "w") as fh:
            json.dump({"seeds": seed_list, "rows": rows}, fh, indent=2)
        with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["method", "metric", "mean", "std", "paired_diff_mean", "paired_diff_std"]
            w.writerow(cols)
            for r in rows:
                w.writerow([r[c] for c in cols])
    return rows


# ---------------------------------------------------------------------------
# benchmarks


def _time_once(fn, inner):
    t = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t) / inner


def bench_transform_scaling(K_list, d=32, r=32, repeats=5, seed=0, budget=1e6):
    """Min-of-``repeats`` wall time of ``apply_transform`` for each K.

    Measurements are interleaved across K so slow drifts in machine load hit
    every size alike. Returns rows with time, spread, ratio to the previous K,
    and the least-squares slope/intercept of time against K.
    """
    K_list = [int(k) for k in K_list]
    if any(b <= a for a, b in zip(K_list, K_list[1:])):
        raise ValueError("K list must be increasing")
    rng = make_rng(seed)
    fns, inners = [], []
    for K in K_list:
        E = rng.standard_normal((K, d))
        spec = init_transform("LinearLowRank", E, rng=rng, rank=min(r, K, d))
        fns.append(lambda spec=spec, E=E: apply_transform(spec, E))
        inners.append(max(1, int(budget / (K * d))))
    for fn in fns:
        fn()
    samples = [[] for _ in K_list]
    for _ in range(repeats):
        for i, fn in enumerate(fns):
            samples[i].append(_time_once(fn, inners[i]))
    times = np.array([min(s) for s in samples])
    Ks = np.array(K_list, dtype=np.float64)
    slope, intercept = np.polyfit(Ks, times, 1) if len(Ks) > 1 else (float("nan"), float("nan"))
    rows = []
    for i, K in enumerate(K_list):
        rows.append({
            "K": K,
            "time": float(times[i]),
            "spread": float(max(samples[i]) - min(samples[i])),
            "ratio": float(times[i] / times[i - 1]) if i else float("nan"),
            "fit_slope": float(slope),
            "fit_intercept": float(intercept),
        })
    return rows


def bench_rank_doubling(K=2048, d=32, r=8, repeats=5, seed=0, budget=1e6):
    """Time ratio of apply_transform for rank 2r versus r at fixed K."""
    rng = make_rng(seed)
    E = rng.standard_normal((K, d))
    specs = [init_transform("LinearLowRank", E, rng=rng, rank=q) for q in (r, 2 * r)]
    inner = max(1, int(budget / (K * d)))
    for s in specs:
        apply_transform(s, E)
    samples = [[], []]
    for _ in range(repeats):
        for i, s in enumerate(specs):
            samples[i].append(_time_once(lambda s=s: apply_transform(s, E), inner))
    return min(samples[1]) / min(samples[0])


# ---------------------------------------------------------------------------
# presets


def collapse_preset(method="GRIT", seed=0, steps=5000, cache_T=8):
    """K=64 over an 8-component mixture, codebook initialised near one component.

    GRIT uses the Euclidean radius with a rank-16 linear transform under the
    frozen-codebook protocol; STE uses the identity transform with a directly
    trained codebook; EMAVQ uses EMA codebook updates. The two baselines run
    without dead-code resets or the usage hinge, as plain VQ would.
    """
    task = SyntheticTask(kind="GMMDirect", components=8, scale=0.05, d=16,
                         n_train=20000, n_eval=4000, seed=1234, well_separated=True)
    if method == "GRIT":
        m = MethodConfig(name="GRIT", transform="LinearLowRank", rank=16)
        protocol = "FrozenE"
    elif method == "STE":
        m = MethodConfig(name="STE", transform="Identity")
        protocol = "JointDirect"
    elif method == "EMAVQ":
        m = MethodConfig(name="EMAVQ", transform="Identity")
        protocol = "JointEMA"
    else:
        raise ConfigError(f"unknown method {method!r}")
    extra = {} if method == "GRIT" else {"resets": False, "lambda_u": 0.0}
    train = TrainConfig(protocol=protocol, steps=steps, batch=64, seed=seed, cache_T=cache_T, **extra)
    return ExperimentConfig(task=task, method=m, train=train, K=64, init="clustered",
                            init_scale=0.05, log_every=100)
