"""Training protocols, optimizer, usage statistics and safeguards.

One call to :func:`train_step` runs the generic step: encode, refresh the
cached transformed codebook when due, assign, build the surrogate, decode,
back-propagate by hand, update parameters, apply gauge operations, update
usage statistics, and run scheduled resets. The step is computed on copies and
committed at the end, so a non-finite gradient leaves the state untouched.
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .codebook import (
    TransformSpec,
    batch_assign,
    build_cache,
    spectral_clip,
    transform_forward,
)
from .errors import DomainError, NaNAbort
from .numerics import frobenius, make_rng, row_norms, spectral_norm
from .quantizer import (
    ema_codebook_update,
    scatter_code_signals,
    surrogate_backward_batch,
    surrogate_forward_batch,
    transform_backward,
)
from .radius import LEARNABLE_PARAM, RadiusSpec, hyper_grad, inv_softplus, softplus

log = logging.getLogger(__name__)

PROTOCOLS = ("FrozenE", "JointDirect", "JointEMA")
METHODS = ("GRIT", "STE", "EMAVQ")
METRIC_COLUMNS = (
    "step",
    "loss",
    "utilization",
    "dead_rate",
    "entropy",
    "sigma_w",
    "drift",
    "grad_norm_W",
    "grad_norm_M",
    "grad_norm_E",
)


@dataclass
class TrainConfig:
    protocol: str = "FrozenE"
    lr_M: float = 1e-3
    lr_W: float = 2e-3
    lr_E: float = 3e-4
    lr_enc: float = 1e-3
    weight_decay_M: float = 1e-4
    tau_w: float = 1.75
    cache_T: int = 8
    lambda_u: float = 3e-4
    tau_u: float = None  # None -> 1/(2K)
    ema_momentum: float = 0.97
    t_ema: int = 4
    t_scan: int = 1000
    tau_dead: float = 0.005
    resets: bool = True
    steps: int = 5000
    batch: int = 64
    seed: int = 0
    form: str = "UnitDirection"
    decoder_input: str = "hard"
    usage_decay: float = 0.99
    util_window: int = 100
    reservoir_size: int = 1024
    spike_factor: float = 5.0
    spike_warmup: int = 20
    radius_lr: float = 0.0
    anneal_final: float = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise DomainError(f"unknown protocol {self.protocol!r}")
        for name in ("lr_M", "lr_W", "lr_E", "lr_enc", "weight_decay_M", "lambda_u", "radius_lr"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if self.tau_w <= 0:
            raise DomainError("tau_w must be > 0")
        if self.cache_T < 1 or self.t_ema < 1 or self.t_scan < 1 or self.batch < 1:
            raise DomainError("cache_T, t_ema, t_scan and batch must be >= 1")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise DomainError("ema_momentum must be in [0, 1)")
        if not 0.95 <= self.ema_momentum <= 0.99:
            log.warning("ema_momentum %.3f is outside the usual [0.95, 0.99] band", self.ema_momentum)
        if self.decoder_input not in ("hard", "surrogate"):
            raise DomainError("decoder_input must be 'hard' or 'surrogate'")
        if not 0.0 < self.usage_decay < 1.0:
            raise DomainError("usage_decay must be in (0, 1)")

    def usage_threshold(self, K):
        return 1.0 / (2 * K) if self.tau_u is None else self.tau_u


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(opt, params, grads, lr, weight_decay=0.0):
    """Bias-corrected Adam with decoupled weight decay; returns new (opt, params)."""
    t = opt.t + 1
    b1, b2 = opt.beta1, opt.beta2
    m_new, v_new, out = dict(opt.m), dict(opt.v), {}
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * opt.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * opt.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        q = p - step
        if weight_decay:
            q = q - lr * weight_decay * p
        m_new[name], v_new[name], out[name] = m, v, q
    return dataclasses.replace(opt, m=m_new, v=v_new, t=t), out


# ---------------------------------------------------------------------------
# usage


def usage_regularizer(activation_rate, lambda_u, tau_u):
    """Hinge ``lambda_u * sum(max(0, tau_u - p_i))`` and its gradient in ``p``."""
    p = np.asarray(activation_rate, dtype=np.float64)
    short = tau_u - p
    loss = lambda_u * float(np.sum(np.maximum(short, 0.0)))
    grad = np.where(short > 0, -lambda_u, 0.0)
    return loss, grad


def usage_pull(E, activation_rate, latents, lambda_u, tau_u):
    """Raw-code gradient realising the usage hinge: each under-used row is pulled
    toward the batch latent mean with magnitude ``lambda_u``."""
    _, gp = usage_regularizer(activation_rate, lambda_u, tau_u)
    grad = np.zeros_like(E)
    rows = np.flatnonzero(gp != 0)
    if rows.size == 0:
        return grad
    diff = E[rows] - latents.mean(axis=0)
    n = row_norms(diff)
    ok = n > 0
    grad[rows[ok]] = lambda_u * diff[ok] / n[ok, None]
    return grad


def dead_code_reset(E, activation_rate, tau_dead, reservoir, rng, jitter=1e-3):
    """Replace rows with activation below ``tau_dead`` by reservoir latents plus jitter."""
    dead = np.flatnonzero(np.asarray(activation_rate) < tau_dead)
    if dead.size == 0:
        return E, 0, dead
    if reservoir is None or len(reservoir) == 0:
        log.warning("%d dead codes but the latent reservoir is empty; skipping reset", dead.size)
        return E, 0, dead[:0]
    E = np.array(E, copy=True)
    pick = rng.integers(len(reservoir), size=dead.size)
    E[dead] = reservoir[pick] + jitter * rng.standard_normal((dead.size, E.shape[1]))
    return E, int(dead.size), dead


@dataclass
class UsageStats:
    activation_rate: np.ndarray
    utilization: float
    dead_rate: float
    entropy: float
    row_norm_min: float
    row_norm_max: float
    sigma_w: float
    grad_norms: dict
    drift: float
    loss: float = float("nan")
    step: int = 0
    safeguards: tuple = ()
    resets: int = 0

    def metrics_row(self):
        g = self.grad_norms
        return {
            "step": self.step,
            "loss": self.loss,
            "utilization": self.utilization,
            "dead_rate": self.dead_rate,
            "entropy": self.entropy,
            "sigma_w": self.sigma_w,
            "drift": self.drift,
            "grad_norm_W": g.get("W", 0.0),
            "grad_norm_M": g.get("M", 0.0),
            "grad_norm_E": g.get("E", 0.0),
        }


def assignment_entropy(counts):
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(max(0.0, -np.sum(p * np.log(p))))


def compute_stats(window_counts, activation_rate, cache, W, grad_norms=None, sigma_w=None):
    """Monitoring statistics from a window of per-code assignment counts."""
    counts = np.asarray(window_counts, dtype=np.float64)
    if counts.ndim == 2:
        counts = counts.sum(axis=0)
    if counts.sum() <= 0:
        raise ValueError("assignment window is empty")
    K = counts.shape[0]
    used = int(np.count_nonzero(counts))
    util = used / K
    n = row_norms(cache.Eprime)
    if sigma_w is None:
        sigma_w = spectral_norm(W) if W is not None else 1.0
    return UsageStats(
        activation_rate=np.array(activation_rate, dtype=np.float64),
        utilization=util,
        dead_rate=(K - used) / K,
        entropy=assignment_entropy(counts),
        row_norm_min=float(n.min()),
        row_norm_max=float(n.max()),
        sigma_w=float(sigma_w),
        grad_norms=dict(grad_norms or {}),
        drift=cache.drift,
    )


# ---------------------------------------------------------------------------
# state


@dataclass
class VQState:
    E: np.ndarray
    transform: TransformSpec
    radius: RadiusSpec
    method: str = "GRIT"
    encoder: np.ndarray = None  # d x D, LinearAE only
    decoder: np.ndarray = None  # D x d, LinearAE only
    cache: object = None
    opt: dict = field(default_factory=dict)
    usage: np.ndarray = None
    window: np.ndarray = None
    window_pos: int = 0
    window_fill: int = 0
    Etilde: np.ndarray = None
    reservoir: np.ndarray = None
    reservoir_count: int = 0
    step: int = 0
    rng: object = None
    grad_ema: dict = field(default_factory=dict)
    power_vec: np.ndarray = None
    radius_base: RadiusSpec = None
    force_refresh: bool = False
    last_stats: UsageStats = None

    @property
    def K(self):
        return self.E.shape[0]

    @property
    def d(self):
        return self.E.shape[1]


def init_state(E, transform, radius, config, method="GRIT", encoder=None, decoder=None):
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}")
    E = np.array(E, dtype=np.float64, copy=True)
    K, d = E.shape
    transform = transform.copy()
    transform.tau_w = config.tau_w
    transform.validate(K, d)
    if transform.W is not None:
        transform.W = spectral_clip(transform.W, config.tau_w)
    state = VQState(
        E=E,
        transform=transform,
        radius=dataclasses.replace(radius),
        method=method,
        encoder=None if encoder is None else np.array(encoder, dtype=np.float64, copy=True),
        decoder=None if decoder is None else np.array(decoder, dtype=np.float64, copy=True),
        usage=np.full(K, 1.0 / K),
        window=np.zeros((config.util_window, K)),
        reservoir=np.zeros((config.reservoir_size, d)),
        rng=make_rng(config.seed + 0x9E3779B9),
        radius_base=dataclasses.replace(radius),
    )
    state.Etilde = E.copy() if config.protocol == "JointEMA" else None
    state.cache = build_cache(transform_forward(state.transform, E).out, step=0)
    return state


def _snapshot(state):
    s = dataclasses.replace(state)
    for name in ("E", "usage", "window", "reservoir", "Etilde", "encoder", "decoder", "power_vec"):
        v = getattr(s, name)
        if v is not None:
            setattr(s, name, v.copy())
    s.transform = state.transform.copy()
    s.radius = dataclasses.replace(state.radius)
    s.opt = dict(state.opt)
    s.grad_ema = dict(state.grad_ema)
    return s


def _safeguard(state, name, grads, factor, warmup, fired):
    """Clip a gradient group whose norm spikes above ``factor`` times its running mean."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    ema, count = state.grad_ema.get(name, (0.0, 0))
    if count >= warmup and ema > 0 and norm > factor * ema:
        scale = factor * ema / norm
        grads = {k: g * scale for k, g in grads.items()}
        fired.append(f"clip:{name}")
        clipped = factor * ema
    else:
        clipped = norm
    state.grad_ema[name] = (0.9 * ema + 0.1 * clipped if count else clipped, count + 1)
    return grads, norm


def train_step(state, batch, config, inject_spike=None):
    """One training step. Returns ``(state, stats)``; raises NaNAbort on non-finite gradients.

    ``inject_spike`` multiplies the named gradient group by a factor (test hook).
    """
    s = _snapshot(state)
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    Bsz = X.shape[0]
    K, d = s.E.shape
    fired = []

    # (1) encode
    Z = X @ s.encoder.T if s.encoder is not None else X

    # radius schedule
    if config.anneal_final is not None:
        from .radius import anneal

        s.radius = anneal(s.radius_base, s.step, config.steps, config.anneal_final)

    # (2) cache refresh
    if s.step % config.cache_T == 0 or s.force_refresh:
        s.cache = build_cache(transform_forward(s.transform, s.E).out, step=s.step, prev=s.cache.Eprime)
        s.force_refresh = False

    # (3) assignment
    assign = batch_assign(s.cache, Z)

    # (4) surrogate
    sb = None
    if s.method == "GRIT":
        sb = surrogate_forward_batch(Z, assign, s.radius, config.form)
        z_q = sb.z_q
    else:
        z_q = assign.zhat
    y = assign.zhat if config.decoder_input == "hard" else z_q

    # (5) loss and upstream gradient dL/dy
    if s.decoder is not None:
        x_r = y @ s.decoder.T
        resid = x_r - X
        loss = float(np.mean(resid * resid))
        gx = 2.0 * resid / resid.size
        upstream = gx @ s.decoder
        grad_dec = gx.T @ y
    else:
        resid = y - Z
        loss = float(np.mean(resid * resid))
        upstream = 2.0 * resid / resid.size
        grad_dec = None

    # (6) backward through the quantizer
    if s.method == "GRIT":
        grad_z, signals, _ = surrogate_backward_batch(sb, upstream)
    else:
        grad_z = upstream
        if s.method == "STE":
            # isolated codebook term d/dẑ mean((ẑ - sg[z])²)
            diff = assign.zhat - Z
            signals = 2.0 * diff / diff.size
        else:
            signals = np.zeros_like(Z)
    G = scatter_code_signals(assign.index, signals, K)
    train_E = config.protocol == "JointDirect"
    grads = transform_backward(G, s.E, s.transform, with_E=train_E)
    if train_E:
        tau_u = config.usage_threshold(K)
        grads["E"] = grads["E"] + usage_pull(s.E, s.usage, Z, config.lambda_u, tau_u)
        loss += usage_regularizer(s.usage, config.lambda_u, tau_u)[0]
    grad_enc = grad_z.T @ X if s.encoder is not None else None

    groups = {}
    mix = {n: grads[n] for n in ("A", "B", "U1", "V1") if n in grads}
    if mix:
        groups["M"] = mix
    if "W" in grads:
        groups["W"] = {"W": grads["W"]}
    if train_E:
        groups["E"] = {"E": grads["E"]}
    if grad_enc is not None:
        groups["enc"] = {"encoder": grad_enc}
        groups["dec"] = {"decoder": grad_dec}
    if inject_spike:
        for name, factor in inject_spike.items():
            if name in groups:
                groups[name] = {k: g * factor for k, g in groups[name].items()}

    for name, gs in groups.items():
        for k, g in gs.items():
            if not np.all(np.isfinite(g)):
                raise NaNAbort(f"non-finite gradient in {k} at step {state.step}", step=state.step)
    if not np.isfinite(loss):
        raise NaNAbort(f"non-finite loss at step {state.step}", step=state.step)

    # (7) optimizer updates
    grad_norms = {}
    lrs = {"M": (config.lr_M, config.weight_decay_M), "W": (config.lr_W, 0.0),
           "E": (config.lr_E, 0.0), "enc": (config.lr_enc, 0.0), "dec": (config.lr_enc, 0.0)}
    for name, gs in groups.items():
        gs, norm = _safeguard(s, name, gs, config.spike_factor, config.spike_warmup, fired)
        grad_norms[name] = norm
        lr, wd = lrs[name]
        if name == "enc":
            params = {"encoder": s.encoder}
        elif name == "dec":
            params = {"decoder": s.decoder}
        elif name == "E":
            params = {"E": s.E}
        else:
            params = {k: getattr(s.transform, k) for k in gs}
        opt = s.opt.get(name, OptState())
        opt, new = adam_update(opt, params, gs, lr, wd)
        s.opt[name] = opt
        for k, v in new.items():
            if k == "encoder":
                s.encoder = v
            elif k == "decoder":
                s.decoder = v
            elif k == "E":
                s.E = v
            else:
                setattr(s.transform, k, v)

    # (8) gauge: clip W right after its update
    if s.transform.W is not None and "W" in groups:
        s.transform.W, s.power_vec = spectral_clip(s.transform.W, config.tau_w,
                                                   start=s.power_vec, return_vector=True)

    if config.protocol == "JointEMA":
        s.Etilde = ema_codebook_update(s.Etilde, assign.index, Z, config.ema_momentum)
        if (s.step + 1) % config.t_ema == 0:
            s.E = s.Etilde / row_norms(s.Etilde)[:, None]
            s.force_refresh = True

    if s.radius.family == "AdaptiveMahalanobis":
        s.radius.update_precision(assign.residual)

    if config.radius_lr > 0 and s.method == "GRIT" and s.radius.family in LEARNABLE_PARAM:
        pname = LEARNABLE_PARAM[s.radius.family]
        ug = np.einsum("ij,ij->i", upstream, sb.frozen)
        gtheta = float(np.sum(ug * hyper_grad(s.radius, assign.zhat, Z)))
        raw = float(inv_softplus(getattr(s.radius, pname)))
        raw -= config.radius_lr * gtheta / (1.0 + np.exp(-raw))
        s.radius = s.radius.replace(**{pname: float(softplus(raw))})
        s.radius_base = s.radius_base.replace(**{pname: float(softplus(raw))})

    # (9) usage statistics
    counts = np.bincount(assign.index, minlength=K).astype(np.float64)
    s.usage = config.usage_decay * s.usage + (1.0 - config.usage_decay) * counts / Bsz
    s.window[s.window_pos] = counts
    s.window_pos = (s.window_pos + 1) % s.window.shape[0]
    s.window_fill = min(s.window_fill + 1, s.window.shape[0])
    n_res = s.reservoir.shape[0]
    take = Z[-n_res:]
    pos = (s.reservoir_count + np.arange(take.shape[0])) % n_res
    s.reservoir[pos] = take
    s.reservoir_count += take.shape[0]

    # (10) scheduled resets (joint protocols only; FrozenE never touches E)
    resets = 0
    if config.resets and config.protocol != "FrozenE" and (s.step + 1) % config.t_scan == 0:
        filled = s.reservoir[: min(s.reservoir_count, n_res)]
        newE, resets, dead = dead_code_reset(s.E, s.usage, config.tau_dead, filled, s.rng)
        if resets:
            s.E = newE
            s.usage[dead] = 1.0 / K
            if s.Etilde is not None:
                s.Etilde[dead] = newE[dead]
            opt = s.opt.get("E")
            if opt is not None and "E" in opt.m:
                m, v = opt.m["E"].copy(), opt.v["E"].copy()
                m[dead] = 0.0
                v[dead] = 0.0
                s.opt["E"] = dataclasses.replace(opt, m={"E": m}, v={"E": v})
            s.force_refresh = True
            fired.append(f"reset:{resets}")

    s.step += 1
    if s.transform.W is not None:
        sigma_w, s.power_vec = spectral_norm(s.transform.W, iters=50, start=s.power_vec,
                                             return_vector=True)
    else:
        sigma_w = 1.0
    stats = compute_stats(s.window[: s.window_fill] if s.window_fill < s.window.shape[0] else s.window,
                          s.usage, s.cache, s.transform.W, grad_norms, sigma_w=sigma_w)
    stats.loss = loss
    stats.step = s.step
    stats.safeguards = tuple(fired)
    stats.resets = resets
    s.last_stats = stats
    return s, stats


def drift_between(a, b):
    return frobenius(np.asarray(a) - np.asarray(b))
