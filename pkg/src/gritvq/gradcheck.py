"""Finite-difference oracles for the quantizer, transform and toy autoencoder.

All probes hold the stop-gradient quantities (the frozen direction ``u`` and
the selected index) fixed at the base point, and discard samples whose
assignment could flip inside the probe stencil.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from .codebook import (
    apply_transform,
    batch_assign,
    build_cache,
    init_transform,
    second_best_margin,
    transform_forward,
)
from .errors import DomainError
from .numerics import make_rng
from .quantizer import (
    scatter_code_signals,
    surrogate_backward_batch,
    surrogate_forward_batch,
    transform_backward,
)
from .radius import FAMILIES, RadiusSpec, eval_radius_batch

log = logging.getLogger(__name__)


class FDError(ValueError):
    """The probed function returned a non-finite value."""

    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


@dataclass
class FDConfig:
    h: float = 1e-5
    scheme: str = "central"
    boundary_margin: float = 1e-3
    trials: int = 200
    dims: tuple = (2, 8, 32)
    Ks: tuple = (4, 64)
    tolerance: float = 1e-6
    min_gap: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.h > 0:
            raise DomainError("h must be > 0")
        if not self.boundary_margin > 0:
            raise DomainError("boundary_margin must be > 0")
        if self.scheme != "central":
            raise DomainError("only central differences are supported")


def fd_gradient(loss_fn, x, h=1e-5):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    ``h`` may be a scalar or an array of per-coordinate steps shaped like ``x``.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    hs = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape).reshape(-1)
    if np.any(hs <= 0):
        raise DomainError("h must be > 0")
    out = np.zeros_like(flat)
    for i in range(flat.size):
        keep, hi = flat[i], hs[i]
        flat[i] = keep + hi
        fp = loss_fn(x)
        flat[i] = keep - hi
        fm = loss_fn(x)
        flat[i] = keep
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FDError(f"loss is not finite when probing coordinate {i}", i)
        out[i] = (fp - fm) / (2.0 * hi)
    return out.reshape(x.shape)


def rel_err(analytic, numeric, floor=1e-12):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(n)), np.max(np.abs(a)), floor)
    return float(np.max(np.abs(a - n)) / scale)


# ---------------------------------------------------------------------------
# random instances


def random_radius(family, rng, d):
    if family == "Clipped":
        return RadiusSpec(family, tau=float(rng.uniform(0.5, 2.0)))
    if family == "Power":
        return RadiusSpec(family, alpha=float(rng.uniform(0.5, 1.5)))
    if family in ("Huber", "PseudoHuber"):
        return RadiusSpec(family, delta_h=float(rng.uniform(0.3, 2.0)))
    if family == "SoftClip":
        return RadiusSpec(family, tau=float(rng.uniform(0.5, 2.0)))
    if family == "Temperature":
        return RadiusSpec(family, temp=float(rng.uniform(0.5, 2.0)))
    if family == "PNorm":
        return RadiusSpec(family, p=float(rng.choice([1.5, 2.0, 3.0])), eps_p=1e-3)
    if family in ("Mahalanobis", "AdaptiveMahalanobis"):
        Q = rng.standard_normal((d, d))
        return RadiusSpec(family, precision=Q @ Q.T / d + 0.5 * np.eye(d))
    return RadiusSpec(family)


def random_transform(kind, E, rng, rank=2, k=3, row_normalize=True, noise=0.1):
    """Initialised transform with every parameter perturbed by ``noise``."""
    K, d = E.shape
    spec = init_transform(kind, E, rng=rng, rank=min(rank, K, d), k=min(k, K),
                          row_normalize=row_normalize, ds=d)
    for name, p in spec.params().items():
        setattr(spec, name, p + noise * rng.standard_normal(p.shape))
    return spec


def _kink_clear(spec, gap, h):
    """True when no knee of a piecewise family lies within a few probe widths."""
    width = 10 * h + 1e-9
    if spec.family in ("Clipped",):
        return abs(gap - spec.tau) > width
    if spec.family == "Huber":
        return abs(gap - spec.delta_h) > width
    return True


def _quad_loss(rng, d):
    q = rng.uniform(0.5, 1.5, size=d)
    c = rng.standard_normal(d)

    def loss(y):
        return float(np.sum(0.5 * q * y * y + c * y))

    def grad(y):
        return q * y + c

    return loss, grad


# ---------------------------------------------------------------------------
# encoder-gradient trials


def encoder_trial(family, kind, d, K, rng, cfg, form="UnitDirection", radius=None):
    """One boundary-filtered trial; returns the relative error or None when skipped."""
    E = rng.standard_normal((K, d))
    spec = random_transform(kind, E, rng, rank=min(K, d, max(2, d // 2)), k=min(3, K))
    Ep = apply_transform(spec, E)
    cache = build_cache(Ep)
    rspec = radius if radius is not None else random_radius(family, rng, d)
    z = Ep[rng.integers(K)] + rng.standard_normal(d) * 0.5 / np.sqrt(d)
    z = z[None]
    if second_best_margin(cache, z)[0] < cfg.boundary_margin:
        return None
    assign = batch_assign(cache, z)
    gap = float(assign.gap[0])
    if gap < cfg.min_gap or not _kink_clear(rspec, gap, cfg.h):
        return None
    # keep the stencil well inside the local curvature radius: the gap for all
    # families, and each residual coordinate for the coordinate-wise p-norm
    scale = np.full(d, gap)
    if family == "PNorm":
        scale = np.minimum(scale, np.abs(assign.residual[0]))
        if scale.min() < 1e-4:
            return None
    h = np.minimum(cfg.h, 1e-4 * scale)
    loss, lgrad = _quad_loss(rng, d)
    sb = surrogate_forward_batch(z, assign, rspec, form)
    g = lgrad(sb.z_q[0])[None]
    analytic = surrogate_backward_batch(sb, g)[0][0]
    u = sb.frozen[0]
    zhat = assign.zhat
    i_star = assign.index[0]

    def f(zz):
        r = eval_radius_batch(rspec, zhat, zz[None]).value[0]
        return loss(zz + r * u)

    # probes never leave the margin, but check the assignment anyway
    for i in range(d):
        for sgn in (1.0, -1.0):
            zz = z.copy()
            zz[0, i] += sgn * h[i]
            if batch_assign(cache, zz).index[0] != i_star:
                return None
    numeric = fd_gradient(f, z[0], h)
    return rel_err(analytic, numeric)


def check_pipeline_gradients(family="Euclidean", transform="Identity", trials=200, cfg=None,
                             form="UnitDirection", radius=None):
    """Encoder-gradient check over ``dims`` x ``Ks``; returns a JSON-ready report."""
    cfg = cfg or FDConfig()
    rng = make_rng(cfg.seed + 1000 * FAMILIES.index(family) if family in FAMILIES else cfg.seed)
    errs, skipped, attempts = [], 0, 0
    combos = [(d, K) for d in cfg.dims for K in cfg.Ks]
    per = int(np.ceil(trials / len(combos)))
    for d, K in combos:
        got = 0
        while got < per:
            attempts += 1
            if attempts > 50 * trials:
                break
            e = encoder_trial(family, transform, d, K, rng, cfg, form=form, radius=radius)
            if e is None:
                skipped += 1
                continue
            errs.append(e)
            got += 1
    skip_rate = skipped / max(attempts, 1)
    if skip_rate > 0.5:
        log.warning("%s/%s: %.0f%% of samples skipped", family, transform, 100 * skip_rate)
    errs = np.array(errs) if errs else np.array([np.inf])
    return {
        "family": family,
        "transform": transform,
        "max_rel_err": float(errs.max()),
        "mean_rel_err": float(errs.mean()),
        "skip_rate": float(skip_rate),
        "trials": int(len(errs)),
    }


def report_json(report):
    return json.dumps(report, sort_keys=True)


# ---------------------------------------------------------------------------
# transform-parameter trials


def _batch_loss_for(spec, E, Z, index, frozen, rspec, loss, tape_check=None):
    """Loss of the surrogate with assignments and frozen directions held fixed."""
    tape = transform_forward(spec, E)
    Ep = tape.out
    zhat = Ep[index]
    r = eval_radius_batch(rspec, zhat, Z).value
    total = 0.0
    for p in range(Z.shape[0]):
        total += loss(Z[p] + r[p] * frozen[p])
    return total, tape


def transform_trial(kind, rng, cfg, K=8, d=4, rank=2, k=3, B=5, family="Euclidean",
                    row_normalize=True, with_E=False, h=None):
    """FD check of transform-parameter gradients on one random instance.

    Returns ``{name: rel_err}`` or None when a probe flips an assignment or
    a top-k neighbour set.
    """
    h = cfg.h if h is None else h
    E = rng.standard_normal((K, d))
    spec = random_transform(kind, E, rng, rank=rank, k=k, row_normalize=row_normalize)
    rspec = random_radius(family, rng, d)
    tape0 = transform_forward(spec, E)
    cache = build_cache(tape0.out)
    Z = tape0.out[rng.integers(K, size=B)] + 0.4 * rng.standard_normal((B, d)) / np.sqrt(d)
    if np.any(second_best_margin(cache, Z) < cfg.boundary_margin):
        return None
    assign = batch_assign(cache, Z)
    if np.any(assign.gap < cfg.min_gap):
        return None
    loss, lgrad = _quad_loss(rng, d)
    sb = surrogate_forward_batch(Z, assign, rspec)
    g = np.array([lgrad(y) for y in sb.z_q])
    _, signals, _ = surrogate_backward_batch(sb, g)
    G = scatter_code_signals(assign.index, signals, K)
    grads = transform_backward(G, E, spec, tape=tape0, with_E=with_E)

    names = list(spec.params())
    if with_E:
        names.append("E")
    out = {}
    for name in names:
        base = E if name == "E" else getattr(spec, name)

        def f(P, name=name):
            s2 = spec.copy()
            E2 = E
            if name == "E":
                E2 = P
            else:
                setattr(s2, name, P)
            val, tape = _batch_loss_for(s2, E2, Z, assign.index, sb.frozen, rspec, loss)
            if tape.idx is not None and not np.array_equal(tape.idx, tape0.idx):
                raise _Flip()
            if not np.array_equal(batch_assign(build_cache(tape.out), Z).index, assign.index):
                raise _Flip()
            return val

        try:
            numeric = fd_gradient(f, base, h)
        except _Flip:
            return None
        out[name] = rel_err(grads[name], numeric)
    return out


class _Flip(Exception):
    pass


def check_transform_gradients(kind="LinearLowRank", trials=100, cfg=None, **kw):
    cfg = cfg or FDConfig(h=1e-6)
    rng = make_rng(cfg.seed + 7)
    worst, got, skipped = {}, 0, 0
    while got < trials and skipped < 20 * trials:
        res = transform_trial(kind, rng, cfg, **kw)
        if res is None:
            skipped += 1
            continue
        got += 1
        for k, v in res.items():
            worst[k] = max(worst.get(k, 0.0), v)
    return {"transform": kind, "max_rel_err": worst, "trials": got,
            "skip_rate": skipped / max(got + skipped, 1)}


# ---------------------------------------------------------------------------
# Jacobian and contraction


def jacobian_eigs_trial(family, rng, d=None):
    """Eigenvalues of the materialised Jacobian and the predicted multiset."""
    from .quantizer import jacobian_dense

    d = int(rng.integers(2, 9)) if d is None else d
    K = 6
    E = rng.standard_normal((K, d))
    cache = build_cache(E / np.linalg.norm(E, axis=1, keepdims=True))
    rspec = random_radius(family, rng, d)
    z = rng.standard_normal((1, d))
    assign = batch_assign(cache, z)
    sb = surrogate_forward_batch(z, assign, rspec)
    ctx = sb.context(0)
    J = jacobian_dense(ctx)
    eig = np.sort_complex(np.linalg.eigvals(J))
    # J = I - u wᵀ has eigenvalue 1 - <w, u> once and 1 elsewhere
    lam = 1.0 - float(ctx.radius.grad_zhat @ ctx.frozen)
    want = np.sort_complex(np.array([1.0] * (d - 1) + [lam], dtype=complex))
    return eig, want, float(ctx.radius.rho_prime)


def contraction_trial(rspec, etas, rng, d=8, z=None, zhat=None):
    """Residuals ``|delta' - (delta + eta (1 - rho') a)|`` for one random point.

    The first-order term follows from ``s = (zhat - z) / delta``: the gap
    grows by ``eta <s, grad>`` and ``<s, grad> = (1 - rho') a``.
    """
    if zhat is None:
        zhat = rng.standard_normal(d)
        zhat /= np.linalg.norm(zhat)
    d = zhat.shape[0]
    if z is None:
        z = zhat + 0.5 * rng.standard_normal(d) / np.sqrt(d)
    delta = float(np.linalg.norm(zhat - z))
    s = (zhat - z) / delta
    Q = rng.standard_normal((d, d))
    Q = Q @ Q.T / d + np.eye(d)
    t = rng.standard_normal(d)
    rad = eval_radius_batch(rspec, zhat[None], z[None])
    zq = z + rad.value[0] * s
    g = Q @ (zq - t)
    a = float(g @ s)
    w = rad.grad_zhat[0]
    grad = g - w * float(g @ s)
    rho_p = float(rad.rho_prime[0])
    res = []
    for eta in etas:
        new = float(np.linalg.norm(zhat - (z - eta * grad)))
        pred = delta + eta * (1.0 - rho_p) * a
        res.append(abs(new - pred))
    return np.array(res), rho_p


def contraction_experiment(rspec, etas=(1e-2, 5e-3, 2.5e-3, 1.25e-3), trials=50, seed=0, d=8):
    """Fitted log-log slope of the first-order residual against the step size."""
    etas = np.asarray(etas, dtype=np.float64)
    if np.any(np.diff(etas) >= 0):
        raise DomainError("etas must be decreasing")
    rng = make_rng(seed)
    slopes, rhos = [], []
    for _ in range(trials):
        res, rho_p = contraction_trial(rspec, etas, rng, d=d)
        if np.any(res <= 0):
            continue
        slopes.append(np.polyfit(np.log(etas), np.log(res), 1)[0])
        rhos.append(rho_p)
    slopes = np.array(slopes)
    return {
        "family": rspec.family,
        "slope_mean": float(slopes.mean()),
        "slope_min": float(slopes.min()),
        "slope_max": float(slopes.max()),
        "slopes": slopes.tolist(),
        "rho_prime_mean": float(np.mean(rhos)),
        "trials": int(slopes.size),
    }


# ---------------------------------------------------------------------------
# toy autoencoder


def linear_ae_loss_and_grads(We, Wd, X, cache, rspec, frozen=None, index=None, form="UnitDirection"):
    """MSE of ``Wd z_q`` against ``X`` with ``z = We x``; analytic encoder/decoder gradients.

    The decoder consumes the surrogate. When ``frozen``/``index`` are given
    they replace the live assignment (used by the finite-difference probes).
    """
    Z = X @ We.T
    if frozen is None:
        assign = batch_assign(cache, Z)
        sb = surrogate_forward_batch(Z, assign, rspec, form)
        zq = sb.z_q
    else:
        zhat = cache.Eprime[index]
        r = eval_radius_batch(rspec, zhat, Z).value
        zq = Z + r[:, None] * frozen
        return float(np.mean((zq @ Wd.T - X) ** 2)), None
    R = zq @ Wd.T - X
    loss = float(np.mean(R * R))
    gx = 2.0 * R / R.size
    g = gx @ Wd
    grad_z, _, _ = surrogate_backward_batch(sb, g)
    return loss, {"encoder": grad_z.T @ X, "decoder": gx.T @ zq, "sb": sb}


def linear_ae_trial(rng, cfg, family="Euclidean", D=6, d=3, K=5, B=4):
    E = rng.standard_normal((K, d))
    cache = build_cache(E / np.linalg.norm(E, axis=1, keepdims=True))
    We = rng.standard_normal((d, D)) / np.sqrt(D)
    Wd = rng.standard_normal((D, d)) / np.sqrt(d)
    X = rng.standard_normal((B, D))
    rspec = random_radius(family, rng, d)
    Z = X @ We.T
    if np.any(second_best_margin(cache, Z) < cfg.boundary_margin):
        return None
    _, grads = linear_ae_loss_and_grads(We, Wd, X, cache, rspec)
    sb = grads["sb"]
    if np.any(sb.assign.gap < cfg.min_gap):
        return None
    for p in range(B):
        if not _kink_clear(rspec, sb.assign.gap[p], cfg.h):
            return None
    idx, frozen = sb.assign.index, sb.frozen

    def f_enc(W):
        if not np.array_equal(batch_assign(cache, X @ W.T).index, idx):
            raise _Flip()
        return linear_ae_loss_and_grads(W, Wd, X, cache, rspec, frozen, idx)[0]

    def f_dec(W):
        return linear_ae_loss_and_grads(We, W, X, cache, rspec, frozen, idx)[0]

    try:
        ne = fd_gradient(f_enc, We, cfg.h)
    except _Flip:
        return None
    nd = fd_gradient(f_dec, Wd, cfg.h)
    return {"encoder": rel_err(grads["encoder"], ne), "decoder": rel_err(grads["decoder"], nd)}
