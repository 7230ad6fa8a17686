"""Radius functions r(ẑ, z) that set the surrogate step length.

Every family is evaluated together with its derivative along the quantization
direction and its analytic gradients with respect to both arguments. All
families depend on the difference ``d = ẑ - z`` only, so ``grad_z`` is always
``-grad_zhat``. Radial families are functions ``phi(rho)`` of ``rho = ||d||_2``;
the Mahalanobis and p-norm families are not radial and report the directional
derivative ``<grad_zhat, s>`` as ``rho_prime``.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .numerics import mat_from_json, mat_to_json, spectral_norm

RADIAL_FAMILIES = (
    "Euclidean",
    "Clipped",
    "Power",
    "Huber",
    "SoftClip",
    "PseudoHuber",
    "Temperature",
)
FAMILIES = RADIAL_FAMILIES + ("Mahalanobis", "PNorm", "AdaptiveMahalanobis")

# hyperparameters that are read by each family (used for JSON output)
FAMILY_PARAMS = {
    "Euclidean": (),
    "Clipped": ("tau",),
    "Power": ("alpha",),
    "Huber": ("delta_h",),
    "SoftClip": ("tau",),
    "PseudoHuber": ("delta_h",),
    "Temperature": ("temp",),
    "Mahalanobis": ("precision",),
    "PNorm": ("p", "eps_p"),
    "AdaptiveMahalanobis": ("precision", "ema_beta"),
}

# scalar hyperparameter that may be learned through softplus, per family
LEARNABLE_PARAM = {
    "Clipped": "tau",
    "Power": "alpha",
    "Huber": "delta_h",
    "SoftClip": "tau",
    "PseudoHuber": "delta_h",
    "Temperature": "temp",
}

PRECISION_RIDGE = 1e-6


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def _check_precision(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"precision must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("precision has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10:
        raise DomainError("precision is not symmetric")
    lo = np.linalg.eigvalsh(0.5 * (a + a.T))[0]
    if lo < -1e-10 * max(1.0, np.abs(a).max()):
        raise DomainError(f"precision is not PSD (min eigenvalue {lo:.3e})")
    return a


@dataclass
class RadiusSpec:
    family: str = "Euclidean"
    tau: float = 1.0
    alpha: float = 1.0
    delta_h: float = 1.0
    p: float = 2.0
    eps_p: float = 1e-8
    temp: float = 1.0
    precision: np.ndarray = None
    ema_beta: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown radius family {self.family!r}")
        for name in ("tau", "alpha", "delta_h", "eps_p", "temp"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be > 0, got {v}")
        if not (np.isfinite(self.p) and self.p >= 1):
            raise DomainError(f"p must be >= 1, got {self.p}")
        if not (0.0 < self.ema_beta <= 1.0):
            raise DomainError(f"ema_beta must be in (0, 1], got {self.ema_beta}")
        if self.precision is not None:
            self.precision = _check_precision(self.precision)

    @property
    def radial(self):
        return self.family in RADIAL_FAMILIES

    def precision_for(self, dim):
        if self.precision is None:
            return np.eye(dim)
        if self.precision.shape[0] != dim:
            raise ShapeError(f"precision is {self.precision.shape}, latents have dim {dim}")
        return self.precision

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def update_precision(self, residuals):
        """EMA-update the shared precision matrix (AdaptiveMahalanobis)."""
        residuals = np.atleast_2d(np.asarray(residuals, dtype=np.float64))
        current = self.precision_for(residuals.shape[1])
        self.precision = update_adaptive_precision(current, residuals, self.ema_beta)
        return self.precision

    def to_json(self):
        params = {}
        for name in FAMILY_PARAMS[self.family]:
            v = getattr(self, name)
            if name == "precision":
                if v is not None:
                    params[name] = mat_to_json(v)
            else:
                params[name] = float(v)
        return {"family": self.family, "params": params}

    @classmethod
    def from_json(cls, doc):
        if not isinstance(doc, dict) or set(doc) - {"family", "params"}:
            raise ConfigError(f"radius spec has unknown fields: {sorted(set(doc) - {'family', 'params'})}")
        params = dict(doc.get("params", {}))
        known = {f.name for f in dataclasses.fields(cls)} - {"family"}
        unknown = set(params) - known
        if unknown:
            raise ConfigError(f"unknown radius params: {sorted(unknown)}")
        if "precision" in params and params["precision"] is not None:
            params["precision"] = mat_from_json(params["precision"])
        return cls(family=doc.get("family", "Euclidean"), **params)


@dataclass
class RadiusEval:
    value: float
    rho_prime: float
    grad_z: np.ndarray
    grad_zhat: np.ndarray
    gap: float


@dataclass
class RadiusBatch:
    """Row-wise radius evaluation for a batch of (ẑ, z) pairs."""

    value: np.ndarray
    rho_prime: np.ndarray
    grad_zhat: np.ndarray
    gap: np.ndarray

    @property
    def grad_z(self):
        return -self.grad_zhat

    def row(self, i):
        return RadiusEval(
            value=float(self.value[i]),
            rho_prime=float(self.rho_prime[i]),
            grad_z=-self.grad_zhat[i].copy(),
            grad_zhat=self.grad_zhat[i].copy(),
            gap=float(self.gap[i]),
        )


def phi(spec, rho):
    """Radial profile phi(rho) and phi'(rho) for the radial families.

    At the knee of Clipped and Huber the inner-side derivative is used. At
    rho = 0 the derivative is the right limit (infinite for Power with
    alpha < 1).
    """
    rho = np.asarray(rho, dtype=np.float64)
    fam = spec.family
    if fam == "Euclidean":
        return rho.copy(), np.ones_like(rho)
    if fam == "Clipped":
        tau = spec.tau
        return np.minimum(rho, tau), np.where(rho <= tau, 1.0, 0.0)
    if fam == "Power":
        a = spec.alpha
        if a == 1.0:
            return rho.copy(), np.ones_like(rho)
        with np.errstate(divide="ignore"):
            dphi = np.where(rho > 0, a * np.power(np.where(rho > 0, rho, 1.0), a - 1.0),
                            np.inf if a < 1.0 else 0.0)
        return np.power(rho, a), dphi
    if fam == "Huber":
        dh = spec.delta_h
        inner = rho <= dh
        val = np.where(inner, 0.5 * rho * rho / dh, rho - 0.5 * dh)
        return val, np.where(inner, rho / dh, 1.0)
    if fam == "SoftClip":
        x = rho / spec.tau
        t = np.tanh(x)
        return spec.tau * t, 1.0 - t * t
    if fam == "PseudoHuber":
        dh = spec.delta_h
        q = np.sqrt(1.0 + (rho / dh) ** 2)
        return dh * dh * (q - 1.0), rho / q
    if fam == "Temperature":
        T = spec.temp
        return T * np.log1p(rho / T), 1.0 / (1.0 + rho / T)
    raise DomainError(f"{fam} is not a radial family")


def _smooth_abs(d, eps):
    root = np.sqrt(d * d + eps * eps)
    return root - eps, d / root


def _pnorm(d, p, eps):
    a, da = _smooth_abs(d, eps)
    if p == 1.0:
        return a.sum(axis=1), da
    s = np.sum(a ** p, axis=1)
    r = s ** (1.0 / p)
    safe = np.where(r > 0, r, 1.0)
    grad = (a / safe[:, None]) ** (p - 1.0) * da
    grad[r == 0] = 0.0
    return r, grad


def eval_radius_batch(spec, zhat, z):
    zhat = np.atleast_2d(np.asarray(zhat, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if zhat.shape != z.shape:
        raise ShapeError(f"zhat {zhat.shape} and z {z.shape} differ")
    d = zhat - z
    gap = np.sqrt(np.einsum("ij,ij->i", d, d))
    nz = gap > 0
    unit = np.zeros_like(d)
    unit[nz] = d[nz] / gap[nz, None]
    if spec.radial:
        val, dphi = phi(spec, gap)
        grad = np.zeros_like(d)
        grad[nz] = dphi[nz, None] * unit[nz]
        return RadiusBatch(value=val, rho_prime=dphi, grad_zhat=grad, gap=gap)
    if spec.family in ("Mahalanobis", "AdaptiveMahalanobis"):
        A = spec.precision_for(d.shape[1])
        Ad = d @ A
        val = np.sqrt(np.maximum(np.einsum("ij,ij->i", d, Ad), 0.0))
        ok = val > 0
        grad = np.zeros_like(d)
        grad[ok] = Ad[ok] / val[ok, None]
    else:
        val, grad = _pnorm(d, spec.p, spec.eps_p)
        grad[~nz] = 0.0
        val = np.where(nz, val, 0.0)
    rho_prime = np.einsum("ij,ij->i", grad, unit)
    return RadiusBatch(value=val, rho_prime=rho_prime, grad_zhat=grad, gap=gap)


def eval_radius(spec, zhat, z):
    zhat = np.asarray(zhat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if zhat.ndim != 1 or zhat.shape != z.shape:
        raise ShapeError(f"zhat {zhat.shape} and z {z.shape} must be equal-length vectors")
    return eval_radius_batch(spec, zhat[None], z[None]).row(0)


def rho_prime_bound(spec, dim=None):
    """Upper bound L_r on the directional derivative over gaps in (0, inf)."""
    fam = spec.family
    if fam in ("Euclidean", "Clipped", "Huber", "SoftClip", "Temperature"):
        return 1.0
    if fam == "Power":
        return 1.0 if spec.alpha == 1.0 else float("inf")
    if fam == "PseudoHuber":
        return float(spec.delta_h)
    if fam in ("Mahalanobis", "AdaptiveMahalanobis"):
        if spec.precision is None:
            return 1.0
        return float(np.sqrt(spectral_norm(spec.precision, iters=500, tol=1e-13)))
    # PNorm: ||s||_p <= dim^(1/p - 1/2) for p < 2, <= 1 otherwise
    if spec.p >= 2.0:
        return 1.0
    if dim is None:
        return float("inf")
    return float(dim ** (1.0 / spec.p - 0.5))


def update_adaptive_precision(current, residuals, beta):
    """Blend ``current`` toward the inverse sample covariance of ``residuals``.

    The covariance gets a ridge of 1e-6·I when it is rank deficient (fewer than
    d+1 residuals, or a near-zero eigenvalue).
    """
    if not (0.0 < beta <= 1.0):
        raise DomainError(f"beta must be in (0, 1], got {beta}")
    current = np.asarray(current, dtype=np.float64)
    residuals = np.atleast_2d(np.asarray(residuals, dtype=np.float64))
    n, dim = residuals.shape
    if current.shape != (dim, dim):
        raise ShapeError(f"current precision {current.shape} vs residual dim {dim}")
    if n >= 2:
        cov = np.cov(residuals, rowvar=False).reshape(dim, dim)
    else:
        cov = np.zeros((dim, dim))
    if n < dim + 1 or np.linalg.eigvalsh(cov)[0] <= PRECISION_RIDGE:
        cov = cov + PRECISION_RIDGE * np.eye(dim)
    inv = np.linalg.inv(cov)
    out = (1.0 - beta) * current + beta * inv
    return 0.5 * (out + out.T)


def hyper_grad(spec, zhat, z):
    """Derivative of r with respect to the family's learnable scalar, row-wise."""
    zhat = np.atleast_2d(np.asarray(zhat, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    rho = np.linalg.norm(zhat - z, axis=1)
    fam = spec.family
    if fam == "Clipped":
        return np.where(rho <= spec.tau, 0.0, 1.0)
    if fam == "Power":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(rho > 0, np.power(rho, spec.alpha) * np.log(np.where(rho > 0, rho, 1.0)), 0.0)
    if fam == "Huber":
        dh = spec.delta_h
        return np.where(rho <= dh, -0.5 * rho * rho / (dh * dh), -0.5)
    if fam == "SoftClip":
        x = rho / spec.tau
        t = np.tanh(x)
        return t - x * (1.0 - t * t)
    if fam == "PseudoHuber":
        dh = spec.delta_h
        q = np.sqrt(dh * dh + rho * rho)
        return q + dh * dh / q - 2.0 * dh
    if fam == "Temperature":
        x = rho / spec.temp
        return np.log1p(x) - x / (1.0 + x)
    raise DomainError(f"{fam} has no learnable scalar hyperparameter")


def anneal(spec, step, total_steps, final):
    """Linear schedule for the cap/temperature (tau for Clipped/SoftClip, T for Temperature)."""
    name = {"Clipped": "tau", "SoftClip": "tau", "Temperature": "temp"}.get(spec.family)
    if name is None:
        return spec
    frac = 1.0 if total_steps <= 0 else min(1.0, max(0.0, step / total_steps))
    start = getattr(spec, name)
    return spec.replace(**{name: start + (final - start) * frac})
