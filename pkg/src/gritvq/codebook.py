"""Raw codebook, integrated transforms, the cached transformed codebook, and
brute-force nearest-neighbour search.

The transformed codebook is ``E' = f(E)``; for the linear kind this is
``A (Bᵀ E) W`` with the mixer ``M = A Bᵀ`` never materialised. Assignment is
always done against the cached ``E'`` so training and inference see the same
Voronoi partition.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .numerics import (
    as_mat,
    frobenius,
    mat_from_json,
    mat_to_json,
    row_norms,
    spectral_norm,
)

TRANSFORM_KINDS = ("Identity", "LinearLowRank", "AttentionTopK", "LowRankNormalized")
DENSE_MIXER_MAX_K = 512
CODEBOOK_FORMAT_VERSION = 1
_BLOCK = 256


@dataclass
class CodebookState:
    E: np.ndarray

    def __post_init__(self):
        self.E = as_mat(self.E)
        if self.K < 2:
            raise DomainError(f"codebook needs K >= 2, got {self.K}")

    @property
    def K(self):
        return self.E.shape[0]

    @property
    def d(self):
        return self.E.shape[1]


@dataclass
class TransformSpec:
    kind: str = "LinearLowRank"
    A: np.ndarray = None
    B: np.ndarray = None
    W: np.ndarray = None
    U1: np.ndarray = None
    V1: np.ndarray = None
    rank: int = 32
    k: int = 16
    temp: float = 1.0
    tau_w: float = 1.75
    row_normalize: bool = True

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise DomainError(f"unknown transform kind {self.kind!r}")
        if not self.tau_w > 0:
            raise DomainError("tau_w must be > 0")
        if not self.temp > 0:
            raise DomainError("temp must be > 0")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def copy(self):
        arrays = {n: (None if getattr(self, n) is None else getattr(self, n).copy())
                  for n in ("A", "B", "W", "U1", "V1")}
        return dataclasses.replace(self, **arrays)

    def params(self):
        """Trainable arrays for this kind, by name."""
        names = {
            "Identity": (),
            "LinearLowRank": ("A", "B", "W"),
            "LowRankNormalized": ("A", "B", "W"),
            "AttentionTopK": ("U1", "V1", "W"),
        }[self.kind]
        return {n: getattr(self, n) for n in names}

    def validate(self, K, d):
        if self.kind == "Identity":
            return
        if self.W is None or self.W.shape != (d, d):
            raise ShapeError(f"W must be {d}x{d}")
        if self.kind in ("LinearLowRank", "LowRankNormalized"):
            if self.A is None or self.B is None:
                raise ShapeError("A and B are required")
            if self.A.shape != self.B.shape or self.A.shape[0] != K:
                raise ShapeError(f"A {self.A.shape} / B {self.B.shape} must both be {K}xr")
            if self.kind == "LinearLowRank" and self.A.shape[1] > min(K, d):
                raise DomainError(f"rank {self.A.shape[1]} exceeds min(K, d) = {min(K, d)}")
        else:
            if self.U1 is None or self.V1 is None or self.U1.shape != self.V1.shape:
                raise ShapeError("U1 and V1 must have equal shape d x ds")
            if self.U1.shape[0] != d:
                raise ShapeError(f"U1 must have {d} rows")
            if not 1 <= self.k <= K:
                raise DomainError(f"k must be in [1, {K}], got {self.k}")


def init_transform(kind, E, rng=None, rank=32, k=16, temp=1.0, tau_w=1.75,
                   row_normalize=True, ds=None, attn_scale=4.0, noise=0.0):
    """Build a transform whose initial output reproduces ``E`` as closely as the
    parameterisation allows.

    Low-rank kinds use ``A = B = U_r`` (top-r left singular vectors of E), so
    ``M E`` is the best rank-r approximation of ``E`` and equals ``E`` when
    ``r >= rank(E)``. ``W`` starts at the identity.
    """
    E = as_mat(E)
    K, d = E.shape
    W = np.eye(d)
    if kind == "Identity":
        return TransformSpec(kind=kind, W=W, rank=0, k=1, temp=temp, tau_w=tau_w,
                             row_normalize=row_normalize)
    if kind in ("LinearLowRank", "LowRankNormalized"):
        r = min(rank, K, d)
        U, _, _ = np.linalg.svd(E, full_matrices=False)
        A = U[:, :r].copy()
        B = U[:, :r].copy()
        if noise > 0:
            A += noise * rng.standard_normal(A.shape)
            B += noise * rng.standard_normal(B.shape)
        return TransformSpec(kind=kind, A=A, B=B, W=W, rank=r, k=k, temp=temp,
                             tau_w=tau_w, row_normalize=row_normalize)
    if kind == "AttentionTopK":
        ds = d if ds is None else ds
        U1 = np.sqrt(attn_scale) * np.eye(d, ds)
        V1 = np.sqrt(attn_scale) * np.eye(d, ds)
        if noise > 0:
            U1 += noise * rng.standard_normal(U1.shape)
            V1 += noise * rng.standard_normal(V1.shape)
        return TransformSpec(kind=kind, U1=U1, V1=V1, W=W, rank=0, k=min(k, K), temp=temp,
                             tau_w=tau_w, row_normalize=row_normalize)
    raise DomainError(f"unknown transform kind {kind!r}")


# ---------------------------------------------------------------------------
# codebook initialisation


def kmeans(X, K, rng, iters=50, tol=0.0):
    """k-means++ seeding followed by Lloyd iterations.

    Returns ``(centers, labels, sse_history)``. Empty clusters are re-seeded
    with the points farthest from their current centre.
    """
    X = as_mat(X)
    n = X.shape[0]
    if n < K:
        raise DomainError(f"need at least K={K} points, got {n}")
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))

    history = []
    labels = None
    for _ in range(iters):
        dist = _sq_dists(X, centers)
        labels = np.argmin(dist, axis=1)
        point_d2 = dist[np.arange(n), labels]
        history.append(float(point_d2.sum()))
        new = np.zeros_like(centers)
        counts = np.bincount(labels, minlength=K)
        np.add.at(new, labels, X)
        empty = np.flatnonzero(counts == 0)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if empty.size:
            order = np.argsort(-point_d2, kind="stable")
            for j, idx in zip(empty, order):
                new[j] = X[idx]
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift <= tol:
            break
    dist = _sq_dists(X, centers)
    labels = np.argmin(dist, axis=1)
    history.append(float(dist[np.arange(n), labels].sum()))
    return centers, labels, history


def _sq_dists(X, C):
    return np.maximum(
        np.sum(X * X, axis=1)[:, None] - 2.0 * X @ C.T + np.sum(C * C, axis=1)[None, :], 0.0
    )


def _dedupe(E, rng):
    """Jitter rows that coincide with an earlier row (k-means on repeated points)."""
    E = E.copy()
    for _ in range(10):
        D = _sq_dists(E, E)
        close = np.triu(D <= 1e-14, 1)
        rows = np.unique(np.nonzero(close)[1])
        if rows.size == 0:
            break
        E[rows] += 1e-6 * rng.standard_normal((rows.size, E.shape[1]))
    return E


def init_codebook(K, d, mode="gaussian", rng=None, warmup=None, iters=50, restarts=10):
    """Initial raw codebook: unit-norm Gaussian rows or k-means centres.

    k-means keeps the lowest-SSE solution out of ``restarts`` seedings.
    """
    if K < 2 or d < 1:
        raise DomainError(f"need K >= 2 and d >= 1, got K={K}, d={d}")
    if mode == "gaussian":
        E = rng.standard_normal((K, d))
        E /= row_norms(E)[:, None]
    elif mode == "kmeans":
        if warmup is None or len(warmup) < K:
            raise DomainError(f"k-means init needs at least {K} warmup latents")
        warmup = as_mat(warmup)
        if warmup.shape[1] != d:
            raise ShapeError(f"warmup latents have dim {warmup.shape[1]}, expected {d}")
        best = None
        for _ in range(max(1, restarts)):
            C, _, hist = kmeans(warmup, K, rng, iters=iters)
            if best is None or hist[-1] < best[1]:
                best = (C, hist[-1])
        E = best[0]
    else:
        raise DomainError(f"unknown init mode {mode!r}")
    return CodebookState(E=_dedupe(E, rng))


# ---------------------------------------------------------------------------
# transforms


def _topk_attention(spec, E):
    S = (E @ spec.U1) @ (E @ spec.V1).T / spec.temp
    K = E.shape[0]
    k = spec.k
    if k == K:
        idx = np.broadcast_to(np.arange(K), (K, K)).copy()
    else:
        idx = np.argpartition(-S, k - 1, axis=1)[:, :k]
        idx.sort(axis=1)
    logits = np.take_along_axis(S, idx, axis=1)
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return S, idx, w


def _smooth_rownorm(X, temp):
    m = np.sqrt(np.einsum("ij,ij->i", X, X) + temp * temp)
    return X / m[:, None], m


@dataclass
class TransformTape:
    """Intermediates of one forward pass, reused by the backward pass."""

    pre: np.ndarray  # output before the final row normalisation
    out: np.ndarray
    norms: np.ndarray = None  # row norms of ``pre`` when row-normalised
    mixed: np.ndarray = None  # rows fed into W (ME, or its normalised form)
    T2: np.ndarray = None
    T2_norm: np.ndarray = None
    idx: np.ndarray = None
    weights: np.ndarray = None


def transform_forward(spec, E):
    E = as_mat(E)
    K, d = E.shape
    spec.validate(K, d)
    tape = TransformTape(pre=None, out=None)
    if spec.kind == "Identity":
        pre = E.copy()
    elif spec.kind == "LinearLowRank":
        mixed = _lowrank_mix(spec.A, spec.B, E)
        tape.mixed = mixed
        pre = mixed @ spec.W
    elif spec.kind == "LowRankNormalized":
        T2 = _lowrank_mix(spec.A, spec.B, E)
        mixed, m = _smooth_rownorm(T2, spec.temp)
        tape.T2, tape.T2_norm, tape.mixed = T2, m, mixed
        pre = mixed @ spec.W
    else:
        _, idx, w = _topk_attention(spec, E)
        mixed = np.einsum("kj,kjd->kd", w, E[idx])
        tape.idx, tape.weights, tape.mixed = idx, w, mixed
        pre = mixed @ spec.W
    tape.pre = pre
    if spec.row_normalize:
        n = row_norms(pre)
        if np.any(n == 0):
            raise DomainError("transformed codeword with zero norm cannot be row-normalised")
        tape.norms = n
        tape.out = pre / n[:, None]
    else:
        tape.out = pre
    return tape


def _lowrank_mix(A, B, E):
    """A (Bᵀ E), accumulated in row blocks so the working set stays cache-sized."""
    K = E.shape[0]
    if K <= _BLOCK:
        return A @ (B.T @ E)
    T1 = np.zeros((B.shape[1], E.shape[1]))
    for s in range(0, K, _BLOCK):
        T1 += B[s:s + _BLOCK].T @ E[s:s + _BLOCK]
    out = np.empty_like(E)
    for s in range(0, K, _BLOCK):
        out[s:s + _BLOCK] = A[s:s + _BLOCK] @ T1
    return out


def apply_transform(spec, E):
    """Transformed codebook ``E'`` (row-normalised when ``spec.row_normalize`` is set)."""
    return transform_forward(spec, E).out


def mixer_dense(spec, E):
    """Materialised K x K mixer; test oracle only (K <= 512)."""
    E = as_mat(E)
    K = E.shape[0]
    if K > DENSE_MIXER_MAX_K:
        raise DomainError(f"dense mixer limited to K <= {DENSE_MIXER_MAX_K}")
    if spec.kind == "Identity":
        return np.eye(K)
    if spec.kind in ("LinearLowRank", "LowRankNormalized"):
        return spec.A @ spec.B.T
    _, idx, w = _topk_attention(spec, E)
    M = np.zeros((K, K))
    np.put_along_axis(M, idx, w, axis=1)
    return M


def spectral_clip(W, tau_w, start=None, iters=1000, tol=1e-14, return_vector=False):
    """Rescale ``W`` so its largest singular value is at most ``tau_w``."""
    if not tau_w > 0:
        raise DomainError("tau_w must be > 0")
    sigma, v = spectral_norm(W, iters=iters, tol=tol, start=start, return_vector=True)
    out = W if sigma <= tau_w else W * (tau_w / sigma)
    if return_vector:
        return out, v
    return out


# ---------------------------------------------------------------------------
# cache and nearest-neighbour search


@dataclass(frozen=True)
class TransformedCache:
    Eprime: np.ndarray
    sq_norms: np.ndarray
    step_stamp: int
    prev_Eprime: np.ndarray = None

    @property
    def K(self):
        return self.Eprime.shape[0]

    @property
    def drift(self):
        if self.prev_Eprime is None:
            return 0.0
        return frobenius(self.Eprime - self.prev_Eprime)


def build_cache(Eprime, step=0, prev=None):
    Eprime = np.ascontiguousarray(as_mat(Eprime))
    Eprime.setflags(write=False)
    sq = np.einsum("ij,ij->i", Eprime, Eprime)
    sq.setflags(write=False)
    return TransformedCache(Eprime=Eprime, sq_norms=sq, step_stamp=step, prev_Eprime=prev)


def refresh_cache(state, spec, step=0, old=None):
    E = state.E if isinstance(state, CodebookState) else as_mat(state)
    Eprime = apply_transform(spec, E)
    prev = None if old is None else old.Eprime
    return build_cache(Eprime, step=step, prev=prev)


@dataclass
class Assignment:
    index: int
    zhat: np.ndarray
    gap: float
    direction: np.ndarray
    residual: np.ndarray


@dataclass
class BatchAssignment:
    index: np.ndarray
    zhat: np.ndarray
    gap: np.ndarray
    direction: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return self.index.shape[0]

    def row(self, i):
        return Assignment(
            index=int(self.index[i]),
            zhat=self.zhat[i].copy(),
            gap=float(self.gap[i]),
            direction=self.direction[i].copy(),
            residual=self.residual[i].copy(),
        )

    def rows(self):
        return [self.row(i) for i in range(len(self))]


def exact_sq_dist(z, C):
    diff = C - z
    return np.sum(diff * diff, axis=1)


def batch_assign(cache, Z, tie_slack=1e-9):
    """Exact nearest transformed codeword for every row of ``Z``.

    Candidates are ranked with precomputed norms (``||c||² - 2<z, c>``); rows
    whose best scores are within rounding distance of each other are re-ranked
    with exact distances. Ties go to the smallest index.
    """
    Z = as_mat(Z)
    C = cache.Eprime
    if Z.shape[1] != C.shape[1]:
        raise ShapeError(f"queries have dim {Z.shape[1]}, codebook has {C.shape[1]}")
    scores = cache.sq_norms[None, :] - 2.0 * (Z @ C.T)
    index = np.argmin(scores, axis=1)
    best = scores[np.arange(Z.shape[0]), index]
    zz = np.einsum("ij,ij->i", Z, Z)
    slack = tie_slack * (1.0 + zz + np.abs(best))
    close = np.count_nonzero(scores <= (best + slack)[:, None], axis=1) > 1
    for i in np.flatnonzero(close):
        cand = np.flatnonzero(scores[i] <= best[i] + slack[i])
        dist = exact_sq_dist(Z[i], C[cand])
        index[i] = cand[np.argmin(dist)]
    zhat = C[index]
    diff = zhat - Z
    gap = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    direction = np.zeros_like(diff)
    nz = gap > 0
    direction[nz] = diff[nz] / gap[nz, None]
    return BatchAssignment(index=index, zhat=zhat.copy(), gap=gap, direction=direction,
                           residual=-diff)


def nn_query(cache, z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("nn_query expects a single vector")
    return batch_assign(cache, z[None]).row(0)


def batch_nn(cache, Z):
    return batch_assign(cache, Z).rows()


def second_best_margin(cache, Z):
    """Distance difference between the second-best and best codeword, per row."""
    Z = as_mat(Z)
    D = np.sqrt(np.maximum(_sq_dists(Z, cache.Eprime), 0.0))
    part = np.partition(D, 1, axis=1)
    return part[:, 1] - part[:, 0]


# ---------------------------------------------------------------------------
# geometry checks


def sigma_min_map(X):
    """Smallest singular value of ``v -> v X`` over the full input space.

    For a tall ``X`` (more rows than columns) the map has a non-trivial kernel
    and the value is zero.
    """
    X = as_mat(X)
    s = np.linalg.svd(X, compute_uv=False)
    if X.shape[0] > s.size:
        return 0.0
    return float(s[-1])


def pairwise_distortion(M, E, W):
    """Pairwise distances of ``E' = M E W`` with their singular-value bounds.

    Returns a dict of (K, K) arrays: ``dist`` (transformed distances),
    ``lower``/``upper`` (``||M_i - M_j||`` scaled by the extreme singular values
    of E and W) and ``lower_proj`` (a tighter lower bound using only the part of
    ``M_i - M_j`` inside the column space of E).
    """
    M, E, W = as_mat(M), as_mat(E), as_mat(W)
    Ep = M @ E @ W
    dM = M[:, None, :] - M[None, :, :]
    mdist = np.linalg.norm(dM, axis=2)
    dist = np.linalg.norm(Ep[:, None, :] - Ep[None, :, :], axis=2)
    sE = np.linalg.svd(E, compute_uv=False)
    sW = np.linalg.svd(W, compute_uv=False)
    U, _, _ = np.linalg.svd(E, full_matrices=False)
    proj = np.linalg.norm(dM @ U, axis=2)
    return {
        "dist": dist,
        "lower": mdist * sigma_min_map(E) * sigma_min_map(W),
        "upper": mdist * sE[0] * sW[0],
        "lower_proj": proj * sE[-1] * sW[-1],
    }


# ---------------------------------------------------------------------------
# serialisation


def codebook_to_json(E, spec):
    tensors = {"E": mat_to_json(E)}
    for name in ("A", "B", "W", "U1", "V1"):
        v = getattr(spec, name)
        if v is not None:
            tensors[name] = mat_to_json(v)
    return {
        "version": CODEBOOK_FORMAT_VERSION,
        "kind": spec.kind,
        "tensors": tensors,
        "meta": {
            "rank": int(spec.rank),
            "k": int(spec.k),
            "temp": float(spec.temp),
            "tau_w": float(spec.tau_w),
            "row_normalize": bool(spec.row_normalize),
        },
    }


def codebook_from_json(doc):
    allowed = {"version", "kind", "tensors", "meta"}
    if set(doc) - allowed:
        raise ConfigError(f"unknown codebook fields {sorted(set(doc) - allowed)}")
    if doc.get("version") != CODEBOOK_FORMAT_VERSION:
        raise ConfigError(f"unsupported codebook version {doc.get('version')}")
    tensors = {k: mat_from_json(v) for k, v in doc["tensors"].items()}
    unknown = set(tensors) - {"E", "A", "B", "W", "U1", "V1"}
    if unknown:
        raise ConfigError(f"unknown tensors {sorted(unknown)}")
    E = tensors.pop("E")
    meta = doc.get("meta", {})
    spec = TransformSpec(kind=doc["kind"], **tensors, **meta)
    spec.validate(*E.shape)
    return E, spec
