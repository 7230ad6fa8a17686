"""Dense linear-algebra helpers, seeded randomness, and the JSON matrix format.

Matrices are plain float64 numpy arrays. Everything here is a pure function of
its inputs except the generators returned by :func:`make_rng`.
"""

import numpy as np

from .errors import ShapeError

MAT_FORMAT_VERSION = 1
DEFAULT_POWER_ITERS = 50
DEFAULT_POWER_TOL = 1e-9
POWER_START_SEED = 0x5EED


def as_mat(a, dtype=np.float64):
    """Coerce to a 2-D float array (a copy is made only when needed)."""
    m = np.asarray(a, dtype=dtype)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of ndim {m.ndim}")
    return m


def make_rng(seed):
    """Seeded generator; equal seeds give identical draw streams."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def matmul(a, b):
    a = as_mat(a)
    b = as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def row_norms(a):
    a = np.asarray(a, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->i", a, a))


def power_start(n, seed=POWER_START_SEED):
    v = make_rng(seed).standard_normal(n)
    return v / np.linalg.norm(v)


def spectral_norm(w, iters=DEFAULT_POWER_ITERS, tol=DEFAULT_POWER_TOL, start=None,
                  return_vector=False):
    """Largest singular value of ``w`` by power iteration on ``wᵀw``.

    ``start`` warm-starts the right singular vector; by default a fixed seeded
    unit vector is used so results are reproducible. Iteration stops after
    ``iters`` rounds or once successive estimates differ by less than ``tol``.
    """
    w = as_mat(w)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = w.shape[1]
    v = power_start(n) if start is None else np.array(start, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v = power_start(n)
    else:
        v = v / nv
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        prev = sigma
        sigma = float(np.linalg.norm(u))
        if sigma == 0.0:
            # zero matrix, or start vector in the null space
            if not np.any(w):
                break
            v = power_start(n, seed=POWER_START_SEED + 1)
            continue
        v = w.T @ (u / sigma)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            break
        v = v / nv
        if abs(sigma - prev) < tol:
            break
    sigma = float(np.linalg.norm(w @ v)) if np.any(w) else 0.0
    if return_vector:
        return sigma, v
    return sigma


def mat_to_json(a):
    a = as_mat(a)
    return {
        "version": MAT_FORMAT_VERSION,
        "rows": int(a.shape[0]),
        "cols": int(a.shape[1]),
        "data": [float(x) for x in a.ravel()],
    }


def mat_from_json(doc):
    keys = set(doc)
    allowed = {"version", "rows", "cols", "data"}
    if not keys <= allowed or not {"rows", "cols", "data"} <= keys:
        raise ShapeError(f"malformed matrix document, keys={sorted(keys)}")
    if doc.get("version", MAT_FORMAT_VERSION) != MAT_FORMAT_VERSION:
        raise ShapeError(f"unsupported matrix version {doc['version']}")
    rows, cols = int(doc["rows"]), int(doc["cols"])
    data = np.asarray(doc["data"], dtype=np.float64)
    if data.size != rows * cols:
        raise ShapeError(f"data length {data.size} != {rows}x{cols}")
    return data.reshape(rows, cols)
