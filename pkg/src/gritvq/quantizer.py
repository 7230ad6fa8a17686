"""Surrogate forward/backward, transform-parameter gradients, and the STE and
EMA-VQ baselines.

The surrogate is ``z_q = z + r(ẑ, z) * u`` where ``u`` is a frozen
(stop-gradient) vector: the unit direction ``s`` in the canonical
``UnitDirection`` form, or ``(ẑ - z) / r`` in ``RatioForm``. Because ``u`` is
frozen, the Jacobian is ``I - u wᵀ`` with ``w = dr/dẑ``, the encoder gradient is
``g - w <u, g>`` and the selected transformed codeword receives ``w <u, g>``.
For radial radii ``w = rho'(delta) s`` and in unit form this is the familiar
``g - rho' a s`` with ``a = <g, s>``.
"""

from dataclasses import dataclass

import numpy as np

from .codebook import BatchAssignment, transform_forward
from .errors import ShapeError
from .radius import RadiusEval, eval_radius_batch

FORMS = ("UnitDirection", "RatioForm")


@dataclass
class SurrogateBatch:
    z: np.ndarray
    z_q: np.ndarray
    assign: BatchAssignment
    value: np.ndarray  # r per row
    rho_prime: np.ndarray
    grad_zhat: np.ndarray  # dr/dẑ per row; dr/dz is its negative
    frozen: np.ndarray  # u per row
    degenerate: np.ndarray
    form: str = "UnitDirection"

    def __len__(self):
        return self.z.shape[0]

    def context(self, i):
        return SurrogateContext(
            assignment=self.assign.row(i),
            radius=RadiusEval(
                value=float(self.value[i]),
                rho_prime=float(self.rho_prime[i]),
                grad_z=-self.grad_zhat[i].copy(),
                grad_zhat=self.grad_zhat[i].copy(),
                gap=float(self.assign.gap[i]),
            ),
            form=self.form,
            z=self.z[i].copy(),
            z_q=self.z_q[i].copy(),
            frozen=self.frozen[i].copy(),
            degenerate=bool(self.degenerate[i]),
        )


@dataclass
class SurrogateContext:
    assignment: object
    radius: RadiusEval
    form: str
    z: np.ndarray
    z_q: np.ndarray
    frozen: np.ndarray
    degenerate: bool


def surrogate_forward_batch(Z, assign, spec, form="UnitDirection"):
    if form not in FORMS:
        raise ValueError(f"unknown surrogate form {form!r}")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape != assign.zhat.shape:
        raise ShapeError(f"latents {Z.shape} do not match assignment {assign.zhat.shape}")
    rad = eval_radius_batch(spec, assign.zhat, Z)
    gap = assign.gap
    degenerate = (gap == 0) | (rad.value == 0)
    live = ~degenerate
    frozen = np.zeros_like(Z)
    if form == "UnitDirection":
        frozen[live] = assign.direction[live]
    else:
        frozen[live] = (assign.zhat[live] - Z[live]) / rad.value[live, None]
    z_q = Z + rad.value[:, None] * frozen
    if form == "RatioForm":
        # the forward value is the hard codeword exactly
        z_q[live] = assign.zhat[live]
    z_q[degenerate] = Z[degenerate]
    grad = rad.grad_zhat.copy()
    grad[degenerate] = 0.0
    return SurrogateBatch(z=Z, z_q=z_q, assign=assign, value=rad.value, rho_prime=rad.rho_prime,
                          grad_zhat=grad, frozen=frozen, degenerate=degenerate, form=form)


def surrogate_forward(z, assignment, spec, form="UnitDirection"):
    z = np.asarray(z, dtype=np.float64)
    batch = BatchAssignment(
        index=np.array([assignment.index]),
        zhat=np.asarray(assignment.zhat, dtype=np.float64)[None],
        gap=np.array([assignment.gap]),
        direction=np.asarray(assignment.direction, dtype=np.float64)[None],
        residual=np.asarray(assignment.residual, dtype=np.float64)[None],
    )
    return surrogate_forward_batch(z[None], batch, spec, form).context(0)


def surrogate_backward_batch(sb, upstream):
    """Row-wise ``(grad_z, code_signal, a)`` for upstream gradients ``dL/dz_q``."""
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if g.shape != sb.z.shape:
        raise ShapeError(f"upstream {g.shape} does not match batch {sb.z.shape}")
    a = np.einsum("ij,ij->i", g, sb.assign.direction)
    ug = np.einsum("ij,ij->i", g, sb.frozen)
    code_signal = sb.grad_zhat * ug[:, None]
    grad_z = g - code_signal
    return grad_z, code_signal, a


def surrogate_backward(ctx, upstream):
    g = np.asarray(upstream, dtype=np.float64)
    if ctx.degenerate:
        return g.copy(), np.zeros_like(g), 0.0
    a = float(g @ ctx.assignment.direction)
    code_signal = ctx.radius.grad_zhat * float(g @ ctx.frozen)
    return g - code_signal, code_signal, a


def jacobian_dense(ctx):
    """Materialised ``dz_q/dz = I - u wᵀ`` (test helper)."""
    d = ctx.z.shape[0]
    if ctx.degenerate:
        return np.eye(d)
    return np.eye(d) - np.outer(ctx.frozen, ctx.radius.grad_zhat)


def scatter_code_signals(index, signals, K):
    """Stack per-sample signals into ``G`` (row i sums the samples assigned to i)."""
    index = np.asarray(index)
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if index.shape[0] != signals.shape[0]:
        raise ShapeError(f"{index.shape[0]} indices for {signals.shape[0]} signals")
    G = np.zeros((K, signals.shape[1]))
    np.add.at(G, index, signals)
    return G


def accumulate_code_signals(contexts, upstreams, K):
    if len(contexts) != len(upstreams):
        raise ShapeError(f"{len(contexts)} contexts for {len(upstreams)} upstream gradients")
    if not contexts:
        raise ShapeError("empty batch")
    signals = [surrogate_backward(c, g)[1] for c, g in zip(contexts, upstreams)]
    index = [c.assignment.index for c in contexts]
    return scatter_code_signals(index, np.array(signals), K)


# ---------------------------------------------------------------------------
# transform backward


def _pull_rownorm(G, tape):
    """Back-propagate through the final row normalisation, if any."""
    if tape.norms is None:
        return G
    c = tape.out
    return (G - c * np.einsum("ij,ij->i", c, G)[:, None]) / tape.norms[:, None]


def transform_backward(G, E, spec, tape=None, with_E=False):
    """Gradients of the loss w.r.t. transform parameters (and optionally ``E``)
    given ``G = dL/dE'``.

    Returns a dict keyed by parameter name. For the linear kind ``M = ABᵀ`` is
    never formed: ``dW = Eᵀ(B(AᵀḠ))``, ``dA = Ḡ((EW)ᵀB)``, ``dB = (EW)(ḠᵀA)``
    where ``Ḡ`` is ``G`` pulled back through row normalisation.
    """
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    E = np.asarray(E, dtype=np.float64)
    if G.shape != E.shape:
        raise ShapeError(f"G {G.shape} must match E {E.shape}")
    if tape is None:
        tape = transform_forward(spec, E)
    Gb = _pull_rownorm(G, tape)
    grads = {}
    kind = spec.kind
    if kind == "Identity":
        if with_E:
            grads["E"] = Gb
        return grads
    A, B, W = spec.A, spec.B, spec.W
    if kind == "LinearLowRank":
        EW = E @ W
        grads["W"] = E.T @ (B @ (A.T @ Gb))
        grads["A"] = Gb @ (EW.T @ B)
        grads["B"] = EW @ (Gb.T @ A)
        if with_E:
            grads["E"] = B @ (A.T @ (Gb @ W.T))
        return grads
    if kind == "LowRankNormalized":
        grads["W"] = tape.mixed.T @ Gb
        dN = Gb @ W.T
        x, m = tape.T2, tape.T2_norm
        dT2 = dN / m[:, None] - x * (np.einsum("ij,ij->i", x, dN) / m ** 3)[:, None]
        grads["A"] = dT2 @ (E.T @ B)
        grads["B"] = E @ (dT2.T @ A)
        if with_E:
            grads["E"] = B @ (A.T @ dT2)
        return grads
    # AttentionTopK: chain rule through the top-k softmax over fixed neighbour sets
    U1, V1 = spec.U1, spec.V1
    idx, w = tape.idx, tape.weights
    grads["W"] = tape.mixed.T @ Gb
    H = Gb @ W.T
    Enb = E[idx]
    gamma = np.einsum("kd,kjd->kj", H, Enb)
    dlogit = w * (gamma - np.sum(w * gamma, axis=1, keepdims=True)) / spec.temp
    P = E @ U1
    Q = E @ V1
    dP = np.einsum("kj,kjs->ks", dlogit, Q[idx])
    dQ = np.zeros_like(Q)
    np.add.at(dQ, idx, dlogit[:, :, None] * P[:, None, :])
    grads["U1"] = E.T @ dP
    grads["V1"] = E.T @ dQ
    if with_E:
        gE = dP @ U1.T + dQ @ V1.T
        np.add.at(gE, idx, w[:, :, None] * H[:, None, :])
        grads["E"] = gE
    return grads


# ---------------------------------------------------------------------------
# baselines


def ste_forward_backward_batch(Z, assign, upstream):
    return assign.zhat.copy(), np.array(upstream, dtype=np.float64, copy=True)


def ste_forward_backward(z, assignment, upstream):
    """Straight-through: forward is the hard codeword, backward is the identity."""
    return np.array(assignment.zhat, dtype=np.float64, copy=True), np.array(
        upstream, dtype=np.float64, copy=True
    )


def ema_codebook_update(Etilde, index, latents, momentum):
    """Blend each selected row toward the mean of the latents assigned to it."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    Etilde = np.array(Etilde, dtype=np.float64, copy=True)
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    index = np.asarray(index)
    K = Etilde.shape[0]
    counts = np.bincount(index, minlength=K)
    sums = np.zeros_like(Etilde)
    np.add.at(sums, index, latents)
    sel = counts > 0
    means = sums[sel] / counts[sel, None]
    Etilde[sel] = momentum * Etilde[sel] + (1.0 - momentum) * means
    return Etilde
