"""Distributed expectation-propagation detector.

Per-AP LMMSE modules produce posterior moments, the CPU turns them into
extrinsic messages, combines them by maximum-ratio combining, denoises on the
decoupled AWGN channel, and feeds extrinsic (gamma, lambda) pairs back to the
APs. All operations broadcast over leading batch axes so whole Monte Carlo
batches (or all data symbols of a coherence block) run in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .modem import Constellation, demodulate_hard, posterior_moments
from .sysmodel import Clustering

PREC_FLOOR = 1e-8
PREC_CEIL = 1e8


@dataclass
class ApMessage:
    x_post: np.ndarray   # (..., K_l)
    v_post: np.ndarray   # (...)


@dataclass
class ExtrinsicState:
    gamma: list          # per AP (..., K_l)
    lam: list            # per AP (...)


@dataclass
class DetectionOutput:
    x_hat: np.ndarray            # (..., K) hard constellation indices
    x_post: np.ndarray           # (..., K) posterior means
    v_post: np.ndarray           # (..., K) posterior variances
    v_ext_trace: np.ndarray      # (T,) batch-mean combined extrinsic variance
    v_ext_ap_trace: np.ndarray   # (T, L) batch-mean per-AP extrinsic variance
    clamp_count: int = 0


def _whiten(h, y, sigma2, noise_var):
    """Reduce a diagonal-noise model to unit-variance noise rows."""
    if noise_var is None:
        s = np.sqrt(sigma2)
        return h / s, y / s
    nv = np.asarray(noise_var, dtype=float)
    s = np.sqrt(nv)
    return h / s[..., :, None], y / s


def ap_lmmse_step(h_l, y_l, sigma2, gamma_l, lambda_l,
                  noise_cov=None, method="auto") -> ApMessage:
    """Local LMMSE posterior for y = h x + n given the Gaussian prior (gamma, lambda).

    Solves (sigma^-2 h^H h + lambda I)^-1 against (sigma^-2 h^H y + gamma).
    When N < K_l the matrix-inversion-lemma path works in the N-dimensional
    space instead; both paths agree to 1e-10. ``noise_cov`` is a strictly
    positive per-antenna noise-variance diagonal replacing sigma^2 I.
    """
    h = np.asarray(h_l)
    y = np.asarray(y_l)
    lam = np.asarray(lambda_l, dtype=float)
    gamma = np.asarray(gamma_l)
    if np.any(lam <= 0):
        raise ValueError("lambda must be positive")
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite inputs")
    if noise_cov is not None and np.any(np.asarray(noise_cov) <= 0):
        raise ValueError("noise covariance diagonal must be strictly positive")
    n, k = h.shape[-2], h.shape[-1]
    hw, yw = _whiten(h, y, sigma2, noise_cov)
    b = np.einsum("...ij,...i->...j", hw.conj(), yw) + gamma
    if method == "auto":
        method = "woodbury" if n < k else "direct"
    if method == "direct":
        g = np.einsum("...ij,...ik->...jk", hw.conj(), hw)
        a = g + lam[..., None, None] * np.eye(k)
        sig = np.linalg.inv(a)
        mu = np.einsum("...jk,...k->...j", sig, b)
        v_post = np.trace(sig, axis1=-2, axis2=-1).real / k
    elif method == "woodbury":
        # (h^H h + lam)^-1 = lam^-1 I - lam^-2 h^H (I + lam^-1 h h^H)^-1 h
        lam_ = lam[..., None, None]
        inner = np.eye(n) + np.einsum("...ik,...jk->...ij", hw, hw.conj()) / lam_
        inner_inv = np.linalg.inv(inner)
        hb = np.einsum("...ij,...j->...i", hw, b)
        mu = b / lam[..., None] - np.einsum(
            "...ji,...j->...i", hw.conj(), np.einsum("...ij,...j->...i", inner_inv, hb)
        ) / (lam**2)[..., None]
        cross = np.einsum("...ij,...jk->...ik", inner_inv,
                          np.einsum("...ik,...jk->...ij", hw, hw.conj()))
        v_post = (k / lam - np.trace(cross, axis1=-2, axis2=-1).real / lam**2) / k
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(mu)):
        raise np.linalg.LinAlgError("singular local system")
    return ApMessage(x_post=mu, v_post=np.maximum(v_post, 0.0))


def extrinsic_from_posterior(x_post, v_post, gamma_l, lambda_l):
    """Gaussian division of the posterior by the prior message.

    Returns (x_ext, v_ext, n_clamped). Precisions outside [PREC_FLOOR,
    PREC_CEIL] are clamped and counted; clamping preserves the extrinsic
    *mean*, not the natural mean, so the implied estimate stays bounded
    (falling back to the posterior mean when the division is improper).
    """
    v_post = np.asarray(v_post, dtype=float)
    if np.any(v_post <= 0):
        raise ValueError("v_post must be positive")
    prec_raw = 1.0 / v_post - np.asarray(lambda_l, dtype=float)
    clamped = (prec_raw <= PREC_FLOOR) | (prec_raw >= PREC_CEIL)
    prec = np.clip(prec_raw, PREC_FLOOR, PREC_CEIL)
    v_ext = 1.0 / prec
    eta = x_post / v_post[..., None] - gamma_l          # natural mean
    valid = prec_raw > PREC_FLOOR
    x_ext = np.where(valid[..., None],
                     eta / np.maximum(prec_raw, PREC_FLOOR)[..., None],
                     x_post)
    if not np.all(np.isfinite(x_ext)):
        raise ValueError("non-finite extrinsic mean")
    return x_ext, v_ext, int(np.count_nonzero(clamped))


def mrc_combine(messages, serve_sets=None, n_users=None):
    """Precision-weighted combining of per-AP extrinsic messages.

    ``messages`` is a list of (x_ext_l, v_ext_l). With serve_sets, message l
    covers only the users in D_l; each user is combined over its serving APs.
    Returns per-user (x_ext, v_ext) arrays of width n_users.
    """
    if not messages:
        raise ValueError("need at least one message")
    if serve_sets is None:
        n_users = messages[0][0].shape[-1]
        serve_sets = [np.arange(n_users)] * len(messages)
    elif n_users is None:
        raise ValueError("n_users required with serve_sets")
    batch = np.broadcast_shapes(*[np.asarray(v).shape for _, v in messages])
    prec = np.zeros(batch + (n_users,))
    num = np.zeros(batch + (n_users,), dtype=complex)
    covered = np.zeros(n_users, dtype=bool)
    for (x_l, v_l), d in zip(messages, serve_sets):
        v_l = np.asarray(v_l, dtype=float)
        if np.any(v_l <= 0):
            raise ValueError("extrinsic variances must be positive")
        covered[d] = True
        prec[..., d] += (1.0 / v_l)[..., None]
        num[..., d] += x_l / v_l[..., None]
    if not covered.all():
        raise ValueError(f"users {np.flatnonzero(~covered).tolist()} have no serving AP")
    v = 1.0 / prec
    return v * num, v


def cpu_denoise(x_ext, v_ext, cons: Constellation):
    """Element-wise posterior moments on the decoupled AWGN channel."""
    return posterior_moments(x_ext, v_ext, cons)


def cpu_feedback(x_b_post, v_b_post, x_src, v_ext_ap, serve_sets,
                 prev: ExtrinsicState | None = None, damping: float = 0.0):
    """New per-AP extrinsic (gamma, lambda) from the CPU posterior.

    lambda_l = 1/mean(v_B_post) - 1/v_ext_l, clamped to [PREC_FLOOR,
    PREC_CEIL]; gamma_l = x_B_post/mean(v_B_post) - x_src_l/v_ext_l with
    x_src the per-AP extrinsic (default) or posterior mean (literal variant).
    When the precision is clamped, gamma is rescaled so the implied mean
    gamma/lambda is preserved (posterior mean when the division is improper).
    Optional convex damping against the previous state.
    """
    mv = np.mean(np.asarray(v_b_post, dtype=float), axis=-1)
    gammas, lams = [], []
    n_clamped = 0
    for l, d in enumerate(serve_sets):
        prec_raw = 1.0 / mv - 1.0 / v_ext_ap[l]
        out_of_range = (prec_raw <= PREC_FLOOR) | (prec_raw >= PREC_CEIL)
        n_clamped += int(np.count_nonzero(out_of_range))
        lam = np.clip(prec_raw, PREC_FLOOR, PREC_CEIL)
        eta = x_b_post[..., d] / mv[..., None] - x_src[l] / v_ext_ap[l][..., None]
        mean = np.where(
            (prec_raw > PREC_FLOOR)[..., None],
            eta / np.maximum(prec_raw, PREC_FLOOR)[..., None],
            x_b_post[..., d])
        gamma = lam[..., None] * mean
        if prev is not None and damping > 0.0:
            lam = (1.0 - damping) * lam + damping * prev.lam[l]
            gamma = (1.0 - damping) * gamma + damping * prev.gamma[l]
        gammas.append(gamma)
        lams.append(np.asarray(lam, dtype=float))
    return ExtrinsicState(gamma=gammas, lam=lams), n_clamped


def detect(y, h, sigma2, cons: Constellation, n_iter: int,
           clustering: Clustering | None = None, noise_cov=None,
           damping: float = 0.0, feedback: str = "extrinsic") -> DetectionOutput:
    """Run the full distributed detector for n_iter iterations.

    y: per-AP received vectors, sequence of (..., N) arrays (or an (L, ..., N)
    array). h: per-AP channels over all K users, (..., N, K) each; columns of
    users outside D_l are ignored. noise_cov: optional per-AP strictly
    positive noise-variance diagonals, sequence of (..., N). feedback:
    'extrinsic' (message-consistent) or 'literal' (posterior-mean variant).
    """
    if n_iter < 1:
        raise ValueError("need at least one iteration")
    if feedback not in ("extrinsic", "literal"):
        raise ValueError(f"unknown feedback variant {feedback!r}")
    y = [np.asarray(a) for a in y]
    h = [np.asarray(a) for a in h]
    n_aps = len(y)
    n_users = h[0].shape[-1]
    if clustering is None:
        clustering = Clustering.all_serve_all(n_aps, n_users)
    serve = clustering.serve_sets
    h_loc = [h[l][..., :, serve[l]] for l in range(n_aps)]
    batch = np.broadcast_shapes(*[a.shape[:-1] for a in y], *[a.shape[:-2] for a in h])

    e_x = cons.energy
    state = ExtrinsicState(
        gamma=[np.zeros(batch + (serve[l].size,), dtype=complex) for l in range(n_aps)],
        lam=[np.full(batch, 1.0 / e_x) for l in range(n_aps)],
    )
    clamp_count = 0
    v_trace, v_ap_trace = [], []
    x_b = v_b = None
    for _ in range(n_iter):
        x_ext_ap, v_ext_ap, x_post_ap = [], [], []
        for l in range(n_aps):
            nc = None if noise_cov is None else noise_cov[l]
            msg = ap_lmmse_step(h_loc[l], y[l], sigma2, state.gamma[l], state.lam[l],
                                noise_cov=nc)
            x_ext, v_ext, nclamp = extrinsic_from_posterior(
                msg.x_post, msg.v_post, state.gamma[l], state.lam[l])
            clamp_count += nclamp
            x_ext_ap.append(x_ext)
            v_ext_ap.append(np.broadcast_to(v_ext, batch))
            x_post_ap.append(msg.x_post)
        x_comb, v_comb = mrc_combine(list(zip(x_ext_ap, v_ext_ap)), serve, n_users)
        x_b, v_b = cpu_denoise(x_comb, v_comb, cons)
        x_src = x_ext_ap if feedback == "extrinsic" else x_post_ap
        state, nclamp = cpu_feedback(x_b, v_b, x_src, v_ext_ap, serve,
                                     prev=state, damping=damping)
        clamp_count += nclamp
        v_trace.append(float(np.mean(v_comb)))
        v_ap_trace.append([float(np.mean(v)) for v in v_ext_ap])
    return DetectionOutput(
        x_hat=demodulate_hard(x_b, cons),
        x_post=x_b,
        v_post=v_b,
        v_ext_trace=np.array(v_trace),
        v_ext_ap_trace=np.array(v_ap_trace),
        clamp_count=clamp_count,
    )


def map_detect(y, h, sigma2, cons: Constellation) -> np.ndarray:
    """Exhaustive maximum-likelihood detection over all M^K hypotheses.

    Desk-scale oracle; cost grows as M^K. Returns hard indices (..., K).
    """
    h = [np.asarray(a) for a in h]
    y = [np.asarray(a) for a in y]
    k = h[0].shape[-1]
    m = cons.order
    if m**k > 2_000_000:
        raise ValueError("hypothesis space too large for exhaustive search")
    grids = np.meshgrid(*([np.arange(m)] * k), indexing="ij")
    hyp = np.stack([g.ravel() for g in grids], axis=-1)        # (m^k, K)
    sym = cons.points[hyp]                                     # (m^k, K)
    metric = 0.0
    for hl, yl in zip(h, y):
        pred = np.einsum("...nk,hk->...hn", hl, sym)
        metric = metric + np.sum(np.abs(yl[..., None, :] - pred) ** 2, axis=-1)
    best = np.argmin(metric, axis=-1)
    return hyp[best]
