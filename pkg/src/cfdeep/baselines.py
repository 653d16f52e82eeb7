"""Reference linear receivers: centralized MMSE, distributed averaging, LSFD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ep_detector import DetectionOutput
from .modem import Constellation, demodulate_hard
from .sysmodel import Clustering


def _output(x_post, v_post, cons):
    return DetectionOutput(
        x_hat=demodulate_hard(x_post, cons),
        x_post=x_post,
        v_post=np.broadcast_to(v_post, x_post.shape).copy(),
        v_ext_trace=np.empty(0),
        v_ext_ap_trace=np.empty((0, 0)),
    )


def centralized_mmse(H, y, sigma2, p, cons: Constellation) -> DetectionOutput:
    """MMSE at the CPU over the full stacked channel.

    x_hat = (H^H H + sigma2 diag(1/p))^-1 H^H y. With the harness convention
    the per-user power is folded into H and p = 1.
    """
    H = np.asarray(H)
    y = np.asarray(y)
    k = H.shape[-1]
    p = np.broadcast_to(np.asarray(p, dtype=float), (k,))
    g = np.einsum("...ij,...ik->...jk", H.conj(), H)
    a = g + sigma2 * np.diag(1.0 / p)
    ainv = np.linalg.inv(a)
    if not np.all(np.isfinite(ainv)):
        raise np.linalg.LinAlgError("singular normal matrix")
    x = np.einsum("...jk,...k->...j", ainv, np.einsum("...ij,...i->...j", H.conj(), y))
    v = sigma2 * np.einsum("...jj->...j", ainv).real
    return _output(x, v, cons)


def local_mmse_estimates(h, y, sigma2, cons: Constellation, clustering: Clustering):
    """Per-AP MMSE estimates; entry l covers AP l's served users D_l."""
    out = []
    for l, d in enumerate(clustering.serve_sets):
        hl = np.asarray(h[l])[..., :, d]
        yl = np.asarray(y[l])
        g = np.einsum("...ij,...ik->...jk", hl.conj(), hl)
        a = g + (sigma2 / cons.energy) * np.eye(d.size)
        rhs = np.einsum("...ij,...i->...j", hl.conj(), yl)
        x = np.linalg.solve(a, rhs[..., None])[..., 0]
        out.append(x)
    return out


def distributed_mmse_avg(h, y, sigma2, cons: Constellation,
                         clustering: Clustering | None = None) -> DetectionOutput:
    """Per-AP MMSE followed by plain averaging of local estimates at the CPU."""
    n_aps = len(h)
    n_users = np.asarray(h[0]).shape[-1]
    if clustering is None:
        clustering = Clustering.all_serve_all(n_aps, n_users)
    locals_ = local_mmse_estimates(h, y, sigma2, cons, clustering)
    batch = np.broadcast_shapes(*[x.shape[:-1] for x in locals_])
    acc = np.zeros(batch + (n_users,), dtype=complex)
    cnt = np.zeros(n_users)
    for x, d in zip(locals_, clustering.serve_sets):
        acc[..., d] += x
        cnt[d] += 1
    if np.any(cnt == 0):
        raise ValueError("user with empty serving set")
    x = acc / cnt
    return _output(x, np.ones_like(cnt), cons)


@dataclass
class LsfdWeights:
    """MSE-optimal per-user combining weights over serving-AP local estimates."""

    weights: list      # per user, complex vector of length |M_k|
    user_sets: list


def calibrate_lsfd(local_samples, x_true, clustering: Clustering) -> LsfdWeights:
    """Estimate LSFD weights from a calibration batch.

    local_samples: list over APs of (n_cal, |D_l|) local estimates; x_true:
    (n_cal, K) transmitted symbols. Per user k the weight is
    a_k = E[g g^H]^-1 E[g x*] with g the |M_k|-vector of local estimates.
    """
    n_users = x_true.shape[-1]
    col = {(l, int(k)): j for l, d in enumerate(clustering.serve_sets)
           for j, k in enumerate(d)}
    weights = []
    for k in range(n_users):
        aps = clustering.user_sets[k]
        g = np.stack([local_samples[l][:, col[(l, k)]] for l in aps], axis=-1)
        corr = g.conj().T @ g / g.shape[0]
        cross = g.conj().T @ x_true[:, k] / g.shape[0]
        cond = np.linalg.cond(corr)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError(
                f"rank-deficient LSFD statistics for user {k}; calibration batch too small")
        weights.append(np.linalg.solve(corr, cross))
    return LsfdWeights(weights=weights, user_sets=clustering.user_sets)


def lsfd_combine(local_estimates, weights: LsfdWeights, cons: Constellation,
                 clustering: Clustering) -> DetectionOutput:
    """Apply calibrated LSFD weights to per-AP local estimates."""
    n_users = len(weights.weights)
    col = {(l, int(k)): j for l, d in enumerate(clustering.serve_sets)
           for j, k in enumerate(d)}
    batch = np.broadcast_shapes(*[x.shape[:-1] for x in local_estimates])
    out = np.zeros(batch + (n_users,), dtype=complex)
    for k in range(n_users):
        aps = clustering.user_sets[k]
        g = np.stack([local_estimates[l][..., col[(l, k)]] for l in aps], axis=-1)
        out[..., k] = np.einsum("...j,j->...", g, weights.weights[k].conj())
    return _output(out, np.ones(n_users), cons)
