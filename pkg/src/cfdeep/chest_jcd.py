"""Pilot LMMSE channel estimation, detection under estimation error, and the
data-aided re-estimation loop.

Vectorization is column-major, so vec(H) stacks the per-user N-vectors and
the pilot model reads vec(Y_p) = (X_p^T kron I_N) vec(H) + vec(N_p). The
channel prior is block-diagonal across users of the serving set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ep_detector
from .modem import Constellation
from .sysmodel import Clustering


@dataclass
class ChannelEstimate:
    h_hat: np.ndarray          # (N, K_l) estimated channel matrix
    err_cov: np.ndarray        # (N*K_l, N*K_l) Hermitian PSD error covariance
    per_entry_var: np.ndarray  # (N, K_l) per-entry error variances

    @property
    def h_vec(self) -> np.ndarray:
        return self.h_hat.reshape(-1, order="F")


@dataclass
class JcdState:
    round_index: int
    estimates: list            # per-AP ChannelEstimate
    detection: "ep_detector.DetectionOutput"
    v_est: list                # per-AP (N,) equivalent detection-noise diagonal


def prior_cov_block(R_users) -> np.ndarray:
    """Block-diagonal channel prior over the served users (vec order)."""
    from scipy.linalg import block_diag
    return block_diag(*[np.asarray(r) for r in R_users])


def pilot_operator(X, n_antennas: int) -> np.ndarray:
    """A = X^T kron I_N mapping vec(H) to vec(H X)."""
    return np.kron(np.asarray(X).T, np.eye(n_antennas))


def lmmse_pilot_estimate(Y_p, X_p, R_hh, sigma2) -> ChannelEstimate:
    """Pilot-only LMMSE estimate and its error covariance."""
    Y_p = np.asarray(Y_p)
    X_p = np.asarray(X_p)
    R = np.asarray(R_hh)
    n = Y_p.shape[0]
    k_l = X_p.shape[0]
    if R.shape != (n * k_l, n * k_l):
        raise ValueError("prior covariance has wrong dimensions")
    if np.linalg.eigvalsh((R + R.conj().T) / 2).min() < -1e-9 * max(1.0, np.abs(R).max()):
        raise ValueError("prior covariance not PSD")
    A = pilot_operator(X_p, n)
    y = Y_p.reshape(-1, order="F")
    gram = A @ R @ A.conj().T + sigma2 * np.eye(A.shape[0])
    gain = R @ A.conj().T @ np.linalg.inv(gram)
    h_vec = gain @ y
    err = R - gain @ A @ R
    err = (err + err.conj().T) / 2
    return ChannelEstimate(
        h_hat=h_vec.reshape(n, k_l, order="F"),
        err_cov=err,
        per_entry_var=np.maximum(np.diag(err).real, 0.0).reshape(n, k_l, order="F"),
    )


def detection_noise_cov(err_per_entry_var, sigma2) -> np.ndarray:
    """Per-antenna equivalent noise diagonal: row sums of entry variances + sigma2."""
    v = np.asarray(err_per_entry_var, dtype=float)
    if np.any(v < 0):
        raise ValueError("variances must be nonnegative")
    return v.sum(axis=-1) + sigma2


def feedback_noise_cov(v_b_post, sigma2, h_hat=None) -> np.ndarray:
    """Equivalent noise variance for the soft-pilot (detected data) columns.

    v_b_post: (tau_d, K_l) detection-error variances (per symbol, per user).
    Without h_hat, returns the (tau_d,) scalars v_n = sum_j v[n,j] + sigma2
    (unit-gain channel convention). With h_hat (N, K_l), the detection error
    reaches antenna i through the channel, so the variance is propagated:
    v[n,i] = sum_j |h_hat[i,j]|^2 v[n,j] + sigma2, returned as (tau_d, N).
    """
    v = np.asarray(v_b_post, dtype=float)
    if h_hat is None:
        return v.sum(axis=-1) + sigma2
    g = np.abs(np.asarray(h_hat)) ** 2        # (N, K_l)
    return v @ g.T + sigma2


def feedback_noise_blocks(per_symbol_var, n_antennas: int) -> np.ndarray:
    """Explicit block-diagonal V_det = diag(v_1 I_N, ..., v_tau_d I_N)."""
    v = np.asarray(per_symbol_var, dtype=float)
    return np.diag(np.repeat(v, n_antennas))


def data_aided_estimate(Y_p, Y_d, X_p, X_d_hat, R_hh, sigma2,
                        per_symbol_var=None) -> ChannelEstimate:
    """Joint LMMSE over pilots plus detected-data soft pilots.

    The stacked noise covariance is diagonal: sigma2 on the pilot block and
    the feedback variances on the data block; per_symbol_var is either
    (tau_d,) shared across antennas or (tau_d, N) per antenna. None (or
    tau_d = 0) reduces to the pilot-only path.
    """
    Y_p = np.asarray(Y_p)
    X_p = np.asarray(X_p)
    n = Y_p.shape[0]
    k_l = X_p.shape[0]
    R = np.asarray(R_hh)
    if X_d_hat is None or np.asarray(X_d_hat).shape[-1] == 0:
        return lmmse_pilot_estimate(Y_p, X_p, R, sigma2)
    X_d_hat = np.asarray(X_d_hat)
    Y_d = np.asarray(Y_d)
    tau_d = X_d_hat.shape[-1]
    if per_symbol_var is None:
        per_symbol_var = np.full(tau_d, sigma2)
    per_symbol_var = np.asarray(per_symbol_var, dtype=float)
    if per_symbol_var.ndim == 1:
        data_diag = np.repeat(per_symbol_var, n)
    else:  # (tau_d, N): column blocks of vec(Y_d) in order
        data_diag = per_symbol_var.reshape(-1)
    X = np.concatenate([X_p, X_d_hat], axis=1)
    Y = np.concatenate([Y_p, Y_d], axis=1)
    A = pilot_operator(X, n)
    y = Y.reshape(-1, order="F")
    rnn = np.concatenate([np.full(X_p.shape[1] * n, sigma2), data_diag])
    if np.any(rnn <= 0):
        raise ValueError("noise covariance must be positive definite")
    gram = A @ R @ A.conj().T + np.diag(rnn)
    try:
        gain = R @ A.conj().T @ np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular innovation matrix") from exc
    h_vec = gain @ y
    err = R - gain @ A @ R
    err = (err + err.conj().T) / 2
    return ChannelEstimate(
        h_hat=h_vec.reshape(n, k_l, order="F"),
        err_cov=err,
        per_entry_var=np.maximum(np.diag(err).real, 0.0).reshape(n, k_l, order="F"),
    )


def jcd_run(Y_p, Y_d, X_p, R_priors, sigma2, cons: Constellation,
            clustering: Clustering, n_rounds: int, ep_iters: int,
            truth_indices=None, damping: float = 0.0):
    """Alternate channel estimation and distributed EP detection for n_rounds.

    Y_p, Y_d: per-AP (N, tau_p) / (N, tau_d) received blocks. X_p: per-AP
    pilot matrices over D_l. R_priors: per-AP block-diagonal channel priors.
    Round 1 estimates from pilots only; later rounds append the detected data
    as soft pilots weighted by the feedback noise variances. Returns the last
    JcdState plus (estimate history, per-round symbol error rates when
    truth_indices is given).
    """
    if n_rounds < 1:
        raise ValueError("need at least one round")
    n_aps = len(Y_p)
    n_users = len(clustering.user_sets)
    n = np.asarray(Y_p[0]).shape[0]
    serve = clustering.serve_sets
    tau_d = np.asarray(Y_d[0]).shape[1]

    history, round_ser = [], []
    detection = None
    x_d_hat = None          # (K, tau_d) hard symbol values
    v_d_post = None         # (tau_d, K) posterior variances
    prev_h_hat = None       # per-AP (N, K_l) estimates from the last round
    state = None
    for r in range(1, n_rounds + 1):
        estimates, v_est = [], []
        for l in range(n_aps):
            if r == 1 or x_d_hat is None:
                est = lmmse_pilot_estimate(Y_p[l], X_p[l], R_priors[l], sigma2)
            else:
                per_sym = feedback_noise_cov(v_d_post[:, serve[l]], sigma2,
                                             h_hat=prev_h_hat[l])
                est = data_aided_estimate(Y_p[l], Y_d[l], X_p[l],
                                          x_d_hat[serve[l], :], R_priors[l],
                                          sigma2, per_sym)
            estimates.append(est)
            v_est.append(detection_noise_cov(est.per_entry_var, sigma2))
        history.append(estimates)

        # detection over all data symbols at once (batch axis = symbol index)
        h_full = [np.zeros((n, n_users), dtype=complex) for _ in range(n_aps)]
        for l in range(n_aps):
            h_full[l][:, serve[l]] = estimates[l].h_hat
        y_batch = [np.asarray(Y_d[l]).T for l in range(n_aps)]              # (tau_d, N)
        h_batch = [h_full[l][None, :, :] for l in range(n_aps)]
        nc = [np.asarray(v_est[l])[None, :] for l in range(n_aps)]
        detection = ep_detector.detect(y_batch, h_batch, sigma2, cons, ep_iters,
                                       clustering=clustering, noise_cov=nc,
                                       damping=damping)
        x_d_hat = cons.points[detection.x_hat].T                            # (K, tau_d)
        v_d_post = detection.v_post                                        # (tau_d, K)
        prev_h_hat = [est.h_hat for est in estimates]
        state = JcdState(round_index=r, estimates=estimates,
                         detection=detection, v_est=v_est)
        if truth_indices is not None:
            round_ser.append(float(np.mean(detection.x_hat != truth_indices)))
    return state, history, round_ser
