"""Analytical variance recursion predicting detector MSE/BER without Monte Carlo.

Per iteration: each AP's extrinsic variance follows from the spectrum of its
Gram matrix (or its asymptotic closed form for i.i.d. channels), the combined
variance is the harmonic sum over APs, and the precision fed back to each AP
comes from the scalar-AWGN MMSE at the combined variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ep_detector import PREC_CEIL, PREC_FLOOR
from .modem import (Constellation, awgn_mmse_mse, qam_ber_awgn,
                    qam_bit_error_rate, qpsk_bit_error_rate)


@dataclass
class SeTrace:
    v_ap: np.ndarray       # (T, L) per-AP extrinsic variances
    v_combined: np.ndarray  # (T,)
    lam: np.ndarray        # (T, L) precisions after each iteration
    mse: np.ndarray        # (T,)
    ber: np.ndarray        # (T,) error rate via qam_ber_awgn (symbol-level for QPSK)
    ber_bits: np.ndarray   # (T,) Gray bit error rate, same semantics as MC bit counting
    clamped: bool = False


def se_step_empirical(eigs, sigma2, lambda_prev) -> float:
    """Extrinsic variance of one AP from the eigenvalues of h^H h.

    v_post = mean 1/(tau/sigma2 + lambda); v_ext = (1/v_post - lambda)^-1,
    clamped to the detector's precision window when nonpositive.
    """
    eigs = np.asarray(eigs, dtype=float)
    if np.any(eigs < -1e-9) or lambda_prev <= 0:
        raise ValueError("need nonnegative eigenvalues and positive lambda")
    v_post = float(np.mean(1.0 / (np.maximum(eigs, 0.0) / sigma2 + lambda_prev)))
    prec = 1.0 / v_post - lambda_prev
    if prec <= PREC_FLOOR:
        return 1.0 / PREC_FLOOR
    return 1.0 / prec


def se_step_iid(alpha_l, sigma2, lambda_prev) -> float:
    """Asymptotic closed form for an i.i.d. Gaussian channel, literal form.

    alpha_l is the users-per-antenna load of the AP; sigma2 the noise level
    in the normalized convention (columns of unit average energy). Exact at
    lambda_prev = 1; see se_step_iid_exact for general lambda.
    """
    if alpha_l <= 0 or lambda_prev <= 0 or sigma2 < 0:
        raise ValueError("invalid parameters")
    b = alpha_l * sigma2 + (alpha_l - 1.0) * lambda_prev
    v = b / 2.0 + np.sqrt(b * b + 4.0 * alpha_l * sigma2 * lambda_prev) / 2.0
    return float(max(v, 1.0 / PREC_CEIL))


def se_step_iid_exact(alpha_l, sigma2, lambda_prev) -> float:
    """Marchenko-Pastur-exact variant of se_step_iid.

    Same closed form with the prior precision entering as 1/lambda; agrees
    with se_step_empirical on sampled spectra for any lambda and reduces to
    se_step_iid at lambda = 1.
    """
    if alpha_l <= 0 or lambda_prev <= 0 or sigma2 < 0:
        raise ValueError("invalid parameters")
    b = alpha_l * sigma2 + (alpha_l - 1.0) / lambda_prev
    v = b / 2.0 + np.sqrt(b * b + 4.0 * alpha_l * sigma2 / lambda_prev) / 2.0
    return float(max(v, 1.0 / PREC_CEIL))


def se_combine(v_ext_list) -> float:
    """Harmonic combination 1/v = sum_l 1/v_l."""
    v = np.asarray(v_ext_list, dtype=float)
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    return float(1.0 / np.sum(1.0 / v))


def se_lambda_update(mse, v_ext_l):
    """lambda_l = 1/MSE - 1/v_ext_l, clamped to the detector's window.

    An underflowed (zero) MSE maps to the precision ceiling.
    """
    if mse <= 0.0:
        return float(PREC_CEIL), True
    lam = 1.0 / mse - 1.0 / v_ext_l
    clamped = lam <= PREC_FLOOR
    return float(np.clip(lam, PREC_FLOOR, PREC_CEIL)), bool(clamped)


def run_se(sigma2: float, n_aps: int, n_users: int, n_antennas: int,
           cons: Constellation, n_iter: int, spectra=None,
           iid_form: str = "exact") -> SeTrace:
    """Iterate the three-step recursion from lambda = 1/E_x.

    spectra: optional (L, K) eigenvalue arrays of each AP's h^H h (including
    zeros); without it the i.i.d. closed form is used with load K/N per AP
    and noise sigma2/K in the normalized convention. iid_form selects the
    literal ('literal') or Marchenko-Pastur-exact ('exact') closed form.
    """
    if n_iter < 1:
        raise ValueError("need at least one iteration")
    if iid_form not in ("exact", "literal"):
        raise ValueError(f"unknown iid_form {iid_form!r}")
    step_iid = se_step_iid_exact if iid_form == "exact" else se_step_iid
    alpha = n_users / n_antennas
    lam = np.full(n_aps, 1.0 / cons.energy)
    v_ap_t, v_t, lam_t, mse_t, ber_t, bber_t = [], [], [], [], [], []
    clamped = False
    for _ in range(n_iter):
        if spectra is not None:
            v_ap = np.array([se_step_empirical(spectra[l], sigma2, lam[l])
                             for l in range(n_aps)])
        else:
            v_ap = np.array([step_iid(alpha, sigma2 / n_users, lam[l])
                             for l in range(n_aps)])
        v = se_combine(v_ap)
        mse = awgn_mmse_mse(v, cons)
        new_lam = []
        for l in range(n_aps):
            lml, cl = se_lambda_update(mse, v_ap[l])
            clamped |= cl
            new_lam.append(lml)
        lam = np.array(new_lam)
        v_ap_t.append(v_ap)
        v_t.append(v)
        lam_t.append(lam.copy())
        mse_t.append(mse)
        ber_t.append(float(qam_ber_awgn(1.0 / v, cons)))
        if cons.order == 4:
            bber_t.append(float(qpsk_bit_error_rate(1.0 / v)))
        else:
            bber_t.append(float(qam_bit_error_rate(1.0 / v, cons)))
    return SeTrace(v_ap=np.array(v_ap_t), v_combined=np.array(v_t),
                   lam=np.array(lam_t), mse=np.array(mse_t),
                   ber=np.array(ber_t), ber_bits=np.array(bber_t),
                   clamped=clamped)


def se_fixed_point(sigma2, n_aps, n_users, n_antennas, cons,
                   tol: float = 1e-10, max_iter: int = 2000,
                   spectra=None, iid_form: str = "exact"):
    """Iterate to convergence of the combined variance; returns (v*, lam*, iters)."""
    step_iid = se_step_iid_exact if iid_form == "exact" else se_step_iid
    alpha = n_users / n_antennas
    lam = np.full(n_aps, 1.0 / cons.energy)
    v_prev = None
    for it in range(max_iter):
        if spectra is not None:
            v_ap = np.array([se_step_empirical(spectra[l], sigma2, lam[l])
                             for l in range(n_aps)])
        else:
            v_ap = np.array([step_iid(alpha, sigma2 / n_users, lam[l])
                             for l in range(n_aps)])
        v = se_combine(v_ap)
        mse = awgn_mmse_mse(v, cons)
        lam = np.array([se_lambda_update(mse, v_ap[l])[0] for l in range(n_aps)])
        if v_prev is not None and abs(v - v_prev) < tol:
            return v, lam, it + 1
        v_prev = v
    return v_prev, lam, max_iter
