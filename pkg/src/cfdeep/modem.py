"""Constellations, bit mapping, and scalar AWGN posterior-moment denoising.

The denoiser here is shared by the iterative detector (CPU module) and the
analytical variance predictor, so both see exactly the same nonlinearity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

VAR_FLOOR = 1e-12


def qfunc(x):
    """Gaussian tail probability Q(x)."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


def _gray(i: int) -> int:
    return i ^ (i >> 1)


@dataclass(frozen=True)
class Constellation:
    """Gray-labelled square M-QAM with unit average symbol energy.

    ``points[i]`` carries the bit label ``bit_labels[i]``; labels are ordered
    so that index == integer value of the label string. The first half of the
    bits selects the in-phase level, the second half the quadrature level.
    """

    order: int
    points: np.ndarray = field(repr=False)
    bit_labels: tuple = field(repr=False)
    energy: float

    @property
    def bits_per_symbol(self) -> int:
        return int(np.log2(self.order))

    @property
    def side(self) -> int:
        return int(round(np.sqrt(self.order)))

    def pam_levels(self) -> np.ndarray:
        """Normalized per-axis PAM amplitudes, ascending."""
        m = self.side
        raw = 2.0 * np.arange(m) + 1.0 - m
        scale = np.sqrt(2.0 * (self.order - 1) / 3.0)
        return raw / scale

    def pam_bits(self) -> np.ndarray:
        """Gray label (as int) of each ascending PAM level."""
        m = self.side
        # level index i counts from the top so that the all-zero label maps
        # to the most positive amplitude (QPSK bits 00 -> (+1+1j)/sqrt(2))
        return np.array([_gray(m - 1 - i) for i in range(m)])


def make_constellation(order: int) -> Constellation:
    side = int(round(np.sqrt(order)))
    if side * side != order or order < 4 or (order & (order - 1)):
        raise ValueError(f"constellation order must be a square power of two >= 4, got {order}")
    bits_axis = int(np.log2(side))
    raw = 2.0 * np.arange(side) + 1.0 - side
    scale = np.sqrt(2.0 * (order - 1) / 3.0)
    levels = raw / scale
    # amplitude selected by a Gray label; label value g -> level index
    level_of_label = np.empty(side, dtype=int)
    for i in range(side):
        level_of_label[_gray(side - 1 - i)] = i

    points = np.empty(order, dtype=complex)
    labels = []
    for value in range(order):
        hi = value >> bits_axis          # in-phase bits
        lo = value & (side - 1)          # quadrature bits
        points[value] = levels[level_of_label[hi]] + 1j * levels[level_of_label[lo]]
        labels.append(format(value, f"0{2 * bits_axis}b"))
    energy = float(np.mean(np.abs(points) ** 2))
    return Constellation(order=order, points=points, bit_labels=tuple(labels), energy=energy)


def modulate(bits, cons: Constellation) -> np.ndarray:
    """Map a flat bit array onto constellation symbols."""
    bits = np.asarray(bits, dtype=int).ravel()
    bps = cons.bits_per_symbol
    if bits.size % bps:
        raise ValueError(f"bit count {bits.size} not divisible by {bps}")
    groups = bits.reshape(-1, bps)
    idx = groups @ (1 << np.arange(bps - 1, -1, -1))
    return cons.points[idx]


def symbol_indices_to_bits(idx, cons: Constellation) -> np.ndarray:
    idx = np.asarray(idx, dtype=int)
    bps = cons.bits_per_symbol
    shifts = np.arange(bps - 1, -1, -1)
    return (idx[..., None] >> shifts) & 1


def demodulate_hard(symbols, cons: Constellation) -> np.ndarray:
    """Nearest-point decision; exact ties resolve to the lowest index."""
    s = np.asarray(symbols)
    d2 = np.abs(s[..., None] - cons.points) ** 2
    return np.argmin(d2, axis=-1)


def posterior_moments(x_ext, v_ext, cons: Constellation):
    """Posterior mean/variance of a symbol observed through scalar AWGN.

    Weights are exp(-|s_i - x_ext|^2 / v_ext) with a uniform symbol prior,
    normalized in the log domain so tiny v_ext cannot underflow.
    """
    x = np.asarray(x_ext)
    v = np.asarray(v_ext, dtype=float)
    if np.any(v <= 0):
        raise ValueError("v_ext must be positive")
    logw = -np.abs(x[..., None] - cons.points) ** 2 / v[..., None]
    logw -= logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=-1, keepdims=True)
    mean = w @ cons.points
    second = w @ np.abs(cons.points) ** 2
    var = np.maximum(second - np.abs(mean) ** 2, VAR_FLOOR)
    return mean, var


def _pam_mmse(levels, sigma2: float) -> float:
    """MMSE of a uniform real PAM symbol in N(0, sigma2) noise.

    Uses mmse = E[x^2] - E[(E[x|y])^2]; the second term is a 1-D integral
    over the Gaussian-mixture output density, evaluated adaptively. The
    conditional mean has sharp transitions between decision regions, which
    fixed Hermite rules resolve poorly, so adaptive quadrature it is.
    """
    from scipy.integrate import quad

    a = np.asarray(levels, dtype=float)
    sig = np.sqrt(sigma2)

    def integrand(y):
        logw = -((y - a) ** 2) / (2.0 * sigma2)
        logw -= logw.max()
        w = np.exp(logw)
        num = w @ a
        den = w.sum()
        # (E[x|y])^2 * p(y), with the shared Gaussian scale folded back in
        p = den * np.exp(-((y - a) ** 2).min() / (2.0 * sigma2))
        p /= len(a) * sig * np.sqrt(2.0 * np.pi)
        return (num / den) ** 2 * p

    lo = a.min() - 10.0 * sig
    hi = a.max() + 10.0 * sig
    second, _ = quad(integrand, lo, hi, limit=400,
                     points=list(0.5 * (a[:-1] + a[1:])) if len(a) > 1 else None)
    return float(np.mean(a**2) - second)


def awgn_mmse_mse(v, cons: Constellation) -> float:
    """MMSE of estimating a uniform symbol from y = x + CN(0, v).

    Square QAM factors into two independent PAM axes with per-axis noise
    variance v/2, so the complex MSE is the sum of the two real ones.
    """
    v = float(v)
    if v <= 0:
        raise ValueError("v must be positive")
    levels = np.unique(np.round(cons.points.real, 12))
    return max(2.0 * _pam_mmse(levels, v / 2.0), 0.0)


def qpsk_mse_closed_form(v: float) -> float:
    """Unit-energy QPSK scalar-AWGN MMSE, 1 - E_z tanh(1/v + z/sqrt(v))."""
    from scipy.integrate import quad

    def integrand(z):
        return np.exp(-z * z / 2.0) / np.sqrt(2.0 * np.pi) * np.tanh(
            1.0 / v + z / np.sqrt(v))

    val, _ = quad(integrand, -40.0, 40.0, limit=400)
    return max(float(1.0 - val), 0.0)


def qam_ber_awgn(snr, cons: Constellation):
    """Error rate of the decoupled AWGN channel at the given linear SNR.

    QPSK uses the exact 2Q - Q^2 expression; higher square QAM uses the exact
    Gray-mapped bit error probability (sum of Q-function differences over PAM
    decision regions).
    """
    snr = np.asarray(snr, dtype=float)
    if np.any(snr <= 0):
        raise ValueError("snr must be positive")
    if cons.order == 4:
        q = qfunc(np.sqrt(1.0 * snr))
        return 2.0 * q - q**2
    return qam_bit_error_rate(snr, cons)


def qam_bit_error_rate(snr, cons: Constellation):
    """Exact Gray-coded bit error rate of square M-QAM on AWGN at linear SNR.

    Computed per axis by enumerating PAM decision regions: the probability of
    landing in each region times the Hamming distance of the Gray labels.
    """
    snr = np.asarray(snr, dtype=float)
    levels = cons.pam_levels()
    labels = cons.pam_bits()
    m = levels.size
    bits_axis = int(np.log2(m))
    sigma = np.sqrt(1.0 / (2.0 * snr))  # per-axis noise std at unit symbol energy
    bounds = (levels[:-1] + levels[1:]) / 2.0

    # hamming distance between the labels of every (sent, decided) pair
    ham = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            ham[a, b] = bin(labels[a] ^ labels[b]).count("1")

    lo = np.concatenate(([-np.inf], bounds))
    hi = np.concatenate((bounds, [np.inf]))
    # P(decide region j | sent level a) for every sigma on the grid
    za = (lo[None, :, None] - levels[:, None, None]) / sigma.reshape(1, 1, -1)
    zb = (hi[None, :, None] - levels[:, None, None]) / sigma.reshape(1, 1, -1)
    prob = qfunc(za) - qfunc(zb)
    wrong_bits = np.einsum("aj,ajs->s", ham, prob) / m
    out = wrong_bits / bits_axis
    return out.reshape(snr.shape) if snr.shape else float(out[0])


def qpsk_bit_error_rate(snr):
    """Gray QPSK bit error rate Q(sqrt(snr)) on the decoupled channel."""
    return qfunc(np.sqrt(np.asarray(snr, dtype=float)))
