"""Scenario configuration, channel and pilot generation, user-AP clustering."""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.integrate import quad
from scipy.linalg import toeplitz

CHANNEL_MODELS = ("iid_rayleigh", "corr_rayleigh", "urban_3gpp")
CLUSTERINGS = ("all_serve_all", "dcc")
PILOT_KINDS = ("dft", "random_qam")

AREA_SIDE_M = 1000.0
SHADOW_STD_DB = 4.0
SHADOW_DECORR_M = 9.0
ANGULAR_STD_DEG = 15.0
DCC_BETA_THRESHOLD_DB = 40.0


@dataclass
class SystemConfig:
    """All scenario parameters for one simulation campaign.

    Powers are linear watts, sigma2 linear noise variance, snr_grid in dB.
    """

    L: int = 8
    N: int = 8
    K: int = 32
    p: np.ndarray | float = 1.0
    sigma2: float = 1.0
    T: int = 5
    R: int = 1
    M: int = 4
    tau_p: int = 32
    tau_c: int = 200
    snr_grid: list = field(default_factory=lambda: [0.0])
    seed: int = 0
    channel_model: str = "iid_rayleigh"
    clustering: str = "all_serve_all"
    pilot_kind: str = "dft"
    dcc_threshold_db: float = DCC_BETA_THRESHOLD_DB

    def __post_init__(self):
        self.p = np.broadcast_to(np.asarray(self.p, dtype=float), (self.K,)).copy()
        self.validate()

    def validate(self):
        for name in ("L", "N", "K", "T", "R", "M"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        side = int(round(np.sqrt(self.M)))
        m = self.M
        if side * side != m or m < 4 or (m & (m - 1)) or (int(np.log2(m)) % 2):
            raise ValueError(f"M must be a perfect-square power of 4, got {m}")
        if self.tau_p > self.tau_c:
            raise ValueError("tau_p must not exceed tau_c")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if np.any(self.p <= 0):
            raise ValueError("all transmit powers must be positive")
        if self.channel_model not in CHANNEL_MODELS:
            raise ValueError(f"unknown channel_model {self.channel_model!r}")
        if self.clustering not in CLUSTERINGS:
            raise ValueError(f"unknown clustering {self.clustering!r}")
        if self.pilot_kind not in PILOT_KINDS:
            raise ValueError(f"unknown pilot_kind {self.pilot_kind!r}")

    @property
    def tau_d(self) -> int:
        return self.tau_c - self.tau_p

    def with_(self, **kw) -> "SystemConfig":
        if "K" in kw and "p" not in kw and kw["K"] != self.K:
            # the stored per-user power vector has the old length; a uniform
            # vector carries over as a scalar, anything else must be re-given
            if not np.all(self.p == self.p[0]):
                raise ValueError("changing K requires an explicit p")
            kw["p"] = float(self.p[0])
        return replace(self, **kw)


@dataclass
class Clustering:
    """Serving relation between APs and users.

    serve_sets[l] is the ordered user-index array D_l; user_sets[k] the AP
    set M_k. The two views are kept mutually consistent.
    """

    serve_sets: list
    user_sets: list

    @classmethod
    def from_serve_sets(cls, serve_sets, n_users: int) -> "Clustering":
        serve_sets = [np.asarray(s, dtype=int) for s in serve_sets]
        user_sets = [[] for _ in range(n_users)]
        for l, d in enumerate(serve_sets):
            for k in d:
                user_sets[int(k)].append(l)
        user_sets = [np.asarray(m, dtype=int) for m in user_sets]
        for k, m in enumerate(user_sets):
            if m.size == 0:
                raise ValueError(f"user {k} served by no AP")
        return cls(serve_sets=serve_sets, user_sets=user_sets)

    @classmethod
    def all_serve_all(cls, n_aps: int, n_users: int) -> "Clustering":
        return cls.from_serve_sets([np.arange(n_users)] * n_aps, n_users)


@dataclass
class ChannelSet:
    """One channel realization: stacked H, correlation matrices, large-scale gains."""

    H: np.ndarray      # (L*N, K) complex, AP blocks stacked vertically
    R: np.ndarray      # (K, L, N, N) Hermitian PSD spatial correlations
    beta: np.ndarray   # (K, L) linear large-scale coefficients

    def h_ap(self, l: int) -> np.ndarray:
        n = self.R.shape[-1]
        return self.H[l * n:(l + 1) * n, :]


@dataclass
class PilotMatrix:
    X_p: np.ndarray    # (K_l, tau_p) complex
    kind: str


def pathloss_db(d_m):
    """Deterministic urban pathloss in dB at distance d_m meters."""
    d = np.asarray(d_m, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    return -30.5 - 36.7 * np.log10(d)


def shadowing_cov(delta_m, same_ap: bool):
    """Covariance (dB^2) between shadowing terms of two users.

    Correlated only when seen from the same AP; decorrelates with the
    inter-user distance on a 9 m scale.
    """
    delta = np.asarray(delta_m, dtype=float)
    if np.any(delta < 0):
        raise ValueError("distance must be nonnegative")
    if not same_ap:
        return np.zeros_like(delta) if delta.shape else 0.0
    out = SHADOW_STD_DB**2 * 2.0 ** (-delta / SHADOW_DECORR_M)
    return out if delta.shape else float(out)


def gen_iid_rayleigh(cfg: SystemConfig, rng: np.random.Generator,
                     clustering: Clustering | None = None) -> ChannelSet:
    """Unit-variance circular Gaussian channels, R_kl = I, beta = 1."""
    L, N, K = cfg.L, cfg.N, cfg.K
    H = (rng.standard_normal((L * N, K)) + 1j * rng.standard_normal((L * N, K))) / np.sqrt(2.0)
    beta = np.ones((K, L))
    R = np.broadcast_to(np.eye(N), (K, L, N, N)).copy().astype(complex)
    cs = ChannelSet(H=H, R=R, beta=beta)
    _apply_clustering_zeros(cs, cfg, clustering)
    return cs


def _apply_clustering_zeros(cs: ChannelSet, cfg: SystemConfig, clustering: Clustering | None):
    if clustering is None:
        return
    for l, d in enumerate(clustering.serve_sets):
        mask = np.ones(cfg.K, dtype=bool)
        mask[d] = False
        cs.H[l * cfg.N:(l + 1) * cfg.N, mask] = 0.0


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(129)


def scattering_correlation(n_antennas: int, angle_rad: float,
                           angular_std_rad: float, adaptive: bool = False) -> np.ndarray:
    """Spatial correlation of a half-wavelength ULA under Gaussian local scattering.

    Entry (m, n) is E[exp(j*pi*(m-n)*sin(phi))] with phi ~ N(angle, std^2).
    A 129-node Gauss-Hermite rule is used by default; adaptive=True switches
    to scipy.integrate.quad (slow, used as the test oracle).
    """
    offsets = np.arange(n_antennas)
    if angular_std_rad == 0.0:
        first = np.exp(1j * np.pi * offsets * np.sin(angle_rad))
    elif adaptive:
        first = np.empty(n_antennas, dtype=complex)
        for m in offsets:
            re = quad(lambda t: np.cos(np.pi * m * np.sin(angle_rad + angular_std_rad * t))
                      * np.exp(-t * t / 2) / np.sqrt(2 * np.pi), -12, 12, limit=400)[0]
            im = quad(lambda t: np.sin(np.pi * m * np.sin(angle_rad + angular_std_rad * t))
                      * np.exp(-t * t / 2) / np.sqrt(2 * np.pi), -12, 12, limit=400)[0]
            first[m] = re + 1j * im
    else:
        phi = angle_rad + np.sqrt(2.0) * angular_std_rad * _GH_NODES
        w = _GH_WEIGHTS / np.sqrt(np.pi)
        first = np.exp(1j * np.pi * offsets[:, None] * np.sin(phi)) @ w
    return toeplitz(first)


def ap_grid_positions(n_aps: int, side: float = AREA_SIDE_M) -> np.ndarray:
    """APs on a uniform grid covering the square area (cell centers)."""
    g1 = int(np.floor(np.sqrt(n_aps)))
    while n_aps % g1:
        g1 -= 1
    g2 = n_aps // g1
    xs = (np.arange(g2) + 0.5) * side / g2
    ys = (np.arange(g1) + 0.5) * side / g1
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])[:n_aps]


def _wrap_delta(a: np.ndarray, b: np.ndarray, side: float) -> np.ndarray:
    """Minimal-image displacement b - a on the torus."""
    d = b - a
    d -= side * np.round(d / side)
    return d


def gen_3gpp_urban(cfg: SystemConfig, rng: np.random.Generator,
                   clustering: Clustering | None = None,
                   return_positions: bool = False):
    """Urban deployment in a 1x1 km^2 area with correlated shadowing.

    APs sit on a uniform grid (wrap-around distances), users are uniform
    random. Large-scale gain = pathloss + jointly Gaussian shadowing; spatial
    correlation from Gaussian local scattering with a 15 deg angular spread.
    """
    L, N, K = cfg.L, cfg.N, cfg.K
    ap_pos = ap_grid_positions(L)
    ue_pos = rng.uniform(0.0, AREA_SIDE_M, size=(K, 2))

    # joint shadowing: per AP, a K x K exponential covariance over users
    du = np.linalg.norm(_wrap_delta(ue_pos[:, None, :], ue_pos[None, :, :], AREA_SIDE_M), axis=-1)
    cov = SHADOW_STD_DB**2 * 2.0 ** (-du / SHADOW_DECORR_M)
    cov = cov + 1e-9 * np.eye(K)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("shadowing covariance factorization failed") from exc
    g_db = (chol @ rng.standard_normal((K, L)))  # independent across APs

    disp = _wrap_delta(ap_pos[None, :, :], ue_pos[:, None, :], AREA_SIDE_M)  # (K, L, 2)
    dist = np.maximum(np.linalg.norm(disp, axis=-1), 1.0)
    beta_db = pathloss_db(dist) + g_db
    beta = 10.0 ** (beta_db / 10.0)

    angles = np.arctan2(disp[..., 1], disp[..., 0])
    std = np.deg2rad(ANGULAR_STD_DEG)
    R = np.empty((K, L, N, N), dtype=complex)
    for k in range(K):
        for l in range(L):
            R[k, l] = beta[k, l] * scattering_correlation(N, angles[k, l], std)

    # channel draw h_kl = R^(1/2) z via eigen square root (robust near rank-1)
    Rm = R.reshape(K * L, N, N)
    w, V = np.linalg.eigh((Rm + np.conj(np.transpose(Rm, (0, 2, 1)))) / 2.0)
    w = np.maximum(w, 0.0)
    sqrtR = V * np.sqrt(w)[:, None, :]
    z = (rng.standard_normal((K * L, N)) + 1j * rng.standard_normal((K * L, N))) / np.sqrt(2.0)
    h = np.einsum("bij,bj->bi", sqrtR, z).reshape(K, L, N)

    H = np.zeros((L * N, K), dtype=complex)
    for l in range(L):
        H[l * N:(l + 1) * N, :] = h[:, l, :].T
    cs = ChannelSet(H=H, R=R, beta=beta)
    _apply_clustering_zeros(cs, cfg, clustering)
    if return_positions:
        return cs, ap_pos, ue_pos
    return cs


def form_clusters(beta: np.ndarray, cfg: SystemConfig) -> Clustering:
    """Build the serving sets from the large-scale coefficients.

    all_serve_all: every AP serves every user. dcc: each user appoints the
    strongest AP as master; the master hands out the least-loaded of tau_p
    pilot indices; every AP additionally serves, per pilot index, its
    strongest audible user (within DCC_BETA_THRESHOLD_DB of the AP's best).
    """
    K, L = beta.shape
    if cfg.clustering == "all_serve_all":
        return Clustering.all_serve_all(L, K)

    masters = np.argmax(beta, axis=1)
    pilot_of = np.empty(K, dtype=int)
    load = np.zeros(cfg.tau_p, dtype=int)
    for k in range(K):
        pilot_of[k] = int(np.argmin(load))  # least-loaded, ties -> lowest index
        load[pilot_of[k]] += 1

    serve = [set() for _ in range(L)]
    for k in range(K):
        serve[masters[k]].add(k)
    # a user is audible at an AP when its gain there is within the threshold
    # of its own best AP, so shadowed users keep their useful serving APs
    thresh = 10.0 ** (-cfg.dcc_threshold_db / 10.0)
    best = beta.max(axis=1)
    for l in range(L):
        audible = beta[:, l] >= thresh * best
        for t in range(cfg.tau_p):
            cand = np.flatnonzero((pilot_of == t) & audible)
            if cand.size:
                serve[l].add(int(cand[np.argmax(beta[cand, l])]))
    serve_sets = [np.sort(np.fromiter(s, dtype=int)) for s in serve]
    return Clustering.from_serve_sets(serve_sets, K)


def gen_pilots(kind: str, tau_p: int, k_l: int, power: float,
               rng: np.random.Generator | None = None) -> PilotMatrix:
    """Pilot matrix with average per-symbol power ``power``.

    dft: K_l distinct rows of the tau_p-point DFT matrix (mutually
    orthogonal, requires tau_p >= K_l). random_qam: i.i.d. uniform 64-QAM.
    """
    if kind == "dft":
        if tau_p < k_l:
            raise ValueError("dft pilots require tau_p >= K_l")
        n = np.arange(tau_p)
        rows = np.exp(-2j * np.pi * np.outer(np.arange(k_l), n) / tau_p)
        X = np.sqrt(power) * rows
    elif kind == "random_qam":
        if rng is None:
            raise ValueError("random_qam pilots need an rng")
        from .modem import make_constellation
        cons = make_constellation(64)
        idx = rng.integers(0, 64, size=(k_l, tau_p))
        X = np.sqrt(power) * cons.points[idx]
    else:
        raise ValueError(f"unknown pilot kind {kind!r}")
    return PilotMatrix(X_p=X, kind=kind)


def gen_channel(cfg: SystemConfig, rng: np.random.Generator,
                clustering: Clustering | None = None) -> ChannelSet:
    if cfg.channel_model == "urban_3gpp":
        return gen_3gpp_urban(cfg, rng, clustering)
    # corr_rayleigh degenerates to iid with identity correlation here
    return gen_iid_rayleigh(cfg, rng, clustering)


# --- scenario files -------------------------------------------------------

_LIST_FIELDS = {"snr_grid", "p"}


def write_scenario(cfg: SystemConfig, path):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, np.ndarray):
            v = list(np.asarray(v).tolist())
        lines.append(f"{f.name} = {v!r}" if isinstance(v, str) else f"{f.name} = {v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scenario(path) -> SystemConfig:
    kw = {}
    valid = {f.name for f in fields(SystemConfig)}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in valid:
                raise ValueError(f"{path}:{ln}: unknown key {key!r}")
            kw[key] = ast.literal_eval(val)
    return SystemConfig(**kw)
