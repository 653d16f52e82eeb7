"""Monte Carlo BER engine, fronthaul/complexity accounting, result serialization."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines, chest_jcd, ep_detector, state_evolution
from .modem import Constellation, make_constellation, symbol_indices_to_bits
from .sysmodel import (ChannelSet, Clustering, SystemConfig, form_clusters,
                       gen_channel, gen_pilots)

DETECTORS = ("deep", "centralized_mmse", "distributed_mmse", "lsfd", "jcd_deep", "map")
CSV_COLUMNS = ("snr_db", "detector", "ber", "ser", "trials", "symbols",
               "fronthaul", "clamps", "wall_time_s", "seed")
DEFAULT_MIN_ERRORS = 100
CHUNK = 500
LSFD_CAL_FACTOR = 100


@dataclass
class RunSpec:
    cfg: SystemConfig
    detector: str = "deep"
    trials: int = 1000
    csi: str = "perfect"          # perfect | estimated
    se_predict: bool = False
    min_errors: int = DEFAULT_MIN_ERRORS
    damping: float = 0.0

    def __post_init__(self):
        if self.detector not in DETECTORS:
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.csi not in ("perfect", "estimated"):
            raise ValueError(f"unknown csi mode {self.csi!r}")
        if self.detector == "jcd_deep" and self.csi != "estimated":
            raise ValueError("jcd_deep requires csi = estimated")


@dataclass
class ResultRecord:
    snr_db: float
    detector: str
    ber: float
    ser: float
    trials: int
    symbols: int
    fronthaul: int
    clamps: int
    wall_time_s: float
    seed: int
    v_ext_trace: list = field(default_factory=list)

    def row(self):
        return {
            "snr_db": f"{self.snr_db:g}", "detector": self.detector,
            "ber": repr(self.ber), "ser": repr(self.ser),
            "trials": str(self.trials), "symbols": str(self.symbols),
            "fronthaul": str(self.fronthaul), "clamps": str(self.clamps),
            "wall_time_s": f"{self.wall_time_s:.3f}", "seed": str(self.seed),
        }


def trial_rng(seed: int, snr_index: int, trial: int) -> np.random.Generator:
    """Independent stream for one trial; identical for any worker layout."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(snr_index, trial)))


def sigma2_for_snr(cfg: SystemConfig, snr_db: float, cons: Constellation,
                   beta_agg_median: float = 1.0) -> float:
    """Noise level realizing the requested SNR point.

    i.i.d. models: SNR = p E_x / sigma2 per user. 3GPP runs report the median
    per-user aggregate receive SNR, so the median of sum_l beta_kl scales in.
    """
    p = float(np.median(cfg.p))
    return p * cons.energy * beta_agg_median / 10.0 ** (snr_db / 10.0)


def count_fronthaul(cfg: SystemConfig, detector: str, T: int | None = None,
                    serve_sizes=None):
    """Complex scalars shipped to the CPU per coherence block.

    Returns (per_block, statistical). serve_sizes defaults to K per AP.
    """
    T = cfg.T if T is None else T
    L, N, K = cfg.L, cfg.N, cfg.K
    tau_c, tau_p = cfg.tau_c, cfg.tau_p
    d = list(serve_sizes) if serve_sizes is not None else [K] * L
    if detector in ("deep", "jcd_deep"):
        per_block = sum((tau_c - tau_p) * 2 * T * (dl + 1) for dl in d)
        return per_block, 0
    if detector == "centralized_mmse":
        return tau_c * N * L, K * L * N**2 // 2
    if detector == "lsfd":
        return (tau_c - tau_p) * K * L, K * L + (L**2 * K**2 + K * L) // 2
    if detector == "distributed_mmse":
        return (tau_c - tau_p) * K * L, 0
    if detector == "map":
        return tau_c * N * L, K * L * N**2 // 2  # centralized processing
    raise ValueError(f"unknown detector {detector!r}")


def count_flops_class(cfg: SystemConfig, detector: str, serve_sizes=None):
    """Instantiated complexity classes {'ap': value per AP, 'cpu': value}."""
    L, N, K, T = cfg.L, cfg.N, cfg.K, cfg.T
    d = np.asarray(serve_sizes if serve_sizes is not None else [K] * L, dtype=float)
    if detector in ("deep", "jcd_deep"):
        return {"ap": float(np.mean(T * d * N**2)), "cpu": float(np.mean(T * d**2))}
    if detector == "centralized_mmse":
        return {"ap": 0.0, "cpu": float((L * N) ** 3)}
    if detector == "lsfd":
        return {"ap": float(np.mean(d * N**2)), "cpu": float(np.mean(d))}
    if detector == "distributed_mmse":
        return {"ap": float(np.mean(d * N**2)), "cpu": 0.0}
    if detector == "map":
        return {"ap": 0.0, "cpu": float(cfg.M**K)}
    raise ValueError(f"unknown detector {detector!r}")


def _gen_trial(cfg: SystemConfig, rng, clustering_fixed=None):
    """Channel realization, clustering, symbols, and noise for one trial."""
    if cfg.clustering == "dcc" and clustering_fixed is None:
        cs = gen_channel(cfg, rng)
        clustering = form_clusters(cs.beta, cfg)
        for l, dset in enumerate(clustering.serve_sets):
            mask = np.ones(cfg.K, dtype=bool)
            mask[dset] = False
            cs.H[l * cfg.N:(l + 1) * cfg.N, mask] = 0.0
    else:
        clustering = clustering_fixed or Clustering.all_serve_all(cfg.L, cfg.K)
        cs = gen_channel(cfg, rng, clustering)
    # fold per-user sqrt power into H
    cs.H *= np.sqrt(cfg.p)[None, :]
    idx = rng.integers(0, cfg.M, size=cfg.K)
    return cs, clustering, idx


def _per_ap(cs: ChannelSet, cfg: SystemConfig):
    return [cs.H[l * cfg.N:(l + 1) * cfg.N, :] for l in range(cfg.L)]


def _beta_median(cfg: SystemConfig) -> float:
    """Median aggregate large-scale gain, for the 3GPP SNR convention."""
    if cfg.channel_model != "urban_3gpp":
        return 1.0
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0xBEE,)))
    meds = []
    for _ in range(20):
        cs = gen_channel(cfg, rng)
        meds.append(np.median(cs.beta.sum(axis=1)))
    return float(np.median(meds))


def _run_point_coherent(spec: RunSpec, cons, snr_idx, sigma2):
    """One SNR point for the per-vector detectors (perfect CSI)."""
    cfg = spec.cfg
    bits_per = cons.bits_per_symbol
    bit_err = sym_err = 0
    n_sym = 0
    trials_done = 0
    clamps = 0
    v_traces = []
    lsfd_weights = None
    clustering_all = Clustering.all_serve_all(cfg.L, cfg.K)

    while trials_done < spec.trials and bit_err < spec.min_errors:
        n = min(CHUNK, spec.trials - trials_done)
        hs, ys, idxs, clusters = [], [], [], []
        for t in range(trials_done, trials_done + n):
            rng = trial_rng(cfg.seed, snr_idx, t)
            cs, clustering, idx = _gen_trial(cfg, rng)
            h_ap = _per_ap(cs, cfg)
            noise = (rng.standard_normal((cfg.L, cfg.N))
                     + 1j * rng.standard_normal((cfg.L, cfg.N))) * np.sqrt(sigma2 / 2)
            x = cons.points[idx]
            y_ap = [h_ap[l] @ x + noise[l] for l in range(cfg.L)]
            hs.append(h_ap)
            ys.append(y_ap)
            idxs.append(idx)
            clusters.append(clustering)
        idx_true = np.stack(idxs)                       # (n, K)
        uniform = all(
            all(np.array_equal(a, b) for a, b in zip(c.serve_sets, clusters[0].serve_sets))
            for c in clusters)
        h_b = [np.stack([hs[i][l] for i in range(n)]) for l in range(cfg.L)]
        y_b = [np.stack([ys[i][l] for i in range(n)]) for l in range(cfg.L)]
        clu = clusters[0] if uniform else None

        if spec.detector == "deep":
            if uniform:
                out = ep_detector.detect(y_b, h_b, sigma2, cons, cfg.T,
                                         clustering=clu, damping=spec.damping)
                x_hat = out.x_hat
                clamps += out.clamp_count
                v_traces.append(out.v_ext_trace)
            else:
                x_hat = np.empty_like(idx_true)
                for i in range(n):
                    out = ep_detector.detect([y[None] for y in ys[i]],
                                             [h[None] for h in hs[i]],
                                             sigma2, cons, cfg.T,
                                             clustering=clusters[i],
                                             damping=spec.damping)
                    x_hat[i] = out.x_hat[0]
                    clamps += out.clamp_count
        elif spec.detector == "centralized_mmse":
            H = np.concatenate(h_b, axis=-2)
            y = np.concatenate(y_b, axis=-1)
            x_hat = baselines.centralized_mmse(H, y, sigma2, 1.0, cons).x_hat
        elif spec.detector == "distributed_mmse":
            if uniform:
                x_hat = baselines.distributed_mmse_avg(h_b, y_b, sigma2, cons, clu).x_hat
            else:
                x_hat = np.empty_like(idx_true)
                for i in range(n):
                    x_hat[i] = baselines.distributed_mmse_avg(
                        [h[None] for h in hs[i]], [y[None] for y in ys[i]],
                        sigma2, cons, clusters[i]).x_hat[0]
        elif spec.detector == "lsfd":
            clu_l = clu or clustering_all
            if lsfd_weights is None:
                lsfd_weights = _calibrate_lsfd(spec, cons, snr_idx, sigma2, clu_l)
            locals_ = baselines.local_mmse_estimates(h_b, y_b, sigma2, cons, clu_l)
            x_hat = baselines.lsfd_combine(locals_, lsfd_weights, cons, clu_l).x_hat
        elif spec.detector == "map":
            x_hat = ep_detector.map_detect(y_b, h_b, sigma2, cons)
        else:
            raise ValueError(f"detector {spec.detector!r} needs csi = estimated")

        bit_err += int(np.sum(symbol_indices_to_bits(x_hat, cons)
                              != symbol_indices_to_bits(idx_true, cons)))
        sym_err += int(np.sum(x_hat != idx_true))
        n_sym += idx_true.size
        trials_done += n
    trace = list(np.mean(v_traces, axis=0)) if v_traces else []
    return bit_err, sym_err, n_sym, trials_done, clamps, trace


def _calibrate_lsfd(spec: RunSpec, cons, snr_idx, sigma2, clustering):
    cfg = spec.cfg
    n_cal = LSFD_CAL_FACTOR * cfg.L
    hs, ys, xs = [], [], []
    for t in range(n_cal):
        rng = trial_rng(cfg.seed, snr_idx, 1 << 24 | t)
        cs, _, idx = _gen_trial(cfg, rng, clustering_fixed=clustering)
        h_ap = _per_ap(cs, cfg)
        noise = (rng.standard_normal((cfg.L, cfg.N))
                 + 1j * rng.standard_normal((cfg.L, cfg.N))) * np.sqrt(sigma2 / 2)
        x = cons.points[idx]
        hs.append(h_ap)
        ys.append([h_ap[l] @ x + noise[l] for l in range(cfg.L)])
        xs.append(x)
    h_b = [np.stack([hs[i][l] for i in range(n_cal)]) for l in range(cfg.L)]
    y_b = [np.stack([ys[i][l] for i in range(n_cal)]) for l in range(cfg.L)]
    locals_ = baselines.local_mmse_estimates(h_b, y_b, sigma2, cons, clustering)
    return baselines.calibrate_lsfd(locals_, np.stack(xs), clustering)


def _run_point_jcd(spec: RunSpec, cons, snr_idx, sigma2, n_rounds):
    """One SNR point for the estimated-CSI receivers (coherence-block trials)."""
    cfg = spec.cfg
    bit_err = sym_err = 0
    n_sym = 0
    trials_done = 0
    clamps = 0
    # user powers are already folded into H by _gen_trial, so pilots are
    # unit-power sequences just like the data symbols
    pilot_power = cons.energy
    while trials_done < spec.trials and bit_err < spec.min_errors:
        rng = trial_rng(cfg.seed, snr_idx, trials_done)
        cs, clustering, _ = _gen_trial(cfg, rng)
        serve = clustering.serve_sets
        idx_d = rng.integers(0, cfg.M, size=(cfg.tau_d, cfg.K))
        X_d = cons.points[idx_d].T                     # (K, tau_d)
        X_p_full = gen_pilots(cfg.pilot_kind, cfg.tau_p, cfg.K, pilot_power, rng).X_p
        h_ap = _per_ap(cs, cfg)
        Y_p, Y_d, X_p, priors = [], [], [], []
        for l in range(cfg.L):
            d = serve[l]
            hl = h_ap[l][:, d]
            npil = (rng.standard_normal((cfg.N, cfg.tau_p))
                    + 1j * rng.standard_normal((cfg.N, cfg.tau_p))) * np.sqrt(sigma2 / 2)
            ndat = (rng.standard_normal((cfg.N, cfg.tau_d))
                    + 1j * rng.standard_normal((cfg.N, cfg.tau_d))) * np.sqrt(sigma2 / 2)
            Y_p.append(hl @ X_p_full[d, :] + npil)
            Y_d.append(h_ap[l] @ X_d + ndat)
            X_p.append(X_p_full[d, :])
            priors.append(chest_jcd.prior_cov_block(
                [cfg.p[k] * cs.R[k, l] for k in d]))
        state, _, _ = chest_jcd.jcd_run(Y_p, Y_d, X_p, priors, sigma2, cons,
                                        clustering, n_rounds, cfg.T,
                                        damping=spec.damping)
        x_hat = state.detection.x_hat                 # (tau_d, K)
        clamps += state.detection.clamp_count
        bit_err += int(np.sum(symbol_indices_to_bits(x_hat, cons)
                              != symbol_indices_to_bits(idx_d, cons)))
        sym_err += int(np.sum(x_hat != idx_d))
        n_sym += idx_d.size
        trials_done += 1
    return bit_err, sym_err, n_sym, trials_done, clamps, []


def run_sweep(spec: RunSpec) -> list:
    """Monte Carlo sweep over the config's SNR grid; optional SE prediction rows."""
    cfg = spec.cfg
    cons = make_constellation(cfg.M)
    beta_med = _beta_median(cfg)
    records = []
    serve_sizes = None
    for snr_idx, snr_db in enumerate(cfg.snr_grid):
        sigma2 = sigma2_for_snr(cfg, snr_db, cons, beta_med)
        t0 = time.perf_counter()
        if spec.csi == "estimated":
            n_rounds = cfg.R if spec.detector == "jcd_deep" else 1
            stats = _run_point_jcd(spec, cons, snr_idx, sigma2, n_rounds)
        else:
            stats = _run_point_coherent(spec, cons, snr_idx, sigma2)
        bit_err, sym_err, n_sym, trials_done, clamps, trace = stats
        wall = time.perf_counter() - t0
        fr = sum(count_fronthaul(cfg, spec.detector, serve_sizes=serve_sizes))
        records.append(ResultRecord(
            snr_db=float(snr_db), detector=spec.detector,
            ber=bit_err / (n_sym * cons.bits_per_symbol),
            ser=sym_err / n_sym, trials=trials_done, symbols=n_sym,
            fronthaul=fr, clamps=clamps, wall_time_s=wall, seed=cfg.seed,
            v_ext_trace=trace))
        if spec.se_predict:
            trace_se = state_evolution.run_se(
                sigma2, cfg.L, cfg.K, cfg.N, cons, cfg.T)
            records.append(ResultRecord(
                snr_db=float(snr_db), detector=spec.detector + "_se",
                ber=float(trace_se.ber_bits[-1]), ser=float(trace_se.ber[-1]),
                trials=0, symbols=0, fronthaul=0, clamps=0,
                wall_time_s=0.0, seed=cfg.seed,
                v_ext_trace=list(trace_se.v_combined)))
    return records


def emit_results(records, path, fmt: str = "csv"):
    """Write records with the fixed column contract; '.' decimal, fixed order."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
    elif fmt == "json":
        payload = [{k: (r.row()[k] if k == "detector" else
                        (int(r.row()[k]) if k in ("trials", "symbols", "fronthaul",
                                                  "clamps", "seed")
                         else float(r.row()[k])))
                    for k in CSV_COLUMNS} for r in records]
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def parse_results(path):
    """Read back an emitted CSV into ResultRecord objects."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ResultRecord(
                snr_db=float(row["snr_db"]), detector=row["detector"],
                ber=float(row["ber"]), ser=float(row["ser"]),
                trials=int(row["trials"]), symbols=int(row["symbols"]),
                fronthaul=int(row["fronthaul"]), clamps=int(row["clamps"]),
                wall_time_s=float(row["wall_time_s"]), seed=int(row["seed"])))
    return out


def snr_at_ber(records, target: float):
    """Log-linear interpolated SNR (dB) where the BER curve crosses target."""
    pts = sorted((r.snr_db, r.ber) for r in records if r.ber > 0)
    for (s0, b0), (s1, b1) in zip(pts, pts[1:]):
        if (b0 - target) * (b1 - target) <= 0 and b0 != b1:
            f = (np.log10(b0) - np.log10(target)) / (np.log10(b0) - np.log10(b1))
            return s0 + f * (s1 - s0)
    return None
