"""Figure rendering for sweep results (headless, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "deep": dict(marker="o", color="C0"),
    "deep_se": dict(marker="", color="C0", linestyle="--"),
    "centralized_mmse": dict(marker="s", color="C1"),
    "distributed_mmse": dict(marker="^", color="C2"),
    "lsfd": dict(marker="v", color="C3"),
    "jcd_deep": dict(marker="d", color="C4"),
    "map": dict(marker="*", color="C5"),
}


def plot_ber_curves(records, path, title: str | None = None, metric: str = "ber"):
    """Semilog BER (or SER) vs SNR, one line per detector; writes to path."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    by_det = {}
    for r in records:
        by_det.setdefault(r.detector, []).append(r)
    for det, rs in sorted(by_det.items()):
        rs = sorted(rs, key=lambda r: r.snr_db)
        xs = [r.snr_db for r in rs]
        ys = [max(getattr(r, metric), 1e-12) for r in rs]
        ax.semilogy(xs, ys, label=det, **_STYLE.get(det, {}))
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel(metric.upper())
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_variance_trace(trace, path, labels=None):
    """Per-iteration extrinsic-variance trajectories (e.g. MC vs prediction)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    traces = trace if isinstance(trace, (list, tuple)) and trace and \
        hasattr(trace[0], "__len__") else [trace]
    for i, tr in enumerate(traces):
        lab = labels[i] if labels else f"trace {i}"
        ax.semilogy(range(1, len(tr) + 1), tr, marker="o", label=lab)
    ax.set_xlabel("iteration")
    ax.set_ylabel("extrinsic variance")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
