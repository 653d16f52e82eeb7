"""Command-line front end: run a sweep, write delimited results and figures."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness, state_evolution
from .harness import DETECTORS, RunSpec, emit_results, run_sweep
from .modem import make_constellation
from .sysmodel import SystemConfig, read_scenario


def parse_snr(text: str):
    """'start:step:stop' (inclusive stop) or a comma list of dB values."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError("SNR range must be start:step:stop")
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError("need step > 0 and stop >= start")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(n)]
    return [float(p) for p in text.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cfdeep",
        description="Distributed EP uplink detection for cell-free massive MIMO")
    p.add_argument("--config", help="scenario file (key = value lines)")
    p.add_argument("--detector", default="deep", choices=DETECTORS)
    p.add_argument("--snr", default=None, help="start:step:stop in dB, or comma list")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="results.csv")
    p.add_argument("--format", default="csv", choices=("csv", "json"))
    p.add_argument("--csi", default="perfect", choices=("perfect", "estimated"))
    p.add_argument("--se", action="store_true",
                   help="append analytical variance-recursion predictions")
    p.add_argument("--jcd-rounds", type=int, default=None,
                   help="estimation/detection rounds for jcd_deep")
    p.add_argument("--plot", default=None, metavar="PNG",
                   help="render the BER curves next to the delimited output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = read_scenario(args.config) if args.config else SystemConfig()
        kw = {}
        if args.snr is not None:
            kw["snr_grid"] = parse_snr(args.snr)
        if args.seed is not None:
            kw["seed"] = args.seed
        if args.jcd_rounds is not None:
            kw["R"] = args.jcd_rounds
        if kw:
            cfg = cfg.with_(**kw)
        csi = "estimated" if args.detector == "jcd_deep" else args.csi
        spec = RunSpec(cfg=cfg, detector=args.detector,
                       trials=args.trials if args.trials is not None else 1000,
                       csi=csi, se_predict=args.se)
        records = run_sweep(spec)
        emit_results(records, args.out, args.format)
        if args.plot:
            from .plotting import plot_ber_curves
            plot_ber_curves(records, args.plot,
                            title=f"{args.detector}, K={cfg.K} L={cfg.L} N={cfg.N}")
        for r in records:
            print(f"snr={r.snr_db:g} dB  {r.detector}: ber={r.ber:.3e} "
                  f"ser={r.ser:.3e} ({r.trials} trials)")
        print(f"wrote {args.out}" + (f" and {args.plot}" if args.plot else ""))
        return 0
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
