"""Distributed expectation-propagation uplink detection for cell-free massive MIMO."""

from .ep_detector import DetectionOutput, detect
from .harness import RunSpec, run_sweep
from .modem import Constellation, make_constellation
from .sysmodel import Clustering, SystemConfig

__all__ = [
    "Constellation", "make_constellation", "SystemConfig", "Clustering",
    "DetectionOutput", "detect", "RunSpec", "run_sweep",
]

__version__ = "0.1.0"
