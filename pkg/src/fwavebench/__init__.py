"""Benchmark single-lead f-wave extraction methods for AF classification.

The package simulates (or loads) annotated single-lead ECG records, extracts
atrial fibrillatory waves with four QRST-cancellation methods, computes
spectral and amplitude features per one-minute window, and ranks the methods
by the AUROC of a random-forest AF classifier trained on those features.
"""

__version__ = "0.1.0"

from fwavebench.records import EcgRecord, Window, load_record, segment_windows
from fwavebench.extraction import FwaveSignal, EXTRACTORS
from fwavebench.features import FeatureVector, featurize_window
from fwavebench.simulate import SimConfig, SimRecord, simulate_record, generate_dataset

__all__ = [
    "__version__",
    "EcgRecord",
    "Window",
    "load_record",
    "segment_windows",
    "FwaveSignal",
    "EXTRACTORS",
    "FeatureVector",
    "featurize_window",
    "SimConfig",
    "SimRecord",
    "simulate_record",
    "generate_dataset",
]
