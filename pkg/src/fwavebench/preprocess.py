"""Zero-phase ECG conditioning: bandpass and powerline notch filters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

# Fraction of the sampling rate used as a hard ceiling for the upper band
# edge, so a 100 Hz cutoff remains designable at fs = 200 Hz.
HIGH_CUTOFF_FS_FRACTION = 0.45

MIN_SIGNAL_LEN = 100


class FilterDesignError(ValueError):
    """Raised when the requested corner frequencies cannot be realised."""


class SignalTooShortError(ValueError):
    """Raised when a signal is too short to filter reliably."""


@dataclass(frozen=True)
class FilterSpec:
    """Bandpass + optional notch configuration for ECG conditioning.

    ``order`` is the overall order of the bandpass (2 = a single biquad).
    ``notch_freq`` selects the powerline frequency to reject, or ``None``
    to skip the notch stage.
    """

    low_cutoff: float = 0.67
    high_cutoff: float = 100.0
    notch_freq: float | None = None
    order: int = 2

    def __post_init__(self) -> None:
        if not (0.0 < self.low_cutoff < self.high_cutoff):
            raise FilterDesignError(
                f"need 0 < low_cutoff < high_cutoff, got "
                f"({self.low_cutoff}, {self.high_cutoff})"
            )
        if self.order < 2 or self.order % 2:
            raise FilterDesignError(f"order must be even and >= 2, got {self.order}")
        if self.notch_freq is not None and self.notch_freq <= 0:
            raise FilterDesignError(f"notch_freq must be positive, got {self.notch_freq}")


def design_bandpass(spec: FilterSpec, fs: float) -> np.ndarray:
    """Return second-order sections for the spec's Butterworth bandpass.

    The upper edge is clamped to ``0.45 * fs`` so the filter stays
    designable at low sampling rates.
    """
    high = min(spec.high_cutoff, HIGH_CUTOFF_FS_FRACTION * fs)
    if high <= spec.low_cutoff:
        raise FilterDesignError(
            f"band collapsed after Nyquist clamping: "
            f"[{spec.low_cutoff}, {high}] Hz at fs={fs}"
        )
    return sps.butter(spec.order // 2, [spec.low_cutoff, high], btype="bandpass",
                      fs=fs, output="sos")


def design_notch(notch_freq: float, fs: float, q: float = 30.0) -> np.ndarray:
    """Return second-order sections for a powerline notch at ``notch_freq``."""
    if notch_freq >= fs / 2:
        raise FilterDesignError(f"notch at {notch_freq} Hz >= Nyquist for fs={fs}")
    b, a = sps.iirnotch(notch_freq, q, fs=fs)
    return sps.tf2sos(b, a)


def _settling_length(sos: np.ndarray, fs: float) -> int:
    """Samples until the impulse response decays below 0.1% of its peak."""
    n = int(min(30 * fs, 300_000))
    h = sps.sosfilt(sos, np.concatenate(([1.0], np.zeros(n - 1))))
    mag = np.abs(h)
    peak = mag.max()
    if peak == 0.0:
        return 1
    above = np.nonzero(mag > 1e-3 * peak)[0]
    return int(above[-1]) + 1


def _zero_phase(sos: np.ndarray, x: np.ndarray, fs: float) -> np.ndarray:
    """Forward-backward filter with reflect padding; preserves length."""
    pad = min(3 * _settling_length(sos, fs), len(x) - 1)
    padded = np.pad(x, pad, mode="reflect") if pad > 0 else x
    y = sps.sosfiltfilt(sos, padded, padtype=None)
    return y[pad:pad + len(x)] if pad > 0 else y


def bandpass_filter(x: np.ndarray, fs: float, spec: FilterSpec | None = None) -> np.ndarray:
    """Zero-phase Butterworth bandpass of a single lead.

    Args:
        x: 1-D signal in mV.
        fs: sampling rate in Hz.
        spec: filter configuration; defaults to 0.67-100 Hz, order 2.

    Returns:
        Filtered signal, same length and dtype float64.
    """
    spec = spec or FilterSpec()
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D signal")
    if len(x) < MIN_SIGNAL_LEN:
        raise SignalTooShortError(f"need >= {MIN_SIGNAL_LEN} samples, got {len(x)}")
    return _zero_phase(design_bandpass(spec, fs), x, fs)


def notch_filter(x: np.ndarray, fs: float, notch_freq: float, q: float = 30.0) -> np.ndarray:
    """Zero-phase powerline notch (50 or 60 Hz, Q = 30 by default)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D signal")
    if len(x) < MIN_SIGNAL_LEN:
        raise SignalTooShortError(f"need >= {MIN_SIGNAL_LEN} samples, got {len(x)}")
    return _zero_phase(design_notch(notch_freq, fs), x, fs)


def preprocess_lead(x: np.ndarray, fs: float, spec: FilterSpec | None = None) -> np.ndarray:
    """Apply the full conditioning chain (bandpass, then optional notch)."""
    spec = spec or FilterSpec()
    y = bandpass_filter(x, fs, spec)
    if spec.notch_freq is not None:
        y = notch_filter(y, fs, spec.notch_freq)
    return y
