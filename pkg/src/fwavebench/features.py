"""Amplitude and spectral features of extracted f-waves.

Five features per window: peak-to-peak atrial amplitude, dominant atrial
frequency (DAF), spectral power at the DAF, and power inside / outside the
4-12 Hz atrial band.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from fwavebench.extraction import FwaveSignal
from fwavebench.records import Window

ATRIAL_BAND = (4.0, 12.0)
DEFAULT_SEGMENT_LEN = 1024
DEFAULT_OVERLAP = 0.5

FEATURE_NAMES = ("a_pp", "daf", "p_daf", "p_in", "p_out")


class SignalTooShortError(ValueError):
    """Raised when a window is shorter than one Welch segment."""


@dataclass(frozen=True)
class PowerSpectrum:
    """One-sided Welch power spectral density (power per Hz)."""

    frequencies: np.ndarray
    power: np.ndarray
    segment_len: int
    overlap: float

    def __post_init__(self) -> None:
        if self.frequencies.shape != self.power.shape:
            raise ValueError("frequency and power grids must match")
        if np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequency grid must be increasing")


@dataclass(frozen=True)
class FeatureVector:
    """The five per-window features plus identity and method tags."""

    record_id: str
    lead: str
    window_idx: int
    method: str
    label: str
    a_pp: float
    daf: float
    p_daf: float
    p_in: float
    p_out: float

    def values(self) -> tuple[float, float, float, float, float]:
        return (self.a_pp, self.daf, self.p_daf, self.p_in, self.p_out)


def welch_psd(fw: FwaveSignal, segment_len: int = DEFAULT_SEGMENT_LEN,
              overlap: float = DEFAULT_OVERLAP) -> PowerSpectrum:
    """Welch PSD of the extracted f-wave (Hamming window, 50% overlap)."""
    x = np.asarray(fw.fwave, dtype=float)
    if len(x) < segment_len:
        raise SignalTooShortError(
            f"window of {len(x)} samples shorter than one segment of {segment_len}")
    freqs, power = sps.welch(x, fs=fw.fs, window="hamming", nperseg=segment_len,
                             noverlap=int(segment_len * overlap),
                             scaling="density")
    return PowerSpectrum(frequencies=freqs, power=power,
                         segment_len=segment_len, overlap=overlap)


def compute_app(fw: FwaveSignal) -> float:
    """Peak-to-peak amplitude over atrial samples (outside the QRS mask).

    Returns NaN when the mask covers the whole window, marking the feature
    missing for that window.
    """
    atrial = fw.atrial_samples()
    if atrial.size == 0:
        return float("nan")
    return float(atrial.max() - atrial.min())


def _refined_grid(psd: PowerSpectrum, band: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """PSD grid with the band edges inserted (linearly interpolated)."""
    freqs, power = psd.frequencies, psd.power
    extra = [e for e in band if freqs[0] < e < freqs[-1] and e not in freqs]
    if extra:
        grid = np.union1d(freqs, np.asarray(extra))
        return grid, np.interp(grid, freqs, power)
    return freqs, power


def compute_spectral_features(psd: PowerSpectrum,
                              band: tuple[float, float] = ATRIAL_BAND
                              ) -> tuple[float, float, float, float]:
    """DAF, power at the DAF, and band power inside/outside ``band``.

    The DAF is the frequency of the largest PSD value among grid points
    inside the closed band (ties resolve to the lowest frequency).  Band
    powers are trapezoid integrals on the PSD grid refined with interpolated
    breakpoints at the band edges, so inside + outside equals the full-band
    integral up to rounding.
    """
    lo, hi = band
    freqs, power = psd.frequencies, psd.power
    in_band = (freqs >= lo) & (freqs <= hi)
    if not np.any(in_band):
        raise ValueError(f"PSD grid has no points inside [{lo}, {hi}] Hz")
    band_power = power[in_band]
    peak = int(np.argmax(band_power))          # first maximum = lowest frequency
    daf = float(freqs[in_band][peak])
    p_daf = float(band_power[peak])

    grid, pgrid = _refined_grid(psd, band)
    seg_areas = 0.5 * (pgrid[1:] + pgrid[:-1]) * np.diff(grid)
    centers_in = (grid[:-1] >= lo) & (grid[1:] <= hi)
    p_in = float(seg_areas[centers_in].sum())
    p_out = float(seg_areas[~centers_in].sum())
    return daf, p_daf, p_in, p_out


def featurize_window(fw: FwaveSignal, window: Window,
                     segment_len: int = DEFAULT_SEGMENT_LEN) -> FeatureVector:
    """Assemble the five features for one extracted window."""
    if window.label is None:
        raise ValueError("cannot featurize a window without a rhythm label")
    psd = welch_psd(fw, segment_len=segment_len)
    daf, p_daf, p_in, p_out = compute_spectral_features(psd)
    return FeatureVector(
        record_id=window.record_id, lead=window.lead_name,
        window_idx=window.index, method=fw.method, label=window.label,
        a_pp=compute_app(fw), daf=daf, p_daf=p_daf, p_in=p_in, p_out=p_out)
