"""QRS detection (Pan-Tompkins style), a secondary energy detector, and bSQI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

REFRACTORY_SEC = 0.200
SECONDARY_REFRACTORY_SEC = 0.250
REFINE_HALF_SEC = 0.050
BSQI_TOL_SEC = 0.150


class SignalTooShortError(ValueError):
    """Raised when a signal is shorter than the detector can handle."""


@dataclass(frozen=True)
class QrsAnnotations:
    """Detected R-peak sample indices for one lead.

    Peaks are strictly increasing and at least the refractory period apart.
    """

    r_peaks: np.ndarray
    fs: float

    def __post_init__(self) -> None:
        peaks = np.asarray(self.r_peaks, dtype=int)
        object.__setattr__(self, "r_peaks", peaks)
        if peaks.size and np.any(np.diff(peaks) <= 0):
            raise ValueError("r_peaks must be strictly increasing")

    def __len__(self) -> int:
        return int(self.r_peaks.size)

    def times(self) -> np.ndarray:
        return self.r_peaks / self.fs


def _zero_phase_band(x: np.ndarray, fs: float, low: float, high: float) -> np.ndarray:
    sos = sps.butter(2, [low, high], btype="bandpass", fs=fs, output="sos")
    return sps.sosfiltfilt(sos, x)


def _smooth_energy(bp: np.ndarray, fs: float, smooth_sec: float) -> np.ndarray:
    win = max(1, round(smooth_sec * fs))
    return np.convolve(bp * bp, np.ones(win) / win, mode="same")


def detect_qrs(x: np.ndarray, fs: float) -> QrsAnnotations:
    """Detect R peaks with a Pan-Tompkins style chain.

    Bandpass 5-15 Hz, differentiate, square, integrate over a 150 ms moving
    window, then apply adaptive signal/noise thresholds with search-back for
    long RR gaps.  Each accepted envelope peak is refined to the extremum of
    the bandpassed signal within +/- 50 ms.  Thresholds are relative, so the
    detector is invariant to amplitude scaling.

    Args:
        x: 1-D single-lead signal in mV (filtered or raw).
        fs: sampling rate in Hz.

    Returns:
        QrsAnnotations with strictly increasing peak indices spaced by at
        least the 200 ms refractory period.  All-zero input yields no peaks.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < 2 * fs:
        raise SignalTooShortError(f"need >= 2 s of signal, got {len(x) / fs:.2f} s")
    if not np.any(x):
        return QrsAnnotations(np.array([], dtype=int), fs)

    bp = _zero_phase_band(x, fs, 5.0, 15.0)
    deriv = np.gradient(bp)
    win = max(1, round(0.150 * fs))
    mwi = np.convolve(deriv * deriv, np.ones(win) / win, mode="same")

    refractory = round(REFRACTORY_SEC * fs)
    cand, _ = sps.find_peaks(mwi, distance=refractory)
    if cand.size == 0:
        return QrsAnnotations(np.array([], dtype=int), fs)

    # Initialise running estimates from the opening seconds (batch detector,
    # so a global fallback is fine when the head of the record is flat).
    head = mwi[: round(2.5 * fs)]
    spk = float(np.percentile(head, 99))
    if spk <= 0:
        spk = float(np.percentile(mwi, 99))
    npk = float(np.percentile(head, 50))
    threshold = npk + 0.25 * (spk - npk)

    accepted: list[int] = []
    rr_hist: list[float] = []
    last = -10 * refractory
    for idx in cand:
        if mwi[idx] >= threshold and idx - last >= refractory:
            if accepted:
                rr_hist.append(float(idx - last))
                if len(rr_hist) > 8:
                    rr_hist.pop(0)
            accepted.append(int(idx))
            last = idx
            spk = 0.125 * mwi[idx] + 0.875 * spk
        else:
            npk = 0.125 * mwi[idx] + 0.875 * npk
        threshold = npk + 0.25 * (spk - npk)

    # Search-back: revisit gaps longer than 1.66x the running RR estimate and
    # accept the strongest skipped candidate above half threshold.
    if accepted and rr_hist:
        rr_avg = float(np.mean(rr_hist))
        filled: list[int] = []
        cand_set = cand[mwi[cand] >= 0.5 * threshold]
        bounds = [*accepted, len(x) + refractory]
        prev = accepted[0]
        for nxt in bounds[1:]:
            while nxt - prev > 1.66 * rr_avg:
                gap = cand_set[(cand_set > prev + refractory) & (cand_set < nxt - refractory)]
                if gap.size == 0:
                    break
                best = int(gap[np.argmax(mwi[gap])])
                filled.append(best)
                prev = best
            prev = nxt
        accepted = sorted(set(accepted) | set(filled))

    # Refine each detection to the bandpass extremum within +/- 50 ms.
    half = round(REFINE_HALF_SEC * fs)
    refined = []
    for idx in accepted:
        lo, hi = max(0, idx - half), min(len(x), idx + half + 1)
        refined.append(lo + int(np.argmax(np.abs(bp[lo:hi]))))

    # Deduplicate after refinement, keeping the larger extremum.
    refined.sort()
    peaks: list[int] = []
    for idx in refined:
        if peaks and idx - peaks[-1] < refractory:
            if abs(bp[idx]) > abs(bp[peaks[-1]]):
                peaks[-1] = idx
        else:
            peaks.append(idx)
    return QrsAnnotations(np.array(peaks, dtype=int), fs)


def detect_qrs_secondary(x: np.ndarray, fs: float) -> QrsAnnotations:
    """Independent beat detector used only for signal-quality scoring.

    Squares a 10-25 Hz bandpass, smooths over 120 ms, and keeps local maxima
    above an adaptive percentile-based threshold with a 250 ms refractory
    period.  Deliberately simpler (and differently tuned) than the primary
    detector so disagreement indicates poor signal quality.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < 2 * fs:
        raise SignalTooShortError(f"need >= 2 s of signal, got {len(x) / fs:.2f} s")
    if not np.any(x):
        return QrsAnnotations(np.array([], dtype=int), fs)

    env = _smooth_energy(_zero_phase_band(x, fs, 10.0, 25.0), fs, 0.120)
    if env.max() <= 0:
        return QrsAnnotations(np.array([], dtype=int), fs)
    threshold = max(0.25 * float(np.percentile(env, 98)), 3.0 * float(env.mean()))
    peaks, _ = sps.find_peaks(env, height=threshold,
                              distance=round(SECONDARY_REFRACTORY_SEC * fs))
    return QrsAnnotations(peaks.astype(int), fs)


def compute_bsqi(qrs_a: QrsAnnotations, qrs_b: QrsAnnotations,
                 tol_sec: float = BSQI_TOL_SEC) -> float:
    """Agreement between two detectors: matched / (n_a + n_b - matched).

    Peaks are matched greedily by smallest absolute time difference within
    ``tol_sec``; each peak matches at most once.  Two empty inputs score 0.0.
    """
    if qrs_a.fs != qrs_b.fs:
        raise ValueError("annotations must share a sampling rate")
    ta, tb = qrs_a.times(), qrs_b.times()
    if ta.size == 0 and tb.size == 0:
        return 0.0
    if ta.size == 0 or tb.size == 0:
        return 0.0

    pairs = []
    start = np.searchsorted(tb, ta - tol_sec)
    stop = np.searchsorted(tb, ta + tol_sec, side="right")
    for i, (lo, hi) in enumerate(zip(start, stop)):
        for j in range(lo, hi):
            # Sort key makes the greedy pass deterministic under ties.
            pairs.append((abs(ta[i] - tb[j]), min(ta[i], tb[j]), max(ta[i], tb[j]), i, j))
    pairs.sort()

    used_a: set[int] = set()
    used_b: set[int] = set()
    matched = 0
    for _, _, _, i, j in pairs:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            matched += 1
    return matched / (ta.size + tb.size - matched)
