"""Single-lead f-wave extraction by QRST cancellation.

Four methods operate on one analysis window plus its QRS detections:

* ``ABS``      -- subtract the ensemble-average beat template.
* ``ABS_sc1``  -- one least-squares template scale factor per beat.
* ``ABS_sc2``  -- separate QRS and T-wave scale factors per beat, blended
                  with a short crossfade.
* ``TS_PCA``   -- per-beat reconstruction from the leading principal
                  components of the beat ensemble.

All methods share a beat matrix built around each R peak with per-beat
alignment and truncation at neighbour midpoints, and all leave samples
outside every beat span untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fwavebench.qrs import QrsAnnotations

PRE_R_SEC = 0.25
POST_R_SEC = 0.45
QRS_HALF_SEC = 0.090
CROSSFADE_SEC = 0.020
MAX_ALIGN_SHIFT = 10
SCALE_MIN, SCALE_MAX = 0.0, 3.0
VARIANCE_THRESHOLD = 0.90
MAX_COMPONENTS = 3
MIN_BEATS_FOR_PCA = 4


@dataclass(frozen=True)
class ExtractionParams:
    """Tunable extraction settings (beat span, PCA variance rule)."""

    pre_r_sec: float = PRE_R_SEC
    post_r_sec: float = POST_R_SEC
    variance_threshold: float = VARIANCE_THRESHOLD
    max_components: int = MAX_COMPONENTS

    def __post_init__(self) -> None:
        if self.pre_r_sec <= 0 or self.post_r_sec <= 0:
            raise ValueError("beat span extents must be positive")
        if not 0.0 < self.variance_threshold <= 1.0:
            raise ValueError("variance_threshold must lie in (0, 1]")
        if self.max_components < 1:
            raise ValueError("max_components must be >= 1")


DEFAULT_PARAMS = ExtractionParams()

METHOD_ABS = "ABS"
METHOD_SC1 = "ABS_sc1"
METHOD_SC2 = "ABS_sc2"
METHOD_TS_PCA = "TS_PCA"
METHODS = (METHOD_ABS, METHOD_SC1, METHOD_SC2, METHOD_TS_PCA)


class TooFewBeatsError(ValueError):
    """Raised when fewer than two beats are available for templating."""


@dataclass(frozen=True)
class BeatMatrix:
    """Aligned, truncated beats of one window.

    ``beats`` is (n_beats, beat_len) with absent samples zeroed; ``present``
    marks which entries hold real signal.  ``starts`` gives each row's first
    sample index in the window (after alignment), and ``r_offset`` the column
    of the R peak.
    """

    beats: np.ndarray
    present: np.ndarray
    starts: np.ndarray
    shifts: np.ndarray
    r_offset: int
    fs: float

    @property
    def n_beats(self) -> int:
        return int(self.beats.shape[0])

    @property
    def beat_len(self) -> int:
        return int(self.beats.shape[1])

    def template(self) -> np.ndarray:
        """Per-column mean over beats where samples are present."""
        counts = self.present.sum(axis=0)
        sums = np.where(self.present, self.beats, 0.0).sum(axis=0)
        return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


@dataclass(frozen=True)
class FwaveSignal:
    """An extracted f-wave estimate for one window.

    ``qrs_mask`` is True within +/- 90 ms of each detected R peak; the
    remaining samples form the atrial segment used for amplitude features.
    ``beat_scales`` exposes per-beat template scale factors when the method
    fits any (one column for ABS_sc1, QRS and T columns for ABS_sc2).
    ``used_fallback`` is set when TS_PCA had too few beats and fell back to
    plain template subtraction.
    """

    fwave: np.ndarray
    qrs_mask: np.ndarray
    method: str
    fs: float
    beat_scales: np.ndarray | None = None
    used_fallback: bool = False

    def atrial_samples(self) -> np.ndarray:
        return self.fwave[~self.qrs_mask]


def make_qrs_mask(n_samples: int, qrs: QrsAnnotations,
                  half_sec: float = QRS_HALF_SEC) -> np.ndarray:
    """Boolean mask, True within +/- ``half_sec`` of each detection."""
    mask = np.zeros(n_samples, dtype=bool)
    half = round(half_sec * qrs.fs)
    for r in qrs.r_peaks:
        mask[max(0, r - half):min(n_samples, r + half + 1)] = True
    return mask


def _shift_order(max_shift: int) -> list[int]:
    order = [0]
    for k in range(1, max_shift + 1):
        order.extend((-k, k))
    return order


def build_beat_matrix(x: np.ndarray, qrs: QrsAnnotations,
                      params: ExtractionParams = DEFAULT_PARAMS) -> BeatMatrix:
    """Assemble aligned beats around each R peak.

    Each beat covers 0.25 s before to 0.45 s after its R peak (by default),
    truncated at the midpoints to neighbouring R peaks and at the window
    edges; truncated positions are marked absent.  Beats after the first are
    aligned to the running template by the integer shift (up to +/- 10
    samples) maximising normalised correlation over jointly present samples,
    with ties keeping the smaller magnitude shift.

    Raises:
        TooFewBeatsError: fewer than two R peaks.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    r_peaks = qrs.r_peaks
    n_beats = len(r_peaks)
    if n_beats < 2:
        raise TooFewBeatsError(f"need >= 2 beats to build a template, got {n_beats}")

    fs = qrs.fs
    r_off = round(params.pre_r_sec * fs)
    beat_len = r_off + round(params.post_r_sec * fs)

    # Truncation bounds from unshifted neighbour midpoints; beat b owns
    # [mid(b-1, b), mid(b, b+1)), so spans never overlap.
    mids = (r_peaks[:-1] + r_peaks[1:] + 1) // 2
    left_bounds = np.concatenate(([0], mids))
    right_bounds = np.concatenate((mids, [n]))

    beats = np.zeros((n_beats, beat_len))
    present = np.zeros((n_beats, beat_len), dtype=bool)
    starts = np.zeros(n_beats, dtype=int)
    shifts = np.zeros(n_beats, dtype=int)

    run_sum = np.zeros(beat_len)
    run_cnt = np.zeros(beat_len, dtype=int)
    shift_order = _shift_order(MAX_ALIGN_SHIFT)
    min_overlap = beat_len // 4

    for b, r in enumerate(r_peaks):
        lb = max(int(left_bounds[b]), 0)
        rb = min(int(right_bounds[b]), n)
        base = int(r) - r_off

        best_shift, best_score = 0, -np.inf
        if b > 0 and run_cnt.max() > 0:
            t_mask = run_cnt > 0
            t_mean = np.where(t_mask, run_sum / np.maximum(run_cnt, 1), 0.0)
            for s in shift_order:
                start = base + s
                j_lo = max(0, lb - start, -start)
                j_hi = min(beat_len, rb - start, n - start)
                if j_hi - j_lo < min_overlap:
                    continue
                cols = np.arange(j_lo, j_hi)
                joint = cols[t_mask[cols]]
                if joint.size < min_overlap:
                    continue
                seg = x[start + joint]
                tpl = t_mean[joint]
                denom = np.sqrt(np.dot(seg, seg) * np.dot(tpl, tpl))
                if denom <= 0:
                    continue
                score = float(np.dot(seg, tpl) / denom)
                if score > best_score:
                    best_score, best_shift = score, s

        start = base + best_shift
        j_lo = max(0, lb - start, -start)
        j_hi = min(beat_len, rb - start, n - start)
        if j_hi > j_lo:
            seg = x[start + j_lo:start + j_hi]
            beats[b, j_lo:j_hi] = seg
            present[b, j_lo:j_hi] = True
            run_sum[j_lo:j_hi] += seg
            run_cnt[j_lo:j_hi] += 1
        starts[b] = start
        shifts[b] = best_shift

    return BeatMatrix(beats=beats, present=present, starts=starts, shifts=shifts,
                      r_offset=r_off, fs=fs)


def _fit_scale(seg: np.ndarray, tpl: np.ndarray) -> float:
    """Least-squares scale of ``tpl`` onto ``seg``; 0 for a zero template."""
    denom = float(np.dot(tpl, tpl))
    if denom <= 0.0:
        return 0.0
    return float(np.clip(np.dot(seg, tpl) / denom, SCALE_MIN, SCALE_MAX))


def _subtract(x: np.ndarray, bm: BeatMatrix,
              scaled_rows: np.ndarray) -> np.ndarray:
    """Subtract per-beat template rows at present positions only."""
    d = x.astype(float).copy()
    for b in range(bm.n_beats):
        cols = np.nonzero(bm.present[b])[0]
        if cols.size:
            d[bm.starts[b] + cols] -= scaled_rows[b, cols]
    return d


def extract_abs(x: np.ndarray, qrs: QrsAnnotations, *,
                beat_matrix: BeatMatrix | None = None,
                params: ExtractionParams = DEFAULT_PARAMS) -> FwaveSignal:
    """Average beat subtraction: remove the unscaled ensemble template."""
    bm = beat_matrix if beat_matrix is not None else build_beat_matrix(x, qrs, params)
    template = bm.template()
    rows = np.broadcast_to(template, bm.beats.shape)
    d = _subtract(np.asarray(x, dtype=float), bm, rows)
    return FwaveSignal(fwave=d, qrs_mask=make_qrs_mask(len(d), qrs),
                       method=METHOD_ABS, fs=qrs.fs)


def extract_abs_sc1(x: np.ndarray, qrs: QrsAnnotations, *,
                    beat_matrix: BeatMatrix | None = None,
                    params: ExtractionParams = DEFAULT_PARAMS) -> FwaveSignal:
    """Template subtraction with one least-squares scale factor per beat.

    The factor is fitted over the beat's present samples and clamped to
    [0, 3]; a zero-energy template yields a factor of 0.
    """
    bm = beat_matrix if beat_matrix is not None else build_beat_matrix(x, qrs, params)
    template = bm.template()
    scales = np.zeros(bm.n_beats)
    rows = np.zeros_like(bm.beats)
    for b in range(bm.n_beats):
        p = bm.present[b]
        scales[b] = _fit_scale(bm.beats[b, p], template[p])
        rows[b] = scales[b] * template
    d = _subtract(np.asarray(x, dtype=float), bm, rows)
    return FwaveSignal(fwave=d, qrs_mask=make_qrs_mask(len(d), qrs),
                       method=METHOD_SC1, fs=qrs.fs, beat_scales=scales)


def extract_abs_sc2(x: np.ndarray, qrs: QrsAnnotations, *,
                    beat_matrix: BeatMatrix | None = None,
                    params: ExtractionParams = DEFAULT_PARAMS) -> FwaveSignal:
    """Template subtraction with separate QRS and T-wave scale factors.

    The QRS factor is fitted on +/- 90 ms around the R peak and applied from
    the beat start to the end of that interval; the T factor is fitted on and
    applied to the remainder.  A 20 ms linear crossfade blends the two scale
    factors across the boundary.
    """
    bm = beat_matrix if beat_matrix is not None else build_beat_matrix(x, qrs, params)
    template = bm.template()
    beat_len = bm.beat_len
    half = round(QRS_HALF_SEC * bm.fs)
    qrs_cols = np.arange(max(0, bm.r_offset - half),
                         min(beat_len, bm.r_offset + half + 1))
    t_cols = np.arange(qrs_cols[-1] + 1, beat_len) if qrs_cols.size else np.arange(beat_len)

    # Per-column scale profile: QRS factor up to the boundary, T factor after,
    # linearly blended over the crossfade span centred on the boundary.
    boundary = qrs_cols[-1] if qrs_cols.size else bm.r_offset
    fade = max(1, round(CROSSFADE_SEC * bm.fs))
    ramp = np.clip((np.arange(beat_len) - (boundary - fade / 2)) / fade, 0.0, 1.0)

    scales = np.zeros((bm.n_beats, 2))
    rows = np.zeros_like(bm.beats)
    for b in range(bm.n_beats):
        p = bm.present[b]
        pq = qrs_cols[p[qrs_cols]]
        pt = t_cols[p[t_cols]]
        a_qrs = _fit_scale(bm.beats[b, pq], template[pq])
        a_t = _fit_scale(bm.beats[b, pt], template[pt])
        scales[b] = (a_qrs, a_t)
        rows[b] = ((1.0 - ramp) * a_qrs + ramp * a_t) * template
    d = _subtract(np.asarray(x, dtype=float), bm, rows)
    return FwaveSignal(fwave=d, qrs_mask=make_qrs_mask(len(d), qrs),
                       method=METHOD_SC2, fs=qrs.fs, beat_scales=scales)


def _choose_n_components(eigvals: np.ndarray, n_beats: int,
                         threshold: float = VARIANCE_THRESHOLD,
                         cap: int = MAX_COMPONENTS) -> int:
    """Smallest component count explaining ``threshold`` of the variance,
    capped at min(cap, n_beats - 1)."""
    limit = max(1, min(cap, n_beats - 1))
    total = float(eigvals.sum())
    if total <= 0.0:
        return 1
    cum = np.cumsum(eigvals) / total
    k = int(np.searchsorted(cum, threshold - 1e-12) + 1)
    return min(k, limit)


def extract_ts_pca(x: np.ndarray, qrs: QrsAnnotations, *,
                   beat_matrix: BeatMatrix | None = None,
                   params: ExtractionParams = DEFAULT_PARAMS) -> FwaveSignal:
    """Per-beat reconstruction from leading principal components.

    Beats (absent samples filled with the template) are decomposed into
    principal components; the smallest count explaining 90% of the ensemble
    variance -- at most 3 and at most n_beats - 1 -- is kept.  Each component
    has its sign fixed so the largest-magnitude entry is positive.  Every
    beat is reconstructed as template plus a least-squares combination of the
    kept components fitted on its present samples, and the reconstruction is
    subtracted.  With fewer than four beats (or a failed decomposition) the
    method falls back to plain template subtraction and flags it.
    """
    x = np.asarray(x, dtype=float)
    bm = beat_matrix if beat_matrix is not None else build_beat_matrix(x, qrs, params)
    if bm.n_beats < MIN_BEATS_FOR_PCA:
        fallback = extract_abs(x, qrs, beat_matrix=bm)
        return FwaveSignal(fwave=fallback.fwave, qrs_mask=fallback.qrs_mask,
                           method=METHOD_TS_PCA, fs=qrs.fs, used_fallback=True)

    template = bm.template()
    filled = np.where(bm.present, bm.beats, template)
    centred = filled - template
    cov = centred.T @ centred / (bm.n_beats - 1)
    try:
        eigvals, eigvecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError:
        fallback = extract_abs(x, qrs, beat_matrix=bm)
        return FwaveSignal(fwave=fallback.fwave, qrs_mask=fallback.qrs_mask,
                           method=METHOD_TS_PCA, fs=qrs.fs, used_fallback=True)

    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    k = _choose_n_components(eigvals, bm.n_beats,
                             threshold=params.variance_threshold,
                             cap=params.max_components)
    basis = eigvecs[:, :k].copy()
    for col in range(k):
        peak = np.argmax(np.abs(basis[:, col]))
        if basis[peak, col] < 0:
            basis[:, col] = -basis[:, col]

    rows = np.zeros_like(bm.beats)
    for b in range(bm.n_beats):
        p = bm.present[b]
        vp = basis[p]
        xc = bm.beats[b, p] - template[p]
        gram = vp.T @ vp
        try:
            coeffs = np.linalg.solve(gram, vp.T @ xc)
        except np.linalg.LinAlgError:
            coeffs, *_ = np.linalg.lstsq(vp, xc, rcond=None)
        rows[b] = template + basis @ coeffs
    d = _subtract(x, bm, rows)
    return FwaveSignal(fwave=d, qrs_mask=make_qrs_mask(len(d), qrs),
                       method=METHOD_TS_PCA, fs=qrs.fs)


EXTRACTORS = {
    METHOD_ABS: extract_abs,
    METHOD_SC1: extract_abs_sc1,
    METHOD_SC2: extract_abs_sc2,
    METHOD_TS_PCA: extract_ts_pca,
}
