"""Parametric single-lead AF/NSR ECG simulator with ground truth.

Each record is a sum of four stored components:

* ventricular activity -- per-beat QRST complexes built from Gaussian bumps,
  with respiration-coupled amplitude modulation and two additional
  beat-to-beat morphology modes (shape and width jitter) confined to the QRS;
* P waves on sinus beats only;
* an atrial f-wave -- a three-harmonic sawtooth with slow amplitude and
  frequency modulation, gated to AF episodes at beat boundaries;
* noise -- baseline wander, high-pass-filtered white noise and sporadic
  electrode transients, mixed and scaled to an exact target RMS.

AF episodes alternate with sinus rhythm so that the achieved AF fraction
matches the configured burden; episode lengths average about two minutes.
Everything is drawn from one seeded generator, so records are reproducible
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps

from fwavebench.extraction import FwaveSignal, QRS_HALF_SEC
from fwavebench.records import EcgRecord, RhythmInterval

MEAN_EPISODE_SEC = 120.0
EDGE_MARGIN_SEC = 0.4
SIM_LEAD_NAME = "V1"

MV_PER_UV = 1e-3


class SimulationError(ValueError):
    """Raised for invalid simulator configuration."""


class NoAfSamplesError(ValueError):
    """Raised when an error metric is requested for a window without AF."""


@dataclass(frozen=True)
class SimConfig:
    """Simulator knobs; amplitudes are mV except ``noise_rms_uv``."""

    fs: float = 200.0
    duration_sec: float = 300.0
    af_burden: float = 0.5
    noise_rms_uv: float = 100.0
    f_wave_hz: float = 6.0
    n_harmonics: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fs <= 0:
            raise SimulationError(f"fs must be positive, got {self.fs}")
        if self.duration_sec < 10.0:
            raise SimulationError("duration must be at least 10 s")
        if not 0.0 <= self.af_burden <= 1.0:
            raise SimulationError(f"af_burden must lie in [0, 1], got {self.af_burden}")
        if self.noise_rms_uv < 0:
            raise SimulationError(f"noise_rms_uv must be >= 0, got {self.noise_rms_uv}")
        if not 4.0 <= self.f_wave_hz <= 9.0:
            raise SimulationError(f"f_wave_hz must lie in [4, 9], got {self.f_wave_hz}")
        if self.n_harmonics < 1:
            raise SimulationError("need at least one f-wave harmonic")


@dataclass(frozen=True)
class SimRecord:
    """A simulated record with per-sample ground truth.

    ``ecg`` is the observed lead; ``components`` holds the exact additive
    parts (``ventricular``, ``pwave``, ``fwave``, ``noise``).  ``true_fwave``
    aliases the pre-noise f-wave and is zero outside AF episodes.
    """

    config: SimConfig
    record_id: str
    ecg: np.ndarray
    true_fwave: np.ndarray
    true_r_peaks: np.ndarray
    af_mask: np.ndarray
    components: dict[str, np.ndarray]
    age: int
    sex: str

    @property
    def fs(self) -> float:
        return self.config.fs

    @property
    def n_samples(self) -> int:
        return int(len(self.ecg))

    def af_fraction(self) -> float:
        return float(self.af_mask.mean())

    def slice(self, start: int, stop: int) -> "SimRecord":
        """Ground-truth view of ``[start, stop)`` with re-indexed R peaks."""
        keep = (self.true_r_peaks >= start) & (self.true_r_peaks < stop)
        return SimRecord(
            config=self.config, record_id=self.record_id,
            ecg=self.ecg[start:stop], true_fwave=self.true_fwave[start:stop],
            true_r_peaks=self.true_r_peaks[keep] - start,
            af_mask=self.af_mask[start:stop],
            components={k: v[start:stop] for k, v in self.components.items()},
            age=self.age, sex=self.sex)

    def to_record(self) -> EcgRecord:
        """Package as an annotated EcgRecord (AF runs become AF intervals)."""
        return EcgRecord(
            record_id=self.record_id, fs=self.fs, lead_names=(SIM_LEAD_NAME,),
            signals=self.ecg[np.newaxis, :], intervals=af_mask_to_intervals(self.af_mask),
            age=self.age, sex=self.sex)


def af_mask_to_intervals(af_mask: np.ndarray) -> tuple[RhythmInterval, ...]:
    """Convert a boolean AF mask into AF/OTHER intervals covering the record."""
    n = len(af_mask)
    if n == 0:
        return ()
    edges = np.flatnonzero(np.diff(af_mask.astype(np.int8))) + 1
    bounds = np.concatenate(([0], edges, [n]))
    intervals = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        label = "AF" if af_mask[lo] else "OTHER"
        intervals.append(RhythmInterval(int(lo), int(hi), label))
    return tuple(intervals)


def _gauss(tau: np.ndarray, amp: float, center: float, width: float) -> np.ndarray:
    return amp * np.exp(-0.5 * ((tau - center) / width) ** 2)


@dataclass(frozen=True)
class _BeatShapes:
    """Per-record waveform components evaluated on a local beat grid."""

    tau: np.ndarray          # local time axis, seconds relative to the R peak
    qrs: np.ndarray          # Q, R and S bumps
    t_wave: np.ndarray
    p_wave: np.ndarray
    mode_shape: np.ndarray   # unit-energy QRS derivative mode
    mode_width: np.ndarray   # unit-energy QRS curvature mode
    qrs_energy: float
    t_energy: float


def _draw_beat_shapes(rng: np.random.Generator, fs: float) -> _BeatShapes:
    tau = np.arange(round(-0.40 * fs), round(0.60 * fs)) / fs
    r_amp = rng.uniform(0.9, 1.3)
    r_width = rng.uniform(0.009, 0.013)
    qrs = (_gauss(tau, r_amp, 0.0, r_width)
           + _gauss(tau, -rng.uniform(0.10, 0.20), -rng.uniform(0.032, 0.042),
                    rng.uniform(0.007, 0.010))
           + _gauss(tau, -rng.uniform(0.15, 0.30), rng.uniform(0.028, 0.038),
                    rng.uniform(0.007, 0.010)))
    t_wave = _gauss(tau, rng.uniform(0.22, 0.38), rng.uniform(0.23, 0.29),
                    rng.uniform(0.045, 0.065))
    p_wave = _gauss(tau, rng.uniform(0.07, 0.12), -rng.uniform(0.150, 0.180),
                    rng.uniform(0.020, 0.028))

    # Two beat-to-beat morphology modes confined to the QRS: the template
    # derivative (shape/lag jitter) and its curvature (width jitter), both
    # normalised to unit energy so mode coefficients are in mV units.
    centre = _gauss(tau, r_amp, 0.0, r_width)
    mode_shape = np.gradient(centre)
    mode_shape /= np.sqrt(np.sum(mode_shape ** 2))
    mode_width = np.gradient(np.gradient(centre))
    mode_width -= mode_shape * np.dot(mode_width, mode_shape)
    mode_width /= np.sqrt(np.sum(mode_width ** 2))

    return _BeatShapes(tau=tau, qrs=qrs, t_wave=t_wave, p_wave=p_wave,
                       mode_shape=mode_shape, mode_width=mode_width,
                       qrs_energy=float(np.sum(qrs ** 2)),
                       t_energy=float(np.sum(t_wave ** 2)))


def _plan_episodes(rng: np.random.Generator, duration: float,
                   burden: float) -> list[tuple[float, bool]]:
    """Alternating (start_time, is_af) episode plan hitting the AF burden."""
    if burden <= 0.0:
        return [(0.0, False)]
    if burden >= 1.0:
        return [(0.0, True)]
    af_total = burden * duration
    nsr_total = duration - af_total
    n_af = max(1, round(af_total / MEAN_EPISODE_SEC))
    start_af = bool(rng.random() < burden)
    n_nsr = n_af + (0 if start_af else 1)
    af_lens = af_total * rng.dirichlet(np.full(n_af, 2.0))
    nsr_lens = nsr_total * rng.dirichlet(np.full(n_nsr, 2.0))

    episodes: list[tuple[float, bool]] = []
    t = 0.0
    ia = ib = 0
    is_af = start_af
    while t < duration - 1e-9 and (ia < n_af or ib < n_nsr):
        if is_af and ia < n_af:
            episodes.append((t, True))
            t += af_lens[ia]
            ia += 1
        elif not is_af and ib < n_nsr:
            episodes.append((t, False))
            t += nsr_lens[ib]
            ib += 1
        is_af = not is_af
    return episodes


def _rhythm_at(episodes: list[tuple[float, bool]], t: float) -> bool:
    starts = [e[0] for e in episodes]
    idx = int(np.searchsorted(starts, t, side="right")) - 1
    return episodes[max(idx, 0)][1]


def simulate_record(config: SimConfig, record_id: str = "sim0000") -> SimRecord:
    """Simulate one annotated single-lead record.

    Deterministic for a given config: every random quantity comes from one
    generator seeded with ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    fs, duration = config.fs, config.duration_sec
    n = round(duration * fs)

    shapes = _draw_beat_shapes(rng, fs)

    # Record-level physiology.
    rr_nsr = rng.uniform(0.70, 1.00)
    rr_af = rng.uniform(0.60, 0.92)
    af_rr_sigma = rng.uniform(0.20, 0.28)
    f_resp = rng.uniform(0.15, 0.30)
    phase_resp = rng.uniform(0, 2 * np.pi)
    phase_t = rng.uniform(0, 2 * np.pi)
    qrs_mod_depth = rng.uniform(0.16, 0.24)
    qrs_mod_jitter = rng.uniform(0.06, 0.10)
    t_mod_depth = rng.uniform(0.04, 0.07)
    t_mod_jitter = rng.uniform(0.02, 0.04)
    sigma_shape = rng.uniform(0.36, 0.46)
    sigma_width = rng.uniform(0.32, 0.42)

    episodes = _plan_episodes(rng, duration, config.af_burden)

    # Beat train: R times and per-beat rhythm.
    r_times: list[float] = []
    beat_is_af: list[bool] = []
    t = EDGE_MARGIN_SEC
    while t < duration - EDGE_MARGIN_SEC - 0.05:
        is_af = _rhythm_at(episodes, t)
        r_times.append(t)
        beat_is_af.append(is_af)
        if is_af:
            rr = rr_af * rng.lognormal(-0.5 * af_rr_sigma ** 2, af_rr_sigma)
            rr = float(np.clip(rr, 0.35, 1.80))
        else:
            rr = rr_nsr * (1.0 + 0.04 * np.sin(2 * np.pi * f_resp * t + phase_resp)
                           + rng.normal(0.0, 0.02))
            rr = float(np.clip(rr, 0.40, 1.60))
        t += rr
    r_peaks = np.round(np.array(r_times) * fs).astype(int)
    is_af_beat = np.array(beat_is_af, dtype=bool)

    # AF mask switches at midpoints between beats of different rhythm.
    af_mask = np.zeros(n, dtype=bool)
    mids = (r_peaks[:-1] + r_peaks[1:] + 1) // 2
    bounds = np.concatenate(([0], mids, [n]))
    for b in range(len(r_peaks)):
        if is_af_beat[b]:
            af_mask[bounds[b]:bounds[b + 1]] = True

    # Ventricular activity + P waves, beat by beat.
    ventricular = np.zeros(n)
    pwave = np.zeros(n)
    grid_len = len(shapes.tau)
    grid_start = round(-0.40 * fs)
    for b, (t_r, r_idx) in enumerate(zip(r_times, r_peaks)):
        m_qrs = (1.0 + qrs_mod_depth * np.sin(2 * np.pi * f_resp * t_r + phase_resp)
                 + rng.normal(0.0, qrs_mod_jitter))
        m_t = (1.0 + t_mod_depth * np.sin(2 * np.pi * f_resp * t_r + phase_t)
               + rng.normal(0.0, t_mod_jitter))
        g_shape = rng.normal(0.0, sigma_shape)
        g_width = rng.normal(0.0, sigma_width)
        beat = (m_qrs * shapes.qrs + m_t * shapes.t_wave
                + g_shape * shapes.mode_shape + g_width * shapes.mode_width)
        i0 = r_idx + grid_start
        lo, hi = max(0, i0), min(n, i0 + grid_len)
        ventricular[lo:hi] += beat[lo - i0:hi - i0]
        if not is_af_beat[b]:
            pwave[lo:hi] += m_qrs * shapes.p_wave[lo - i0:hi - i0]

    # Atrial f-wave: sawtooth harmonics with slow AM and frequency drift,
    # gated to AF samples.
    tt = np.arange(n) / fs
    fm_depth = rng.uniform(0.10, 0.30)
    fm_freq = rng.uniform(0.03, 0.08)
    am_depth = rng.uniform(0.20, 0.40)
    am_freq = rng.uniform(0.05, 0.10)
    inst_freq = config.f_wave_hz + fm_depth * np.sin(2 * np.pi * fm_freq * tt
                                                     + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(inst_freq) / fs
    base = np.zeros(n)
    for i in range(1, config.n_harmonics + 1):
        base += np.sin(i * phase) / i
    am = 1.0 + am_depth * np.sin(2 * np.pi * am_freq * tt + rng.uniform(0, 2 * np.pi))
    raw = am * base
    target_pp = rng.uniform(0.08, 0.14)
    span = float(raw.max() - raw.min())
    fwave = (raw * (target_pp / span) if span > 0 else raw) * af_mask

    noise = _make_noise(rng, n, fs, config.noise_rms_uv, duration)

    ecg = ventricular + pwave + fwave + noise
    return SimRecord(
        config=config, record_id=record_id, ecg=ecg, true_fwave=fwave,
        true_r_peaks=r_peaks, af_mask=af_mask,
        components={"ventricular": ventricular, "pwave": pwave,
                    "fwave": fwave, "noise": noise},
        age=int(rng.integers(35, 90)), sex="F" if rng.random() < 0.5 else "M")


def _make_noise(rng: np.random.Generator, n: int, fs: float,
                noise_rms_uv: float, duration: float) -> np.ndarray:
    """Baseline wander + high-passed white noise + electrode transients,
    scaled so the summed RMS equals ``noise_rms_uv`` exactly."""
    if noise_rms_uv <= 0:
        return np.zeros(n)
    sos_lp = sps.butter(2, 0.5, btype="lowpass", fs=fs, output="sos")
    wander = sps.sosfiltfilt(sos_lp, rng.standard_normal(n))
    wander /= np.sqrt(np.mean(wander ** 2))
    sos_hp = sps.butter(2, 5.0, btype="highpass", fs=fs, output="sos")
    white = sps.sosfiltfilt(sos_hp, rng.standard_normal(n))
    white /= np.sqrt(np.mean(white ** 2))

    transients = np.zeros(n)
    for _ in range(rng.poisson(duration / 60.0)):
        onset = int(rng.integers(0, n))
        tau = rng.uniform(0.3, 0.8)
        length = min(n - onset, round(5 * tau * fs))
        if length <= 1:
            continue
        step = rng.choice((-1.0, 1.0)) * rng.uniform(1.0, 3.0)
        decay = step * np.exp(-np.arange(length) / (tau * fs))
        transients[onset:onset + length] += decay
    if np.any(transients):
        smooth = sps.windows.gaussian(round(0.06 * fs) | 1, std=0.03 * fs)
        transients = np.convolve(transients, smooth / smooth.sum(), mode="same")
        transients /= np.sqrt(np.mean(transients ** 2))

    mix = np.sqrt(0.45) * wander + np.sqrt(0.45) * white + np.sqrt(0.10) * transients
    mix /= np.sqrt(np.mean(mix ** 2))
    return mix * noise_rms_uv * MV_PER_UV


def plan_dataset(n_records: int, master_seed: int,
                 ) -> list[tuple[str, int, float, float]]:
    """Deterministic per-record draws: (record_id, seed, af_burden, f_wave_hz).

    AF burden is uniform on [0, 1] and the f-wave fundamental uniform on
    [4.5, 8.5] Hz, so the dataset spans balanced and one-sided records.
    """
    master = np.random.default_rng(master_seed)
    plan = []
    for i in range(n_records):
        seed = int(master.integers(0, 2 ** 63 - 1))
        burden = float(master.uniform())
        f0 = float(master.uniform(4.5, 8.5))
        plan.append((f"sim{i:04d}", seed, burden, f0))
    return plan


def generate_dataset(n_records: int, noise_rms_uv: float, master_seed: int,
                     duration_sec: float = 300.0, fs: float = 200.0) -> list[SimRecord]:
    """Simulate a dataset of records with per-record burden, f0 and seed."""
    if n_records < 1:
        raise SimulationError("n_records must be at least 1")
    out = []
    for record_id, seed, burden, f0 in plan_dataset(n_records, master_seed):
        cfg = SimConfig(fs=fs, duration_sec=duration_sec, af_burden=burden,
                        noise_rms_uv=noise_rms_uv, f_wave_hz=f0, seed=seed)
        out.append(simulate_record(cfg, record_id=record_id))
    return out


def rms_error(extracted: FwaveSignal, truth: SimRecord) -> tuple[float, float]:
    """RMS extraction error inside and outside QRS intervals, in microvolts.

    Errors are evaluated on AF samples only (the f-wave is zero elsewhere):
    inside means within +/- 90 ms of a true R peak.  Returns NaN for an
    empty side.

    Raises:
        NoAfSamplesError: the window contains no AF samples.
        ValueError: length mismatch between extraction and truth.
    """
    if len(extracted.fwave) != truth.n_samples:
        raise ValueError(
            f"extracted window of {len(extracted.fwave)} samples does not match "
            f"truth of {truth.n_samples}")
    af = truth.af_mask
    if not np.any(af):
        raise NoAfSamplesError("window contains no AF samples")
    half = round(QRS_HALF_SEC * truth.fs)
    near_r = np.zeros(truth.n_samples, dtype=bool)
    for r in truth.true_r_peaks:
        near_r[max(0, r - half):min(truth.n_samples, r + half + 1)] = True
    err = extracted.fwave - truth.true_fwave

    def _rms(mask: np.ndarray) -> float:
        if not np.any(mask):
            return float("nan")
        return float(np.sqrt(np.mean(err[mask] ** 2)) / MV_PER_UV)

    return _rms(af & near_r), _rms(af & ~near_r)
