"""On-disk ECG record format, windowing, and window exclusion rules.

A record is a directory with:

* ``signal.csv`` -- first line ``fs=<Hz>``, second line comma-separated lead
  names, then one row of comma-separated mV values per sample; or
  ``signal.f32`` (little-endian float32, samples interleaved across leads)
  plus ``signal.meta.json`` describing ``fs``, ``leads`` and ``n_samples``.
* ``annotations.json`` -- list of ``{"start", "end", "label"}`` rhythm
  intervals in sample units, end-exclusive, labels AF / AFL / OTHER.
* ``meta.json`` -- optional ``{"age": int|null, "sex": "F"|"M"|null}``.

Unannotated stretches are treated as OTHER rhythm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fwavebench.qrs import QrsAnnotations

WINDOW_SEC = 60
MIN_QRS_PER_WINDOW = 10
MIN_BSQI = 0.8

LABEL_AF = "AF"
LABEL_NON_AF = "NON_AF"
RHYTHM_LABELS = ("AF", "AFL", "OTHER")

STATUS_INCLUDED = "INCLUDED"
STATUS_EXCLUDED = "EXCLUDED"

# Exclusion reasons, listed in priority order: when several apply, the
# earliest in this tuple wins.
REASON_MIXED = "MIXED_RHYTHM"
REASON_AFL = "AFL"
REASON_TOO_FEW_QRS = "TOO_FEW_QRS"
REASON_LOW_BSQI = "LOW_BSQI"
EXCLUSION_REASONS = (REASON_MIXED, REASON_AFL, REASON_TOO_FEW_QRS, REASON_LOW_BSQI)


class RecordError(Exception):
    """Base class for record loading problems."""


class MissingFileError(RecordError):
    """A required file is absent from the record directory."""


class MalformedFileError(RecordError):
    """A record file exists but cannot be parsed."""


class AnnotationRangeError(RecordError):
    """A rhythm interval lies outside the signal or is ill-ordered."""


class LeadLengthError(RecordError):
    """Declared lead count/length does not match the stored samples."""


@dataclass(frozen=True)
class RhythmInterval:
    """Half-open annotated interval ``[start, end)`` in sample units."""

    start: int
    end: int
    label: str


@dataclass(frozen=True)
class RecordMeta:
    """Lightweight per-record demographics used by the stats report."""

    record_id: str
    age: int | None = None
    sex: str | None = None


@dataclass(frozen=True)
class EcgRecord:
    """A multi-lead ECG with rhythm annotations and optional demographics.

    ``signals`` has shape (n_leads, n_samples) in mV; rows follow
    ``lead_names`` order.
    """

    record_id: str
    fs: float
    lead_names: tuple[str, ...]
    signals: np.ndarray
    intervals: tuple[RhythmInterval, ...] = ()
    age: int | None = None
    sex: str | None = None

    def __post_init__(self) -> None:
        sig = np.atleast_2d(np.asarray(self.signals, dtype=float))
        object.__setattr__(self, "signals", sig)
        object.__setattr__(self, "lead_names", tuple(self.lead_names))
        object.__setattr__(self, "intervals", tuple(self.intervals))
        if self.fs <= 0:
            raise MalformedFileError(f"fs must be positive, got {self.fs}")
        if sig.shape[0] != len(self.lead_names):
            raise LeadLengthError(
                f"{sig.shape[0]} signal rows for {len(self.lead_names)} lead names")
        n = sig.shape[1]
        prev_end = 0
        for iv in self.intervals:
            if iv.label not in RHYTHM_LABELS:
                raise MalformedFileError(f"unknown rhythm label {iv.label!r}")
            if not (0 <= iv.start < iv.end <= n):
                raise AnnotationRangeError(
                    f"interval [{iv.start}, {iv.end}) outside signal of {n} samples")
            if iv.start < prev_end:
                raise AnnotationRangeError("rhythm intervals overlap")
            prev_end = iv.end

    @property
    def n_samples(self) -> int:
        return int(self.signals.shape[1])

    def lead(self, name: str) -> np.ndarray:
        try:
            return self.signals[self.lead_names.index(name)]
        except ValueError:
            raise KeyError(f"record {self.record_id} has no lead {name!r}") from None

    def duration_sec(self) -> float:
        return self.n_samples / self.fs


@dataclass(frozen=True)
class Window:
    """One non-overlapping 60 s analysis window of a single lead."""

    record_id: str
    lead_name: str
    index: int
    start: int
    length: int
    label: str | None          # AF / NON_AF, None when rhythm is mixed
    status: str = STATUS_INCLUDED
    exclusion_reason: str | None = None
    overlaps_afl: bool = False

    def __post_init__(self) -> None:
        if (self.status == STATUS_EXCLUDED) != (self.exclusion_reason is not None):
            raise ValueError("excluded windows carry exactly one reason")
        if self.exclusion_reason is not None and self.exclusion_reason not in EXCLUSION_REASONS:
            raise ValueError(f"unknown exclusion reason {self.exclusion_reason!r}")

    @property
    def stop(self) -> int:
        return self.start + self.length


# ---------------------------------------------------------------------------
# Loading and writing
# ---------------------------------------------------------------------------

def _parse_signal_csv(path: Path) -> tuple[float, tuple[str, ...], np.ndarray]:
    text = path.read_text()
    lines = text.splitlines()
    if len(lines) < 3:
        raise MalformedFileError(f"{path}: expected fs line, lead names and samples")
    if not lines[0].startswith("fs="):
        raise MalformedFileError(f"{path}: first line must be 'fs=<Hz>'")
    try:
        fs = float(lines[0][3:])
    except ValueError as exc:
        raise MalformedFileError(f"{path}: bad sampling rate {lines[0]!r}") from exc
    leads = tuple(name.strip() for name in lines[1].split(","))
    if any(not name for name in leads):
        raise MalformedFileError(f"{path}: empty lead name")
    rows = []
    for ln, line in enumerate(lines[2:], start=3):
        parts = line.split(",")
        if len(parts) != len(leads):
            raise LeadLengthError(
                f"{path}:{ln}: {len(parts)} values for {len(leads)} leads")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise MalformedFileError(f"{path}:{ln}: non-numeric sample") from exc
    if not rows:
        raise MalformedFileError(f"{path}: no samples")
    return fs, leads, np.array(rows, dtype=float).T


def _parse_signal_f32(bin_path: Path, desc_path: Path) -> tuple[float, tuple[str, ...], np.ndarray]:
    try:
        desc = json.loads(desc_path.read_text())
        fs = float(desc["fs"])
        leads = tuple(str(name) for name in desc["leads"])
        n_samples = int(desc["n_samples"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{desc_path}: bad signal descriptor: {exc}") from exc
    raw = np.fromfile(bin_path, dtype="<f4")
    if raw.size != n_samples * len(leads):
        raise LeadLengthError(
            f"{bin_path}: {raw.size} samples stored, descriptor promises "
            f"{n_samples} x {len(leads)}")
    if n_samples == 0:
        raise MalformedFileError(f"{bin_path}: no samples")
    return fs, leads, raw.astype(float).reshape(n_samples, len(leads)).T


def _parse_annotations(path: Path) -> tuple[RhythmInterval, ...]:
    if not path.exists():
        return ()
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise MalformedFileError(f"{path}: expected a list of intervals")
    intervals = []
    for entry in entries:
        try:
            intervals.append(RhythmInterval(int(entry["start"]), int(entry["end"]),
                                            str(entry["label"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFileError(f"{path}: bad interval {entry!r}") from exc
    intervals.sort(key=lambda iv: iv.start)
    return tuple(intervals)


def load_record(path: str | Path) -> EcgRecord:
    """Load one record directory; raises a RecordError subclass on problems."""
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"record directory {path} does not exist")
    csv_path = path / "signal.csv"
    f32_path = path / "signal.f32"
    if csv_path.exists():
        fs, leads, signals = _parse_signal_csv(csv_path)
    elif f32_path.exists():
        desc_path = path / "signal.meta.json"
        if not desc_path.exists():
            raise MissingFileError(f"{f32_path} present but {desc_path} missing")
        fs, leads, signals = _parse_signal_f32(f32_path, desc_path)
    else:
        raise MissingFileError(f"{path}: neither signal.csv nor signal.f32 found")

    intervals = _parse_annotations(path / "annotations.json")
    age = sex = None
    meta_path = path / "meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise MalformedFileError(f"{meta_path}: invalid JSON: {exc}") from exc
        age = meta.get("age")
        sex = meta.get("sex")
        if age is not None:
            age = int(age)
        if sex is not None and sex not in ("F", "M"):
            raise MalformedFileError(f"{meta_path}: sex must be 'F', 'M' or null")
    return EcgRecord(record_id=path.name, fs=fs, lead_names=leads, signals=signals,
                     intervals=intervals, age=age, sex=sex)


def load_record_meta(path: str | Path) -> RecordMeta:
    """Read only meta.json of a record directory (cheap demographics scan)."""
    path = Path(path)
    age = sex = None
    meta_path = path / "meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
            age = meta.get("age")
            sex = meta.get("sex")
            if age is not None:
                age = int(age)
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise MalformedFileError(f"{meta_path}: {exc}") from exc
    return RecordMeta(record_id=path.name, age=age, sex=sex)


def _format_float(value: float) -> str:
    return repr(float(value))


def write_record(record: EcgRecord, path: str | Path, signal_format: str = "csv") -> Path:
    """Write a record directory in canonical form.

    Canonical CSV uses ``repr`` float formatting, so loading a written record
    and writing it again reproduces the files byte for byte.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if signal_format == "csv":
        lines = [f"fs={_format_float(record.fs)}", ",".join(record.lead_names)]
        cols = record.signals.T
        for row in cols:
            lines.append(",".join(_format_float(v) for v in row))
        (path / "signal.csv").write_text("\n".join(lines) + "\n")
    elif signal_format == "f32":
        record.signals.T.astype("<f4").tofile(path / "signal.f32")
        desc = {"fs": record.fs, "leads": list(record.lead_names),
                "n_samples": record.n_samples}
        (path / "signal.meta.json").write_text(
            json.dumps(desc, indent=2, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown signal format {signal_format!r}")

    annotations = [{"start": iv.start, "end": iv.end, "label": iv.label}
                   for iv in record.intervals]
    (path / "annotations.json").write_text(
        json.dumps(annotations, indent=2, sort_keys=True) + "\n")
    (path / "meta.json").write_text(
        json.dumps({"age": record.age, "sex": record.sex},
                   indent=2, sort_keys=True) + "\n")
    return path


def list_record_dirs(dataset_dir: str | Path) -> list[Path]:
    """Record subdirectories of a dataset directory, sorted by name."""
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise MissingFileError(f"dataset directory {dataset_dir} does not exist")
    dirs = [p for p in sorted(dataset_dir.iterdir())
            if p.is_dir() and ((p / "signal.csv").exists() or (p / "signal.f32").exists())]
    if not dirs:
        raise MissingFileError(f"{dataset_dir} contains no record directories")
    return dirs


# ---------------------------------------------------------------------------
# Windowing and exclusions
# ---------------------------------------------------------------------------

def _af_sample_mask(record: EcgRecord) -> np.ndarray:
    mask = np.zeros(record.n_samples, dtype=bool)
    for iv in record.intervals:
        if iv.label == "AF":
            mask[iv.start:iv.end] = True
    return mask


def _afl_sample_mask(record: EcgRecord) -> np.ndarray:
    mask = np.zeros(record.n_samples, dtype=bool)
    for iv in record.intervals:
        if iv.label == "AFL":
            mask[iv.start:iv.end] = True
    return mask


def segment_windows(record: EcgRecord, lead_name: str) -> list[Window]:
    """Tile one lead into non-overlapping 60 s windows with rhythm labels.

    A window is labelled AF when every sample lies in an AF interval and
    NON_AF when none does; windows mixing the two are excluded outright as
    MIXED_RHYTHM.  Overlap with an AFL interval is recorded for the
    quality-control pass.  A trailing partial window is dropped.
    """
    n_win = int(record.fs * WINDOW_SEC)
    if n_win <= 0:
        raise ValueError("window shorter than one sample")
    record.lead(lead_name)  # validates the lead exists
    af = _af_sample_mask(record)
    afl = _afl_sample_mask(record)
    windows = []
    for idx in range(record.n_samples // n_win):
        start = idx * n_win
        sl = slice(start, start + n_win)
        n_af = int(af[sl].sum())
        if n_af == n_win:
            label: str | None = LABEL_AF
        elif n_af == 0:
            label = LABEL_NON_AF
        else:
            label = None
        mixed = label is None
        windows.append(Window(
            record_id=record.record_id, lead_name=lead_name, index=idx,
            start=start, length=n_win, label=label,
            status=STATUS_EXCLUDED if mixed else STATUS_INCLUDED,
            exclusion_reason=REASON_MIXED if mixed else None,
            overlaps_afl=bool(afl[sl].any())))
    return windows


def apply_exclusions(window: Window, qrs: QrsAnnotations, bsqi: float) -> Window:
    """Final include/exclude decision for one window.

    Checks run in fixed priority order -- MIXED_RHYTHM, AFL, TOO_FEW_QRS
    (fewer than 10 detections), LOW_BSQI (below 0.8) -- and the first failing
    check becomes the single recorded reason.  ``qrs`` must contain only
    detections inside the window.
    """
    if window.status == STATUS_EXCLUDED:   # MIXED_RHYTHM, decided at segmentation
        return window
    reason = None
    if window.overlaps_afl:
        reason = REASON_AFL
    elif len(qrs) < MIN_QRS_PER_WINDOW:
        reason = REASON_TOO_FEW_QRS
    elif bsqi < MIN_BSQI:
        reason = REASON_LOW_BSQI
    if reason is None:
        return window
    return replace(window, status=STATUS_EXCLUDED, exclusion_reason=reason)
