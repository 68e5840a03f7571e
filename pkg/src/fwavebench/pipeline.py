"""End-to-end benchmark pipeline: records -> features -> ranking -> reports.

All outputs are machine-readable (JSON/CSV) and deterministic: manifests echo
the configuration and derived seeds, contain no timestamps, and repeated runs
with the same configuration produce byte-identical files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from fwavebench import __version__
from fwavebench.extraction import (EXTRACTORS, ExtractionParams, METHODS,
                                   build_beat_matrix)
from fwavebench.features import FEATURE_NAMES, featurize_window
from fwavebench.preprocess import FilterSpec, preprocess_lead
from fwavebench.qrs import QrsAnnotations, compute_bsqi, detect_qrs, detect_qrs_secondary
from fwavebench.ranking import (DEFAULT_GRID, MethodScore, bootstrap_auroc,
                                feature_matrix, grid_search_cv, hyperparameter_grid,
                                mann_whitney_u, rank_methods, save_forest,
                                split_train_test, stratify_age, train_forest)
from fwavebench.records import (EXCLUSION_REASONS, STATUS_INCLUDED, Window,
                                apply_exclusions, list_record_dirs, load_record,
                                load_record_meta, segment_windows)
from fwavebench.simulate import NoAfSamplesError, rms_error

log = logging.getLogger("fwavebench")

FEATURE_COLUMNS = ("record_id", "lead", "window_idx", "method", "label",
                   *FEATURE_NAMES)
AGE_GROUP_LABELS = ("<60", "60-74", ">=75")


class ConfigError(ValueError):
    """Raised for an invalid or unreadable benchmark configuration."""


class PipelineError(RuntimeError):
    """Raised when a pipeline stage fails; the message names the locus."""


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark run configuration (see README for the JSON schema)."""

    dataset: str
    output_dir: str
    leads: tuple[str, ...] | None = None
    methods: tuple[str, ...] = METHODS
    filter_spec: FilterSpec = field(default_factory=FilterSpec)
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    welch_segment_len: int = 1024
    rf_grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))
    train_ratio: float = 0.8
    cv_folds: int = 5
    n_bootstrap: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.methods:
            raise ConfigError("at least one extraction method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; "
                              f"choose from {list(METHODS)}")
        if self.welch_segment_len < 8:
            raise ConfigError("welch_segment_len must be >= 8")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError("train_ratio must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if self.n_bootstrap < 1:
            raise ConfigError("n_bootstrap must be >= 1")
        hyperparameter_grid(self.rf_grid)  # validates the grid spec

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "leads": list(self.leads) if self.leads is not None else None,
            "methods": list(self.methods),
            "filter": {"low_cutoff": self.filter_spec.low_cutoff,
                       "high_cutoff": self.filter_spec.high_cutoff,
                       "notch_freq": self.filter_spec.notch_freq,
                       "order": self.filter_spec.order},
            "extraction": {"pre_r_sec": self.extraction.pre_r_sec,
                           "post_r_sec": self.extraction.post_r_sec,
                           "variance_threshold": self.extraction.variance_threshold,
                           "max_components": self.extraction.max_components},
            "welch_segment_len": self.welch_segment_len,
            "rf_grid": {k: list(v) for k, v in self.rf_grid.items()},
            "train_ratio": self.train_ratio,
            "cv_folds": self.cv_folds,
            "n_bootstrap": self.n_bootstrap,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchConfig":
        known = {"dataset", "output_dir", "leads", "methods", "filter",
                 "extraction", "welch_segment_len", "rf_grid", "train_ratio",
                 "cv_folds", "n_bootstrap", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("dataset", "output_dir"):
            if key not in raw:
                raise ConfigError(f"config key {key!r} is required")
        try:
            filter_spec = FilterSpec(**raw.get("filter", {}))
            extraction = ExtractionParams(**raw.get("extraction", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        grid = raw.get("rf_grid", dict(DEFAULT_GRID))
        try:
            return cls(
                dataset=str(raw["dataset"]),
                output_dir=str(raw["output_dir"]),
                leads=tuple(raw["leads"]) if raw.get("leads") else None,
                methods=tuple(raw.get("methods", METHODS)),
                filter_spec=filter_spec,
                extraction=extraction,
                welch_segment_len=int(raw.get("welch_segment_len", 1024)),
                rf_grid=grid,
                train_ratio=float(raw.get("train_ratio", 0.8)),
                cv_folds=int(raw.get("cv_folds", 5)),
                n_bootstrap=int(raw.get("n_bootstrap", 100)),
                seed=int(raw.get("seed", 0)),
            )
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "BenchConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(raw)


# ---------------------------------------------------------------------------
# Ground truth for simulated records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruthSlice:
    """Per-window ground truth reconstructed from a truth.csv file."""

    true_fwave: np.ndarray
    af_mask: np.ndarray
    true_r_peaks: np.ndarray
    fs: float

    @property
    def n_samples(self) -> int:
        return int(len(self.true_fwave))

    def slice(self, start: int, stop: int) -> "TruthSlice":
        keep = (self.true_r_peaks >= start) & (self.true_r_peaks < stop)
        return TruthSlice(true_fwave=self.true_fwave[start:stop],
                          af_mask=self.af_mask[start:stop],
                          true_r_peaks=self.true_r_peaks[keep] - start,
                          fs=self.fs)


def load_truth(record_dir: Path, fs: float) -> TruthSlice | None:
    """Load truth.csv (written by the simulator) if present."""
    path = record_dir / "truth.csv"
    if not path.exists():
        return None
    frame = pd.read_csv(path)
    return TruthSlice(
        true_fwave=frame["true_fwave"].to_numpy(dtype=float),
        af_mask=frame["af_mask"].to_numpy(dtype=bool),
        true_r_peaks=np.flatnonzero(frame["is_r_peak"].to_numpy(dtype=int)),
        fs=fs)


def write_truth(path: Path, true_fwave: np.ndarray, af_mask: np.ndarray,
                r_peaks: np.ndarray) -> None:
    is_r = np.zeros(len(true_fwave), dtype=int)
    is_r[r_peaks] = 1
    frame = pd.DataFrame({"true_fwave": true_fwave,
                          "af_mask": af_mask.astype(int),
                          "is_r_peak": is_r})
    frame.to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Stage 1: records -> windows -> features
# ---------------------------------------------------------------------------

def _window_qrs(qrs: QrsAnnotations, window: Window) -> QrsAnnotations:
    peaks = qrs.r_peaks
    keep = (peaks >= window.start) & (peaks < window.stop)
    return QrsAnnotations(peaks[keep] - window.start, qrs.fs)


@dataclass
class ExtractionResult:
    """Accumulated per-window outputs of the extraction stage."""

    features: pd.DataFrame
    windows: list[Window]
    census: pd.DataFrame
    rms_rows: pd.DataFrame | None


def process_dataset(config: BenchConfig) -> ExtractionResult:
    """Run filtering, detection, QC and extraction over a whole dataset."""
    record_dirs = list_record_dirs(config.dataset)
    feature_rows: list[dict] = []
    window_log: list[Window] = []
    rms_rows: list[dict] = []
    any_truth = False

    for rec_dir in record_dirs:
        try:
            record = load_record(rec_dir)
            truth = load_truth(rec_dir, record.fs)
            any_truth = any_truth or truth is not None
            lead_names = config.leads if config.leads is not None else record.lead_names
            for lead in lead_names:
                raw = record.lead(lead)
                filtered = preprocess_lead(raw, record.fs, config.filter_spec)
                qrs = detect_qrs(filtered, record.fs)
                qrs_b = detect_qrs_secondary(filtered, record.fs)
                for window in segment_windows(record, lead):
                    wqrs = _window_qrs(qrs, window)
                    wqrs_b = _window_qrs(qrs_b, window)
                    bsqi = compute_bsqi(wqrs, wqrs_b)
                    window = apply_exclusions(window, wqrs, bsqi)
                    window_log.append(window)
                    if window.status != STATUS_INCLUDED:
                        continue
                    seg = filtered[window.start:window.stop]
                    wtruth = truth.slice(window.start, window.stop) if truth else None
                    bm = build_beat_matrix(seg, wqrs, config.extraction)
                    for method in config.methods:
                        fw = EXTRACTORS[method](seg, wqrs, beat_matrix=bm,
                                                params=config.extraction)
                        vec = featurize_window(fw, window,
                                               segment_len=config.welch_segment_len)
                        feature_rows.append({
                            "record_id": vec.record_id, "lead": vec.lead,
                            "window_idx": vec.window_idx, "method": vec.method,
                            "label": vec.label, "a_pp": vec.a_pp, "daf": vec.daf,
                            "p_daf": vec.p_daf, "p_in": vec.p_in,
                            "p_out": vec.p_out})
                        if wtruth is not None and np.any(wtruth.af_mask):
                            try:
                                inside, outside = rms_error(fw, wtruth)
                            except NoAfSamplesError:
                                continue
                            rms_rows.append({
                                "record_id": window.record_id, "lead": lead,
                                "window_idx": window.index, "method": method,
                                "rms_inside_uv": inside,
                                "rms_outside_uv": outside})
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"record {rec_dir.name}: {exc}") from exc

    features = pd.DataFrame(feature_rows, columns=list(FEATURE_COLUMNS))
    census = build_census(window_log)
    rms = pd.DataFrame(rms_rows) if any_truth and rms_rows else None
    return ExtractionResult(features=features, windows=window_log,
                            census=census, rms_rows=rms)


def build_census(windows: list[Window]) -> pd.DataFrame:
    """Per-lead counts of included windows and each exclusion reason."""
    rows: dict[str, dict[str, int]] = {}
    for window in windows:
        entry = rows.setdefault(window.lead_name, {
            "included": 0, **{reason.lower(): 0 for reason in EXCLUSION_REASONS}})
        if window.status == STATUS_INCLUDED:
            entry["included"] += 1
        else:
            entry[window.exclusion_reason.lower()] += 1
    table = []
    for lead in sorted(rows):
        entry = rows[lead]
        table.append({"lead": lead, **entry,
                      "total": sum(entry.values())})
    return pd.DataFrame(table, columns=["lead", "included",
                                        *[r.lower() for r in EXCLUSION_REASONS],
                                        "total"])


# ---------------------------------------------------------------------------
# Stage 2: features -> classifier scores -> ranking
# ---------------------------------------------------------------------------

def evaluate_methods(features: pd.DataFrame, config: BenchConfig,
                     output_dir: Path | None = None) -> tuple[list[MethodScore], list[dict]]:
    """Train, tune and bootstrap-score one forest per (method, lead)."""
    scores: list[MethodScore] = []
    details: list[dict] = []
    for method in sorted(config.methods):
        m_table = features[features["method"] == method]
        for lead in sorted(m_table["lead"].unique()):
            table = m_table[m_table["lead"] == lead]
            try:
                train, test = split_train_test(table, config.train_ratio, config.seed)
                best = grid_search_cv(train, config.rf_grid, config.cv_folds,
                                      config.seed)
                X_tr, y_tr = feature_matrix(train)
                model = train_forest(X_tr, y_tr, best, config.seed)
                median, lo, hi = bootstrap_auroc(model, test, config.n_bootstrap,
                                                 config.seed)
            except Exception as exc:
                raise PipelineError(f"method {method} lead {lead}: {exc}") from exc
            if output_dir is not None:
                model_dir = output_dir / "models"
                model_dir.mkdir(exist_ok=True)
                save_forest(model, model_dir / f"{method}_{lead}.json")
            scores.append(MethodScore(method=method, lead=lead,
                                      median_auroc=median, ci_low=lo, ci_high=hi))
            details.append({"method": method, "lead": lead,
                            "median_auroc": median, "ci_low": lo, "ci_high": hi,
                            "best_hyperparams": best.to_dict(),
                            "n_train_windows": int(len(train)),
                            "n_test_windows": int(len(test))})
            log.info("scored %s on lead %s: median AUROC %.3f [%.3f, %.3f]",
                     method, lead, median, lo, hi)
    return scores, details


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_benchmark(config: BenchConfig) -> dict:
    """Execute the full benchmark and write all artifacts.

    Returns the report dictionary.  Outputs: features.csv, census.csv,
    report.json, report.csv, manifest.json, models/*.json, and (when ground
    truth is available) rms_error.csv and rms_error_windows.csv.
    """
    record_dirs = list_record_dirs(config.dataset)   # validates before any output
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    log.info("processing %d records from %s", len(record_dirs), config.dataset)
    result = process_dataset(config)
    result.features.to_csv(out / "features.csv", index=False)
    result.census.to_csv(out / "census.csv", index=False)

    rms_summary = None
    if result.rms_rows is not None:
        result.rms_rows.to_csv(out / "rms_error_windows.csv", index=False)
        rms_summary = (result.rms_rows
                       .groupby("method", as_index=False)
                       .agg(n_windows=("method", "size"),
                            mean_inside_uv=("rms_inside_uv", "mean"),
                            mean_outside_uv=("rms_outside_uv", "mean")))
        rms_summary.to_csv(out / "rms_error.csv", index=False)

    if result.features.empty:
        raise PipelineError("no windows survived quality control; nothing to rank")

    scores, details = evaluate_methods(result.features, config, out)
    ranking = rank_methods(scores)

    report = {
        "version": __version__,
        "config": config.to_dict(),
        "methods": details,
        "ranking": ranking.to_dict(),
        "n_feature_rows": int(len(result.features)),
        "census": result.census.to_dict(orient="records"),
    }
    if rms_summary is not None:
        report["rms_error"] = rms_summary.to_dict(orient="records")
    _write_json(out / "report.json", report)

    rows = []
    for lead, entries in ranking.per_lead.items():
        for entry in entries:
            rows.append({"lead": lead, **entry})
    report_csv = pd.DataFrame(rows, columns=["lead", "method", "median_auroc",
                                             "ci_low", "ci_high", "rank"])
    report_csv.sort_values(["lead", "rank", "method"]).to_csv(
        out / "report.csv", index=False)

    manifest = {
        "version": __version__,
        "config": config.to_dict(),
        "seed": config.seed,
        "n_records": len(record_dirs),
        "record_ids": [p.name for p in record_dirs],
    }
    _write_json(out / "manifest.json", manifest)
    log.info("benchmark complete; winner: %s", ranking.winner)
    return report


# ---------------------------------------------------------------------------
# Demographics statistics
# ---------------------------------------------------------------------------

def _quartiles(values: np.ndarray) -> tuple[float, float, float]:
    return (float(np.percentile(values, 25)), float(np.median(values)),
            float(np.percentile(values, 75)))


def run_stats(features_path: str | Path, dataset_dir: str | Path,
              output_dir: str | Path) -> dict:
    """Sex and age analyses of AF-window features.

    Produces ``stats_sex_pvalues.csv`` (per method and feature: Mann-Whitney
    U of female vs male values) and ``stats_boxplot.csv`` (plot-ready Q1 /
    median / Q3 per sex and age group).  Records with missing demographics
    are skipped for the affected grouping, with a warning.
    """
    features_path = Path(features_path)
    if not features_path.exists():
        raise ConfigError(f"feature table {features_path} does not exist")
    features = pd.read_csv(features_path)
    missing = set(FEATURE_COLUMNS) - set(features.columns)
    if missing:
        raise ConfigError(f"feature table lacks columns {sorted(missing)}")

    metas = {m.record_id: m
             for m in (load_record_meta(p) for p in list_record_dirs(dataset_dir))}
    af = features[features["label"] == "AF"].copy()
    af["age"] = af["record_id"].map(lambda r: getattr(metas.get(r), "age", None))
    af["sex"] = af["record_id"].map(lambda r: getattr(metas.get(r), "sex", None))

    n_no_sex = af.loc[af["sex"].isna(), "record_id"].nunique()
    n_no_age = af.loc[af["age"].isna(), "record_id"].nunique()
    if n_no_sex:
        log.warning("skipping %d records without sex in the sex analysis", n_no_sex)
    if n_no_age:
        log.warning("skipping %d records without age in the age analysis", n_no_age)

    pvalue_rows = []
    box_rows = []
    for method in sorted(af["method"].unique()):
        m_table = af[af["method"] == method]
        by_sex = {s: m_table[m_table["sex"] == s] for s in ("F", "M")}
        for feature in FEATURE_NAMES:
            f_vals = by_sex["F"][feature].dropna().to_numpy()
            m_vals = by_sex["M"][feature].dropna().to_numpy()
            if len(f_vals) and len(m_vals):
                u, p = mann_whitney_u(f_vals, m_vals)
            else:
                u, p = float("nan"), float("nan")
            pvalue_rows.append({"method": method, "feature": feature,
                                "n_f": len(f_vals), "n_m": len(m_vals),
                                "u": u, "p_value": p})
            for sex in ("F", "M"):
                vals = by_sex[sex][feature].dropna().to_numpy()
                if len(vals):
                    q1, med, q3 = _quartiles(vals)
                    box_rows.append({"grouping": "sex", "group": sex,
                                     "method": method, "feature": feature,
                                     "n": len(vals), "q1": q1, "median": med,
                                     "q3": q3})
        with_age = m_table[m_table["age"].notna()]
        groups = dict(zip(AGE_GROUP_LABELS,
                          stratify_age([row for row in with_age.itertuples()])))
        for name, rows_in_group in groups.items():
            if not rows_in_group:
                continue
            sub = pd.DataFrame(rows_in_group)
            for feature in FEATURE_NAMES:
                vals = sub[feature].dropna().to_numpy()
                if len(vals):
                    q1, med, q3 = _quartiles(vals)
                    box_rows.append({"grouping": "age", "group": name,
                                     "method": method, "feature": feature,
                                     "n": len(vals), "q1": q1, "median": med,
                                     "q3": q3})

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pvalues = pd.DataFrame(pvalue_rows, columns=["method", "feature", "n_f",
                                                 "n_m", "u", "p_value"])
    boxstats = pd.DataFrame(box_rows, columns=["grouping", "group", "method",
                                               "feature", "n", "q1", "median", "q3"])
    pvalues.to_csv(out / "stats_sex_pvalues.csv", index=False)
    boxstats.to_csv(out / "stats_boxplot.csv", index=False)
    return {"sex_pvalues": pvalue_rows, "boxplot": box_rows}


# ---------------------------------------------------------------------------
# Single-window extraction dump
# ---------------------------------------------------------------------------

def extract_window_csv(dataset_dir: str | Path, record_id: str, lead: str,
                       window_idx: int, methods: tuple[str, ...],
                       out_path: str | Path,
                       config: BenchConfig | None = None) -> Path:
    """Dump one window's filtered input and extracted f-waves as CSV."""
    filter_spec = config.filter_spec if config else FilterSpec()
    params = config.extraction if config else ExtractionParams()
    record = load_record(Path(dataset_dir) / record_id)
    filtered = preprocess_lead(record.lead(lead), record.fs, filter_spec)
    qrs = detect_qrs(filtered, record.fs)
    windows = segment_windows(record, lead)
    matches = [w for w in windows if w.index == window_idx]
    if not matches:
        raise PipelineError(f"record {record_id} lead {lead} has no window "
                            f"{window_idx} (found {len(windows)})")
    window = matches[0]
    seg = filtered[window.start:window.stop]
    wqrs = _window_qrs(qrs, window)
    bm = build_beat_matrix(seg, wqrs, params)
    columns = {"sample": np.arange(window.start, window.stop), "input": seg}
    for method in methods:
        fw = EXTRACTORS[method](seg, wqrs, beat_matrix=bm, params=params)
        columns[method] = fw.fwave
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(columns).to_csv(out_path, index=False)
    return out_path
