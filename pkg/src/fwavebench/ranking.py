"""Random-forest AF classification, method ranking, and rank statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestClassifier

from fwavebench.features import FEATURE_NAMES

LABEL_COLUMN = "label"
POSITIVE_LABEL = "AF"
RECORD_COLUMN = "record_id"

DEFAULT_GRID = {
    "n_estimators": (100, 200, 300, 1000),
    "max_depth": (1, 2, 3, 4, 5, 6),
    "max_features": (2, 6),
    "max_samples": (0.1, 0.3, 0.5, 0.7, 0.9),
}

FOREST_FORMAT_VERSION = 1

# Exact Mann-Whitney enumeration limits: the smaller sample must have at
# most this many observations and the subset count must stay tractable.
MW_EXACT_MAX_SMALL = 8
MW_EXACT_MAX_SUBSETS = 200_000

AGE_GROUP_EDGES = (60, 75)
AGE_GROUP_NAMES = ("<60", "60-74", ">=75")


class TooFewRecordsError(ValueError):
    """Raised when records cannot be stratified as requested."""


class SingleClassError(ValueError):
    """Raised when training data contains only one class."""


@dataclass(frozen=True)
class RfHyperparams:
    """One random-forest configuration from the search grid."""

    n_estimators: int
    max_depth: int
    max_features: int
    max_samples: float

    def __post_init__(self) -> None:
        if self.n_estimators < 1:
            raise ValueError(f"n_estimators must be >= 1, got {self.n_estimators}")
        if self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.max_features < 1:
            raise ValueError(f"max_features must be >= 1, got {self.max_features}")
        if not 0.0 < self.max_samples <= 1.0:
            raise ValueError(f"max_samples must lie in (0, 1], got {self.max_samples}")

    def to_dict(self) -> dict:
        return {"n_estimators": self.n_estimators, "max_depth": self.max_depth,
                "max_features": self.max_features, "max_samples": self.max_samples}


def hyperparameter_grid(grid: dict | None = None) -> list[RfHyperparams]:
    """Expand a grid specification into points, in deterministic order."""
    grid = dict(DEFAULT_GRID if grid is None else grid)
    points = [RfHyperparams(n, d, f, s)
              for n in sorted(grid["n_estimators"])
              for d in sorted(grid["max_depth"])
              for f in sorted(grid["max_features"])
              for s in sorted(grid["max_samples"])]
    if not points:
        raise ValueError("empty hyperparameter grid")
    return points


# ---------------------------------------------------------------------------
# Feature-table helpers
# ---------------------------------------------------------------------------

def feature_matrix(table: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    """Extract (X, y) from a feature table, dropping rows with missing values."""
    clean = table.dropna(subset=list(FEATURE_NAMES))
    X = clean.loc[:, list(FEATURE_NAMES)].to_numpy(dtype=float)
    y = (clean[LABEL_COLUMN] == POSITIVE_LABEL).to_numpy()
    return X, y


def _record_strata(table: pd.DataFrame) -> tuple[list[str], list[str]]:
    """Record ids split by whether the record contains any AF window."""
    has_af = table.groupby(RECORD_COLUMN)[LABEL_COLUMN].agg(
        lambda s: (s == POSITIVE_LABEL).any())
    af = sorted(has_af.index[has_af])
    non = sorted(has_af.index[~has_af])
    return af, non


def split_train_test(table: pd.DataFrame, train_ratio: float = 0.8,
                     seed: int = 0) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Record-level stratified train/test split of a feature table.

    Stratification is by record-level AF presence, so windows of one record
    never straddle the split and class proportions are preserved to within
    one record per stratum.

    Raises:
        TooFewRecordsError: fewer than two records in either stratum.
    """
    if not 0.0 < train_ratio < 1.0:
        raise ValueError(f"train_ratio must lie in (0, 1), got {train_ratio}")
    af, non = _record_strata(table)
    if len(af) < 2 or len(non) < 2:
        raise TooFewRecordsError(
            f"need >= 2 records per class to stratify, got {len(af)} with AF "
            f"and {len(non)} without")
    rng = np.random.default_rng(seed)
    test_ids: set[str] = set()
    for stratum in (af, non):
        shuffled = list(rng.permutation(stratum))
        n_test = max(1, round((1.0 - train_ratio) * len(stratum)))
        test_ids.update(shuffled[:n_test])
    in_test = table[RECORD_COLUMN].isin(test_ids)
    return table[~in_test].copy(), table[in_test].copy()


def _stratified_record_folds(table: pd.DataFrame, n_folds: int,
                             seed: int) -> list[set[str]]:
    """Deal records of each stratum round-robin into ``n_folds`` folds."""
    af, non = _record_strata(table)
    if len(af) < n_folds or len(non) < n_folds:
        raise TooFewRecordsError(
            f"need >= {n_folds} records per class for {n_folds}-fold CV, "
            f"got {len(af)} with AF and {len(non)} without")
    rng = np.random.default_rng(seed)
    folds: list[set[str]] = [set() for _ in range(n_folds)]
    for stratum in (af, non):
        for pos, rec in enumerate(rng.permutation(stratum)):
            folds[pos % n_folds].add(str(rec))
    return folds


# ---------------------------------------------------------------------------
# Forest training and scoring
# ---------------------------------------------------------------------------

@dataclass
class TrainedForest:
    """A fitted random forest plus the metadata needed to reuse it."""

    estimator: RandomForestClassifier
    hyperparams: RfHyperparams
    seed: int
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def predict_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        idx = list(self.estimator.classes_).index(True)
        return self.estimator.predict_proba(X)[:, idx]


@dataclass
class LoadedForest:
    """A forest reloaded from JSON; predicts by walking stored node arrays."""

    hyperparams: RfHyperparams
    seed: int
    feature_names: tuple[str, ...]
    trees: list[dict[str, np.ndarray]] = field(repr=False, default_factory=list)

    def predict_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            left, right = tree["children_left"], tree["children_right"]
            feature, threshold = tree["feature"], tree["threshold"]
            cur = np.zeros(X.shape[0], dtype=np.intp)
            while True:
                at_leaf = left[cur] < 0
                if at_leaf.all():
                    break
                go_left = X[np.arange(X.shape[0]), feature[cur]] <= threshold[cur]
                step = np.where(go_left, left[cur], right[cur])
                cur = np.where(at_leaf, cur, step)
            total += tree["node_frac"][cur]
        return total / len(self.trees)


def train_forest(X: np.ndarray, y: np.ndarray, hyperparams: RfHyperparams,
                 seed: int) -> TrainedForest:
    """Fit one random forest (Gini splits, bootstrap resampling).

    ``max_features`` is clamped to the actual feature count.

    Raises:
        SingleClassError: labels contain only one class.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(bool)
    if np.unique(y).size < 2:
        raise SingleClassError("training labels contain a single class")
    clf = RandomForestClassifier(
        n_estimators=hyperparams.n_estimators,
        max_depth=hyperparams.max_depth,
        max_features=min(hyperparams.max_features, X.shape[1]),
        max_samples=hyperparams.max_samples if hyperparams.max_samples < 1.0 else None,
        criterion="gini", bootstrap=True, n_jobs=1, random_state=seed)
    clf.fit(X, y)
    return TrainedForest(estimator=clf, hyperparams=hyperparams, seed=seed)


def predict_proba(model: TrainedForest | LoadedForest, X: np.ndarray) -> np.ndarray:
    """AF-class probability (mean of per-tree leaf class fractions)."""
    return model.predict_scores(X)


def save_forest(model: TrainedForest, path: str | Path) -> Path:
    """Serialise a trained forest to a versioned JSON file."""
    trees = []
    for est in model.estimator.estimators_:
        tree = est.tree_
        value = tree.value[:, 0, :]
        frac = value[:, -1] / np.maximum(value.sum(axis=1), 1e-300)
        if list(est.classes_) == [True]:       # degenerate single-class leaf
            frac = np.ones_like(frac)
        trees.append({
            "children_left": tree.children_left.tolist(),
            "children_right": tree.children_right.tolist(),
            "feature": tree.feature.tolist(),
            "threshold": tree.threshold.tolist(),
            "node_frac": frac.tolist(),
        })
    payload = {
        "format_version": FOREST_FORMAT_VERSION,
        "hyperparams": model.hyperparams.to_dict(),
        "seed": model.seed,
        "feature_names": list(model.feature_names),
        "trees": trees,
    }
    path = Path(path)
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")
    return path


def load_forest(path: str | Path) -> LoadedForest:
    """Reload a forest saved by :func:`save_forest`."""
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != FOREST_FORMAT_VERSION:
        raise ValueError(f"unsupported forest format version {version!r}")
    trees = []
    for entry in payload["trees"]:
        trees.append({
            "children_left": np.asarray(entry["children_left"], dtype=np.intp),
            "children_right": np.asarray(entry["children_right"], dtype=np.intp),
            "feature": np.asarray(entry["feature"], dtype=np.intp),
            "threshold": np.asarray(entry["threshold"], dtype=float),
            "node_frac": np.asarray(entry["node_frac"], dtype=float),
        })
    return LoadedForest(hyperparams=RfHyperparams(**payload["hyperparams"]),
                        seed=int(payload["seed"]),
                        feature_names=tuple(payload["feature_names"]),
                        trees=trees)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def _truncated_depth_scores(est, X: np.ndarray, max_depth: int) -> np.ndarray:
    """Class-1 fraction reached at every depth cap 0..max_depth, per row.

    A depth-limited Gini tree makes exactly the splits found in the top
    levels of a deeper tree, with leaf values equal to the class fractions
    at the truncated nodes, so one deep fit scores every shallower setting.
    """
    tree = est.tree_
    left, right = tree.children_left, tree.children_right
    feature, threshold = tree.feature, tree.threshold
    value = tree.value[:, 0, :]
    if value.shape[1] == 1:                    # single-class fold guard
        frac = np.full(value.shape[0], float(est.classes_[0]))
    else:
        frac = value[:, -1] / np.maximum(value.sum(axis=1), 1e-300)
    n = X.shape[0]
    rows = np.arange(n)
    cur = np.zeros(n, dtype=np.intp)
    out = np.empty((max_depth + 1, n))
    for depth in range(max_depth + 1):
        out[depth] = frac[cur]
        if depth < max_depth:
            at_leaf = left[cur] < 0
            go_left = X[rows, feature[cur]] <= threshold[cur]
            nxt = np.where(go_left, left[cur], right[cur])
            cur = np.where(at_leaf, cur, nxt)
    return out


def grid_search_cv(table: pd.DataFrame, grid: dict | None = None,
                   n_folds: int = 5, seed: int = 0) -> RfHyperparams:
    """Exhaustive grid search by stratified record-level cross-validation.

    Selects the point with the highest mean validation AUROC; ties prefer
    fewer estimators, then shallower depth.  Folds whose training or
    validation windows collapse to one class are skipped for all points
    alike.  To keep the exhaustive search affordable, points sharing
    ``max_features`` and ``max_samples`` are evaluated from a single deep,
    wide forest per fold: estimator-count prefixes and depth-truncated trees
    are themselves valid forests of the smaller settings.
    """
    points = hyperparameter_grid(grid)
    folds = _stratified_record_folds(table, n_folds, seed)
    clean = table.dropna(subset=list(FEATURE_NAMES))

    groups: dict[tuple[int, float], list[RfHyperparams]] = {}
    for hp in points:
        groups.setdefault((hp.max_features, hp.max_samples), []).append(hp)

    fold_data = []
    for val_ids in folds:
        in_val = clean[RECORD_COLUMN].isin(val_ids)
        X_tr, y_tr = feature_matrix(clean[~in_val])
        X_va, y_va = feature_matrix(clean[in_val])
        usable = (np.unique(y_tr).size == 2 and np.unique(y_va).size == 2
                  and len(y_va) > 0)
        fold_data.append((X_tr, y_tr, X_va, y_va, usable))
    if not any(usable for *_, usable in fold_data):
        raise SingleClassError("every fold is single-class; cannot cross-validate")

    scores: dict[RfHyperparams, list[float]] = {hp: [] for hp in points}
    for (max_feat, max_samp), members in sorted(groups.items()):
        n_list = sorted({hp.n_estimators for hp in members})
        d_max = max(hp.max_depth for hp in members)
        n_max = n_list[-1]
        for fold_idx, (X_tr, y_tr, X_va, y_va, usable) in enumerate(fold_data):
            if not usable:
                continue
            fold_seed = int(np.random.default_rng(
                (seed, fold_idx, max_feat, int(max_samp * 10))).integers(2 ** 31))
            clf = RandomForestClassifier(
                n_estimators=n_max, max_depth=d_max,
                max_features=min(max_feat, X_tr.shape[1]),
                max_samples=max_samp if max_samp < 1.0 else None,
                criterion="gini", bootstrap=True, n_jobs=1,
                random_state=fold_seed)
            clf.fit(X_tr, y_tr)

            running = np.zeros((d_max + 1, len(y_va)))
            checkpoints: dict[int, np.ndarray] = {}
            wanted = set(n_list)
            for i, est in enumerate(clf.estimators_, start=1):
                running += _truncated_depth_scores(est, X_va, d_max)
                if i in wanted:
                    checkpoints[i] = running / i
            for hp in members:
                sc = checkpoints[hp.n_estimators][hp.max_depth]
                scores[hp].append(compute_auroc(sc, y_va))

    best_hp, best_score = None, -np.inf
    for hp in sorted(points, key=lambda h: (h.n_estimators, h.max_depth,
                                            h.max_features, h.max_samples)):
        vals = scores[hp]
        if not vals:
            continue
        mean = float(np.mean(vals))
        if mean > best_score:
            best_hp, best_score = hp, mean
    if best_hp is None:
        raise SingleClassError("no grid point could be scored")
    return best_hp


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def compute_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUROC via the rank formulation; ties contribute one half.

    Raises:
        SingleClassError: labels contain only one class.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both classes present")
    ranks = _midranks(scores)
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def bootstrap_auroc(model: TrainedForest | LoadedForest, test_table: pd.DataFrame,
                    n_rounds: int = 100, seed: int = 0
                    ) -> tuple[float, float, float]:
    """Median AUROC with a 2.5-97.5 percentile CI over bootstrap resamples.

    Test windows are resampled with replacement; a resample missing one of
    the classes is redrawn from the same stream.
    """
    X, y = feature_matrix(test_table)
    if np.unique(y).size < 2:
        raise SingleClassError("test windows contain a single class")
    base_scores = predict_proba(model, X)
    rng = np.random.default_rng(seed)
    aurocs = []
    guard = 0
    while len(aurocs) < n_rounds:
        idx = rng.integers(0, len(y), len(y))
        if np.unique(y[idx]).size < 2:
            guard += 1
            if guard > 100 * n_rounds:
                raise SingleClassError("bootstrap resamples keep collapsing to one class")
            continue
        aurocs.append(compute_auroc(base_scores[idx], y[idx]))
    arr = np.array(aurocs)
    return (float(np.median(arr)),
            float(np.percentile(arr, 2.5)),
            float(np.percentile(arr, 97.5)))


# ---------------------------------------------------------------------------
# Method ranking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodScore:
    """Bootstrap summary of one (method, lead) pair."""

    method: str
    lead: str
    median_auroc: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class RankingReport:
    """Per-lead and overall method ranking by median AUROC."""

    per_lead: dict[str, list[dict]]
    overall: list[str]
    winner: str | None
    ties: dict[str, list[list[str]]]

    def to_dict(self) -> dict:
        return {"per_lead": self.per_lead, "overall": self.overall,
                "winner": self.winner, "ties": self.ties}


def rank_methods(scores: list[MethodScore]) -> RankingReport:
    """Rank methods by median AUROC within each lead and overall.

    Tied medians share an average rank and are reported explicitly.  The
    overall winner is the method that is (possibly jointly) best in every
    lead when exactly one such method exists; otherwise methods are ordered
    by mean rank across leads.
    """
    if not scores:
        raise ValueError("no scores to rank")
    leads = sorted({s.lead for s in scores})
    methods = sorted({s.method for s in scores})
    per_lead: dict[str, list[dict]] = {}
    ties: dict[str, list[list[str]]] = {}
    mean_ranks = {m: 0.0 for m in methods}

    for lead in leads:
        entries = sorted((s for s in scores if s.lead == lead),
                         key=lambda s: (-s.median_auroc, s.method))
        if {e.method for e in entries} != set(methods):
            raise ValueError(f"lead {lead} is missing some methods")
        medians = [e.median_auroc for e in entries]
        ranks = _midranks(np.array([-m for m in medians]))
        rows = []
        for entry, rank in zip(entries, ranks):
            rows.append({"method": entry.method, "median_auroc": entry.median_auroc,
                         "ci_low": entry.ci_low, "ci_high": entry.ci_high,
                         "rank": float(rank)})
            mean_ranks[entry.method] += float(rank) / len(leads)
        per_lead[lead] = rows
        lead_ties = []
        for med in sorted({m for m in medians if medians.count(m) > 1}, reverse=True):
            lead_ties.append(sorted(e.method for e in entries if e.median_auroc == med))
        ties[lead] = lead_ties

    best_everywhere = set(methods)
    for lead in leads:
        top = max(row["median_auroc"] for row in per_lead[lead])
        best_everywhere &= {row["method"] for row in per_lead[lead]
                            if row["median_auroc"] == top}
    overall = sorted(methods, key=lambda m: (mean_ranks[m], m))
    winner = next(iter(best_everywhere)) if len(best_everywhere) == 1 else overall[0]
    return RankingReport(per_lead=per_lead, overall=overall, winner=winner, ties=ties)


# ---------------------------------------------------------------------------
# Rank-sum test and demographics
# ---------------------------------------------------------------------------

def mann_whitney_u(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test; returns (U of ``a``, p-value).

    Ties count one half toward U.  Small samples (at most 8 in the smaller
    group and a tractable subset count) are evaluated exactly by enumerating
    group assignments; larger samples use the normal approximation with tie
    correction and continuity correction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n_a, n_b = len(a), len(b)
    if n_a == 0 or n_b == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)
    u_lo = min(u, n_a * n_b - u)

    n = n_a + n_b
    k = min(n_a, n_b)
    if k <= MW_EXACT_MAX_SMALL and math.comb(n, k) <= MW_EXACT_MAX_SUBSETS:
        # Work in doubled-rank integers so half ranks compare exactly.  The
        # subset distribution belongs to the smaller group; because the two
        # tails swap when groups swap, tail counts at min(u, n_a*n_b - u)
        # give the same two-sided mass either way.
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        base = k * (k + 1)                     # doubled k(k+1)/2
        u2 = np.fromiter(
            (ranks2[list(comb)].sum() - base for comb in combinations(range(n), k)),
            dtype=np.int64)
        u2_lo = int(round(2 * u_lo))
        nm2 = 2 * n_a * n_b
        below = int((u2 <= u2_lo).sum())
        above = int((u2 >= nm2 - u2_lo).sum())
        return u, min(1.0, (below + above) / len(u2))

    mean = n_a * n_b / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts ** 3 - tie_counts).sum()) / (n * (n - 1)))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    diff = u - mean
    if abs(diff) <= 0.5:
        return u, 1.0
    z = (abs(diff) - 0.5) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return u, p


def stratify_age(metas: list) -> tuple[list, list, list]:
    """Partition objects with an ``age`` attribute into <60, 60-74, >=75.

    Entries with unknown age are skipped.
    """
    young, mid, old = [], [], []
    for meta in metas:
        age = getattr(meta, "age", None)
        if age is None:
            continue
        if age < AGE_GROUP_EDGES[0]:
            young.append(meta)
        elif age < AGE_GROUP_EDGES[1]:
            mid.append(meta)
        else:
            old.append(meta)
    return young, mid, old
