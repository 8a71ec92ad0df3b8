#!/usr/bin/env python3
"""
Meta-Feature Service

Extracts a fixed 22-entry description of a (possibly intermediate) dataset:
general counts, statistical moments, information-theoretic measures and three
cheap landmark learners. Every entry is invariant to the row order.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.impute import SimpleImputer
from sklearn.metrics import mutual_info_score
from sklearn.naive_bayes import GaussianNB
from sklearn.neighbors import KNeighborsClassifier
from sklearn.tree import DecisionTreeClassifier

from .data_service import CATEGORICAL, NUMERIC, Dataset

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

FEATURE_NAMES: Tuple[str, ...] = (
    "n_instances",
    "log_n_instances",
    "n_features",
    "log_n_features",
    "n_numeric",
    "n_categorical",
    "n_classes",
    "class_entropy_normalized",
    "minority_class_ratio",
    "majority_class_ratio",
    "missing_cell_ratio",
    "instances_per_feature",
    "mean_column_mean",
    "mean_column_std",
    "mean_skewness",
    "mean_kurtosis",
    "mean_column_entropy",
    "mean_abs_correlation",
    "mean_mutual_information",
    "landmark_stump_accuracy",
    "landmark_1nn_accuracy",
    "landmark_naive_bayes_accuracy",
)
N_FEATURES = len(FEATURE_NAMES)

MAX_CORRELATION_PAIRS = 20
LANDMARK_ROWS = 500
N_BINS = 10
SIGNATURE_SCALE = 10.0


@dataclass(frozen=True, eq=False)
class MetaFeatureVector:
    """Fixed-order meta-feature values"""

    values: np.ndarray
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel().copy()
        if values.shape[0] != N_FEATURES:
            raise ValueError(f"meta-feature vector must have {N_FEATURES} entries, got {values.shape[0]}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MetaFeatureVector)
            and self.schema_version == other.schema_version
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self) -> int:
        return hash((self.schema_version, self.values.tobytes()))

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, (float(v) for v in self.values)))

    def to_list(self) -> List[float]:
        return [float(v) for v in self.values]


@dataclass(frozen=True)
class MetaFeatureSignature:
    """Quantized meta-features; equal signatures share optimizer instances"""

    buckets: Tuple[int, ...]

    def distance(self, other: "MetaFeatureSignature") -> int:
        return int(sum(abs(a - b) for a, b in zip(self.buckets, other.buckets)))


def signature(mf: MetaFeatureVector) -> MetaFeatureSignature:
    """Bucket each value on an asinh scale with a 0.1 grid"""
    buckets = np.rint(np.arcsinh(mf.values) * SIGNATURE_SCALE).astype(np.int64)
    return MetaFeatureSignature(tuple(int(b) for b in buckets))


def _hash_key(seed: int) -> str:
    # pandas expects a 16 character key
    return f"{int(seed) & 0xFFFFFFFFFFFF:016d}"[-16:]


def landmark_rows(d: Dataset, seed: int, limit: int = LANDMARK_ROWS) -> np.ndarray:
    """
    Rows for landmark learners, ranked by a seeded content hash

    Identical rows hash identically, so the selection and its order do not
    depend on the input row order.
    """
    frame = pd.DataFrame(d.values)
    frame["__target__"] = d.target
    hashes = pd.util.hash_pandas_object(frame, index=False, hash_key=_hash_key(seed)).to_numpy()
    order = np.lexsort((d.target, hashes))
    return order[:limit]


def _safe(value: float) -> float:
    return float(value) if np.isfinite(value) else 0.0


def _class_features(y: np.ndarray) -> Tuple[float, float, float, float]:
    counts = np.bincount(y)
    counts = counts[counts > 0]
    n_classes = counts.size
    if n_classes == 0:
        return 0.0, 0.0, 0.0, 0.0
    proportions = counts / counts.sum()
    entropy = stats.entropy(proportions) / math.log(n_classes) if n_classes > 1 else 0.0
    return float(n_classes), _safe(entropy), float(proportions.min()), float(proportions.max())


def _moment_features(numeric: np.ndarray) -> Tuple[float, float, float, float]:
    means, stds, skews, kurts = [], [], [], []
    for column in numeric.T:
        # sorted so float accumulation does not depend on row order
        present = np.sort(column[~np.isnan(column)])
        if present.size == 0:
            means.append(0.0)
            stds.append(0.0)
            skews.append(0.0)
            kurts.append(0.0)
            continue
        means.append(_safe(present.mean()))
        std = present.std()
        stds.append(_safe(std))
        if present.size < 3 or std == 0.0:
            skews.append(0.0)
            kurts.append(0.0)
            continue
        with warnings.catch_warnings(), np.errstate(all="ignore"):
            warnings.simplefilter("ignore", RuntimeWarning)
            skews.append(_safe(stats.skew(present)))
            kurts.append(_safe(stats.kurtosis(present)))
    if not means:
        return 0.0, 0.0, 0.0, 0.0
    return tuple(_safe(np.mean(v)) for v in (means, stds, skews, kurts))


def _discretize(d: Dataset) -> np.ndarray:
    """Integer bin codes per column; missing cells form their own bin (-1)"""
    binned = np.full(d.values.shape, -1, dtype=np.int64)
    for j, column in enumerate(d.columns):
        values = d.values[:, j]
        present = ~np.isnan(values)
        if not present.any():
            continue
        if column.kind == CATEGORICAL:
            binned[present, j] = values[present].astype(np.int64)
            continue
        low, high = values[present].min(), values[present].max()
        if high <= low:
            binned[present, j] = 0
            continue
        edges = np.linspace(low, high, N_BINS + 1)
        binned[present, j] = np.clip(np.digitize(values[present], edges[1:-1]), 0, N_BINS - 1)
    return binned


def _information_features(d: Dataset) -> Tuple[float, float]:
    if d.n_features == 0:
        return 0.0, 0.0
    binned = _discretize(d)
    entropies, mutual = [], []
    for column in binned.T:
        _, counts = np.unique(column, return_counts=True)
        entropies.append(_safe(stats.entropy(counts)))
        mutual.append(_safe(mutual_info_score(d.target, column)))
    return _safe(np.mean(entropies)), _safe(np.mean(mutual))


def _correlation_feature(numeric: np.ndarray, seed: int) -> float:
    n_cols = numeric.shape[1]
    if n_cols < 2:
        return 0.0
    pairs = [(a, b) for a in range(n_cols) for b in range(a + 1, n_cols)]
    if len(pairs) > MAX_CORRELATION_PAIRS:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(pairs), size=MAX_CORRELATION_PAIRS, replace=False)
        pairs = [pairs[i] for i in sorted(chosen)]
    values = []
    for a, b in pairs:
        both = ~np.isnan(numeric[:, a]) & ~np.isnan(numeric[:, b])
        x, y = numeric[both, a], numeric[both, b]
        order = np.lexsort((y, x))
        x, y = x[order], y[order]
        if x.size < 2 or x.std() == 0.0 or y.std() == 0.0:
            values.append(0.0)
            continue
        with np.errstate(all="ignore"):
            values.append(abs(_safe(np.corrcoef(x, y)[0, 1])))
    return _safe(np.mean(values))


def _landmark_features(d: Dataset, seed: int) -> Tuple[float, float, float]:
    rows = landmark_rows(d, seed)
    if rows.size < 2 or d.n_features == 0:
        return 0.0, 0.0, 0.0
    imputer = SimpleImputer(strategy="mean", keep_empty_features=True)
    X = imputer.fit_transform(d.values[rows])
    y = d.target[rows]
    fit_idx, score_idx = np.arange(0, rows.size, 2), np.arange(1, rows.size, 2)
    learners = (
        DecisionTreeClassifier(max_depth=1, random_state=seed),
        KNeighborsClassifier(n_neighbors=1),
        GaussianNB(),
    )
    scores = []
    for learner in learners:
        try:
            with warnings.catch_warnings(), np.errstate(all="ignore"):
                warnings.simplefilter("ignore")
                learner.fit(X[fit_idx], y[fit_idx])
                scores.append(_safe(np.mean(learner.predict(X[score_idx]) == y[score_idx])))
        except ValueError as e:
            logger.debug("Landmark %s failed: %s", type(learner).__name__, e)
            scores.append(0.0)
    return tuple(scores)


def extract(d: Dataset, seed: int = 0) -> MetaFeatureVector:
    """
    Compute the meta-feature vector of a dataset

    Args:
        d: Dataset with at least one row
        seed: Seed for landmark row selection and correlation pair sampling

    Returns:
        MetaFeatureVector: 22 finite values in FEATURE_NAMES order
    """
    m, n = d.n_rows, d.n_features
    numeric_mask = d.kind_mask(NUMERIC)
    numeric = d.values[:, numeric_mask]

    n_classes, class_entropy, minority, majority = _class_features(d.target)
    mean_mean, mean_std, mean_skew, mean_kurt = _moment_features(numeric)
    column_entropy, mutual_information = _information_features(d)
    stump, one_nn, naive_bayes = _landmark_features(d, seed)

    values = [
        m,
        math.log(m) if m > 0 else 0.0,
        n,
        math.log(n) if n > 0 else 0.0,
        int(numeric_mask.sum()),
        int(n - numeric_mask.sum()),
        n_classes,
        class_entropy,
        minority,
        majority,
        float(np.isnan(d.values).mean()) if d.values.size else 0.0,
        m / n if n > 0 else 0.0,
        mean_mean,
        mean_std,
        mean_skew,
        mean_kurt,
        column_entropy,
        _correlation_feature(numeric, seed),
        mutual_information,
        stump,
        one_nn,
        naive_bayes,
    ]
    return MetaFeatureVector(np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0))
