#!/usr/bin/env python3
"""
Data Service

Tabular dataset representation, CSV ingestion, stratified splitting and
metric evaluation. Datasets are immutable once built: every transformation
returns a new instance sharing the target vector.
"""

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, balanced_accuracy_score, roc_auc_score
from sklearn.model_selection import train_test_split

from ..core.errors import DataError, EvaluationError, SchemaError

logger = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"

DEFAULT_MISSING_TOKENS = ("", "?", "NA")
PROBA_CLAMP = 1e-15
ROW_SUM_TOLERANCE = 1e-6

# Reward is a plain float in [0, 1]
Reward = float


@dataclass(frozen=True)
class Column:
    """One feature column; categorical columns keep their code -> string mapping"""

    name: str
    kind: str = NUMERIC
    categories: Tuple[str, ...] = ()

    def to_dict(self) -> Dict:
        return {"name": self.name, "kind": self.kind, "categories": list(self.categories)}

    @classmethod
    def from_dict(cls, raw: Dict) -> "Column":
        return cls(raw["name"], raw["kind"], tuple(raw.get("categories", ())))


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Feature matrix plus integer class target

    Missing cells are NaN in ``values``; ``missing`` exposes them as a mask.
    Categorical cells hold small non-negative integer codes.
    """

    columns: Tuple[Column, ...]
    values: np.ndarray
    target: np.ndarray
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2:
            values = values.reshape(len(self.target), -1)
        target = np.array(self.target, dtype=np.int64, copy=True).ravel()
        if values.shape[0] != target.shape[0]:
            raise DataError(
                f"ragged rows: {values.shape[0]} feature rows but {target.shape[0]} target labels"
            )
        if values.shape[1] != len(self.columns):
            raise DataError(f"{values.shape[1]} value columns but {len(self.columns)} column descriptors")
        values.setflags(write=False)
        target.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "columns", tuple(self.columns))
        names = tuple(self.class_names)
        if not names and target.size:
            names = tuple(str(i) for i in range(int(target.max()) + 1))
        object.__setattr__(self, "class_names", names)

    # Construction helpers
    @classmethod
    def from_arrays(
        cls,
        X: np.ndarray,
        y: Sequence[int],
        kinds: Optional[Sequence[str]] = None,
        names: Optional[Sequence[str]] = None,
        class_names: Optional[Sequence[str]] = None,
    ) -> "Dataset":
        """Build a dataset from a numeric matrix; categorical columns must already be coded"""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        d = X.shape[1]
        kinds = list(kinds) if kinds is not None else [NUMERIC] * d
        names = list(names) if names is not None else [f"x{i}" for i in range(d)]
        columns = []
        for j in range(d):
            categories: Tuple[str, ...] = ()
            if kinds[j] == CATEGORICAL:
                observed = X[:, j][~np.isnan(X[:, j])]
                n_codes = int(observed.max()) + 1 if observed.size else 0
                categories = tuple(str(c) for c in range(n_codes))
            columns.append(Column(names[j], kinds[j], categories))
        y = np.asarray(y, dtype=np.int64)
        if class_names is None:
            class_names = [str(c) for c in range(int(y.max()) + 1)] if y.size else []
        return cls(tuple(columns), X, y, tuple(class_names))

    def with_features(self, values: np.ndarray, columns: Sequence[Column]) -> "Dataset":
        """Same rows and target, new feature block"""
        return Dataset(tuple(columns), values, self.target, self.class_names)

    def take(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.columns, self.values[rows], self.target[rows], self.class_names)

    @staticmethod
    def concat(first: "Dataset", second: "Dataset") -> "Dataset":
        if [c.name for c in first.columns] != [c.name for c in second.columns]:
            raise SchemaError("cannot concatenate datasets with different columns")
        return Dataset(
            first.columns,
            np.vstack([first.values, second.values]),
            np.concatenate([first.target, second.target]),
            first.class_names,
        )

    # Properties
    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def column_names(self) -> List[str]:
        return [c.name for c in self.columns]

    def kind_mask(self, kind: str) -> np.ndarray:
        return np.array([c.kind == kind for c in self.columns], dtype=bool)

    def has_missing(self, mask: Optional[np.ndarray] = None) -> bool:
        block = self.values if mask is None else self.values[:, mask]
        return bool(np.isnan(block).any())

    def schema(self) -> Dict:
        return {
            "columns": [c.to_dict() for c in self.columns],
            "class_names": list(self.class_names),
        }

    def fingerprint(self) -> str:
        """Stable content hash of features, target and column layout"""
        digest = hashlib.blake2b(digest_size=16)
        digest.update("|".join(f"{c.name}:{c.kind}" for c in self.columns).encode("utf-8"))
        digest.update(np.ascontiguousarray(np.nan_to_num(self.values, nan=np.inf)).tobytes())
        digest.update(np.ascontiguousarray(self.target).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class Metric:
    """Evaluation metric; rewards are always maximized"""

    name: str
    direction: str = field(default="maximize")

    NAMES = ("balanced_accuracy", "accuracy", "roc_auc", "logloss")

    @classmethod
    def from_name(cls, name: str) -> "Metric":
        key = str(name).strip().lower()
        if key not in cls.NAMES:
            raise DataError(f"unknown metric '{name}'; choose one of {', '.join(cls.NAMES)}")
        return cls(key, "minimize" if key == "logloss" else "maximize")

    def check_target(self, n_classes: int) -> None:
        """Reject metric/target combinations that cannot be evaluated"""
        if self.name == "roc_auc" and n_classes > 2:
            raise DataError("roc_auc requires binary target")


# CSV ingestion
def _parse_numeric(cells: pd.Series) -> Optional[np.ndarray]:
    parsed = pd.to_numeric(cells, errors="coerce")
    if parsed.isna().any():
        return None
    return parsed.to_numpy(dtype=np.float64)


def _encode_target(raw: pd.Series) -> Tuple[np.ndarray, Tuple[str, ...]]:
    labels = raw.to_numpy(dtype=object)
    uniques = pd.unique(labels)
    numeric = pd.to_numeric(pd.Series(uniques), errors="coerce")
    if not numeric.isna().any():
        order = np.argsort(numeric.to_numpy(), kind="stable")
    else:
        order = np.argsort(uniques.astype(str), kind="stable")
    class_names = tuple(str(uniques[i]) for i in order)
    lookup = {name: code for code, name in enumerate(class_names)}
    return np.array([lookup[str(v)] for v in labels], dtype=np.int64), class_names


def _read_frame(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            na_filter=False,
            encoding="utf-8",
            skipinitialspace=False,
        )
    except FileNotFoundError as e:
        raise DataError(f"file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path} has no header row") from e
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"ragged rows or malformed CSV in {path}: {e}") from e
    # na_filter is off, so any NaN comes from a short row
    if frame.isna().any().any():
        bad = int(frame.isna().any(axis=1).to_numpy().nonzero()[0][0])
        raise DataError(f"ragged rows in {path}: row {bad + 1} has too few cells")
    return frame


def load_csv(
    path: str,
    target: str,
    missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS,
) -> Dataset:
    """
    Load a CSV file into a Dataset

    Columns whose non-missing cells all parse as numbers become numeric; the
    rest are categorical, coded by order of first appearance.

    Args:
        path: CSV file with a header row
        target: Name of the class column
        missing_tokens: Cell strings treated as missing

    Returns:
        Dataset: parsed dataset
    """
    tokens = set(missing_tokens)
    frame = _read_frame(path)
    if target not in frame.columns:
        raise DataError(f"target column '{target}' not found in {path}")

    target_cells = frame[target]
    if target_cells.isin(tokens).any():
        raise DataError(f"target column '{target}' contains missing values")
    y, class_names = _encode_target(target_cells)
    if len(class_names) < 2:
        raise DataError(f"target column '{target}' has fewer than 2 classes")

    columns: List[Column] = []
    blocks: List[np.ndarray] = []
    for name in frame.columns:
        if name == target:
            continue
        column, block = _encode_column(name, frame[name], tokens)
        columns.append(column)
        blocks.append(block)

    values = np.column_stack(blocks) if blocks else np.empty((len(frame), 0))
    dataset = Dataset(tuple(columns), values, y, class_names)
    logger.info(
        "Loaded %s: %d rows, %d columns (%d categorical), %d classes",
        path, dataset.n_rows, dataset.n_features,
        int(dataset.kind_mask(CATEGORICAL).sum()), dataset.n_classes,
    )
    return dataset


def _encode_column(name: str, cells: pd.Series, tokens: set) -> Tuple[Column, np.ndarray]:
    is_missing = cells.isin(tokens).to_numpy()
    present = cells[~is_missing]
    block = np.full(len(cells), np.nan)
    numeric = _parse_numeric(present)
    if numeric is not None:
        block[~is_missing] = numeric
        return Column(name, NUMERIC), block
    codes, uniques = pd.factorize(present, sort=False)
    block[~is_missing] = codes
    return Column(name, CATEGORICAL, tuple(str(u) for u in uniques)), block


def encode_with_schema(
    path: str,
    schema: Dict,
    target: Optional[str] = None,
    missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS,
) -> Dataset:
    """
    Load a CSV for prediction using the training schema

    Categorical strings map to their training codes; unseen strings get fresh
    codes past the training range. A target column, if present, is ignored.

    Raises:
        SchemaError: training columns missing or numeric columns holding text
    """
    tokens = set(missing_tokens)
    frame = _read_frame(path)
    columns = [Column.from_dict(c) for c in schema["columns"]]
    absent = [c.name for c in columns if c.name not in frame.columns]
    if absent:
        raise SchemaError(f"columns missing compared to training schema: {', '.join(absent)}", absent)

    blocks, out_columns, bad = [], [], []
    for column in columns:
        cells = frame[column.name]
        is_missing = cells.isin(tokens).to_numpy()
        present = cells[~is_missing]
        block = np.full(len(cells), np.nan)
        if column.kind == NUMERIC:
            parsed = pd.to_numeric(present, errors="coerce")
            if parsed.isna().any():
                bad.append(column.name)
                continue
            block[~is_missing] = parsed.to_numpy(dtype=np.float64)
            out_columns.append(column)
        else:
            lookup = {name: code for code, name in enumerate(column.categories)}
            categories = list(column.categories)
            codes = []
            for value in present:
                if value not in lookup:
                    lookup[value] = len(categories)
                    categories.append(value)
                codes.append(lookup[value])
            block[~is_missing] = codes
            out_columns.append(Column(column.name, CATEGORICAL, tuple(categories)))
        blocks.append(block)
    if bad:
        raise SchemaError(f"non-numeric values in numeric columns: {', '.join(bad)}", bad)

    values = np.column_stack(blocks) if blocks else np.empty((len(frame), 0))
    class_names = tuple(schema.get("class_names", ()))
    y = np.zeros(len(frame), dtype=np.int64)
    return Dataset(tuple(out_columns), values, y, class_names)


# Splitting
def stratified_split(d: Dataset, valid_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Split rows into train and validation parts with per-class proportions

    Args:
        d: Dataset to split
        valid_fraction: Share of rows for validation, 0 < f < 0.5
        seed: Random seed

    Returns:
        Tuple of (train, valid)
    """
    if not 0.0 < valid_fraction < 0.5:
        raise DataError(f"valid_fraction must lie in (0, 0.5), got {valid_fraction}")
    counts = np.bincount(d.target, minlength=d.n_classes)
    present = counts[counts > 0]
    if (present < 2).any():
        singles = [d.class_names[i] for i in np.nonzero(counts == 1)[0]]
        raise DataError(f"unsplittable class: {', '.join(singles)} has a single instance")
    indices = np.arange(d.n_rows)
    try:
        train_idx, valid_idx = train_test_split(
            indices, test_size=valid_fraction, stratify=d.target, random_state=seed
        )
    except ValueError as e:
        raise DataError(f"unsplittable class: {e}") from e
    return d.take(np.sort(train_idx)), d.take(np.sort(valid_idx))


# Evaluation
def to_reward(metric: Metric, value: float) -> Reward:
    """Map a raw metric value onto [0, 1], larger is better"""
    if metric.name == "logloss":
        return float(1.0 / (1.0 + value))
    return float(min(1.0, max(0.0, value)))


def evaluate(metric: Metric, y_true: Sequence[int], y_proba: np.ndarray) -> Tuple[float, Reward]:
    """
    Score class probabilities against true labels

    Returns:
        Tuple of (metric_value, reward)
    """
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    proba = np.asarray(y_proba, dtype=np.float64)
    if proba.ndim != 2 or proba.shape[0] != y_true.shape[0]:
        raise EvaluationError(f"shape mismatch: {y_true.shape[0]} labels vs probabilities {proba.shape}")
    if y_true.size == 0:
        raise EvaluationError("cannot evaluate an empty prediction")
    if not np.all(np.isfinite(proba)):
        raise EvaluationError("probabilities contain non-finite values")
    if np.any(np.abs(proba.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE):
        raise EvaluationError("probability rows must sum to 1")
    k = proba.shape[1]
    if y_true.max() >= k:
        raise EvaluationError(f"label {int(y_true.max())} outside {k} probability columns")

    if metric.name == "logloss":
        clipped = np.clip(proba, PROBA_CLAMP, 1.0 - PROBA_CLAMP)
        value = float(-np.mean(np.log(clipped[np.arange(y_true.size), y_true])))
    elif metric.name == "roc_auc":
        if k > 2:
            raise EvaluationError("roc_auc requires binary target")
        if np.unique(y_true).size < 2:
            value = 0.5
        else:
            value = float(roc_auc_score(y_true, proba[:, 1]))
    elif metric.name == "accuracy":
        value = float(accuracy_score(y_true, proba.argmax(axis=1)))
    else:
        with warnings.catch_warnings():
            # predicted classes absent from y_true are ignored by the score
            warnings.simplefilter("ignore", UserWarning)
            value = float(balanced_accuracy_score(y_true, proba.argmax(axis=1)))
    return value, to_reward(metric, value)
