#!/usr/bin/env python3
"""
Step Service

Registry of pipeline algorithms. Each StepSpec names a preprocessor or a
classifier, declares its hyperparameter space and default configuration, and
builds a step object wrapping a scikit-learn estimator that works on Dataset
instances (column kinds and missing cells included).
"""

import logging
import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
from sklearn.decomposition import PCA
from sklearn.ensemble import RandomForestClassifier
from sklearn.feature_selection import SelectKBest, VarianceThreshold, mutual_info_classif
from sklearn.impute import SimpleImputer
from sklearn.linear_model import SGDClassifier
from sklearn.naive_bayes import GaussianNB
from sklearn.neighbors import KNeighborsClassifier
from sklearn.preprocessing import KBinsDiscretizer, MinMaxScaler, OneHotEncoder, StandardScaler
from sklearn.tree import DecisionTreeClassifier

from ..core.errors import InapplicableStepError, PipelineError, SchemaError
from .data_service import CATEGORICAL, NUMERIC, Column, Dataset

logger = logging.getLogger(__name__)

PREPROCESSOR = "preprocessor"
CLASSIFIER = "classifier"

CATEGORICAL_DOMAIN = "categorical"
UNIFORM = "uniform"
LOG_UNIFORM = "log_uniform"
INT_UNIFORM = "int_uniform"

Config = Dict[str, Any]

# Classifiers that read categorical codes as plain numbers
_CODE_AS_NUMBER_WARNED: set = set()


@dataclass(frozen=True)
class Hyperparameter:
    """One tunable parameter and its domain"""

    name: str
    domain: str
    low: float = 0.0
    high: float = 0.0
    choices: Tuple[Any, ...] = ()

    def __post_init__(self):
        if self.domain == CATEGORICAL_DOMAIN:
            if not self.choices:
                raise ValueError(f"{self.name}: categorical domain needs choices")
            return
        if self.domain not in (UNIFORM, LOG_UNIFORM, INT_UNIFORM):
            raise ValueError(f"{self.name}: unknown domain {self.domain}")
        if not self.low < self.high:
            raise ValueError(f"{self.name}: low must be below high")
        if self.domain == LOG_UNIFORM and self.low <= 0:
            raise ValueError(f"{self.name}: log domain needs low > 0")

    def contains(self, value: Any) -> bool:
        if self.domain == CATEGORICAL_DOMAIN:
            return value in self.choices
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            return False
        if self.domain == INT_UNIFORM and float(value) != math.floor(float(value)):
            return False
        return bool(np.isfinite(value)) and self.low <= value <= self.high

    def sample(self, rng: np.random.Generator) -> Any:
        if self.domain == CATEGORICAL_DOMAIN:
            return self.choices[int(rng.integers(len(self.choices)))]
        if self.domain == INT_UNIFORM:
            return int(rng.integers(int(self.low), int(self.high) + 1))
        if self.domain == LOG_UNIFORM:
            return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class HyperparameterSpace:
    """Ordered collection of hyperparameters"""

    parameters: Tuple[Hyperparameter, ...] = ()

    @property
    def names(self) -> List[str]:
        return [p.name for p in self.parameters]

    def contains(self, config: Config) -> bool:
        if set(config) != set(self.names):
            return False
        return all(p.contains(config[p.name]) for p in self.parameters)

    def sample(self, rng: np.random.Generator) -> Config:
        return {p.name: p.sample(rng) for p in self.parameters}


# Step objects
class PipelineStep(ABC):
    """A configured algorithm; fit learns state from the training split only"""

    name: str = ""

    def __init__(self, config: Config, seed: int):
        self.config = dict(config)
        self.seed = int(seed)
        self.input_columns: Tuple[Column, ...] = ()
        self.n_classes = 0
        self.fitted = False

    def fit(self, train: Dataset) -> "PipelineStep":
        self.input_columns = train.columns
        self.n_classes = train.n_classes
        try:
            with warnings.catch_warnings(), np.errstate(all="ignore"):
                warnings.simplefilter("ignore")
                self._fit(train)
        except InapplicableStepError:
            raise
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
            raise InapplicableStepError(self.name, str(e)) from e
        self.fitted = True
        return self

    def check_input(self, d: Dataset) -> None:
        if not self.fitted:
            raise PipelineError(f"step '{self.name}' used before fit")
        expected = [(c.name, c.kind) for c in self.input_columns]
        actual = [(c.name, c.kind) for c in d.columns]
        if expected != actual:
            offending = sorted({c[0] for c in set(expected) ^ set(actual)})
            raise SchemaError(f"schema mismatch for step '{self.name}': {', '.join(offending)}", offending)

    @abstractmethod
    def _fit(self, train: Dataset) -> None:
        """Learn state from train"""


class Preprocessor(PipelineStep):
    """Feature-block transformation; row count and target never change"""

    def transform(self, d: Dataset) -> Dataset:
        self.check_input(d)
        try:
            with warnings.catch_warnings(), np.errstate(all="ignore"):
                warnings.simplefilter("ignore")
                values, columns = self._transform(d)
        except (ValueError, FloatingPointError) as e:
            raise InapplicableStepError(self.name, str(e)) from e
        values = np.asarray(values, dtype=np.float64).reshape(d.n_rows, len(columns))
        if np.isinf(values).any():
            raise InapplicableStepError(self.name, "non-finite values produced")
        return d.with_features(values, columns)

    @abstractmethod
    def _transform(self, d: Dataset) -> Tuple[np.ndarray, Sequence[Column]]:
        """Return the new feature block and its columns"""


class Classifier(PipelineStep):
    """Probabilistic classifier over every feature column"""

    reads_codes_as_numbers = False

    def _fit(self, train: Dataset) -> None:
        if train.has_missing():
            raise InapplicableStepError(self.name, "missing values present")
        if self.reads_codes_as_numbers and train.kind_mask(CATEGORICAL).any() and self.name not in _CODE_AS_NUMBER_WARNED:
            _CODE_AS_NUMBER_WARNED.add(self.name)
            logger.warning("%s treats categorical codes as numbers; encode or discretize upstream", self.name)
        self.model = self._build(train)
        self.model.fit(train.values, train.target)

    def predict_proba(self, d: Dataset) -> np.ndarray:
        self.check_input(d)
        if d.has_missing():
            raise InapplicableStepError(self.name, "missing values present")
        if d.n_rows == 0:
            return np.zeros((0, self.n_classes))
        try:
            with warnings.catch_warnings(), np.errstate(all="ignore"):
                warnings.simplefilter("ignore")
                raw = self.model.predict_proba(d.values)
        except (ValueError, FloatingPointError) as e:
            raise InapplicableStepError(self.name, str(e)) from e
        proba = np.zeros((d.n_rows, self.n_classes))
        proba[:, self.model.classes_.astype(np.int64)] = raw
        sums = proba.sum(axis=1, keepdims=True)
        if not np.all(np.isfinite(proba)) or np.any(sums <= 0):
            raise InapplicableStepError(self.name, "non-finite probabilities")
        return proba / sums

    @abstractmethod
    def _build(self, train: Dataset) -> Any:
        """Return an unfitted scikit-learn classifier"""


def _numeric_split(d: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    numeric = d.kind_mask(NUMERIC)
    return numeric, ~numeric


class MeanModeImputer(Preprocessor):
    name = "mean_mode_imputer"

    def _fit(self, train: Dataset) -> None:
        numeric, categorical = _numeric_split(train)
        self.fill_values = np.zeros(train.n_features)
        if numeric.any():
            imputer = SimpleImputer(strategy="mean", keep_empty_features=True).fit(train.values[:, numeric])
            self.fill_values[numeric] = np.nan_to_num(imputer.statistics_, nan=0.0)
        if categorical.any():
            imputer = SimpleImputer(strategy="most_frequent", keep_empty_features=True).fit(train.values[:, categorical])
            self.fill_values[categorical] = np.nan_to_num(imputer.statistics_, nan=0.0)

    def _transform(self, d: Dataset) -> Tuple[np.ndarray, Sequence[Column]]:
        values = d.values.copy()
        rows, cols = np.nonzero(np.isnan(values))
        values[rows, cols] = self.fill_values[cols]
        return values, d.columns


class _NumericScaler(Preprocessor):
    """Scales numeric columns; categorical codes pass through"""

    def _make(self) -> Any:
        raise NotImplementedError

    def _fit(self, train: Dataset) -> None:
        self.numeric, _ = _numeric_split(train)
        self.scaler = self._make().fit(train.values[:, self.numeric]) if self.numeric.any() else None

    def _transform(self, d: Dataset) -> Tuple[np.ndarray, Sequence[Column]]:
        values = d.values.copy()
        if self.scaler is not None:
            values[:, self.numeric] = self.scaler.transform(d.values[:, self.numeric])
        return values, d.columns


class StandardScalerStep(_NumericScaler):
    name = "standard_scaler"

    def _make(self) -> Any:
        # zero-variance columns get scale 1, so they map to 0
        return StandardScaler()


class MinMaxScalerStep(_NumericScaler):
    name = "minmax_scaler"

    def _make(self) -> Any:
        return MinMaxScaler()


class PcaStep(Preprocessor):
    name = "pca"

    def _fit(self, train: Dataset) -> None:
        self.numeric, _ = _numeric_split(train)
        k = int(self.config["k"])
        n_numeric = int(self.numeric.sum())
        if train.has_missing(self.numeric):
            raise InapplicableStepError(self.name, "missing values in numeric columns")
        if k > min(n_numeric, train.n_rows):
            raise InapplicableStepError(self.name, f"k={k} exceeds rank bound {min(n_numeric, train.n_rows)}")
        self.pca = PCA(n_components=k, svd_solver="full", random_state=self.seed)
        self.pca.fit(train.values[:, self.numeric])
        components = self.pca.components_.copy()
        for row in components:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
        self.pca.components_ = components

    def _transform(self, d: Dataset) -> Tuple[np.ndarray, Sequence[Column]]:
        if d.has_missing(self.numeric):
            raise InapplicableStepError(self.name, "missing values in numeric columns")
        kept = [j for j, c in enumerate(d.columns) if not self.numeric[j]]
        projected = self.pca.transform(d.values[:, self.numeric]) if d.n_rows else np.zeros((0, self.pca.n_components_))
        columns = [d.columns[j] for j in kept] + [Column(f"pca_{i}") for i in range(projected.shape[1])]
        return np.hstack([d.values[:, kept], projected]), columns


class VarianceThresholdStep(Preprocessor):
    name = "variance_threshold"

    def _fit(self, train: Dataset) -> None:
        selector = VarianceThreshold(threshold=float(self.config["tau"])).fit(train.values)
        self.support = selector.get_support()

    def _transform(self, d: Dataset) -> Tuple[np.ndarray, Sequence[Column]]:
        return d.values[:, self.support], [c for c, keep in zip(d.columns, self.support) if keep]


class SelectKBestMiStep(Preprocessor):
    name = "select_k_best_mi"

    def _fit(self, train: Dataset) -> None:
        if train.n_features == 0:
            raise InapplicableStepError(self.name, "no columns to select from")
        if train.has_missing():
            raise InapplicableStepError(self.name, "missing values present")
        k = min(int(self.config["k"]), train.n_features)
        score = partial(mutual_info_classif, discrete_features=train.kind_mask(CATEGORICAL), random_state=self.seed)
        selector = SelectKBest(score, k=k).fit(train.values, train.target)
        self.support = selector.get_support()

    def _transform(self, d: Dataset) -> Tuple[np.ndarray, Sequence[Column]]:
        return d.values[:, self.support], [c for c, keep in zip(d.columns, self.support) if keep]


class KBinsDiscretizerStep(Preprocessor):
    name = "kbins_discretizer"

    def _fit(self, train: Dataset) -> None:
        self.numeric, _ = _numeric_split(train)
        if train.has_missing(self.numeric):
            raise InapplicableStepError(self.name, "missing values in numeric columns")
        self.binner = None
        if self.numeric.any():
            self.binner = KBinsDiscretizer(n_bins=int(self.config["bins"]), encode="ordinal", strategy="uniform")
            self.binner.fit(train.values[:, self.numeric])

    def _transform(self, d: Dataset) -> Tuple[np.ndarray, Sequence[Column]]:
        if self.binner is None:
            return d.values, d.columns
        if d.has_missing(self.numeric):
            raise InapplicableStepError(self.name, "missing values in numeric columns")
        values = d.values.copy()
        if d.n_rows:
            values[:, self.numeric] = self.binner.transform(d.values[:, self.numeric])
        columns, position = [], 0
        for j, column in enumerate(d.columns):
            if self.numeric[j]:
                n_bins = int(self.binner.n_bins_[position])
                columns.append(Column(column.name, CATEGORICAL, tuple(f"bin{b}" for b in range(n_bins))))
                position += 1
            else:
                columns.append(column)
        return values, columns


class OneHotEncoderStep(Preprocessor):
    name = "one_hot_encoder"

    def _fit(self, train: Dataset) -> None:
        _, self.categorical = _numeric_split(train)
        self.encoder = None
        if not self.categorical.any():
            return
        block = train.values[:, self.categorical]
        categories = []
        for j, column in zip(np.nonzero(self.categorical)[0], block.T):
            observed = column[~np.isnan(column)]
            n_codes = max(len(train.columns[j].categories), int(observed.max()) + 1 if observed.size else 0, 1)
            categories.append(np.arange(n_codes, dtype=np.float64))
        self.encoder = OneHotEncoder(categories=categories, handle_unknown="ignore", sparse_output=False)
        self.encoder.fit(np.nan_to_num(block, nan=-1.0))

    def _transform(self, d: Dataset) -> Tuple[np.ndarray, Sequence[Column]]:
        if self.encoder is None:
            return d.values, d.columns
        block = d.values[:, self.categorical]
        # unknown and missing codes both encode as an all-zero block
        encoded = self.encoder.transform(np.nan_to_num(block, nan=-1.0)) if d.n_rows else \
            np.zeros((0, sum(len(c) for c in self.encoder.categories_)))
        pieces, columns, offset, position = [], [], 0, 0
        for j, column in enumerate(d.columns):
            if not self.categorical[j]:
                pieces.append(d.values[:, [j]])
                columns.append(column)
                continue
            width = len(self.encoder.categories_[position])
            indicators = encoded[:, offset:offset + width].copy()
            indicators[np.isnan(block[:, position])] = np.nan
            pieces.append(indicators)
            labels = column.categories
            for c in range(width):
                label = labels[c] if c < len(labels) else str(c)
                columns.append(Column(f"{column.name}={label}"))
            offset += width
            position += 1
        return np.hstack(pieces) if pieces else np.zeros((d.n_rows, 0)), columns


class DecisionTreeStep(Classifier):
    name = "decision_tree"

    def _build(self, train: Dataset) -> Any:
        return DecisionTreeClassifier(
            max_depth=int(self.config["max_depth"]),
            min_samples_leaf=int(self.config["min_leaf"]),
            random_state=self.seed,
        )


class RandomForestStep(Classifier):
    name = "random_forest"

    def _build(self, train: Dataset) -> Any:
        return RandomForestClassifier(
            n_estimators=int(self.config["trees"]),
            max_depth=int(self.config["max_depth"]),
            random_state=self.seed,
            n_jobs=1,
        )


class KnnStep(Classifier):
    name = "knn"
    reads_codes_as_numbers = True

    def _build(self, train: Dataset) -> Any:
        return KNeighborsClassifier(n_neighbors=max(1, min(int(self.config["k"]), train.n_rows)),
                                    metric=self.config["metric"])


class LogisticRegressionStep(Classifier):
    name = "logistic_regression"
    reads_codes_as_numbers = True

    def _build(self, train: Dataset) -> Any:
        return SGDClassifier(
            loss="log_loss",
            learning_rate="constant",
            eta0=float(self.config["lr"]),
            alpha=float(self.config["l2"]),
            max_iter=int(self.config["epochs"]),
            tol=None,
            random_state=self.seed,
        )


class GaussianNbStep(Classifier):
    name = "gaussian_nb"
    reads_codes_as_numbers = True

    def _build(self, train: Dataset) -> Any:
        return GaussianNB(var_smoothing=float(self.config["smoothing"]))


# Registry
@dataclass(frozen=True, eq=False)
class StepSpec:
    """Registry entry: algorithm identity, space and default configuration"""

    name: str
    kind: str
    category: str
    space: HyperparameterSpace
    default: Config
    step_class: Type[PipelineStep] = field(compare=False, repr=False)

    def build(self, config: Config, seed: int) -> PipelineStep:
        return self.step_class(config, seed)

    @property
    def is_classifier(self) -> bool:
        return self.kind == CLASSIFIER


@dataclass
class FittedStep:
    """A step fitted on a training dataset"""

    spec_name: str
    config: Config
    state: PipelineStep

    @property
    def kind(self) -> str:
        return get_spec(self.spec_name).kind


def _int(name: str, low: int, high: int) -> Hyperparameter:
    return Hyperparameter(name, INT_UNIFORM, low, high)


def _spec(name, kind, category, step_class, params=(), default=None) -> StepSpec:
    return StepSpec(name, kind, category, HyperparameterSpace(tuple(params)), dict(default or {}), step_class)


_BUILTIN: Tuple[StepSpec, ...] = (
    _spec("mean_mode_imputer", PREPROCESSOR, "imputation", MeanModeImputer),
    _spec("standard_scaler", PREPROCESSOR, "scaling", StandardScalerStep),
    _spec("minmax_scaler", PREPROCESSOR, "scaling", MinMaxScalerStep),
    _spec("pca", PREPROCESSOR, "decomposition", PcaStep, [_int("k", 1, 50)], {"k": 2}),
    _spec("variance_threshold", PREPROCESSOR, "filtering", VarianceThresholdStep,
          [Hyperparameter("tau", UNIFORM, 0.0, 0.2)], {"tau": 0.0}),
    _spec("select_k_best_mi", PREPROCESSOR, "selection", SelectKBestMiStep, [_int("k", 1, 50)], {"k": 10}),
    _spec("kbins_discretizer", PREPROCESSOR, "discretization", KBinsDiscretizerStep,
          [_int("bins", 2, 32)], {"bins": 5}),
    _spec("one_hot_encoder", PREPROCESSOR, "encoding", OneHotEncoderStep),
    _spec("decision_tree", CLASSIFIER, "classifier", DecisionTreeStep,
          [_int("max_depth", 1, 20), _int("min_leaf", 1, 20)], {"max_depth": 10, "min_leaf": 2}),
    _spec("random_forest", CLASSIFIER, "classifier", RandomForestStep,
          [_int("trees", 10, 100), _int("max_depth", 2, 16)], {"trees": 25, "max_depth": 8}),
    _spec("knn", CLASSIFIER, "classifier", KnnStep,
          [_int("k", 1, 25), Hyperparameter("metric", CATEGORICAL_DOMAIN, choices=("euclidean", "manhattan"))],
          {"k": 5, "metric": "euclidean"}),
    _spec("logistic_regression", CLASSIFIER, "classifier", LogisticRegressionStep,
          [Hyperparameter("lr", LOG_UNIFORM, 1e-4, 1.0), Hyperparameter("l2", LOG_UNIFORM, 1e-6, 1.0),
           _int("epochs", 10, 200)],
          {"lr": 1e-2, "l2": 1e-4, "epochs": 50}),
    _spec("gaussian_nb", CLASSIFIER, "classifier", GaussianNbStep,
          [Hyperparameter("smoothing", LOG_UNIFORM, 1e-12, 1e-6)], {"smoothing": 1e-9}),
)
_BY_NAME: Dict[str, StepSpec] = {spec.name: spec for spec in _BUILTIN}


def builtin_registry() -> List[StepSpec]:
    """All built-in step specs, preprocessors first"""
    return list(_BUILTIN)


def get_spec(name: str) -> StepSpec:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise PipelineError(f"unknown step '{name}'") from None


def is_classifier(name: str) -> bool:
    return get_spec(name).is_classifier


def fit_step(spec: StepSpec, config: Config, train: Dataset, seed: int) -> FittedStep:
    """
    Fit one step on a training dataset

    Raises:
        PipelineError: config outside the declared space
        InapplicableStepError: the step cannot be applied to this data
    """
    if not spec.space.contains(config):
        raise PipelineError(f"config {config} invalid for step '{spec.name}'")
    state = spec.build(config, seed).fit(train)
    return FittedStep(spec.name, dict(config), state)


def transform(fitted: FittedStep, d: Dataset) -> Dataset:
    if not isinstance(fitted.state, Preprocessor):
        raise PipelineError(f"'{fitted.spec_name}' is not a preprocessor")
    return fitted.state.transform(d)


def predict_proba(fitted: FittedStep, d: Dataset) -> np.ndarray:
    if not isinstance(fitted.state, Classifier):
        raise PipelineError(f"'{fitted.spec_name}' is not a classifier")
    return fitted.state.predict_proba(d)


def _unique_name(base: str, taken: Sequence[str]) -> str:
    name, suffix = base, 1
    while name in taken:
        name = f"{base}_{suffix}"
        suffix += 1
    return name


def classifier_as_feature(fitted: FittedStep, d: Dataset) -> Dataset:
    """Append the predicted class code (and P(class 1) for binary targets) as numeric columns"""
    proba = predict_proba(fitted, d)
    taken = list(d.column_names)
    pred_name = _unique_name(f"{fitted.spec_name}_pred", taken)
    columns = list(d.columns) + [Column(pred_name)]
    blocks = [d.values, proba.argmax(axis=1).astype(np.float64).reshape(-1, 1)]
    if proba.shape[1] == 2:
        columns.append(Column(_unique_name(f"{fitted.spec_name}_proba", taken + [pred_name])))
        blocks.append(proba[:, [1]])
    return d.with_features(np.hstack(blocks), columns)


def apply_step(fitted: FittedStep, d: Dataset) -> Dataset:
    """Push a dataset through a non-final step: transform, or append predictions"""
    if isinstance(fitted.state, Classifier):
        return classifier_as_feature(fitted, d)
    return transform(fitted, d)


def step_names(kind: Optional[str] = None) -> List[str]:
    return [s.name for s in _BUILTIN if kind is None or s.kind == kind]

