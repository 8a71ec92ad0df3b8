#!/usr/bin/env python3
"""
Meta-Base Service

Offline meta-learning base. Every algorithm sequence up to a maximum length
is applied with default hyperparameters to each corpus dataset; the results
become (meta-features, algorithm) -> performance records, and two random
forests trained on those records answer prior queries during search.
"""

import json
import logging
import os
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from tqdm import tqdm

from ..core.errors import DataError, EvaluationError, InapplicableStepError, MetaBaseError
from ..utils.serialization import read_json, read_jsonl, write_json, write_jsonl
from .data_service import Dataset, Metric, evaluate, stratified_split
from .metafeature_service import SCHEMA_VERSION, MetaFeatureVector, extract
from .step_service import apply_step, fit_step, get_spec, predict_proba, step_names

logger = logging.getLogger(__name__)

MAX_DEPTH = 5
RECORDS_FILE = "records.jsonl"
SURROGATES_FILE = "surrogates.json"

FOREST_TREES = 50
FOREST_MAX_DEPTH = 12
FOREST_MIN_LEAF = 2


@dataclass(frozen=True)
class Normal:
    """Predicted performance distribution"""

    mean: float
    std: float = 0.0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be non-negative")


UNINFORMATIVE = Normal(0.5, 0.25)


@dataclass(frozen=True, eq=False)
class PerformanceRecord:
    """Performance of applying one algorithm to one intermediate dataset"""

    dataset_id: str
    meta_features: MetaFeatureVector
    algorithm: str
    reward_mean: float
    reward_std: float = 0.0
    n_evals: int = 1

    def __post_init__(self):
        if not 0.0 <= self.reward_mean <= 1.0:
            raise MetaBaseError(f"reward_mean {self.reward_mean} outside [0, 1]")
        if self.reward_std < 0.0:
            raise MetaBaseError("reward_std must be non-negative")
        if self.n_evals < 1:
            raise MetaBaseError("n_evals must be at least 1")

    def to_row(self) -> Dict:
        return {
            "dataset_id": self.dataset_id,
            "schema_version": self.meta_features.schema_version,
            "meta_features": self.meta_features.to_list(),
            "algorithm": self.algorithm,
            "reward_mean": float(self.reward_mean),
            "reward_std": float(self.reward_std),
            "n_evals": int(self.n_evals),
        }

    @classmethod
    def from_row(cls, row: Dict) -> "PerformanceRecord":
        version = row.get("schema_version")
        if version != SCHEMA_VERSION:
            raise MetaBaseError(f"meta-feature schema version {version}, expected {SCHEMA_VERSION}")
        try:
            return cls(
                str(row["dataset_id"]),
                MetaFeatureVector(np.asarray(row["meta_features"], dtype=np.float64), int(version)),
                str(row["algorithm"]),
                float(row["reward_mean"]),
                float(row["reward_std"]),
                int(row["n_evals"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise MetaBaseError(f"malformed record: {e}") from e

    def sort_key(self) -> Tuple:
        return (self.dataset_id, self.algorithm, tuple(self.meta_features.values.tolist()), self.reward_mean)


# Enumeration
@dataclass
class _State:
    prefix: Tuple[str, ...]
    train: Dataset
    valid: Dataset
    meta_features: MetaFeatureVector


@dataclass
class EnumerationStats:
    """Counters gathered while enumerating a corpus"""

    attempted: int = 0
    classifier_terminated: int = 0
    failed: int = 0
    attempted_by_depth: Dict[Tuple[str, int], int] = field(default_factory=lambda: defaultdict(int))
    records_by_depth: Dict[Tuple[str, int], int] = field(default_factory=lambda: defaultdict(int))


class MetaBaseBuilder:
    """
    Exhaustive default-configuration enumeration

    Classifier records carry the measured validation reward; a preprocessor
    record aggregates the rewards of the classifiers applied directly after it.
    """

    def __init__(
        self,
        metric: Metric,
        max_depth: int = 3,
        seed: int = 0,
        actions: Optional[Sequence[str]] = None,
        valid_fraction: float = 0.2,
        workers: int = 1,
        progress: bool = False,
    ):
        if not 1 <= max_depth <= MAX_DEPTH:
            raise MetaBaseError(f"max depth is {MAX_DEPTH}")
        self.metric = metric
        self.max_depth = int(max_depth)
        self.seed = int(seed)
        self.actions = list(actions) if actions is not None else step_names()
        for name in self.actions:
            get_spec(name)
        self.valid_fraction = valid_fraction
        self.workers = max(1, int(workers))
        self.progress = progress
        self.stats = EnumerationStats()
        self._lock = threading.Lock()

    def _count(self, dataset_id: str, depth: int, classifier: bool, failed: bool = False) -> None:
        with self._lock:
            self.stats.attempted += 1
            self.stats.attempted_by_depth[(dataset_id, depth)] += 1
            if failed:
                self.stats.failed += 1
            elif classifier:
                self.stats.classifier_terminated += 1

    def _emit(self, out: List[PerformanceRecord], record: PerformanceRecord, depth: int) -> None:
        out.append(record)
        with self._lock:
            self.stats.records_by_depth[(record.dataset_id, depth)] += 1

    def _visit(self, dataset_id: str, state: _State, action: str, out: List[PerformanceRecord]) -> Optional[float]:
        """Apply ``action`` after ``state``; returns the reward when it is a classifier"""
        spec = get_spec(action)
        position = len(state.prefix)
        sequence = state.prefix + (action,)
        try:
            fitted = fit_step(spec, spec.default, state.train, self.seed + position)
            reward = None
            if spec.is_classifier:
                proba = predict_proba(fitted, state.valid)
                _, reward = evaluate(self.metric, state.valid.target, proba)
            child = None
            if len(sequence) < self.max_depth:
                child_train = apply_step(fitted, state.train)
                child = _State(sequence, child_train, apply_step(fitted, state.valid), extract(child_train, self.seed))
        except (InapplicableStepError, EvaluationError) as e:
            self._count(dataset_id, len(sequence), spec.is_classifier, failed=True)
            logger.debug("Skipped %s on %s: %s", " -> ".join(sequence), dataset_id, e)
            return None
        self._count(dataset_id, len(sequence), spec.is_classifier)

        if reward is not None:
            self._emit(out, PerformanceRecord(dataset_id, state.meta_features, action, reward), position)
        if child is not None:
            extension_rewards = []
            for next_action in self.actions:
                next_reward = self._visit(dataset_id, child, next_action, out)
                if next_reward is not None:
                    extension_rewards.append(next_reward)
            if not spec.is_classifier and extension_rewards:
                self._emit(
                    out,
                    PerformanceRecord(
                        dataset_id,
                        state.meta_features,
                        action,
                        float(np.mean(extension_rewards)),
                        float(np.std(extension_rewards)),
                        len(extension_rewards),
                    ),
                    position,
                )
        return reward

    def _root(self, dataset_id: str, d: Dataset) -> _State:
        self.metric.check_target(d.n_classes)
        train, valid = stratified_split(d, self.valid_fraction, self.seed)
        return _State((), train, valid, extract(train, self.seed))

    def enumerate(self, corpus: Sequence[Tuple[str, Dataset]]) -> List[PerformanceRecord]:
        """
        Enumerate every sequence up to max_depth on every corpus dataset

        Args:
            corpus: (dataset_id, dataset) pairs

        Returns:
            List[PerformanceRecord]: records in canonical order
        """
        if not corpus:
            raise MetaBaseError("corpus is empty")
        branches = []
        for dataset_id, d in corpus:
            try:
                root = self._root(dataset_id, d)
            except DataError as e:
                logger.warning("Skipping dataset %s: %s", dataset_id, e)
                continue
            branches.extend((dataset_id, root, action) for action in self.actions)

        def run(branch) -> List[PerformanceRecord]:
            dataset_id, root, action = branch
            out: List[PerformanceRecord] = []
            self._visit(dataset_id, root, action, out)
            return out

        results: List[List[PerformanceRecord]] = []
        with tqdm(total=len(branches), desc="Enumerating", unit="branch", disable=not self.progress) as bar:
            if self.workers == 1:
                for branch in branches:
                    results.append(run(branch))
                    bar.update(1)
            else:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    futures = [pool.submit(run, branch) for branch in branches]
                    for future in futures:
                        results.append(future.result())
                        bar.update(1)

        records = [record for chunk in results for record in chunk]
        logger.info(
            "Enumerated %d sequences (%d classifier-terminated, %d failed), %d records",
            self.stats.attempted, self.stats.classifier_terminated, self.stats.failed, len(records),
        )
        return sorted(records, key=PerformanceRecord.sort_key)


def enumerate_corpus(
    corpus: Sequence[Tuple[str, Dataset]],
    metric: Metric,
    max_depth: int = 3,
    seed: int = 0,
    actions: Optional[Sequence[str]] = None,
) -> List[PerformanceRecord]:
    return MetaBaseBuilder(metric, max_depth, seed, actions).enumerate(corpus)


# Surrogates
@dataclass
class TreeArrays:
    """One regression tree as flat node arrays; leaves have left == right == -1"""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @classmethod
    def from_sklearn(cls, estimator) -> "TreeArrays":
        tree = estimator.tree_
        return cls(
            tree.feature.astype(np.int64),
            tree.threshold.astype(np.float64),
            tree.children_left.astype(np.int64),
            tree.children_right.astype(np.int64),
            tree.value[:, 0, 0].astype(np.float64),
        )

    def predict(self, X32: np.ndarray) -> np.ndarray:
        node = np.zeros(X32.shape[0], dtype=np.int64)
        while True:
            left = self.left[node]
            active = left >= 0
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            current = node[rows]
            go_left = X32[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
        return self.value[node]

    def to_nodes(self) -> List[Dict]:
        return [
            {
                "feature_index": int(f),
                "threshold": float(t),
                "left": int(lo),
                "right": int(hi),
                "leaf_value": float(v),
            }
            for f, t, lo, hi, v in zip(self.feature, self.threshold, self.left, self.right, self.value)
        ]

    @classmethod
    def from_nodes(cls, nodes: List[Dict]) -> "TreeArrays":
        if not nodes:
            raise MetaBaseError("empty tree in forest dump")
        return cls(
            np.array([n["feature_index"] for n in nodes], dtype=np.int64),
            np.array([n["threshold"] for n in nodes], dtype=np.float64),
            np.array([n["left"] for n in nodes], dtype=np.int64),
            np.array([n["right"] for n in nodes], dtype=np.int64),
            np.array([n["leaf_value"] for n in nodes], dtype=np.float64),
        )


class TreeForest:
    """Mean of regression trees, evaluated on float32 inputs"""

    def __init__(self, trees: List[TreeArrays]):
        self.trees = trees

    def predict_each(self, X: np.ndarray) -> np.ndarray:
        X32 = np.asarray(X, dtype=np.float32)
        return np.vstack([tree.predict(X32) for tree in self.trees])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_each(X).mean(axis=0)

    def to_document(self) -> List[List[Dict]]:
        return [tree.to_nodes() for tree in self.trees]

    @classmethod
    def from_document(cls, doc: List[List[Dict]]) -> "TreeForest":
        return cls([TreeArrays.from_nodes(nodes) for nodes in doc])


class Surrogates:
    """Forests predicting reward mean and spread from meta-features plus algorithm"""

    def __init__(self, vocabulary: Sequence[str], mu: TreeForest, sigma: TreeForest, seed: int = 0):
        self.vocabulary = list(vocabulary)
        self.mu = mu
        self.sigma = sigma
        self.seed = seed
        self._index = {name: i for i, name in enumerate(self.vocabulary)}
        self.in_bag_mae: Optional[float] = None
        self.oob_mae: Optional[float] = None

    def encode(self, mf: MetaFeatureVector, algorithm: str) -> np.ndarray:
        onehot = np.zeros(len(self.vocabulary))
        onehot[self._index[algorithm]] = 1.0
        return np.concatenate([mf.values, onehot])

    def knows(self, algorithm: str) -> bool:
        return algorithm in self._index

    def to_document(self) -> Dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "vocabulary": self.vocabulary,
            "seed": self.seed,
            "rf_mu": self.mu.to_document(),
            "rf_sigma": self.sigma.to_document(),
        }

    @classmethod
    def from_document(cls, doc: Dict) -> "Surrogates":
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise MetaBaseError(f"surrogate schema version {version}, expected {SCHEMA_VERSION}")
        try:
            return cls(
                doc["vocabulary"],
                TreeForest.from_document(doc["rf_mu"]),
                TreeForest.from_document(doc["rf_sigma"]),
                int(doc.get("seed", 0)),
            )
        except (KeyError, TypeError) as e:
            raise MetaBaseError(f"malformed surrogate dump: {e}") from e


def _forest(seed: int) -> RandomForestRegressor:
    return RandomForestRegressor(
        n_estimators=FOREST_TREES,
        max_depth=FOREST_MAX_DEPTH,
        min_samples_leaf=FOREST_MIN_LEAF,
        max_features="sqrt",
        bootstrap=True,
        random_state=seed,
    )


def _oob_mae(model: RandomForestRegressor, forest: TreeForest, X: np.ndarray, y: np.ndarray) -> float:
    per_tree = forest.predict_each(X)
    totals = np.zeros(len(y))
    counts = np.zeros(len(y))
    for t, in_bag in enumerate(model.estimators_samples_):
        out_of_bag = np.ones(len(y), dtype=bool)
        out_of_bag[in_bag] = False
        totals[out_of_bag] += per_tree[t, out_of_bag]
        counts[out_of_bag] += 1
    covered = counts > 0
    if not covered.any():
        return float("nan")
    return float(np.mean(np.abs(totals[covered] / counts[covered] - y[covered])))


def train_surrogates(records: Sequence[PerformanceRecord], seed: int = 0) -> Surrogates:
    """
    Fit the mean and spread forests on identical inputs

    Predictions always go through the dumped node arrays, so a saved and
    reloaded base answers exactly like the one trained here.
    """
    if not records:
        raise MetaBaseError("cannot train surrogates on zero records")
    vocabulary = sorted({r.algorithm for r in records})
    placeholder = Surrogates(vocabulary, TreeForest([]), TreeForest([]), seed)
    X = np.vstack([placeholder.encode(r.meta_features, r.algorithm) for r in records])
    y_mu = np.array([r.reward_mean for r in records])
    y_sigma = np.array([r.reward_std for r in records])

    rf_mu = _forest(seed).fit(X, y_mu)
    rf_sigma = _forest(seed).fit(X, y_sigma)
    surrogates = Surrogates(
        vocabulary,
        TreeForest([TreeArrays.from_sklearn(e) for e in rf_mu.estimators_]),
        TreeForest([TreeArrays.from_sklearn(e) for e in rf_sigma.estimators_]),
        seed,
    )
    surrogates.in_bag_mae = float(np.mean(np.abs(surrogates.mu.predict(X) - y_mu)))
    surrogates.oob_mae = _oob_mae(rf_mu, surrogates.mu, X, y_mu)
    logger.info(
        "Trained surrogates on %d records (in-bag MAE %.4f, out-of-bag MAE %.4f)",
        len(records), surrogates.in_bag_mae, surrogates.oob_mae,
    )
    return surrogates


class MetaBase:
    """Performance records plus their surrogates"""

    def __init__(self, records: Sequence[PerformanceRecord], surrogates: Surrogates):
        self.records = sorted(records, key=PerformanceRecord.sort_key)
        self.surrogates = surrogates

    @classmethod
    def build(cls, records: Sequence[PerformanceRecord], seed: int = 0) -> "MetaBase":
        return cls(records, train_surrogates(records, seed))

    def prior(self, mf: MetaFeatureVector, algorithm: str) -> Normal:
        """Predicted reward distribution of applying ``algorithm`` in a state"""
        if not self.surrogates.knows(algorithm):
            return UNINFORMATIVE
        x = self.surrogates.encode(mf, algorithm).reshape(1, -1)
        mean = float(self.surrogates.mu.predict(x)[0])
        std = float(self.surrogates.sigma.predict(x)[0])
        return Normal(min(max(mean, 0.0), 1.0), max(std, 0.0))

    @property
    def dataset_ids(self) -> List[str]:
        return sorted({r.dataset_id for r in self.records})

    def save(self, path: str) -> None:
        os.makedirs(path, exist_ok=True)
        write_jsonl(os.path.join(path, RECORDS_FILE), (r.to_row() for r in self.records))
        document = self.surrogates.to_document()
        document["n_records"] = len(self.records)
        write_json(os.path.join(path, SURROGATES_FILE), document)

    @classmethod
    def load(cls, path: str) -> "MetaBase":
        """
        Read a saved base

        Raises:
            MetaBaseError: missing files, version mismatch or truncation
        """
        records_path = os.path.join(path, RECORDS_FILE)
        surrogates_path = os.path.join(path, SURROGATES_FILE)
        for required in (records_path, surrogates_path):
            if not os.path.isfile(required):
                raise MetaBaseError(f"meta-base file missing: {required}")
        try:
            rows = read_jsonl(records_path)
            document = read_json(surrogates_path)
        except json.JSONDecodeError as e:
            raise MetaBaseError(f"truncated or corrupt meta-base in {path}: {e}") from e
        records = [PerformanceRecord.from_row(row) for row in rows]
        surrogates = Surrogates.from_document(document)
        expected = document.get("n_records")
        if expected is not None and expected != len(records):
            raise MetaBaseError(f"truncated meta-base: {len(records)} of {expected} records")
        return cls(records, surrogates)


def leave_one_out_base(records: Iterable[PerformanceRecord], held_out: str, seed: int = 0) -> MetaBase:
    """Base built from every dataset except ``held_out``"""
    records = list(records)
    if not any(r.dataset_id == held_out for r in records):
        raise MetaBaseError(f"dataset '{held_out}' is not in the corpus")
    remainder = [r for r in records if r.dataset_id != held_out]
    if not remainder:
        raise MetaBaseError(f"no records left after holding out '{held_out}'")
    return MetaBase.build(remainder, seed)


def summarize(stats: EnumerationStats) -> List[str]:
    """Attempt and record counts per dataset and depth, one line each"""
    lines = []
    for dataset_id, depth in sorted(stats.attempted_by_depth):
        lines.append(
            f"{dataset_id} depth {depth}: {stats.attempted_by_depth[(dataset_id, depth)]} sequences, "
            f"{stats.records_by_depth.get((dataset_id, depth - 1), 0)} records"
        )
    return lines
