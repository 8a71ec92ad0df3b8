#!/usr/bin/env python3
"""
Pipeline Service

Sequential pipeline execution: fitting a chain of steps left to right,
materializing intermediate datasets for search nodes (with a bounded LRU
cache), and scoring terminal classifiers on the validation split.
"""

import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from ..core.errors import EvaluationTimeout, InapplicableStepError, PipelineError
from ..utils.serialization import decode_state, encode_state
from .data_service import Dataset, Metric, evaluate
from .step_service import (
    Config,
    FittedStep,
    apply_step,
    fit_step,
    get_spec,
    predict_proba,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0
DEFAULT_CACHE_BYTES = 512 * 1024 * 1024
MAX_FAILURES = 4096

T = TypeVar("T")


@dataclass(frozen=True)
class PipelineCandidate:
    """Ordered step names; terminal when the last step is a classifier"""

    steps: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for name in self.steps:
            get_spec(name)

    @property
    def terminal(self) -> bool:
        return bool(self.steps) and get_spec(self.steps[-1]).is_classifier

    def __len__(self) -> int:
        return len(self.steps)

    def label(self) -> str:
        return " -> ".join(self.steps)


@dataclass
class PipelineModel:
    """Fitted step chain with its validation score"""

    candidate: PipelineCandidate
    configs: List[Config]
    fitted: List[FittedStep]
    reward: float = 0.0
    metric_value: float = 0.0
    valid_proba: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.configs) != len(self.candidate.steps):
            raise PipelineError("configs do not align with candidate steps")
        if self.fitted and len(self.fitted) != len(self.candidate.steps):
            raise PipelineError("fitted steps do not align with candidate steps")

    def predict_proba(self, d: Dataset) -> np.ndarray:
        if not self.fitted:
            raise PipelineError("pipeline has no fitted steps")
        current = d
        for position, step in enumerate(self.fitted[:-1]):
            try:
                current = apply_step(step, current)
            except InapplicableStepError as e:
                raise e.at(position) from e
        try:
            return predict_proba(self.fitted[-1], current)
        except InapplicableStepError as e:
            raise e.at(len(self.fitted) - 1) from e

    def key(self) -> str:
        """Identity of structure plus configuration"""
        parts = [f"{name}{sorted(cfg.items())}" for name, cfg in zip(self.candidate.steps, self.configs)]
        return "|".join(parts)

    def to_document(self) -> Dict:
        return {
            "steps": list(self.candidate.steps),
            "configs": [dict(c) for c in self.configs],
            "reward": float(self.reward),
            "metric_value": float(self.metric_value),
            "states": [encode_state(f.state) for f in self.fitted],
        }

    @classmethod
    def from_document(cls, doc: Dict) -> "PipelineModel":
        candidate = PipelineCandidate(tuple(doc["steps"]))
        configs = [dict(c) for c in doc["configs"]]
        fitted = [
            FittedStep(name, cfg, decode_state(blob))
            for name, cfg, blob in zip(candidate.steps, configs, doc.get("states", []))
        ]
        return cls(candidate, configs, fitted, float(doc.get("reward", 0.0)), float(doc.get("metric_value", 0.0)))


def _fit_chain(
    candidate: PipelineCandidate,
    configs: Sequence[Config],
    train: Dataset,
    seed: int,
    deadline: float,
    valid: Optional[Dataset] = None,
) -> Tuple[List[FittedStep], Optional[Dataset]]:
    """Fit every step, pushing train (and valid) forward; valid never feeds a fit"""
    fitted: List[FittedStep] = []
    current_train, current_valid = train, valid
    last = len(candidate.steps) - 1
    for position, (name, config) in enumerate(zip(candidate.steps, configs)):
        if time.perf_counter() > deadline:
            raise EvaluationTimeout(f"timeout before step {position} ({name})")
        try:
            step = fit_step(get_spec(name), config, current_train, seed + position)
            if position < last:
                current_train = apply_step(step, current_train)
                if current_valid is not None:
                    current_valid = apply_step(step, current_valid)
        except InapplicableStepError as e:
            raise e.at(position) from e
        fitted.append(step)
    return fitted, current_valid


def run_with_deadline(work: Callable[[], T], deadline: float, label: str) -> T:
    """
    Run ``work`` and give up once ``deadline`` (perf_counter seconds) passes

    The work runs on a daemon thread that is abandoned on timeout; it stops
    at its next step boundary because the chain checks the same deadline.

    Raises:
        EvaluationTimeout: deadline passed before the work finished
    """
    remaining = deadline - time.perf_counter()
    if remaining <= 0:
        raise EvaluationTimeout(f"timeout before start: {label}")
    if remaining == float("inf"):
        return work()

    outcome: Dict[str, object] = {}

    def target() -> None:
        try:
            outcome["value"] = work()
        except BaseException as e:  # re-raised on the caller's thread
            outcome["error"] = e

    worker = threading.Thread(target=target, name=f"pipeforge-eval:{label}", daemon=True)
    worker.start()
    worker.join(remaining)
    if worker.is_alive():
        logger.debug("Abandoned evaluation of %s at its deadline", label)
        raise EvaluationTimeout(f"timeout after {remaining:.1f}s: {label}")
    if "error" in outcome:
        raise outcome["error"]  # type: ignore[misc]
    return outcome["value"]  # type: ignore[return-value]


def execute(
    candidate: PipelineCandidate,
    configs: Sequence[Config],
    train: Dataset,
    valid: Dataset,
    metric: Metric,
    seed: int,
    timeout: float = DEFAULT_TIMEOUT,
) -> PipelineModel:
    """
    Fit a terminal candidate on train and score it on valid

    Args:
        candidate: Terminal pipeline candidate
        configs: One configuration per step
        train: Training split
        valid: Validation split
        metric: Metric used for the reward
        seed: Base seed, offset by position per step
        timeout: Wall-clock seconds allowed for fitting and prediction,
            enforced while a step is still running

    Returns:
        PipelineModel: fitted chain with validation reward and probabilities

    Raises:
        PipelineError: non-terminal candidate or misaligned configs
        InapplicableStepError: a step failed; ``position`` names it
        EvaluationTimeout: deadline passed
    """
    if not candidate.terminal:
        raise PipelineError(f"non-terminal candidate: {candidate.label() or '<empty>'}")
    if len(configs) != len(candidate.steps):
        raise PipelineError("configs do not align with candidate steps")
    deadline = time.perf_counter() + timeout

    def fit_and_predict() -> Tuple[List[FittedStep], np.ndarray]:
        fitted, current_valid = _fit_chain(candidate, configs, train, seed, deadline, valid)
        try:
            return fitted, predict_proba(fitted[-1], current_valid)
        except InapplicableStepError as e:
            raise e.at(len(fitted) - 1) from e

    fitted, proba = run_with_deadline(fit_and_predict, deadline, candidate.label())
    metric_value, reward = evaluate(metric, valid.target, proba)
    return PipelineModel(candidate, [dict(c) for c in configs], fitted, reward, metric_value, proba)


def refit(model: PipelineModel, data: Dataset, seed: int, timeout: float = float("inf")) -> PipelineModel:
    """Refit a model's structure and configs on new data, keeping its validation scores"""
    deadline = time.perf_counter() + timeout
    fitted, _ = _fit_chain(model.candidate, model.configs, data, seed, deadline)
    return PipelineModel(model.candidate, model.configs, fitted, model.reward, model.metric_value, model.valid_proba)


class IntermediateCache:
    """
    Byte-bounded LRU cache of intermediate datasets

    The newest entry is always kept, so the held bytes never exceed the
    budget by more than one entry. Evicted entries are recomputed on demand.
    Remembered failures are capped at ``max_failures``, oldest dropped first.
    """

    def __init__(self, max_bytes: int = DEFAULT_CACHE_BYTES, max_failures: int = MAX_FAILURES):
        self.max_bytes = int(max_bytes)
        self.max_failures = int(max_failures)
        self._entries: "OrderedDict[Tuple, Dataset]" = OrderedDict()
        self._failures: "OrderedDict[Tuple, InapplicableStepError]" = OrderedDict()
        self._lock = threading.RLock()
        self.current_bytes = 0
        self.peak_bytes = 0
        self.hits = 0
        self.misses = 0
        self.computations = 0
        self.evictions = 0

    @staticmethod
    def entry_bytes(d: Dataset) -> int:
        return int(d.values.nbytes + d.target.nbytes)

    def get(self, key: Tuple) -> Optional[Dataset]:
        with self._lock:
            if key in self._failures:
                raise self._failures[key]
            entry = self._entries.get(key)
            if entry is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return entry

    def put(self, key: Tuple, d: Dataset) -> None:
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                return
            self._entries[key] = d
            self.current_bytes += self.entry_bytes(d)
            while self.current_bytes > self.max_bytes and len(self._entries) > 1:
                _, evicted = self._entries.popitem(last=False)
                self.current_bytes -= self.entry_bytes(evicted)
                self.evictions += 1
            self.peak_bytes = max(self.peak_bytes, self.current_bytes)

    def fail(self, key: Tuple, error: InapplicableStepError) -> None:
        with self._lock:
            self._failures[key] = error
            self._failures.move_to_end(key)
            while len(self._failures) > self.max_failures:
                self._failures.popitem(last=False)

    def get_or_compute(self, key: Tuple, compute: Callable[[], Dataset]) -> Dataset:
        """
        Cached dataset for ``key``, computing and storing it on a miss

        Raises:
            InapplicableStepError: remembered or fresh failure of ``compute``
        """
        hit = self.get(key)
        if hit is not None:
            return hit
        try:
            result = compute()
        except InapplicableStepError as e:
            self.fail(key, e)
            raise
        with self._lock:
            self.computations += 1
        self.put(key, result)
        return result

    def __len__(self) -> int:
        return len(self._entries)

    def stats(self) -> Dict[str, int]:
        with self._lock:
            return {
                "entries": len(self._entries),
                "bytes": self.current_bytes,
                "peak_bytes": self.peak_bytes,
                "hits": self.hits,
                "misses": self.misses,
                "computations": self.computations,
                "evictions": self.evictions,
                "failures": len(self._failures),
            }


def intermediate(
    prefix: Sequence[str],
    default_configs: Sequence[Config],
    train: Dataset,
    seed: int,
    cache: Optional[IntermediateCache] = None,
) -> Dataset:
    """
    Materialize the dataset produced by a prefix at default configurations

    Classifiers inside the prefix contribute their predictions as features.
    Results are cached per (dataset, prefix); parents are reused when present.

    Raises:
        InapplicableStepError: some step of the prefix cannot be applied
    """
    prefix = tuple(prefix)
    if not prefix:
        return train
    if len(default_configs) != len(prefix):
        raise PipelineError("default configs do not align with prefix")

    def materialize() -> Dataset:
        parent = intermediate(prefix[:-1], default_configs[:-1], train, seed, cache)
        position = len(prefix) - 1
        try:
            step = fit_step(get_spec(prefix[-1]), default_configs[-1], parent, seed + position)
            result = apply_step(step, parent)
        except InapplicableStepError as e:
            raise e.at(position) from e
        logger.debug("Materialized prefix %s: %d columns", " -> ".join(prefix), result.n_features)
        return result

    if cache is None:
        return materialize()
    return cache.get_or_compute((train.fingerprint(), seed, prefix), materialize)
