#!/usr/bin/env python3
"""
Ensemble Service

Greedy forward selection with replacement over the best evaluated pipelines,
scored on their cached validation probabilities.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core.errors import EnsembleError, PipeForgeError
from .data_service import Dataset, Metric, evaluate
from .pipeline_service import PipelineModel

logger = logging.getLogger(__name__)

DEFAULT_ROUNDS = 10


@dataclass
class EnsembleModel:
    """Pipelines with selection multiplicities"""

    members: List[PipelineModel]
    multiplicities: List[int]
    metric: Metric
    reward: float = 0.0
    metric_value: float = 0.0
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise EnsembleError("an ensemble needs at least one member")
        if len(self.members) != len(self.multiplicities) or min(self.multiplicities) < 1:
            raise EnsembleError("every member needs a positive multiplicity")

    @property
    def size(self) -> int:
        return int(sum(self.multiplicities))

    def predict_proba(self, d: Dataset) -> np.ndarray:
        """Multiplicity-weighted mean; failing members give their weight to the rest"""
        total: Optional[np.ndarray] = None
        weight = 0
        for member, count in zip(self.members, self.multiplicities):
            try:
                proba = member.predict_proba(d)
            except PipeForgeError as e:
                logger.warning("Ensemble member %s failed to predict: %s", member.candidate.label(), e)
                continue
            total = proba * count if total is None else total + proba * count
            weight += count
        if total is None:
            raise EnsembleError("every ensemble member failed to predict")
        return total / weight

    def predict(self, d: Dataset) -> np.ndarray:
        return self.predict_proba(d).argmax(axis=1)

    def to_document(self) -> Dict:
        return {
            "metric": self.metric.name,
            "reward": float(self.reward),
            "metric_value": float(self.metric_value),
            "multiplicities": list(self.multiplicities),
            "members": [m.to_document() for m in self.members],
        }

    @classmethod
    def from_document(cls, doc: Dict) -> "EnsembleModel":
        return cls(
            [PipelineModel.from_document(m) for m in doc["members"]],
            [int(c) for c in doc["multiplicities"]],
            Metric.from_name(doc["metric"]),
            float(doc.get("reward", 0.0)),
            float(doc.get("metric_value", 0.0)),
        )


def select(
    pool: Sequence[PipelineModel],
    y_true: Sequence[int],
    metric: Metric,
    rounds: int = DEFAULT_ROUNDS,
) -> EnsembleModel:
    """
    Build an ensemble from the pool by greedy forward selection

    Starts from the best single model (first one on ties) and adds, with
    replacement, whichever model improves the validation reward most.
    Stops after ``rounds`` additions or when nothing improves.

    Raises:
        EnsembleError: empty pool or validation matrices of different shapes
    """
    if not pool:
        raise EnsembleError("ensemble pool is empty")
    for model in pool:
        if model.valid_proba is None:
            raise EnsembleError(f"{model.candidate.label()} has no cached validation probabilities")
    shape = pool[0].valid_proba.shape
    if any(m.valid_proba.shape != shape for m in pool) or shape[0] != len(y_true):
        raise EnsembleError("misaligned validation matrices")

    best = max(range(len(pool)), key=lambda i: (pool[i].reward, -i))
    counts = [0] * len(pool)
    counts[best] = 1
    total = pool[best].valid_proba.astype(np.float64).copy()
    value, reward = evaluate(metric, y_true, total)
    history = [reward]

    for _ in range(rounds):
        size = sum(counts)
        choice, choice_value, choice_reward = None, value, reward
        for i, model in enumerate(pool):
            candidate_value, candidate_reward = evaluate(metric, y_true, (total + model.valid_proba) / (size + 1))
            if candidate_reward > choice_reward:
                choice, choice_value, choice_reward = i, candidate_value, candidate_reward
        if choice is None:
            break
        counts[choice] += 1
        total = total + pool[choice].valid_proba
        value, reward = choice_value, choice_reward
        history.append(reward)

    members = [pool[i] for i, c in enumerate(counts) if c]
    multiplicities = [c for c in counts if c]
    logger.info("Ensemble of %d pipelines (%d picks), validation reward %.4f", len(members), sum(counts), reward)
    return EnsembleModel(members, multiplicities, metric, reward, value, history)
