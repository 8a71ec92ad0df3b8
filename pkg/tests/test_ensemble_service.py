#!/usr/bin/env python3
"""
Tests for greedy ensemble selection and ensemble prediction
"""

import math

import numpy as np
import pytest

from pipeforge.core.errors import EnsembleError, PipelineError
from pipeforge.services.data_service import Dataset, Metric, evaluate
from pipeforge.services.ensemble_service import EnsembleModel, select
from pipeforge.services.pipeline_service import PipelineCandidate, PipelineModel

LOGLOSS = Metric.from_name("logloss")


def _model(proba, y, metric=LOGLOSS, steps=("knn",)) -> PipelineModel:
    proba = np.asarray(proba, dtype=float)
    value, reward = evaluate(metric, y, proba)
    return PipelineModel(PipelineCandidate(steps), [{}] * len(steps), [], reward, value, proba)


class _Fixed(PipelineModel):
    """Member whose predictions do not depend on the input"""

    def predict_proba(self, d):
        return np.repeat(self.valid_proba[:1], d.n_rows, axis=0)


class _Broken(PipelineModel):
    def predict_proba(self, d):
        raise PipelineError("cannot predict")


def _fixed(row) -> _Fixed:
    return _Fixed(PipelineCandidate(("knn",)), [{}], [], 0.5, 0.5, np.array([row], dtype=float))


def _rows(n: int = 3) -> Dataset:
    return Dataset.from_arrays(np.zeros((n, 1)), [0, 1, 0][:n])


def test_two_by_two_logloss():
    y = [1, 0]
    a = _model([[0.1, 0.9], [0.1, 0.9]], y)
    b = _model([[0.9, 0.1], [0.9, 0.1]], y)
    assert a.metric_value == pytest.approx(1.20397, abs=1e-5)

    ensemble = select([a, b], y, LOGLOSS)
    assert ensemble.members[0] is a and ensemble.members[1] is b
    assert ensemble.multiplicities == [1, 1]
    assert ensemble.metric_value == pytest.approx(math.log(2), abs=1e-6)
    assert ensemble.reward > a.reward


def test_pool_of_one():
    y = [0, 1, 1]
    only = _model([[0.7, 0.3], [0.4, 0.6], [0.2, 0.8]], y)
    ensemble = select([only], y, LOGLOSS)
    assert ensemble.size == 1
    assert ensemble.reward == pytest.approx(only.reward)


def test_identical_pool_stops_after_init():
    y = [0, 1]
    proba = [[0.8, 0.2], [0.3, 0.7]]
    pool = [_model(proba, y), _model(proba, y, steps=("decision_tree",))]
    ensemble = select(pool, y, LOGLOSS)
    assert ensemble.size == 1
    assert ensemble.members[0] is pool[0]
    assert ensemble.reward == pytest.approx(pool[0].reward)
    assert len(ensemble.history) == 1


def test_ensemble_never_worse_than_best_member():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=40)
    metric = Metric.from_name("balanced_accuracy")
    for _ in range(5):
        pool = []
        for _ in range(8):
            p = rng.uniform(size=40)
            pool.append(_model(np.column_stack([1 - p, p]), y, metric))
        ensemble = select(pool, y, metric, rounds=10)
        assert ensemble.reward >= max(m.reward for m in pool)
        assert ensemble.size <= 11


def test_misaligned_pool():
    a = _model([[0.5, 0.5], [0.5, 0.5]], [0, 1])
    b = _model([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]], [0, 1, 0])
    with pytest.raises(EnsembleError, match="misaligned"):
        select([a, b], [0, 1], LOGLOSS)
    with pytest.raises(EnsembleError):
        select([], [0, 1], LOGLOSS)


def test_single_member_prediction_is_identity():
    member = _fixed([0.2, 0.8])
    ensemble = EnsembleModel([member], [1], LOGLOSS)
    assert np.allclose(ensemble.predict_proba(_rows()), member.predict_proba(_rows()))


def test_multiplicity_weighting():
    a, b = _fixed([0.9, 0.1]), _fixed([0.3, 0.7])
    ensemble = EnsembleModel([a, b], [2, 1], LOGLOSS)
    expected = (2 * np.array([0.9, 0.1]) + np.array([0.3, 0.7])) / 3
    proba = ensemble.predict_proba(_rows())
    assert np.allclose(proba, expected)
    assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert ensemble.predict(_rows()).tolist() == [0, 0, 0]


def test_failing_member_weight_redistributed():
    good = _fixed([0.4, 0.6])
    broken = _Broken(PipelineCandidate(("knn",)), [{}], [], 0.5, 0.5)
    ensemble = EnsembleModel([good, broken], [1, 3], LOGLOSS)
    assert np.allclose(ensemble.predict_proba(_rows()), [[0.4, 0.6]] * 3)

    dead = EnsembleModel([broken], [1], LOGLOSS)
    with pytest.raises(EnsembleError):
        dead.predict_proba(_rows())


def test_model_needs_members():
    with pytest.raises(EnsembleError):
        EnsembleModel([], [], LOGLOSS)
    with pytest.raises(EnsembleError):
        EnsembleModel([_fixed([0.5, 0.5])], [0], LOGLOSS)


def test_document_keeps_multiplicities():
    y = [1, 0]
    ensemble = select([_model([[0.1, 0.9]] * 2, y), _model([[0.9, 0.1]] * 2, y)], y, LOGLOSS)
    restored = EnsembleModel.from_document(ensemble.to_document())
    assert restored.multiplicities == ensemble.multiplicities
    assert restored.metric.name == "logloss"
    assert restored.reward == pytest.approx(ensemble.reward)
