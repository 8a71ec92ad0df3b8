#!/usr/bin/env python3
"""
Tests for meta-base enumeration, surrogate training and persistence
"""

import json
import os

import numpy as np
import pytest

from pipeforge.core.errors import MetaBaseError
from pipeforge.services.data_service import Metric
from pipeforge.services.metabase_service import (
    RECORDS_FILE,
    UNINFORMATIVE,
    MetaBase,
    MetaBaseBuilder,
    PerformanceRecord,
    leave_one_out_base,
    summarize,
    train_surrogates,
)
from pipeforge.services.metafeature_service import N_FEATURES, MetaFeatureVector
from pipeforge.utils import synthetic

ACTIONS = ["standard_scaler", "minmax_scaler", "pca", "knn", "decision_tree"]


def _random_records(n: int = 60, seed: int = 0, datasets: int = 3):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        values = rng.uniform(0.0, 1.0, size=N_FEATURES)
        algorithm = ["knn", "decision_tree", "pca"][i % 3]
        reward = float(np.clip(0.3 + 0.5 * values[0] + rng.normal(0.0, 0.05), 0.0, 1.0))
        records.append(PerformanceRecord(f"ds{i % datasets}", MetaFeatureVector(values), algorithm, reward, 0.05))
    return records


def test_enumeration_counts_depth_two(blobs):
    builder = MetaBaseBuilder(Metric.from_name("balanced_accuracy"), max_depth=2, actions=ACTIONS)
    records = builder.enumerate([("blobs", blobs)])
    assert builder.stats.attempted == 30
    assert builder.stats.classifier_terminated == 12
    assert builder.stats.failed == 0
    classifier_records = [r for r in records if r.algorithm in ("knn", "decision_tree")]
    assert len(classifier_records) == 12
    # one aggregate per depth-1 preprocessor
    assert len(records) == 15
    assert all(r.n_evals == 2 for r in records if r.algorithm not in ("knn", "decision_tree"))


def test_enumeration_counts_depth_one(blobs):
    builder = MetaBaseBuilder(Metric.from_name("balanced_accuracy"), max_depth=1, actions=ACTIONS)
    records = builder.enumerate([("blobs", blobs)])
    assert builder.stats.attempted == 5
    assert builder.stats.classifier_terminated == 2
    assert len(records) == 2
    assert summarize(builder.stats) == ["blobs depth 1: 5 sequences, 2 records"]


def test_enumeration_is_deterministic(blobs):
    metric = Metric.from_name("balanced_accuracy")
    first = MetaBaseBuilder(metric, max_depth=1, actions=ACTIONS).enumerate([("blobs", blobs)])
    second = MetaBaseBuilder(metric, max_depth=1, actions=ACTIONS, workers=2).enumerate([("blobs", blobs)])
    assert [r.to_row() for r in first] == [r.to_row() for r in second]


def test_max_depth_bound():
    with pytest.raises(MetaBaseError, match="max depth is 5"):
        MetaBaseBuilder(Metric.from_name("accuracy"), max_depth=6)


def test_empty_corpus():
    with pytest.raises(MetaBaseError):
        MetaBaseBuilder(Metric.from_name("accuracy"), max_depth=1).enumerate([])


def test_single_record_prior():
    mf = MetaFeatureVector(np.linspace(0.0, 1.0, N_FEATURES))
    base = MetaBase.build([PerformanceRecord("only", mf, "knn", 0.7)])
    assert base.prior(mf, "knn").mean == pytest.approx(0.7)
    assert base.prior(MetaFeatureVector(np.zeros(N_FEATURES)), "knn").mean == pytest.approx(0.7)


def test_constant_rewards_give_constant_prior():
    rng = np.random.default_rng(3)
    records = [
        PerformanceRecord(f"ds{i}", MetaFeatureVector(rng.normal(size=N_FEATURES)), "knn", 0.5)
        for i in range(20)
    ]
    base = MetaBase.build(records)
    for _ in range(5):
        prior = base.prior(MetaFeatureVector(rng.normal(size=N_FEATURES)), "knn")
        assert prior.mean == pytest.approx(0.5)
        assert prior.std == pytest.approx(0.0)


def test_unknown_algorithm_is_uninformative():
    base = MetaBase.build(_random_records(30))
    assert base.prior(MetaFeatureVector(np.zeros(N_FEATURES)), "gaussian_nb") == UNINFORMATIVE


def test_in_bag_error_not_above_out_of_bag():
    surrogates = train_surrogates(_random_records(80))
    assert surrogates.in_bag_mae <= surrogates.oob_mae


def test_priors_are_clamped():
    base = MetaBase.build(_random_records(40))
    rng = np.random.default_rng(9)
    for _ in range(20):
        prior = base.prior(MetaFeatureVector(rng.uniform(-5.0, 5.0, size=N_FEATURES)), "knn")
        assert 0.0 <= prior.mean <= 1.0
        assert prior.std >= 0.0


def test_record_validation():
    mf = MetaFeatureVector(np.zeros(N_FEATURES))
    with pytest.raises(MetaBaseError):
        PerformanceRecord("ds", mf, "knn", 1.5)
    with pytest.raises(MetaBaseError):
        PerformanceRecord("ds", mf, "knn", 0.5, n_evals=0)


def test_save_load_round_trip(tmp_path):
    base = MetaBase.build(_random_records(60), seed=4)
    first, second = tmp_path / "first", tmp_path / "second"
    base.save(str(first))
    loaded = MetaBase.load(str(first))

    rng = np.random.default_rng(5)
    for _ in range(50):
        mf = MetaFeatureVector(rng.uniform(0.0, 1.0, size=N_FEATURES))
        algorithm = ["knn", "decision_tree", "pca"][int(rng.integers(3))]
        assert loaded.prior(mf, algorithm) == base.prior(mf, algorithm)

    loaded.save(str(second))
    for name in os.listdir(first):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_schema_version_mismatch(tmp_path):
    MetaBase.build(_random_records(20)).save(str(tmp_path))
    path = tmp_path / RECORDS_FILE
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    rows[0]["schema_version"] = 999
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(MetaBaseError, match="schema version"):
        MetaBase.load(str(tmp_path))


def test_truncated_base(tmp_path):
    MetaBase.build(_random_records(20)).save(str(tmp_path))
    path = tmp_path / RECORDS_FILE
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(MetaBaseError, match="truncated"):
        MetaBase.load(str(tmp_path))


def test_missing_files(tmp_path):
    with pytest.raises(MetaBaseError, match="missing"):
        MetaBase.load(str(tmp_path))


def test_leave_one_out_excludes_dataset():
    records = _random_records(60, datasets=3)
    base = leave_one_out_base(records, "ds1")
    assert base.dataset_ids == ["ds0", "ds2"]
    with pytest.raises(MetaBaseError):
        leave_one_out_base(records, "absent")


@pytest.mark.slow
def test_builtin_corpus_enumeration():
    corpus = synthetic.builtin_corpus(seed=0)
    builder = MetaBaseBuilder(Metric.from_name("balanced_accuracy"), max_depth=1)
    base = MetaBase.build(builder.enumerate(corpus))
    assert len(base.dataset_ids) == len(corpus)
    assert base.surrogates.in_bag_mae <= base.surrogates.oob_mae
