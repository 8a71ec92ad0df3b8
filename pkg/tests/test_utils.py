#!/usr/bin/env python3
"""
Tests for serialization helpers, the bundled corpus and logging setup
"""

import logging

import numpy as np
import pytest

from pipeforge.core.errors import DataError
from pipeforge.utils import synthetic
from pipeforge.utils.logging_utils import setup_logging
from pipeforge.utils.serialization import (
    decode_state,
    encode_state,
    read_json,
    read_jsonl,
    to_jsonable,
    write_json,
    write_jsonl,
)


def test_state_blob_restores_arrays():
    state = {"weights": np.arange(6.0).reshape(2, 3), "name": "knn"}
    restored = decode_state(encode_state(state))
    assert restored["name"] == "knn"
    assert np.array_equal(restored["weights"], state["weights"])


def test_to_jsonable_converts_numpy():
    value = to_jsonable({"a": np.int64(3), "b": np.float32(0.5), "c": np.array([1, 2]), "d": np.bool_(True)})
    assert value == {"a": 3, "b": 0.5, "c": [1, 2], "d": True}
    assert type(value["a"]) is int


def test_json_files_are_stable(tmp_path):
    document = {"b": 1, "a": [1.5, 2.5]}
    write_json(str(tmp_path / "x" / "doc.json"), document)
    write_json(str(tmp_path / "y" / "doc.json"), document)
    assert (tmp_path / "x" / "doc.json").read_bytes() == (tmp_path / "y" / "doc.json").read_bytes()
    assert read_json(str(tmp_path / "x" / "doc.json")) == document


def test_jsonl_skips_blank_lines(tmp_path):
    path = str(tmp_path / "rows.jsonl")
    assert write_jsonl(path, [{"i": 0}, {"i": 1}]) == 2
    with open(path, "a", encoding="utf-8") as f:
        f.write("\n")
    assert read_jsonl(path) == [{"i": 0}, {"i": 1}]


def test_builtin_corpus():
    corpus = synthetic.builtin_corpus(seed=0)
    ids = [dataset_id for dataset_id, _ in corpus]
    assert len(ids) == len(set(ids)) == 11
    for dataset_id, d in corpus:
        assert d.n_classes >= 2, dataset_id
    assert dict(corpus)["blobs_k3_missing"].missing.any()


def test_scaled_planted_scales():
    d = synthetic.scaled_planted(n=200, seed=1)
    assert d.n_features == 7
    assert d.column_names[-1] == "noise"
    assert d.values[:, -1].std() > 1e5
    signs = d.values[:, :-1]
    assert 0.5 < np.median(np.abs(signs)) < 1.5
    assert np.bincount(d.target).tolist() == [100, 100]
    parity = (signs > 0).sum(axis=1) % 2
    assert np.mean(parity == d.target) >= 0.9


def test_scaled_planted_columns_carry_no_single_signal():
    d = synthetic.scaled_planted(seed=2)
    for j in range(d.n_features - 1):
        positive = d.values[:, j] > 0
        assert abs(d.target[positive].mean() - 0.5) < 0.06, j


def test_noise_column_appended():
    base = synthetic.blobs(seed=0)
    d = synthetic.with_noise_column(base, seed=0)
    assert d.n_features == base.n_features + 1
    assert np.array_equal(d.values[:, :-1], base.values)
    assert d.values[:, -1].std() > 1e5


def test_missing_fraction():
    d = synthetic.missing_blobs(seed=2)
    assert d.n_rows == 400
    assert d.n_features == 5
    assert 0.15 < d.missing.mean() < 0.25


def test_load_corpus_dir(tmp_path):
    (tmp_path / "b.csv").write_text("x,label\n1,a\n2,b\n3,a\n", encoding="utf-8")
    (tmp_path / "a.csv").write_text("x,y,label\n1,2,u\n2,3,v\n", encoding="utf-8")
    (tmp_path / "notes.txt").write_text("ignored", encoding="utf-8")
    corpus = synthetic.load_corpus_dir(str(tmp_path))
    assert [dataset_id for dataset_id, _ in corpus] == ["a", "b"]
    assert corpus[0][1].n_features == 2


def test_load_corpus_dir_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        synthetic.load_corpus_dir(str(tmp_path / "absent"))
    with pytest.raises(DataError, match="no CSV files"):
        synthetic.load_corpus_dir(str(tmp_path))


def test_setup_logging_replaces_handlers(tmp_path):
    log_file = tmp_path / "logs" / "pipeforge.log"
    setup_logging("DEBUG", str(log_file))
    setup_logging("WARNING", str(log_file))
    logger = logging.getLogger("pipeforge")
    assert len(logger.handlers) == 2
    logging.getLogger("pipeforge.tests").warning("written to file")
    for handler in logger.handlers:
        handler.flush()
    assert "written to file" in log_file.read_text(encoding="utf-8")
    setup_logging("INFO")
    assert len(logger.handlers) == 1
