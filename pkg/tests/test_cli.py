#!/usr/bin/env python3
"""
Command-line tests: exit codes, run directories and outputs
"""

import os
import shutil

import pandas as pd
import pytest

from conftest import BLOBS_CSV, REPO_ROOT
from pipeforge.core.app import build_parser, main

CONF = os.path.join(REPO_ROOT, "config", "pipeforge.conf")


def _run(*args) -> int:
    return main([args[0], "--config", CONF, *args[1:]])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "run")
    code = _run("fit", "--data", BLOBS_CSV, "--max-iterations", "3", "--seed", "0", "--out", out)
    assert code == 0
    return out


def test_fit_writes_run_directory(run_dir):
    for name in ("model.json", "evaluations.jsonl", "tree.json", "config.json", "hpo.jsonl"):
        assert os.path.exists(os.path.join(run_dir, name)), name


def test_fit_summary_line(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert _run("fit", "--data", BLOBS_CSV, "--max-iterations", "2", "--out", out) == 0
    stdout = capsys.readouterr().out
    assert "incumbent reward" in stdout
    assert "ensemble size" in stdout
    assert "evaluations 4" in stdout


def test_roc_auc_on_multiclass(tmp_path, capsys):
    code = _run("fit", "--data", BLOBS_CSV, "--metric", "roc_auc", "--out", str(tmp_path / "run"))
    assert code == 2
    assert "roc_auc requires binary target" in capsys.readouterr().err


def test_zero_budget(tmp_path):
    assert _run("fit", "--data", BLOBS_CSV, "--budget", "0", "--out", str(tmp_path / "run")) == 4


def test_missing_data_file(tmp_path):
    assert _run("fit", "--data", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "run")) == 2


def test_unknown_config_key(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("depth = 3\n", encoding="utf-8")
    assert main(["fit", "--config", str(conf), "--data", BLOBS_CSV]) == 2


def test_predict_on_training_file(run_dir, tmp_path):
    out = str(tmp_path / "predictions.csv")
    assert _run("predict", "--model", run_dir, "--data", BLOBS_CSV, "--out", out) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 150
    assert list(frame.columns[:2]) == ["row", "label"]
    proba = frame[[c for c in frame.columns if c.startswith("proba_")]]
    assert proba.shape[1] == 3
    assert ((proba.sum(axis=1) - 1.0).abs() <= 1e-6).all()
    truth = pd.read_csv(BLOBS_CSV)["class"]
    assert (frame["label"] == truth).mean() >= 0.8


def test_predict_missing_model(tmp_path):
    code = _run("predict", "--model", str(tmp_path), "--data", BLOBS_CSV, "--out", str(tmp_path / "p.csv"))
    assert code == 2


def test_predict_schema_mismatch(run_dir, tmp_path, capsys):
    data = tmp_path / "narrow.csv"
    data.write_text("x1,x3,x4\n1,2,3\n", encoding="utf-8")
    code = _run("predict", "--model", run_dir, "--data", str(data), "--out", str(tmp_path / "p.csv"))
    assert code == 2
    assert "x2" in capsys.readouterr().err


def test_build_metabase_depth_limit(tmp_path, capsys):
    assert _run("build-metabase", "--out", str(tmp_path / "base"), "--max-depth", "6") == 2
    assert "max depth is 5" in capsys.readouterr().err


def test_build_metabase_is_deterministic(tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    shutil.copy(BLOBS_CSV, corpus / "blobs.csv")
    for name in ("a", "b"):
        code = _run("build-metabase", "--corpus", str(corpus), "--out", str(tmp_path / name),
                    "--max-depth", "1", "--seed", "2")
        assert code == 0
    for name in ("records.jsonl", "surrogates.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_build_metabase_unreadable_corpus(tmp_path):
    assert _run("build-metabase", "--corpus", str(tmp_path / "absent"), "--out", str(tmp_path / "base")) == 2


def test_report_and_dot(run_dir, tmp_path, capsys):
    dot = str(tmp_path / "search.dot")
    assert _run("report", "--run", run_dir, "--dot", dot) == 0
    stdout = capsys.readouterr().out
    assert "TOP 10 PIPELINES" in stdout
    assert "Mean pipeline length" in stdout
    with open(dot, encoding="utf-8") as f:
        text = f.read()
    assert text.startswith("digraph search {")
    assert text.rstrip().endswith("}")


def test_report_corrupt_tree(tmp_path):
    (tmp_path / "tree.json").write_text("{\"nodes\": 3}", encoding="utf-8")
    assert _run("report", "--run", str(tmp_path)) == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["--version"])
    assert info.value.code == 0
    assert "pipeforge" in capsys.readouterr().out
