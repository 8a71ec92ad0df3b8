#!/usr/bin/env python3
"""
Bundled synthetic corpus

Small classification datasets for building a meta-base without external
files: Gaussian blobs, interleaved moons, XOR, scale-dominated sets where
scale-1 structure is drowned by a huge noise column, a mixed
numeric/categorical set, and copies with missing cells injected.
"""

import logging
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from ..core.errors import DataError
from ..services.data_service import CATEGORICAL, NUMERIC, DEFAULT_MISSING_TOKENS, Column, Dataset, load_csv

logger = logging.getLogger(__name__)

CORPUS_ROWS = 150


def blobs(n: int = CORPUS_ROWS, d: int = 4, k: int = 2, seed: int = 0, spread: float = 1.5) -> Dataset:
    X, y = make_blobs(n_samples=n, n_features=d, centers=k, cluster_std=spread, random_state=seed)
    return Dataset.from_arrays(X, y)


def moons(n: int = CORPUS_ROWS, seed: int = 0, noise: float = 0.2) -> Dataset:
    X, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    return Dataset.from_arrays(X, y)


def xor(n: int = CORPUS_ROWS, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, 2))
    y = (X[:, 0] * X[:, 1] > 0).astype(np.int64)
    return Dataset.from_arrays(X, y)


def scaled_planted(
    n: int = 2000,
    bits: int = 6,
    seed: int = 0,
    noise_scale: float = 1e6,
    spread: float = 0.15,
    outlier: float = 25.0,
) -> Dataset:
    """
    Parity of ``bits`` scale-1 sign columns, drowned by one noise column

    Row i sits near corner ``i mod 2**bits`` of the {-1, +1} cube and its class
    is the parity of that corner, so no single column (and no column subset)
    says anything about the class; only distances over all sign columns do.
    Each sign column also holds ``max(1, n // 1000)`` outliers of alternating
    sign between ``outlier`` and ``2 * outlier`` in magnitude. They stretch
    the range seen by uniform binning and min-max scaling, while standard
    scaling still keeps neighbouring corners apart. The last column is
    Gaussian noise at ``noise_scale``.
    """
    rng = np.random.default_rng(seed)
    corner = np.arange(n) % (2 ** bits)
    rng.shuffle(corner)
    signs = (corner[:, None] >> np.arange(bits)) & 1
    y = signs.sum(axis=1) % 2
    informative = 2.0 * signs - 1.0 + rng.normal(0.0, spread, size=(n, bits))
    per_column = max(1, n // 1000)
    for j in range(bits):
        rows = rng.choice(n, size=per_column, replace=False)
        signs_out = np.resize([1.0, -1.0], per_column) * rng.choice([-1.0, 1.0])
        informative[rows, j] = signs_out * outlier * rng.uniform(1.0, 2.0, size=per_column)
    noise = rng.normal(0.0, noise_scale, size=n)
    names = [f"sign_{j}" for j in range(bits)] + ["noise"]
    return Dataset.from_arrays(np.column_stack([informative, noise]), y, names=names)


def with_noise_column(d: Dataset, scale: float = 1e6, seed: int = 0) -> Dataset:
    """Copy with a Gaussian noise column at ``scale`` appended"""
    noise = np.random.default_rng(seed).normal(0.0, scale, size=(d.n_rows, 1))
    columns = list(d.columns) + [Column("noise")]
    return d.with_features(np.hstack([d.values, noise]), columns)


def mixed(n: int = CORPUS_ROWS, seed: int = 0) -> Dataset:
    """Blobs plus a categorical column derived from the first feature"""
    X, y = make_blobs(n_samples=n, n_features=3, centers=2, cluster_std=2.0, random_state=seed)
    codes = np.digitize(X[:, 0], np.quantile(X[:, 0], [0.25, 0.5, 0.75])).astype(np.float64)
    values = np.column_stack([X, codes])
    return Dataset.from_arrays(values, y, kinds=[NUMERIC, NUMERIC, NUMERIC, CATEGORICAL])


def with_missing(d: Dataset, fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Copy with a random share of feature cells set missing"""
    rng = np.random.default_rng(seed)
    values = d.values.copy()
    mask = rng.random(values.shape) < fraction
    values[mask] = np.nan
    return d.with_features(values, d.columns)


def missing_blobs(n: int = 400, d: int = 5, k: int = 2, fraction: float = 0.2, seed: int = 0) -> Dataset:
    return with_missing(blobs(n, d, k, seed, spread=1.0), fraction, seed)


def builtin_corpus(seed: int = 0) -> List[Tuple[str, Dataset]]:
    """The bundled datasets as (dataset_id, dataset) pairs"""
    corpus = [
        ("blobs_k2", blobs(k=2, seed=seed)),
        ("blobs_k3", blobs(k=3, seed=seed + 1)),
        ("blobs_k5", blobs(d=6, k=5, seed=seed + 2)),
        ("moons", moons(seed=seed + 3)),
        ("xor", xor(seed=seed + 4)),
        ("scaled_planted", scaled_planted(n=CORPUS_ROWS, bits=2, seed=seed + 5)),
        ("mixed", mixed(seed=seed + 6)),
    ]
    corpus.append(("blobs_k3_missing", with_missing(corpus[1][1], 0.1, seed + 7)))
    corpus.append(("moons_missing", with_missing(corpus[3][1], 0.1, seed + 8)))
    corpus.append(("scaled_blobs", with_noise_column(blobs(seed=seed + 9), seed=seed + 9)))
    corpus.append(("scaled_parity3", scaled_planted(n=CORPUS_ROWS, bits=3, seed=seed + 10)))
    return corpus


def load_corpus_dir(
    path: str,
    target: Optional[str] = None,
    missing_tokens: Sequence[str] = DEFAULT_MISSING_TOKENS,
) -> List[Tuple[str, Dataset]]:
    """
    Load every CSV in a directory; dataset ids are the file stems

    Without an explicit ``target`` the last column of each file is the class.
    """
    if not os.path.isdir(path):
        raise DataError(f"corpus directory not found: {path}")
    corpus = []
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith(".csv"):
            continue
        file_path = os.path.join(path, name)
        column = target
        if column is None:
            with open(file_path, "r", encoding="utf-8") as f:
                header = f.readline().rstrip("\r\n")
            column = header.split(",")[-1]
        corpus.append((os.path.splitext(name)[0], load_csv(file_path, column, missing_tokens)))
    if not corpus:
        raise DataError(f"no CSV files in {path}")
    logger.info("Loaded %d corpus datasets from %s", len(corpus), path)
    return corpus
