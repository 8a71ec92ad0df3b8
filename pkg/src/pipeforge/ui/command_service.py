#!/usr/bin/env python3
"""
Command Service

Handlers behind the pipeforge subcommands. Each handler returns an exit
code for successful or empty outcomes and lets PipeForgeError propagate;
the application maps those to exit codes.
"""

import logging
import os
import sys
from datetime import datetime
from typing import List, Sequence, Tuple

import pandas as pd

from ..core.app_config import AppConfig
from ..core.errors import DataError
from ..services.data_service import Dataset, encode_with_schema, load_csv
from ..services.engine_service import Engine, RunResult, load_model, predict
from ..services.metabase_service import MetaBase, MetaBaseBuilder, summarize
from ..utils.synthetic import builtin_corpus, load_corpus_dir
from .report_service import report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY = 3
EXIT_NO_EVALUATIONS = 4

BUILTIN_CORPUS = "builtin"


class CommandService:
    """Runs one subcommand against a loaded AppConfig"""

    def __init__(self, app_config: AppConfig):
        self.app_config = app_config

    def _load_corpus(self, source: str, target: str = None) -> List[Tuple[str, Dataset]]:
        if source == BUILTIN_CORPUS:
            return builtin_corpus(self.app_config.get_seed())
        return load_corpus_dir(source, target, self.app_config.get_missing_tokens())

    def handle_build_metabase(self, corpus: str, out: str, max_depth: int, target: str = None) -> int:
        """
        Enumerate the corpus, train the surrogates and save the base

        Args:
            corpus: Directory of CSV files, or "builtin"
            out: Output directory for records.jsonl and surrogates.json
            max_depth: Longest enumerated sequence
            target: Class column of the corpus files (last column when None)

        Returns:
            int: EXIT_OK, or EXIT_EMPTY when no record was produced
        """
        seed = self.app_config.get_seed()
        builder = MetaBaseBuilder(
            self.app_config.get_metric(),
            max_depth=max_depth,
            seed=seed,
            valid_fraction=float(self.app_config.get("valid_fraction")),
            workers=self.app_config.get_workers(),
            progress=True,
        )
        datasets = self._load_corpus(corpus, target)
        print(f"📁 Corpus: {corpus} ({len(datasets)} datasets), max depth {max_depth}", file=sys.stderr)

        records = builder.enumerate(datasets)
        if not records:
            print("⚠️ Enumeration produced no records", file=sys.stderr)
            return EXIT_EMPTY

        base = MetaBase.build(records, seed)
        base.save(out)

        print("=" * 70, file=sys.stderr)
        print("META-BASE SUMMARY", file=sys.stderr)
        print("=" * 70, file=sys.stderr)
        for line in summarize(builder.stats):
            print(f"  {line}", file=sys.stderr)
        print(
            f"✅ {len(records)} records from {len(base.dataset_ids)} datasets written to {out} "
            f"(surrogate OOB MAE {base.surrogates.oob_mae:.4f})",
            file=sys.stderr,
        )
        return EXIT_OK

    def handle_fit(self, data: str, out: str = None) -> int:
        """
        Run the search on one CSV and write the run directory

        The one-line summary goes to stdout.
        """
        dataset = load_csv(data, self.app_config.get_target(), self.app_config.get_missing_tokens())
        run_config = self.app_config.to_run_config()
        out = out or os.path.join("runs", f"run_{datetime.now().strftime('%Y%m%d_%H%M%S')}")
        logger.info("Fitting %s (%d rows, %d features, %d classes)", data, dataset.n_rows, dataset.n_features, dataset.n_classes)

        result: RunResult = Engine(run_config).fit(dataset)
        result.save(out)

        print(
            f"✅ incumbent reward {result.incumbent.reward:.4f} | "
            f"ensemble size {result.ensemble.size} | "
            f"evaluations {result.n_evaluations} | run {out}"
        )
        return EXIT_OK

    def handle_predict(self, model_dir: str, data: str, out: str) -> int:
        """Write row index, predicted label and per-class probabilities"""
        ensemble, schema = load_model(model_dir)
        dataset = encode_with_schema(
            data, schema, self.app_config.get_target(), self.app_config.get_missing_tokens()
        )
        labels, proba = predict(ensemble, dataset)
        class_names: Sequence[str] = schema.get("class_names") or [str(i) for i in range(proba.shape[1])]
        if proba.shape[1] != len(class_names):
            raise DataError(f"model predicts {proba.shape[1]} classes but the schema names {len(class_names)}")

        frame = pd.DataFrame({"row": range(dataset.n_rows), "label": [class_names[i] for i in labels]})
        for j, name in enumerate(class_names):
            frame[f"proba_{name}"] = proba[:, j]
        directory = os.path.dirname(out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        frame.to_csv(out, index=False)

        print(f"✅ {dataset.n_rows} predictions written to {out}")
        return EXIT_OK

    def handle_report(self, run_dir: str, dot: str = None) -> int:
        report(run_dir, sys.stdout, dot)
        if dot:
            print(f"\n📊 Search graph written to {dot}")
        return EXIT_OK
