#!/usr/bin/env python3
"""
Engine Service

The optimization loop: pick a terminal candidate from the search tree,
tune it with a short HPO batch, feed the best reward back into the tree,
and keep the best pipelines. When the budget is spent the pool is turned
into an ensemble and refit on all rows.
"""

import logging
import os
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..core.errors import (
    ConfigError,
    DataError,
    NoEvaluationsError,
    PipeForgeError,
    SearchExhausted,
)
from ..utils.serialization import read_json, write_json, write_jsonl
from .data_service import Dataset, Metric, stratified_split
from .ensemble_service import DEFAULT_ROUNDS, EnsembleModel, select
from .hpo_service import HpoOutcome, HpoStore, optimize_candidate
from .metabase_service import MetaBase
from .pipeline_service import (
    DEFAULT_CACHE_BYTES,
    DEFAULT_TIMEOUT,
    IntermediateCache,
    PipelineCandidate,
    PipelineModel,
    refit,
)
from .search_service import PolicyParams, SearchNode, SearchTree

logger = logging.getLogger(__name__)

MODEL_FILE = "model.json"
EVALUATIONS_FILE = "evaluations.jsonl"
TREE_FILE = "tree.json"
CONFIG_FILE = "config.json"
HPO_FILE = "hpo.jsonl"

DEFAULT_POOL_SIZE = 50


@dataclass
class RunConfig:
    """Everything one optimization run needs"""

    metric: Metric
    t_max: float = 60.0
    params: PolicyParams = field(default_factory=PolicyParams)
    seed: int = 0
    workers: int = 1
    cache_bytes: int = DEFAULT_CACHE_BYTES
    metabase: Optional[str] = None
    use_prior: bool = True
    valid_fraction: float = 0.2
    eval_timeout: float = DEFAULT_TIMEOUT
    pool_size: int = DEFAULT_POOL_SIZE
    ensemble_rounds: int = DEFAULT_ROUNDS
    max_iterations: int = 0
    hpo_warm_start: bool = False
    actions: Optional[List[str]] = None

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be at least 1")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be non-negative")
        self.params.t_max = float(self.t_max)

    def to_document(self) -> Dict:
        return {
            "metric": self.metric.name,
            "t_max": self.t_max,
            "seed": self.seed,
            "workers": self.workers,
            "cache_bytes": self.cache_bytes,
            "metabase": self.metabase,
            "use_prior": self.use_prior,
            "valid_fraction": self.valid_fraction,
            "eval_timeout": self.eval_timeout,
            "pool_size": self.pool_size,
            "ensemble_rounds": self.ensemble_rounds,
            "max_iterations": self.max_iterations,
            "hpo_warm_start": self.hpo_warm_start,
            "l_max": self.params.l_max,
            "c_overfit": self.params.c_overfit,
            "w": self.params.w,
            "e_max": self.params.e_max,
            "n_hpo_per_visit": self.params.n_hpo_per_visit,
            "actions": self.actions,
        }


@dataclass
class RunResult:
    """Outcome of a run, persisted as a run directory"""

    ensemble: EnsembleModel
    incumbent: PipelineModel
    evaluations: List[Dict]
    tree: Dict
    schema: Dict
    config: Dict
    hpo_records: List[Dict] = field(default_factory=list)
    cache_stats: Dict = field(default_factory=dict)

    @property
    def n_evaluations(self) -> int:
        return len(self.evaluations)

    def evaluations_to_reach(self, threshold: float) -> Optional[int]:
        """1-based index of the first evaluation with reward >= threshold"""
        for i, record in enumerate(self.evaluations, start=1):
            if record["reward"] >= threshold:
                return i
        return None

    def model_document(self) -> Dict:
        return {
            "schema": self.schema,
            "metric": self.ensemble.metric.name,
            "incumbent": {
                "steps": list(self.incumbent.candidate.steps),
                "configs": self.incumbent.configs,
                "reward": self.incumbent.reward,
            },
            "ensemble": self.ensemble.to_document(),
        }

    def save(self, run_dir: str) -> None:
        os.makedirs(run_dir, exist_ok=True)
        write_json(os.path.join(run_dir, MODEL_FILE), self.model_document())
        write_jsonl(os.path.join(run_dir, EVALUATIONS_FILE), self.evaluations)
        write_json(os.path.join(run_dir, TREE_FILE), self.tree)
        write_json(os.path.join(run_dir, CONFIG_FILE), self.config)
        write_jsonl(os.path.join(run_dir, HPO_FILE), self.hpo_records)
        logger.info("Run written to %s", run_dir)


def load_model(run_dir: str) -> Tuple[EnsembleModel, Dict]:
    """
    Read the ensemble and training schema of a saved run

    Raises:
        DataError: model.json missing or unreadable
    """
    path = os.path.join(run_dir, MODEL_FILE)
    if not os.path.isfile(path):
        raise DataError(f"{MODEL_FILE} not found in {run_dir}")
    try:
        document = read_json(path)
        return EnsembleModel.from_document(document["ensemble"]), document["schema"]
    except (ValueError, KeyError) as e:
        raise DataError(f"unreadable {MODEL_FILE} in {run_dir}: {e}") from e


def predict(ensemble: EnsembleModel, d: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Labels (class codes) and class probabilities for every row"""
    if d.n_rows == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, d.n_classes))
    proba = ensemble.predict_proba(d)
    return proba.argmax(axis=1), proba


class Engine:
    """Runs the structure search and HPO loop on one dataset"""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.incumbent: Optional[PipelineModel] = None
        self.pool: List[PipelineModel] = []
        self.evaluations: List[Dict] = []
        self._pool_keys: Dict[str, int] = {}
        self._order = 0

    def _prior_fn(self):
        if not self.cfg.use_prior or not self.cfg.metabase:
            logger.info("No meta-base in use; priors are uninformative")
            return None
        base = MetaBase.load(self.cfg.metabase)
        logger.info("Loaded meta-base %s (%d records)", self.cfg.metabase, len(base.records))
        return base.prior

    def _admit(self, model: PipelineModel) -> None:
        key = model.key()
        if key in self._pool_keys:
            return
        self._pool_keys[key] = self._order
        self._order += 1
        self.pool.append(model)
        self.pool.sort(key=lambda m: (-m.reward, self._pool_keys[m.key()]))
        for evicted in self.pool[self.cfg.pool_size:]:
            del self._pool_keys[evicted.key()]
        del self.pool[self.cfg.pool_size:]

    def _record(self, tree: SearchTree, leaf: SearchNode, outcome: HpoOutcome, t: float) -> None:
        tree.backpropagate(leaf, outcome.best_reward)
        if outcome.pruned:
            tree.mark_failed(leaf)
        for record in outcome.records:
            row = {"iteration": len(self.evaluations), "time": round(t, 6)}
            row.update(record)
            self.evaluations.append(row)
        if outcome.best is None:
            return
        self._admit(outcome.best)
        if self.incumbent is None or outcome.best.reward > self.incumbent.reward:
            self.incumbent = outcome.best
            logger.info(
                "New incumbent %.4f: %s (after %d evaluations)",
                outcome.best.reward, outcome.best.candidate.label(), len(self.evaluations),
            )

    def _evaluate(
        self, tree: SearchTree, store: HpoStore, leaf: SearchNode, train: Dataset, valid: Dataset
    ) -> HpoOutcome:
        """Tune one leaf; any pipeforge error prunes it the same way in serial and parallel runs"""
        signatures = [node.signature for node in tree.path(leaf)[:-1]]
        try:
            return optimize_candidate(
                PipelineCandidate(leaf.prefix),
                signatures,
                self.cfg.params.n_hpo_per_visit,
                train,
                valid,
                self.cfg.metric,
                store,
                self.cfg.seed,
                self.cfg.eval_timeout,
            )
        except PipeForgeError as e:
            logger.warning("Evaluation of %s failed: %s", " -> ".join(leaf.prefix), e)
            record = {"steps": list(leaf.prefix), "status": "error", "reward": 0.0, "reason": str(e)}
            return HpoOutcome(best=None, rewards=[0.0], records=[record], pruned=True)

    def fit(self, data: Dataset) -> RunResult:
        """
        Search pipelines on ``data`` until the budget is spent

        Args:
            data: Full training dataset; a validation split is held out internally

        Returns:
            RunResult: ensemble, incumbent, evaluation log and tree snapshot

        Raises:
            DataError: metric/target mismatch or unsplittable data
            NoEvaluationsError: no evaluation succeeded within the budget
        """
        cfg = self.cfg
        cfg.metric.check_target(data.n_classes)
        if cfg.t_max <= 0:
            raise NoEvaluationsError(f"budget {cfg.t_max:g}s leaves no time for evaluations")
        train, valid = stratified_split(data, cfg.valid_fraction, cfg.seed)
        cache = IntermediateCache(cfg.cache_bytes)
        tree = SearchTree(train, cfg.params, cfg.seed, self._prior_fn(), cache, cfg.actions)
        store = HpoStore(cfg.seed, cfg.hpo_warm_start)
        logger.info(
            "Fitting on %d train / %d validation rows, budget %s",
            train.n_rows, valid.n_rows,
            f"{cfg.max_iterations} iterations" if cfg.max_iterations else f"{cfg.t_max:g}s",
        )

        if cfg.workers == 1:
            self._run_serial(tree, store, train, valid)
        else:
            self._run_parallel(tree, store, train, valid)

        if self.incumbent is None:
            raise NoEvaluationsError(
                f"no successful evaluation within the budget ({len(self.evaluations)} attempts)",
                self.evaluations,
            )
        ensemble = select(self.pool, valid.target, cfg.metric, cfg.ensemble_rounds)
        ensemble = self._refit(ensemble, data)
        return RunResult(
            ensemble=ensemble,
            incumbent=self.incumbent,
            evaluations=self.evaluations,
            tree=tree.snapshot(),
            schema=data.schema(),
            config=cfg.to_document(),
            hpo_records=store.export_records(),
            cache_stats=cache.stats(),
        )

    def _clock(self, start: float, iteration: int) -> Optional[float]:
        """Elapsed (or virtual) time, None once the budget is spent"""
        cfg = self.cfg
        if cfg.max_iterations:
            if iteration >= cfg.max_iterations:
                return None
            return cfg.t_max * iteration / cfg.max_iterations
        elapsed = time.perf_counter() - start
        return elapsed if elapsed < cfg.t_max else None

    def _next(self, tree: SearchTree, t: float) -> Optional[SearchNode]:
        try:
            return tree.next_candidate(t)
        except SearchExhausted:
            logger.warning("Search space exhausted; stopping early")
            return None

    def _run_serial(self, tree: SearchTree, store: HpoStore, train: Dataset, valid: Dataset) -> None:
        start, iteration = time.perf_counter(), 0
        while True:
            t = self._clock(start, iteration)
            if t is None:
                break
            leaf = self._next(tree, t)
            if leaf is None:
                break
            self._record(tree, leaf, self._evaluate(tree, store, leaf, train, valid), t)
            iteration += 1

    def _run_parallel(self, tree: SearchTree, store: HpoStore, train: Dataset, valid: Dataset) -> None:
        start, iteration, exhausted = time.perf_counter(), 0, False
        in_flight: Dict[Future, Tuple[SearchNode, float]] = {}
        with ThreadPoolExecutor(max_workers=self.cfg.workers, thread_name_prefix="pipeforge-eval") as pool:
            while True:
                while not exhausted and len(in_flight) < self.cfg.workers:
                    t = self._clock(start, iteration)
                    if t is None:
                        exhausted = True
                        break
                    leaf = self._next(tree, t)
                    if leaf is None:
                        exhausted = True
                        break
                    future = pool.submit(self._evaluate, tree, store, leaf, train, valid)
                    in_flight[future] = (leaf, t)
                    iteration += 1
                if not in_flight:
                    break
                done, _ = wait(list(in_flight), return_when=FIRST_COMPLETED)
                for future in done:
                    leaf, t = in_flight.pop(future)
                    self._record(tree, leaf, future.result(), t)

    def _refit(self, ensemble: EnsembleModel, data: Dataset) -> EnsembleModel:
        """Refit every member on all rows; a member that fails keeps its train-split fit"""
        members = []
        for member in ensemble.members:
            try:
                members.append(refit(member, data, self.cfg.seed))
            except PipeForgeError as e:
                logger.warning("Refit of %s failed, keeping the validation fit: %s", member.candidate.label(), e)
                members.append(member)
        return EnsembleModel(
            members, ensemble.multiplicities, ensemble.metric, ensemble.reward, ensemble.metric_value, ensemble.history
        )


def fit(data: Dataset, cfg: RunConfig) -> RunResult:
    return Engine(cfg).fit(data)
