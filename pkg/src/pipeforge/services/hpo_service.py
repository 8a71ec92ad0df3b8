#!/usr/bin/env python3
"""
HPO Service

Per-algorithm hyperparameter optimization. One optuna study with a TPE
sampler exists per (step, meta-feature signature); candidates that feed a
step bucket-equal data share that study. The final pipeline loss is told
to the study of every step in the candidate.
"""

import hashlib
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import optuna
from optuna.distributions import (
    BaseDistribution,
    CategoricalDistribution,
    FloatDistribution,
    IntDistribution,
)
from optuna.samplers import TPESampler
from optuna.trial import create_trial

from ..core.errors import EvaluationTimeout, HpoError, InapplicableStepError, PipeForgeError
from .data_service import Dataset, Metric
from .metafeature_service import MetaFeatureSignature
from .pipeline_service import DEFAULT_TIMEOUT, PipelineCandidate, PipelineModel, execute
from .step_service import (
    CATEGORICAL_DOMAIN,
    INT_UNIFORM,
    LOG_UNIFORM,
    Config,
    HyperparameterSpace,
    get_spec,
)

logger = logging.getLogger(__name__)
optuna.logging.set_verbosity(optuna.logging.WARNING)

N_STARTUP = 10
N_EI_CANDIDATES = 24
GAMMA = 0.25
WARM_START_CAP = 20
FAILURE_LOSS = 1.0

InstanceKey = Tuple[str, MetaFeatureSignature]


def good_set_size(n: int) -> int:
    """Number of observations modelled as good out of ``n``"""
    return max(1, int(math.ceil(GAMMA * n)))


def _distributions(space: HyperparameterSpace) -> Dict[str, BaseDistribution]:
    dists: Dict[str, BaseDistribution] = {}
    for p in space.parameters:
        if p.domain == CATEGORICAL_DOMAIN:
            dists[p.name] = CategoricalDistribution(list(p.choices))
        elif p.domain == INT_UNIFORM:
            dists[p.name] = IntDistribution(int(p.low), int(p.high))
        else:
            dists[p.name] = FloatDistribution(float(p.low), float(p.high), log=p.domain == LOG_UNIFORM)
    return dists


def instance_seed(seed: int, step: str, sig: MetaFeatureSignature) -> int:
    digest = hashlib.blake2b(f"{seed}|{step}|{sig.buckets}".encode("utf-8"), digest_size=4)
    return int.from_bytes(digest.digest(), "big")


class HpoInstance:
    """TPE optimizer for one step on one kind of input data"""

    def __init__(self, step: str, sig: MetaFeatureSignature, seed: int = 0):
        self.spec = get_spec(step)
        self.key: InstanceKey = (step, sig)
        self.space = self.spec.space
        self.seed = int(seed)
        self.observations: List[Tuple[Config, float]] = []
        self.last_suggest_used_tpe = False
        self._distributions = _distributions(self.space)
        self._pending: List[Tuple[optuna.trial.Trial, Config]] = []
        self._lock = threading.RLock()
        self.study = optuna.create_study(
            direction="minimize",
            sampler=TPESampler(
                n_startup_trials=N_STARTUP,
                n_ei_candidates=N_EI_CANDIDATES,
                gamma=good_set_size,
                prior_weight=1.0,
                seed=self.seed,
            ),
        )

    @property
    def step(self) -> str:
        return self.key[0]

    @property
    def signature(self) -> MetaFeatureSignature:
        return self.key[1]

    def _as_config(self, params: Dict[str, Any]) -> Config:
        config: Config = {}
        for p in self.space.parameters:
            value = params[p.name]
            config[p.name] = int(value) if p.domain == INT_UNIFORM else value
        return config

    def suggest(self) -> Config:
        """Random while history is short, TPE afterwards"""
        with self._lock:
            self.last_suggest_used_tpe = len(self.observations) >= N_STARTUP
            trial = self.study.ask(fixed_distributions=self._distributions)
            config = self._as_config(trial.params)
            self._pending.append((trial, config))
            return config

    def observe(self, config: Config, loss: float) -> None:
        """
        Add one finished evaluation to the history

        Raises:
            HpoError: non-finite loss or config outside the space
        """
        loss = float(loss)
        if not math.isfinite(loss):
            raise HpoError(f"non-finite loss {loss} for {self.step}")
        if not self.space.contains(config):
            raise HpoError(f"config {config} outside the space of {self.step}")
        with self._lock:
            for i, (trial, pending) in enumerate(self._pending):
                if pending == config:
                    del self._pending[i]
                    self.study.tell(trial, loss)
                    break
            else:
                self.study.add_trial(create_trial(params=dict(config), distributions=self._distributions, value=loss))
            self.observations.append((dict(config), loss))

    def warm_start(self, records: Sequence[Tuple[Config, float]]) -> int:
        """
        Seed the history with earlier evaluations, keeping the best ones

        Returns:
            int: number of records inserted
        """
        with self._lock:
            if self.observations or self._pending:
                raise HpoError(f"{self.step} already has history; warm start must come first")
            valid, skipped = [], 0
            for config, loss in records:
                if self.space.contains(config) and math.isfinite(float(loss)):
                    valid.append((dict(config), float(loss)))
                else:
                    skipped += 1
            if skipped:
                logger.warning("Skipped %d invalid warm-start records for %s", skipped, self.step)
            valid.sort(key=lambda r: r[1])
            for config, loss in valid[:WARM_START_CAP]:
                self.observe(config, loss)
            return min(len(valid), WARM_START_CAP)

    def best_records(self, n: int = WARM_START_CAP) -> List[Tuple[Config, float]]:
        with self._lock:
            return sorted(self.observations, key=lambda r: r[1])[:n]

    def __len__(self) -> int:
        return len(self.observations)


class HpoStore:
    """
    Create-on-miss registry of HPO instances

    With ``warm_from_neighbours`` a new instance is seeded with the best
    records of the nearest signature of the same step; otherwise it starts
    empty and runs the random startup phase.
    """

    def __init__(self, seed: int = 0, warm_from_neighbours: bool = False):
        self.seed = int(seed)
        self.warm_from_neighbours = warm_from_neighbours
        self._instances: Dict[InstanceKey, HpoInstance] = {}
        self._lock = threading.Lock()

    def nearest(self, step: str, sig: MetaFeatureSignature) -> Optional[HpoInstance]:
        """Closest other instance of the same step by bucket distance"""
        others = [inst for key, inst in self._instances.items() if key[0] == step and key[1] != sig and len(inst)]
        if not others:
            return None
        return min(others, key=lambda inst: (inst.signature.distance(sig), inst.signature.buckets))

    def get_instance(self, step: str, sig: MetaFeatureSignature) -> HpoInstance:
        get_spec(step)
        key = (step, sig)
        with self._lock:
            instance = self._instances.get(key)
            if instance is not None:
                return instance
            instance = HpoInstance(step, sig, instance_seed(self.seed, step, sig))
            if self.warm_from_neighbours:
                neighbour = self.nearest(step, sig)
                if neighbour is not None:
                    inserted = instance.warm_start(neighbour.best_records())
                    logger.debug("Warm-started %s from a neighbour with %d records", step, inserted)
            self._instances[key] = instance
            return instance

    def instances(self) -> List[HpoInstance]:
        with self._lock:
            return list(self._instances.values())

    def __len__(self) -> int:
        return len(self._instances)

    def export_records(self) -> List[Dict]:
        """Observation histories as flat rows"""
        rows = []
        for instance in self.instances():
            for config, loss in instance.observations:
                rows.append({
                    "step": instance.step,
                    "signature": list(instance.signature.buckets),
                    "config": config,
                    "loss": loss,
                })
        return rows


@dataclass
class HpoOutcome:
    """Result of one HPO batch on a candidate"""

    best: Optional[PipelineModel]
    rewards: List[float] = field(default_factory=list)
    records: List[Dict] = field(default_factory=list)
    pruned: bool = False

    @property
    def best_reward(self) -> float:
        return self.best.reward if self.best is not None else 0.0


def optimize_candidate(
    candidate: PipelineCandidate,
    signatures: Sequence[MetaFeatureSignature],
    budget: int,
    train: Dataset,
    valid: Dataset,
    metric: Metric,
    store: HpoStore,
    seed: int = 0,
    timeout: float = DEFAULT_TIMEOUT,
) -> HpoOutcome:
    """
    Run ``budget`` joint HPO iterations on a terminal candidate

    Args:
        candidate: Terminal pipeline candidate
        signatures: Signature of each step's input prefix, aligned with the steps
        budget: Number of suggest/execute/observe iterations
        train: Training split
        valid: Validation split
        metric: Metric used for the reward
        store: Shared HPO instances
        seed: Seed for pipeline execution
        timeout: Per-evaluation timeout in seconds

    Returns:
        HpoOutcome: best model by validation reward, every reward and a record per iteration
    """
    if not candidate.terminal:
        raise HpoError(f"candidate {candidate.label()} does not end in a classifier")
    if len(signatures) != len(candidate.steps):
        raise HpoError("one signature per step is required")
    instances = [store.get_instance(step, sig) for step, sig in zip(candidate.steps, signatures)]
    outcome = HpoOutcome(best=None)
    for _ in range(budget):
        configs = [inst.suggest() for inst in instances]
        record: Dict[str, Any] = {"steps": list(candidate.steps), "configs": configs}
        try:
            model = execute(candidate, configs, train, valid, metric, seed, timeout)
            reward = model.reward
            record.update(status="ok", reward=reward, metric_value=model.metric_value)
            if outcome.best is None or reward > outcome.best.reward:
                outcome.best = model
        except InapplicableStepError as e:
            reward = 0.0
            record.update(status="inapplicable", reward=0.0, position=e.position, reason=e.reason)
        except EvaluationTimeout as e:
            reward = 0.0
            record.update(status="timeout", reward=0.0, reason=str(e))
        except PipeForgeError as e:
            reward = 0.0
            record.update(status="error", reward=0.0, reason=str(e))
            logger.warning("Evaluation of %s failed: %s", candidate.label(), e)
        loss = 1.0 - reward if record["status"] == "ok" else FAILURE_LOSS
        for inst, config in zip(instances, configs):
            inst.observe(config, loss)
        outcome.rewards.append(reward)
        outcome.records.append(record)
    outcome.pruned = outcome.best is None
    if outcome.pruned:
        logger.debug("All %d evaluations of %s failed", budget, candidate.label())
    return outcome
