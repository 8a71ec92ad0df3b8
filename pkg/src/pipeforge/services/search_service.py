#!/usr/bin/env python3
"""
Search Service

Structure search over sequential pipelines. Every node is a pipeline prefix
described by the meta-features of its intermediate dataset; the policy
weighs prior-scaled exploitation against a visit-count exploration term,
damped by a length penalty and a greediness schedule that decays towards
the end of the time budget.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from ..core.errors import DeadNodeError, InapplicableStepError, SearchError, SearchExhausted
from .data_service import Dataset
from .metabase_service import UNINFORMATIVE, Normal
from .metafeature_service import MetaFeatureSignature, MetaFeatureVector, extract, signature
from .pipeline_service import IntermediateCache, intermediate
from .step_service import get_spec, step_names

logger = logging.getLogger(__name__)

PriorFn = Callable[[MetaFeatureVector, str], Normal]


@dataclass
class PolicyParams:
    """Structure search constants"""

    l_max: int = 5
    c_overfit: float = 2.0
    w: float = 0.6
    e_max: int = 3
    t_max: float = 60.0
    n_hpo_per_visit: int = 2

    def __post_init__(self):
        if self.l_max < 1:
            raise SearchError("l_max must be at least 1")
        if self.c_overfit <= 1.0:
            raise SearchError("c_overfit must be greater than 1")
        if self.w < 0.0:
            raise SearchError("w must be non-negative")
        if self.e_max < 1:
            raise SearchError("e_max must be at least 1")
        if self.n_hpo_per_visit < 1:
            raise SearchError("n_hpo_per_visit must be at least 1")


@dataclass
class SearchNode:
    """A pipeline prefix and its statistics"""

    id: int
    prefix: Tuple[str, ...]
    meta_features: MetaFeatureVector
    signature: MetaFeatureSignature
    parent: Optional[int] = None
    visits: Dict[str, int] = field(default_factory=dict)
    child_rewards: Dict[str, List[float]] = field(default_factory=dict)
    rewards: List[float] = field(default_factory=list)
    children: Dict[str, int] = field(default_factory=dict)
    dead: Set[str] = field(default_factory=set)
    ineffective: Set[str] = field(default_factory=set)
    priors: Dict[str, Normal] = field(default_factory=dict, repr=False)

    @property
    def depth(self) -> int:
        return len(self.prefix)

    @property
    def terminal(self) -> bool:
        return bool(self.prefix) and get_spec(self.prefix[-1]).is_classifier

    @property
    def streak(self) -> int:
        """Consecutive preprocessors at the end of the prefix"""
        count = 0
        for name in reversed(self.prefix):
            if get_spec(name).is_classifier:
                break
            count += 1
        return count

    @property
    def total_visits(self) -> int:
        return sum(self.visits.values())

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards)) if self.rewards else 0.0


@dataclass(frozen=True)
class Descent:
    """Where a descent stopped; action None means evaluate the node itself"""

    node: SearchNode
    action: Optional[str]


# Policy terms
def exploitation_q(node: SearchNode, action: str, prior: Normal, rng: np.random.Generator) -> float:
    n = node.visits.get(action, 0)
    mean = min(max(prior.mean, 0.0), 1.0)
    if n == 0:
        # one virtual observation drawn from the prior
        return float(min(max(rng.normal(mean, max(prior.std, 0.0)), 0.0), 1.0))
    return mean / (1 + n) * float(sum(node.child_rewards.get(action, ())))


def exploration_u(node: SearchNode, action: str) -> float:
    return math.sqrt(node.total_visits) / (1 + node.visits.get(action, 0))


def overfit_penalty(node: SearchNode, params: PolicyParams) -> float:
    if node.depth > params.l_max:
        raise SearchError(f"node depth {node.depth} exceeds l_max {params.l_max}")
    return 1.0 - params.c_overfit ** node.depth / params.c_overfit ** params.l_max


def greediness(t: float, params: PolicyParams) -> float:
    if params.t_max <= 0:
        return 0.0
    t = min(max(t, 0.0), params.t_max)
    return params.w * (math.exp((params.t_max - t) / params.t_max) - 1.0)


def legal_actions(node: SearchNode, params: PolicyParams, actions: Sequence[str]) -> List[str]:
    """Actions still open at a node under the depth and forced-classifier rules"""
    if node.depth >= params.l_max:
        return []
    open_actions = [a for a in actions if a not in node.dead and a not in node.ineffective]
    if node.depth == params.l_max - 1 or node.streak >= params.e_max:
        open_actions = [a for a in open_actions if get_spec(a).is_classifier]
    return open_actions


def _prior(node: SearchNode, action: str, prior_fn: Optional[PriorFn]) -> Normal:
    cached = node.priors.get(action)
    if cached is None:
        cached = prior_fn(node.meta_features, action) if prior_fn is not None else UNINFORMATIVE
        node.priors[action] = cached
    return cached


def action_scores(
    node: SearchNode,
    candidates: Sequence[str],
    params: PolicyParams,
    prior_fn: Optional[PriorFn],
    t: float,
    rng: np.random.Generator,
) -> Dict[str, float]:
    penalty = overfit_penalty(node, params)
    c = greediness(t, params)
    return {
        a: penalty * (exploitation_q(node, a, _prior(node, a, prior_fn), rng) + c * exploration_u(node, a))
        for a in candidates
    }


def pick_best(node: SearchNode, scores: Dict[str, float]) -> str:
    """Highest score; ties go to the least visited, then the smaller name"""
    return min(scores, key=lambda a: (-scores[a], node.visits.get(a, 0), a))


def select_action(
    node: SearchNode,
    params: PolicyParams,
    prior_fn: Optional[PriorFn],
    t: float,
    rng: np.random.Generator,
    actions: Optional[Sequence[str]] = None,
) -> str:
    """
    Choose the next algorithm at a node

    Raises:
        DeadNodeError: no legal action remains
    """
    candidates = legal_actions(node, params, actions if actions is not None else step_names())
    if not candidates:
        raise DeadNodeError(f"no legal action at prefix {list(node.prefix)}")
    return pick_best(node, action_scores(node, candidates, params, prior_fn, t, rng))


class SearchTree:
    """
    Search tree rooted at the empty pipeline

    The coordinator that owns the tree is its only writer; the lock keeps
    node statistics consistent when readers (snapshots) run alongside.
    """

    def __init__(
        self,
        train: Dataset,
        params: PolicyParams,
        seed: int = 0,
        prior_fn: Optional[PriorFn] = None,
        cache: Optional[IntermediateCache] = None,
        actions: Optional[Sequence[str]] = None,
    ):
        self.train = train
        self.params = params
        self.seed = int(seed)
        self.prior_fn = prior_fn
        self.cache = cache if cache is not None else IntermediateCache()
        self.actions = list(actions) if actions is not None else step_names()
        for name in self.actions:
            get_spec(name)
        self.rng = np.random.default_rng(self.seed)
        self.nodes: List[SearchNode] = []
        self._lock = threading.RLock()
        self.root = self._new_node((), train, None)

    def _new_node(self, prefix: Tuple[str, ...], data: Dataset, parent: Optional[int]) -> SearchNode:
        mf = extract(data, self.seed)
        node = SearchNode(len(self.nodes), prefix, mf, signature(mf), parent)
        self.nodes.append(node)
        return node

    def node(self, node_id: int) -> SearchNode:
        return self.nodes[node_id]

    def parent_of(self, node: SearchNode) -> Optional[SearchNode]:
        return self.nodes[node.parent] if node.parent is not None else None

    def path(self, node: SearchNode) -> List[SearchNode]:
        """Nodes from the root down to ``node``"""
        chain = [node]
        while chain[-1].parent is not None:
            chain.append(self.nodes[chain[-1].parent])
        return list(reversed(chain))

    def default_configs(self, prefix: Sequence[str]) -> List[Dict]:
        return [dict(get_spec(name).default) for name in prefix]

    def materialize(self, prefix: Sequence[str]) -> Dataset:
        return intermediate(prefix, self.default_configs(prefix), self.train, self.seed, self.cache)

    def legal_actions(self, node: SearchNode) -> List[str]:
        return legal_actions(node, self.params, self.actions)

    def _mark_dead(self, node: SearchNode) -> Optional[SearchNode]:
        """Close the edge into a node with no way forward; returns its parent"""
        parent = self.parent_of(node)
        if parent is None:
            raise SearchExhausted("every pipeline structure has been pruned")
        action = node.prefix[-1]
        parent.dead.add(action)
        logger.debug("Pruned %s", " -> ".join(node.prefix))
        return parent

    def mark_failed(self, node: SearchNode) -> None:
        """Prune a terminal node whose evaluations all failed"""
        with self._lock:
            self._mark_dead(node)

    def descend(self, t: float) -> Descent:
        """
        Walk down from the root along the policy

        Stops at a terminal node whose own reward beats every child score,
        at a terminal node with nothing left to add, or at the first action
        whose child does not exist yet.

        Raises:
            SearchExhausted: all branches are dead
        """
        with self._lock:
            node = self.root
            while True:
                candidates = self.legal_actions(node)
                if not candidates:
                    if node.terminal:
                        return Descent(node, None)
                    node = self._mark_dead(node)
                    continue
                scores = action_scores(node, candidates, self.params, self.prior_fn, t, self.rng)
                if node.terminal and node.rewards:
                    own = overfit_penalty(node, self.params) * node.mean_reward
                    if own > max(scores.values()):
                        return Descent(node, None)
                action = pick_best(node, scores)
                child_id = node.children.get(action)
                if child_id is None:
                    return Descent(node, action)
                node = self.nodes[child_id]

    def expand(self, node: SearchNode, action: str) -> Optional[SearchNode]:
        """
        Materialize the child reached by ``action``

        Returns:
            SearchNode: the new child, or None when the step is inapplicable
            (the edge is marked dead)

        Raises:
            SearchError: the edge is dead, already expanded, or not legal here
        """
        with self._lock:
            if action in node.dead:
                raise SearchError(f"edge {action} from {list(node.prefix)} is dead")
            if action in node.children:
                raise SearchError(f"edge {action} from {list(node.prefix)} is already expanded")
            if action not in self.legal_actions(node):
                raise SearchError(f"{action} is not legal at depth {node.depth}")
            prefix = node.prefix + (action,)
            try:
                data = self.materialize(prefix)
            except InapplicableStepError as e:
                node.dead.add(action)
                logger.debug("Dead edge %s: %s", " -> ".join(prefix), e)
                return None
            child = self._new_node(prefix, data, node.id)
            node.children[action] = child.id
            node.visits.setdefault(action, 0)
            node.child_rewards.setdefault(action, [])
            if child.signature == node.signature:
                node.ineffective.add(action)
                logger.debug("Ineffective edge %s", " -> ".join(prefix))
            return child

    def complete(self, node: SearchNode, t: float) -> SearchNode:
        """
        Extend a prefix until it ends in a classifier

        Raises:
            SearchExhausted: all branches are dead
        """
        with self._lock:
            while not node.terminal:
                candidates = self.legal_actions(node)
                if not candidates:
                    node = self._mark_dead(node)
                    continue
                action = pick_best(
                    node, action_scores(node, candidates, self.params, self.prior_fn, t, self.rng)
                )
                child_id = node.children.get(action)
                child = self.nodes[child_id] if child_id is not None else self.expand(node, action)
                if child is None or action in node.ineffective:
                    continue
                node = child
            return node

    def next_candidate(self, t: float) -> SearchNode:
        """Descend, expand and complete: one terminal node to evaluate"""
        with self._lock:
            descent = self.descend(t)
            if descent.action is None:
                return descent.node
            child = self.expand(descent.node, descent.action)
            if child is None or descent.action in descent.node.ineffective:
                return self.complete(descent.node, t)
            return self.complete(child, t)

    def backpropagate(self, leaf: SearchNode, reward: float) -> None:
        """Record ``reward`` on every node of the root-to-leaf path"""
        if not 0.0 <= reward <= 1.0 or not math.isfinite(reward):
            raise SearchError(f"reward {reward} outside [0, 1]")
        with self._lock:
            chain = self.path(leaf)
            for parent, child in zip(chain, chain[1:]):
                action = child.prefix[-1]
                parent.visits[action] = parent.visits.get(action, 0) + 1
                parent.child_rewards.setdefault(action, []).append(reward)
            for node in chain:
                node.rewards.append(reward)

    def snapshot(self) -> Dict:
        """Nodes, edges and pruning counts as plain data"""
        with self._lock:
            nodes, edges = [], []
            for node in self.nodes:
                nodes.append({
                    "id": node.id,
                    "prefix": list(node.prefix),
                    "depth": node.depth,
                    "terminal": node.terminal,
                    "visits": len(node.rewards),
                    "mean_reward": node.mean_reward,
                    "dead": sorted(node.dead),
                    "ineffective": sorted(node.ineffective),
                })
                for action in sorted(node.children):
                    rewards = node.child_rewards.get(action, [])
                    edges.append({
                        "source": node.id,
                        "target": node.children[action],
                        "action": action,
                        "visits": node.visits.get(action, 0),
                        "reward_sum": float(sum(rewards)),
                    })
            return {
                "nodes": nodes,
                "edges": edges,
                "dead_edges": sum(len(n.dead) for n in self.nodes),
                "ineffective_edges": sum(len(n.ineffective) for n in self.nodes),
                "params": {
                    "l_max": self.params.l_max,
                    "c_overfit": self.params.c_overfit,
                    "w": self.params.w,
                    "e_max": self.params.e_max,
                    "n_hpo_per_visit": self.params.n_hpo_per_visit,
                },
            }
