#!/usr/bin/env python3
"""
Tests for the structure search policy and tree
"""

import math

import numpy as np
from scipy.stats import chisquare
import pytest

from conftest import scaled_numeric
from pipeforge.core.errors import DeadNodeError, SearchError, SearchExhausted
from pipeforge.services.data_service import CATEGORICAL, Dataset
from pipeforge.services.metabase_service import Normal
from pipeforge.services.metafeature_service import N_FEATURES, MetaFeatureVector, signature
from pipeforge.services.search_service import (
    PolicyParams,
    SearchNode,
    SearchTree,
    exploitation_q,
    exploration_u,
    greediness,
    legal_actions,
    overfit_penalty,
    pick_best,
    select_action,
)
from pipeforge.utils import synthetic

RNG = np.random.default_rng(0)


def _node(prefix=(), visits=None, rewards=None) -> SearchNode:
    mf = MetaFeatureVector(np.zeros(N_FEATURES))
    return SearchNode(0, tuple(prefix), mf, signature(mf), visits=dict(visits or {}),
                      child_rewards={a: list(r) for a, r in (rewards or {}).items()})


def _fixed(mean, std=0.0):
    return lambda mf, action: Normal(mean, std)


# Policy arithmetic
def test_exploitation_with_visits():
    node = _node(visits={"knn": 1}, rewards={"knn": [0.6]})
    assert exploitation_q(node, "knn", Normal(0.8, 0.1), RNG) == pytest.approx(0.24)
    node = _node(visits={"knn": 3}, rewards={"knn": [0.5, 0.5, 0.5]})
    assert exploitation_q(node, "knn", Normal(0.5, 0.1), RNG) == pytest.approx(0.1875)


def test_exploitation_unvisited_draws_from_prior():
    assert exploitation_q(_node(), "knn", Normal(0.7, 0.0), RNG) == pytest.approx(0.7)


def test_exploitation_draw_is_clamped():
    rng = np.random.default_rng(1)
    for _ in range(50):
        assert 0.0 <= exploitation_q(_node(), "knn", Normal(0.5, 2.0), rng) <= 1.0


def test_exploration_term():
    assert exploration_u(_node(), "knn") == 0.0
    assert exploration_u(_node(visits={"pca": 9}), "knn") == pytest.approx(3.0)
    assert exploration_u(_node(visits={"knn": 2, "pca": 14}), "knn") == pytest.approx(4 / 3)


def test_overfit_penalty():
    params = PolicyParams(c_overfit=2.0, l_max=5)
    assert overfit_penalty(_node(), params) == pytest.approx(0.96875)
    assert overfit_penalty(_node(("standard_scaler", "pca")), params) == pytest.approx(0.875)
    assert overfit_penalty(_node(("pca",) * 5), params) == 0.0
    with pytest.raises(SearchError):
        overfit_penalty(_node(("pca",) * 6), params)


def test_greediness_schedule():
    params = PolicyParams(w=0.6, t_max=60.0)
    assert greediness(0.0, params) == pytest.approx(0.6 * (math.e - 1), abs=1e-6)
    assert greediness(0.0, params) == pytest.approx(1.030969, abs=1e-6)
    assert greediness(30.0, params) == pytest.approx(0.389233, abs=1e-6)
    assert greediness(60.0, params) == 0.0
    assert greediness(120.0, params) == 0.0


def test_policy_params_validation():
    with pytest.raises(SearchError):
        PolicyParams(c_overfit=1.0)
    with pytest.raises(SearchError):
        PolicyParams(e_max=0)


def test_pick_best_argmax_and_ties():
    node = _node()
    scores = {"knn": 0.9 * (0.3 + 1.0 * 0.5), "decision_tree": 0.9 * (0.6 + 1.0 * 0.1)}
    assert scores["knn"] == pytest.approx(0.72)
    assert pick_best(node, scores) == "knn"
    assert pick_best(node, {"knn": 0.5, "decision_tree": 0.5}) == "decision_tree"


def test_ties_prefer_fewer_visits():
    node = _node(visits={"decision_tree": 3, "knn": 1})
    assert pick_best(node, {"knn": 0.5, "decision_tree": 0.5}) == "knn"


def test_pure_exploitation_at_deadline():
    params = PolicyParams(t_max=10.0)
    node = _node(visits={"knn": 1, "decision_tree": 1}, rewards={"knn": [0.9], "decision_tree": [0.3]})
    chosen = select_action(node, params, _fixed(1.0), 10.0, RNG, actions=["decision_tree", "knn"])
    assert chosen == "knn"


def test_forced_classifier_rules():
    actions = ["standard_scaler", "pca", "knn", "decision_tree"]
    params = PolicyParams(l_max=5, e_max=3)
    assert legal_actions(_node(("pca",) * 4), params, actions) == ["knn", "decision_tree"]
    assert legal_actions(_node(("pca",)), PolicyParams(e_max=1), actions) == ["knn", "decision_tree"]
    assert legal_actions(_node(("pca",)), params, actions) == actions
    assert legal_actions(_node(("pca",) * 5), params, actions) == []


def test_dead_and_ineffective_edges_are_closed():
    node = _node()
    node.dead.add("pca")
    node.ineffective.add("standard_scaler")
    assert legal_actions(node, PolicyParams(), ["standard_scaler", "pca", "knn"]) == ["knn"]

def test_equal_actions_are_chosen_uniformly():
    actions = ["decision_tree", "gaussian_nb", "knn", "logistic_regression", "random_forest"]
    node = _node()
    params = PolicyParams(w=50.0)
    rng = np.random.default_rng(3)
    for _ in range(10_000):
        action = select_action(node, params, _fixed(0.5), 0.0, rng, actions=actions)
        node.visits[action] = node.visits.get(action, 0) + 1
        node.child_rewards.setdefault(action, []).append(0.5)
    counts = [node.visits[a] for a in actions]
    assert sum(counts) == 10_000
    assert chisquare(counts).pvalue > 0.01



def test_select_action_on_dead_node():
    with pytest.raises(DeadNodeError):
        select_action(_node(("pca",) * 5), PolicyParams(), None, 0.0, RNG, actions=["knn"])


# Tree operations
def test_root_without_children_is_expanded():
    tree = SearchTree(scaled_numeric(), PolicyParams(), seed=0, actions=["standard_scaler", "knn"])
    descent = tree.descend(0.0)
    assert descent.node is tree.root
    assert descent.action in ("standard_scaler", "knn")


def test_terminal_node_aborts_descent():
    tree = SearchTree(scaled_numeric(), PolicyParams(w=0.0), seed=0, prior_fn=_fixed(0.3), actions=["knn"])
    leaf = tree.expand(tree.root, "knn")
    tree.backpropagate(leaf, 0.9)
    descent = tree.descend(0.0)
    assert descent.node is leaf
    assert descent.action is None


def test_non_terminal_node_never_aborts():
    tree = SearchTree(scaled_numeric(), PolicyParams(w=0.0), seed=0, prior_fn=_fixed(0.3),
                      actions=["standard_scaler", "knn"])
    scaled = tree.expand(tree.root, "standard_scaler")
    tree.backpropagate(scaled, 0.9)
    tree.backpropagate(tree.expand(tree.root, "knn"), 0.0)
    descent = tree.descend(0.0)
    assert descent.node is scaled
    assert descent.action == "knn"


def test_no_op_step_marks_edge_ineffective():
    codes = np.random.default_rng(0).integers(0, 3, size=(30, 2)).astype(float)
    d = Dataset.from_arrays(codes, [0, 1] * 15, kinds=[CATEGORICAL, CATEGORICAL])
    tree = SearchTree(d, PolicyParams(), seed=0, actions=["standard_scaler", "knn"])
    child = tree.expand(tree.root, "standard_scaler")
    assert child is not None
    assert "standard_scaler" in tree.root.ineffective


def test_inapplicable_edge_dies():
    d = Dataset.from_arrays(np.random.default_rng(0).normal(size=(30, 1)), [0, 1] * 15)
    tree = SearchTree(d, PolicyParams(), seed=0, actions=["pca", "knn"])
    assert tree.expand(tree.root, "pca") is None
    assert "pca" in tree.root.dead
    with pytest.raises(SearchError):
        tree.expand(tree.root, "pca")


def test_expand_rejects_preprocessor_at_last_position():
    tree = SearchTree(scaled_numeric(), PolicyParams(l_max=2), seed=0,
                      actions=["standard_scaler", "minmax_scaler", "knn"])
    child = tree.expand(tree.root, "standard_scaler")
    with pytest.raises(SearchError, match="not legal"):
        tree.expand(child, "minmax_scaler")
    assert tree.expand(child, "knn").terminal


def test_complete_terminal_is_identity():
    tree = SearchTree(scaled_numeric(), PolicyParams(), seed=0, actions=["knn"])
    leaf = tree.expand(tree.root, "knn")
    assert tree.complete(leaf, 0.0) is leaf


def test_complete_with_single_preprocessor_allowance():
    tree = SearchTree(scaled_numeric(), PolicyParams(e_max=1), seed=0,
                      actions=["standard_scaler", "minmax_scaler", "knn", "decision_tree"])
    scaled = tree.expand(tree.root, "standard_scaler")
    leaf = tree.complete(scaled, 0.0)
    assert leaf.depth == 2
    assert leaf.prefix[-1] in ("knn", "decision_tree")


def test_backpropagate_counts_and_sums():
    tree = SearchTree(scaled_numeric(), PolicyParams(), seed=0,
                      actions=["standard_scaler", "pca", "knn"])
    scaled = tree.expand(tree.root, "standard_scaler")
    projected = tree.expand(scaled, "pca")
    leaf = tree.expand(projected, "knn")

    tree.backpropagate(leaf, 0.4)
    assert tree.root.visits["standard_scaler"] == 1
    assert scaled.visits["pca"] == 1
    assert projected.visits["knn"] == 1

    tree.backpropagate(leaf, 0.6)
    assert tree.root.visits["standard_scaler"] == 2
    assert sum(tree.root.child_rewards["standard_scaler"]) == pytest.approx(1.0)

    tree.backpropagate(leaf, 0.0)
    assert projected.visits["knn"] == 3
    with pytest.raises(SearchError):
        tree.backpropagate(leaf, 1.5)


def test_next_candidate_is_terminal():
    tree = SearchTree(scaled_numeric(), PolicyParams(), seed=2,
                      actions=["standard_scaler", "minmax_scaler", "pca", "knn", "decision_tree"])
    for t in range(10):
        leaf = tree.next_candidate(float(t))
        assert leaf.terminal
        tree.backpropagate(leaf, 0.5)


def test_exhausted_search():
    d = synthetic.with_missing(scaled_numeric(), 0.3, seed=0)
    tree = SearchTree(d, PolicyParams(), seed=0, actions=["knn"])
    with pytest.raises(SearchExhausted):
        tree.next_candidate(0.0)


def test_snapshot_shape():
    tree = SearchTree(scaled_numeric(), PolicyParams(), seed=0, actions=["standard_scaler", "knn"])
    leaf = tree.next_candidate(0.0)
    tree.backpropagate(leaf, 0.7)
    snap = tree.snapshot()
    assert snap["nodes"][0]["prefix"] == []
    assert len(snap["edges"]) == len(snap["nodes"]) - 1
    visited = [e for e in snap["edges"] if e["visits"]]
    assert all(e["reward_sum"] == pytest.approx(0.7) for e in visited)


# Planted structure
PLANTED = ("standard_scaler", "pca", "knn")


def _planted_reward(prefix):
    if tuple(prefix) == PLANTED:
        return 0.95
    shared = 0
    for a, b in zip(prefix, PLANTED):
        if a != b:
            break
        shared += 1
    return min(0.5, 0.1 + 0.2 * shared)


def _recovers_planted(seed: int, iterations: int = 300) -> bool:
    t_max = float(iterations)
    tree = SearchTree(
        scaled_numeric(seed=seed),
        PolicyParams(w=0.1, t_max=t_max),
        seed=seed,
        actions=["standard_scaler", "minmax_scaler", "pca", "knn", "decision_tree"],
    )
    best_prefix, best_reward = None, -1.0
    for i in range(iterations):
        leaf = tree.next_candidate(float(i))
        reward = _planted_reward(leaf.prefix)
        tree.backpropagate(leaf, reward)
        if reward > best_reward:
            best_prefix, best_reward = leaf.prefix, reward
        if best_prefix == PLANTED:
            return True
    return False


def test_planted_structure_recovery():
    recovered = sum(_recovers_planted(seed) for seed in range(10))
    print(f"✅ planted structure recovered in {recovered}/10 seeds")
    assert recovered >= 9
