#!/usr/bin/env python3
"""
Report Service

Summaries of a finished run: how often each algorithm (and algorithm
category) was chosen per pipeline position, pipeline lengths, the best
pipelines and the most visited edges, plus a DOT rendering of the visited
part of the search tree.
"""

import json
import os
from collections import defaultdict
from typing import Dict, List, Optional, TextIO

from ..core.errors import DataError, PipeForgeError
from ..services.engine_service import EVALUATIONS_FILE, TREE_FILE
from ..services.step_service import get_spec
from ..utils.serialization import read_json, read_jsonl

TOP_PIPELINES = 10
EDGE_ROWS = 15


def _category(action: str) -> str:
    try:
        return get_spec(action).category
    except PipeForgeError:
        return "unknown"


class ReportService:
    """Reads a run directory and renders its statistics"""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self.tree = self._load_tree()
        self.evaluations = self._load_evaluations()
        self._nodes = {node["id"]: node for node in self.tree["nodes"]}

    def _load_tree(self) -> Dict:
        path = os.path.join(self.run_dir, TREE_FILE)
        if not os.path.isfile(path):
            raise DataError(f"{TREE_FILE} not found in {self.run_dir}")
        try:
            tree = read_json(path)
            if not isinstance(tree.get("nodes"), list) or not isinstance(tree.get("edges"), list):
                raise ValueError("nodes and edges lists are required")
            for edge in tree["edges"]:
                int(edge["source"]), int(edge["target"]), int(edge["visits"]), str(edge["action"])
            for node in tree["nodes"]:
                int(node["id"]), list(node["prefix"])
        except (ValueError, KeyError, TypeError, AttributeError) as e:
            raise DataError(f"corrupt {TREE_FILE} in {self.run_dir}: {e}") from e
        return tree

    def _load_evaluations(self) -> List[Dict]:
        path = os.path.join(self.run_dir, EVALUATIONS_FILE)
        if not os.path.isfile(path):
            return []
        try:
            return read_jsonl(path)
        except json.JSONDecodeError as e:
            raise DataError(f"corrupt {EVALUATIONS_FILE} in {self.run_dir}: {e}") from e

    # Statistics
    def layer_frequencies(self, by_category: bool = False) -> Dict[int, Dict[str, float]]:
        """Share of visits per algorithm at each pipeline position (1-based)"""
        counts: Dict[int, Dict[str, int]] = defaultdict(lambda: defaultdict(int))
        for edge in self.tree["edges"]:
            if edge["visits"] <= 0:
                continue
            depth = len(self._nodes[edge["source"]]["prefix"]) + 1
            key = _category(edge["action"]) if by_category else edge["action"]
            counts[depth][key] += edge["visits"]
        frequencies = {}
        for depth in sorted(counts):
            total = sum(counts[depth].values())
            frequencies[depth] = {k: v / total for k, v in sorted(counts[depth].items())}
        return frequencies

    def mean_length(self) -> float:
        lengths = [len(e["steps"]) for e in self.evaluations]
        return sum(lengths) / len(lengths) if lengths else 0.0

    def top_pipelines(self, n: int = TOP_PIPELINES) -> List[Dict]:
        """Best reward per structure, best first"""
        best: Dict[tuple, float] = {}
        for e in self.evaluations:
            if e.get("status") != "ok":
                continue
            key = tuple(e["steps"])
            if key not in best or e["reward"] > best[key]:
                best[key] = e["reward"]
        ranked = sorted(best.items(), key=lambda item: (-item[1], item[0]))
        return [{"steps": list(steps), "reward": reward} for steps, reward in ranked[:n]]

    def edge_table(self, n: int = EDGE_ROWS) -> List[Dict]:
        rows = []
        for edge in self.tree["edges"]:
            if edge["visits"] <= 0:
                continue
            source = self._nodes[edge["source"]]["prefix"]
            rows.append({
                "from": " -> ".join(source) or "<start>",
                "action": edge["action"],
                "visits": edge["visits"],
                "mean_reward": edge.get("reward_sum", 0.0) / edge["visits"],
            })
        rows.sort(key=lambda r: (-r["visits"], r["from"], r["action"]))
        return rows[:n]

    # Rendering
    def render(self, out: TextIO) -> None:
        print("=" * 70, file=out)
        print("RUN REPORT", file=out)
        print("=" * 70, file=out)
        print(f"Run directory: {self.run_dir}", file=out)
        print(f"Evaluations: {len(self.evaluations)}", file=out)
        print(f"Tree nodes: {len(self.tree['nodes'])}", file=out)
        print(
            f"Pruned edges: {self.tree.get('dead_edges', 0)} dead, "
            f"{self.tree.get('ineffective_edges', 0)} ineffective",
            file=out,
        )
        print(f"Mean pipeline length: {self.mean_length():.3f}", file=out)

        for title, by_category in (("ALGORITHM FREQUENCIES", False), ("CATEGORY FREQUENCIES", True)):
            print("\n" + "=" * 70, file=out)
            print(f"{title} PER POSITION", file=out)
            print("=" * 70, file=out)
            for depth, shares in self.layer_frequencies(by_category).items():
                print(f"Position {depth}:", file=out)
                for name, share in sorted(shares.items(), key=lambda item: (-item[1], item[0])):
                    print(f"  {name:<22} {share:6.1%}", file=out)

        print("\n" + "=" * 70, file=out)
        print(f"TOP {TOP_PIPELINES} PIPELINES", file=out)
        print("=" * 70, file=out)
        for rank, row in enumerate(self.top_pipelines(), start=1):
            print(f"{rank:>2}. {row['reward']:.4f}  {' -> '.join(row['steps'])}", file=out)

        print("\n" + "=" * 70, file=out)
        print("MOST VISITED EDGES", file=out)
        print("=" * 70, file=out)
        print(f"{'From':<40} {'Action':<20} {'Visits':>6} {'Mean':>7}", file=out)
        print("-" * 76, file=out)
        for row in self.edge_table():
            print(f"{row['from'][:40]:<40} {row['action']:<20} {row['visits']:>6} {row['mean_reward']:>7.4f}", file=out)

    def to_dot(self) -> str:
        """Visited part of the tree as a DOT digraph"""
        visited = [e for e in self.tree["edges"] if e["visits"] > 0]
        keep = {0} | {e["source"] for e in visited} | {e["target"] for e in visited}
        lines = ["digraph search {", "  rankdir=LR;", '  node [shape=box, fontname="Helvetica"];']
        for node_id in sorted(keep):
            node = self._nodes.get(node_id)
            if node is None:
                continue
            label = node["prefix"][-1] if node["prefix"] else "start"
            shape = ", style=bold" if node.get("terminal") else ""
            lines.append(f'  n{node_id} [label="{label}\\n{node.get("mean_reward", 0.0):.3f}"{shape}];')
        for edge in visited:
            lines.append(f'  n{edge["source"]} -> n{edge["target"]} [label="{edge["visits"]}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def write_dot(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_dot())
        return path


def report(run_dir: str, out: TextIO, dot_path: Optional[str] = None) -> ReportService:
    service = ReportService(run_dir)
    service.render(out)
    if dot_path:
        service.write_dot(dot_path)
    return service
