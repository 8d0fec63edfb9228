"""Lagged directed graphs over (target, source, lag) triples, with JSON I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Edge = tuple[int, int, int]  # (target, source, lag); lag >= 1


class GraphError(ValueError):
    pass


@dataclass
class LaggedGraph:
    """Directed graph over variable-lag pairs.

    An edge ``(i, j, l)`` means variable ``j`` at ``l`` steps in the past
    enters the structural equation of variable ``i``. Lag-0 edges are
    disallowed: temporal precedence orients everything.
    """

    p: int
    L: int
    edges: set[Edge] = field(default_factory=set)
    weights: dict[Edge, float] | None = None

    def __post_init__(self):
        self.edges = set(map(tuple, self.edges))
        self.validate()

    def validate(self):
        if self.p < 1 or self.L < 1:
            raise GraphError(f"need p >= 1 and L >= 1, got p={self.p}, L={self.L}")
        for i, j, lag in self.edges:
            if not (0 <= i < self.p and 0 <= j < self.p):
                raise GraphError(f"edge ({i},{j},{lag}) references a variable outside [0,{self.p})")
            if not (1 <= lag <= self.L):
                raise GraphError(f"edge ({i},{j},{lag}) has lag outside [1,{self.L}]")
        if self.weights is not None:
            extra = set(self.weights) - self.edges
            if extra:
                raise GraphError(f"weights given for non-edges: {sorted(extra)[:3]}")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def weight(self, edge: Edge) -> float:
        if self.weights is None:
            raise GraphError("graph carries no weights")
        return self.weights[edge]

    def to_adjacency(self) -> np.ndarray:
        """Boolean tensor indexed [target, source, lag-1]."""
        adj = np.zeros((self.p, self.p, self.L), dtype=bool)
        for i, j, lag in self.edges:
            adj[i, j, lag - 1] = True
        return adj

    def to_weight_tensor(self) -> np.ndarray:
        """Float tensor indexed [target, source, lag-1]; zeros off-edge."""
        w = np.zeros((self.p, self.p, self.L))
        for e in self.edges:
            w[e[0], e[1], e[2] - 1] = self.weights[e] if self.weights else 1.0
        return w

    def parents(self, target: int) -> list[tuple[int, int]]:
        """(source, lag) pairs of the target, sorted for determinism."""
        return sorted((j, lag) for i, j, lag in self.edges if i == target)

    def relabel(self, perm: list[int]) -> "LaggedGraph":
        """Apply a variable permutation: new index of old variable v is perm[v]."""
        edges = {(perm[i], perm[j], lag) for i, j, lag in self.edges}
        weights = None
        if self.weights is not None:
            weights = {(perm[i], perm[j], lag): w for (i, j, lag), w in self.weights.items()}
        return LaggedGraph(self.p, self.L, edges, weights)

    def to_dict(self) -> dict:
        items = []
        for i, j, lag in sorted(self.edges):
            entry = {"target": i, "source": j, "lag": lag}
            if self.weights is not None:
                entry["weight"] = float(self.weights[(i, j, lag)])
            items.append(entry)
        return {"p": self.p, "L": self.L, "edges": items}

    @classmethod
    def from_dict(cls, d: dict) -> "LaggedGraph":
        try:
            p, L = int(d["p"]), int(d["L"])
            raw = d["edges"]
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed graph document: {exc}") from exc
        edges, weights = set(), {}
        for entry in raw:
            e = (int(entry["target"]), int(entry["source"]), int(entry["lag"]))
            if e in edges:
                raise GraphError(f"duplicate edge {e}")
            edges.add(e)
            if "weight" in entry:
                weights[e] = float(entry["weight"])
        return cls(p, L, edges, weights if weights else None)

    def save(self, path: str | Path):
        Path(path).write_text(dumps_canonical(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "LaggedGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def from_adjacency(adj: np.ndarray, weights: np.ndarray | None = None) -> LaggedGraph:
    p, p2, L = adj.shape
    if p != p2:
        raise GraphError(f"adjacency must be square in its first two dims, got {adj.shape}")
    edges = {(int(i), int(j), int(l) + 1) for i, j, l in zip(*np.nonzero(adj))}
    w = None
    if weights is not None:
        w = {e: float(weights[e[0], e[1], e[2] - 1]) for e in edges}
    return LaggedGraph(p, L, edges, w)


def union(graphs: list[LaggedGraph]) -> LaggedGraph:
    if not graphs:
        raise GraphError("union of no graphs")
    p, L = graphs[0].p, max(g.L for g in graphs)
    if any(g.p != p for g in graphs):
        raise GraphError("graphs disagree on p")
    edges = set()
    for g in graphs:
        edges |= g.edges
    return LaggedGraph(p, L, edges)


def dumps_canonical(obj) -> str:
    """Stable JSON encoding used by every artifact writer (byte-reproducible)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"
