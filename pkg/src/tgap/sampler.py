"""Incremental query subgraph: core-node selection, edge sampling, expansion."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import TemporalKG


@dataclass(frozen=True)
class SamplerConfig:
    max_core_nodes: int = 100       # x
    edges_per_core: int = 500       # y
    edges_per_step: int = 500       # z

    def __post_init__(self):
        for name in ("max_core_nodes", "edges_per_core", "edges_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class Subgraph:
    """Growing node/edge set of one query. Edges are never removed."""
    root: int
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    out: dict = field(default_factory=lambda: defaultdict(list))

    def __post_init__(self):
        self.nodes = [self.root]
        self._node_set = {self.root}
        self._edge_set = set()

    def has_node(self, v):
        return v in self._node_set

    def has_edge(self, e):
        return e in self._edge_set

    def add_edge(self, e: int, src: int, dst: int) -> list[int]:
        """Insert an edge; returns endpoints that were not members yet."""
        new = []
        if e in self._edge_set:
            return new
        self._edge_set.add(e)
        self.edges.append(e)
        self.out[src].append(e)
        for v in (src, dst):
            if v not in self._node_set:
                self._node_set.add(v)
                self.nodes.append(v)
                new.append(v)
        return new


@dataclass
class CandidateEdgeSet:
    """Transition candidates of one query for one step, sorted by edge id.

    ``new`` marks edges sampled from core nodes this step that are neither
    self-loops nor already in the subgraph: only these compete for insertion.
    """
    edges: np.ndarray
    new: np.ndarray
    in_subgraph: np.ndarray
    self_loop: np.ndarray
    num_sampled: int = 0


def select_core_nodes(nodes: np.ndarray, values: np.ndarray, x: int) -> np.ndarray:
    """Up to ``x`` nodes with the highest nonzero attention; ties go to the lower id."""
    nodes = np.asarray(nodes)
    values = np.asarray(values)
    nz = values > 0
    n, v = nodes[nz], values[nz]
    order = np.lexsort((n, -v))
    return n[order[:x]]


def sample_candidate_edges(graph: TemporalKG, core_nodes, y: int, rng: np.random.Generator,
                           subgraph: Subgraph, frontier, banned=frozenset()) -> CandidateEdgeSet:
    """Candidate set for one step.

    Each core node contributes ``min(y, out-degree)`` outgoing edges drawn
    uniformly without replacement (self-loops excluded). Every frontier node
    (nonzero attention) contributes its outgoing subgraph edges and its
    self-loop, so all attention mass has somewhere to go.
    """
    sampled = []
    for c in np.asarray(core_nodes).tolist():
        out = graph.out_edges(c)
        out = out[~graph.is_self_loop[out]]
        if banned:
            out = out[~np.isin(out, list(banned))]
        if len(out) > y:
            out = out[np.sort(rng.choice(len(out), size=y, replace=False))]
        sampled.append(out)
    sampled = np.concatenate(sampled) if sampled else np.empty(0, dtype=np.int64)
    frontier = np.asarray(frontier, dtype=np.int64)
    sub = [e for v in frontier.tolist() for e in subgraph.out.get(v, ())]
    loops = graph.self_loop[frontier]
    edges = np.unique(np.concatenate([sampled, np.asarray(sub, dtype=np.int64), loops]))
    self_loop = graph.is_self_loop[edges]
    in_sub = np.fromiter((subgraph.has_edge(e) for e in edges.tolist()), dtype=bool, count=len(edges))
    new = np.isin(edges, sampled) & ~in_sub & ~self_loop
    return CandidateEdgeSet(edges, new, in_sub, self_loop, num_sampled=len(sampled))


def expand_subgraph(graph: TemporalKG, subgraph: Subgraph, candidates: CandidateEdgeSet,
                    edge_attention: np.ndarray, z: int):
    """Insert the ``z`` new candidates with the highest edge attention.

    Returns (inserted edge ids, nodes that joined the subgraph) in insertion
    order. Ties go to the lower edge id.
    """
    edges = candidates.edges[candidates.new]
    vals = np.asarray(edge_attention)[candidates.new]
    order = np.lexsort((edges, -vals))[:z]
    inserted, joined = [], []
    for e in edges[order].tolist():
        joined.extend(subgraph.add_edge(e, int(graph.src[e]), int(graph.dst[e])))
        inserted.append(e)
    return inserted, joined
