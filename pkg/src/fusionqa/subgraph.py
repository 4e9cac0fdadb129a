"""k-hop extraction, relevance pruning and working-graph assembly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .kg_store import N_MERGED, KnowledgeGraph

CONTEXT, QUESTION_CONCEPT, ANSWER_CONCEPT, OTHER = range(4)
N_NODE_TYPES = 4
CONTEXT_RELATION = N_MERGED  # id 17
N_RELATIONS = N_MERGED + 1


@dataclass(frozen=True)
class SubgraphSpec:
    k: int = 2
    max_nodes: int = 200

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")


@dataclass
class WorkingGraph:
    """Joint graph of the QA context node (index 0) and pruned KG nodes.

    ``kg_ids[0]`` is -1 for the context node. ``edges`` rows are
    (src, dst, relation) in local indices.
    """

    kg_ids: np.ndarray
    node_types: np.ndarray
    edges: np.ndarray
    relevance: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.kg_ids.size)

    def validate(self, max_nodes: int | None = None) -> None:
        """Raise ``ValueError`` when a structural invariant fails."""
        n = self.n_nodes

        def need(ok, what):
            if not ok:
                raise ValueError(f"invalid working graph: {what}")

        need(n >= 1 and self.kg_ids[0] == -1 and self.node_types[0] == CONTEXT, "node 0 must be the context node")
        need(self.relevance[0] == 1.0, "context relevance must be 1.0")
        need(np.all((self.relevance >= 0) & (self.relevance <= 1)), "relevance outside [0, 1]")
        if self.edges.size:
            need(self.edges[:, :2].min() >= 0 and self.edges[:, :2].max() < n, "edge endpoint out of range")
            need(self.edges[:, 2].max() < N_RELATIONS, "relation id out of range")
        ctx_targets = set(self.edges[self.edges[:, 2] == CONTEXT_RELATION, 1].tolist())
        topics = set(np.flatnonzero((self.node_types == QUESTION_CONCEPT) | (self.node_types == ANSWER_CONCEPT)).tolist())
        need(topics <= ctx_targets, "topic concept not linked to the context node")
        if max_nodes is not None:
            need(n <= max_nodes + 1, f"{n} nodes exceeds cap {max_nodes} + 1")

    def to_json(self) -> dict:
        return {
            "kg_ids": self.kg_ids.tolist(),
            "types": self.node_types.tolist(),
            "edges": self.edges.tolist(),
            "relevance": self.relevance.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorkingGraph":
        return cls(
            np.asarray(obj["kg_ids"], dtype=np.int64),
            np.asarray(obj["types"], dtype=np.int64),
            np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 3),
            np.asarray(obj["relevance"], dtype=np.float64),
        )


def extract_khop(kg: KnowledgeGraph, topics: Iterable[int], k: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes within undirected distance ``k`` of any topic, and the induced edges.

    Returns (sorted node ids, sorted indices into the KG edge arrays).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    topics = np.unique(np.fromiter(topics, dtype=np.int64))
    if topics.size == 0:
        return topics, np.zeros(0, dtype=np.int64)
    if topics.min() < 0 or topics.max() >= kg.node_count:
        raise IndexError("topic id out of range")
    indptr, indices = kg.undirected_csr()
    seen = np.zeros(kg.node_count, dtype=bool)
    seen[topics] = True
    frontier = topics
    for _ in range(k):
        if frontier.size == 0:
            break
        starts, ends = indptr[frontier], indptr[frontier + 1]
        nbrs = indices[_ranges(starts, ends)]
        nbrs = np.unique(nbrs[~seen[nbrs]])
        seen[nbrs] = True
        frontier = nbrs
    nodes = np.flatnonzero(seen)
    return nodes, induced_edges(kg, nodes)


def _ranges(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, e)`` for each pair."""
    lens = ends - starts
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    return np.arange(total) + offsets


def induced_edges(kg: KnowledgeGraph, nodes: np.ndarray) -> np.ndarray:
    if nodes.size == 0:
        return np.zeros(0, dtype=np.int64)
    member = np.zeros(kg.node_count, dtype=bool)
    member[nodes] = True
    out = _ranges(kg.out_ptr[nodes], kg.out_ptr[nodes + 1])
    return out[member[kg.dst[out]]]


def prune_to_cap(
    kg: KnowledgeGraph,
    nodes: np.ndarray,
    edge_idx: np.ndarray,
    relevance: np.ndarray,
    topics: Iterable[int],
    max_nodes: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Keep every topic, then the most relevant other nodes (ties: lower id).

    ``relevance`` is aligned with ``nodes``; only edges induced by the kept
    nodes survive.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size <= max_nodes:
        return nodes, edge_idx
    is_topic = np.isin(nodes, np.fromiter(topics, dtype=np.int64))
    rest = np.flatnonzero(~is_topic)
    slots = max(max_nodes - int(is_topic.sum()), 0)
    order = np.lexsort((nodes[rest], -np.asarray(relevance)[rest]))
    keep = is_topic.copy()
    keep[rest[order[:slots]]] = True
    kept = nodes[keep]
    return kept, filter_edges(kg, edge_idx, kept)


def filter_edges(kg: KnowledgeGraph, edge_idx: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    member = np.isin(kg.src[edge_idx], nodes) & np.isin(kg.dst[edge_idx], nodes)
    return edge_idx[member]


def build_working_graph(
    kg: KnowledgeGraph,
    nodes: np.ndarray,
    edge_idx: np.ndarray,
    question_concepts: Iterable[int],
    answer_concepts: Iterable[int],
    relevance: np.ndarray,
) -> WorkingGraph:
    """Assemble the joint graph; ``relevance`` is aligned with ``nodes``.

    Topic concepts that were not kept in ``nodes`` are skipped.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    local = {int(n): i + 1 for i, n in enumerate(nodes)}
    types = np.full(nodes.size + 1, OTHER, dtype=np.int64)
    types[0] = CONTEXT
    answers = set(answer_concepts)
    for c in question_concepts:
        if c in local and c not in answers:
            types[local[c]] = QUESTION_CONCEPT
    for c in answers:
        if c in local:
            types[local[c]] = ANSWER_CONCEPT
    kg_edges = np.stack([
        np.array([local[int(s)] for s in kg.src[edge_idx]], dtype=np.int64),
        np.array([local[int(d)] for d in kg.dst[edge_idx]], dtype=np.int64),
        kg.rel[edge_idx].astype(np.int64),
    ], axis=1).reshape(-1, 3)
    topic_local = np.flatnonzero(types != OTHER)
    topic_local = topic_local[topic_local > 0]
    ctx_edges = np.stack([
        np.zeros(topic_local.size, dtype=np.int64),
        topic_local,
        np.full(topic_local.size, CONTEXT_RELATION, dtype=np.int64),
    ], axis=1)
    return WorkingGraph(
        kg_ids=np.concatenate([[-1], nodes]),
        node_types=types,
        edges=np.concatenate([ctx_edges, kg_edges]),
        relevance=np.concatenate([[1.0], np.asarray(relevance, dtype=np.float64)]),
    )
