from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionqa.kg_store import KnowledgeGraph
from fusionqa.subgraph import (
    ANSWER_CONCEPT,
    CONTEXT,
    CONTEXT_RELATION,
    OTHER,
    QUESTION_CONCEPT,
    SubgraphSpec,
    WorkingGraph,
    build_working_graph,
    extract_khop,
    prune_to_cap,
)

from .conftest import random_kg


def bfs_oracle(kg, topics, k):
    adj = {v: set() for v in range(kg.node_count)}
    for s, d in zip(kg.src.tolist(), kg.dst.tolist()):
        adj[s].add(d)
        adj[d].add(s)
    dist = {t: 0 for t in topics}
    q = deque(topics)
    while q:
        u = q.popleft()
        if dist[u] < k:
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
    nodes = set(dist)
    edges = {i for i, (s, d) in enumerate(zip(kg.src.tolist(), kg.dst.tolist())) if s in nodes and d in nodes}
    return nodes, edges


def star(n_leaves=5):
    leaves = np.arange(1, n_leaves + 1)
    return KnowledgeGraph([f"v{i}" for i in range(n_leaves + 1)], np.zeros(n_leaves, np.int64), leaves,
                          np.arange(n_leaves) % 17, np.ones(n_leaves))


def test_zero_hop_is_topics_plus_their_edges():
    g = KnowledgeGraph(list("abcd"), np.array([0, 1, 2]), np.array([1, 2, 3]), np.zeros(3, np.int64), np.ones(3))
    nodes, edges = extract_khop(g, {0, 1, 3}, 0)
    assert nodes.tolist() == [0, 1, 3]
    assert [(int(g.src[e]), int(g.dst[e])) for e in edges] == [(0, 1)]


def test_star_center_one_hop():
    g = star(5)
    nodes, edges = extract_khop(g, {0}, 1)
    assert nodes.tolist() == [0, 1, 2, 3, 4, 5]
    assert sorted(edges.tolist()) == list(range(5))
    # from a leaf, one hop reaches only the center (edges are traversed undirected)
    assert extract_khop(g, {3}, 1)[0].tolist() == [0, 3]
    assert extract_khop(g, {3}, 2)[0].tolist() == [0, 1, 2, 3, 4, 5]


def test_empty_topics():
    nodes, edges = extract_khop(star(), set(), 3)
    assert nodes.size == 0 and edges.size == 0


@pytest.mark.parametrize("seed", range(100))
def test_two_hop_matches_bfs_on_200_node_graphs(seed):
    rng = np.random.default_rng(seed)
    g = random_kg(rng, 200, 400)
    topics = set(rng.choice(200, size=3, replace=False).tolist())
    nodes, edges = extract_khop(g, topics, 2)
    want_nodes, want_edges = bfs_oracle(g, topics, 2)
    assert set(nodes.tolist()) == want_nodes
    assert set(edges.tolist()) == want_edges


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(0, 150), st.integers(0, 5), st.integers(0, 2**32 - 1))
def test_monotone_in_k_and_closed(n, m, k, seed):
    rng = np.random.default_rng(seed)
    g = random_kg(rng, n, m)
    topics = set(rng.choice(n, size=min(n, 2), replace=False).tolist())
    a, ea = extract_khop(g, topics, k)
    b, _ = extract_khop(g, topics, k + 1)
    assert set(a.tolist()) <= set(b.tolist())
    assert np.all(np.diff(a) > 0)
    member = set(a.tolist())
    assert all(int(g.src[e]) in member and int(g.dst[e]) in member for e in ea)


# --------------------------------------------------------------- pruning

def test_under_cap_unchanged():
    g = star(5)
    nodes, edges = extract_khop(g, {0}, 1)
    kept, kept_edges = prune_to_cap(g, nodes, edges, np.linspace(0, 1, 6), {0}, 10)
    assert kept.tolist() == nodes.tolist() and kept_edges.tolist() == edges.tolist()


def test_cap_three_keeps_topics_and_best_node():
    g = KnowledgeGraph(list("abcde"), np.array([0, 0, 0, 1]), np.array([2, 3, 4, 0]),
                       np.zeros(4, np.int64), np.ones(4))
    nodes = np.arange(5)
    rel = np.array([0.1, 0.1, 0.9, 0.4, 0.2])  # topics 0 and 1
    kept, edges = prune_to_cap(g, nodes, np.arange(4), rel, {0, 1}, 3)
    assert kept.tolist() == [0, 1, 2]
    assert sorted((int(g.src[e]), int(g.dst[e])) for e in edges) == [(0, 2), (1, 0)]


def test_equal_relevance_keeps_lowest_ids():
    g = star(6)
    nodes, edges = extract_khop(g, {0}, 1)
    kept, _ = prune_to_cap(g, nodes, edges, np.full(7, 0.5), {0}, 4)
    assert kept.tolist() == [0, 1, 2, 3]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 50), st.integers(0, 120), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_pruning_keeps_topics_and_never_grows(n, m, cap, seed):
    rng = np.random.default_rng(seed)
    g = random_kg(rng, n, m)
    topics = set(rng.choice(n, size=min(n, 2, cap), replace=False).tolist())
    nodes, edges = extract_khop(g, topics, 2)
    rel = rng.uniform(0, 1, nodes.size)
    kept, kept_edges = prune_to_cap(g, nodes, edges, rel, topics, cap)
    assert topics <= set(kept.tolist())
    assert kept.size <= max(nodes.size, 0) and kept.size <= max(cap, len(topics))
    member = set(kept.tolist())
    assert all(int(g.src[e]) in member and int(g.dst[e]) in member for e in kept_edges)


# --------------------------------------------------------- working graph

def test_empty_subgraph_gives_context_only():
    g = star()
    wg = build_working_graph(g, np.zeros(0, np.int64), np.zeros(0, np.int64), set(), set(), np.zeros(0))
    assert wg.n_nodes == 1 and wg.edges.shape == (0, 3)
    assert wg.node_types.tolist() == [CONTEXT] and wg.relevance.tolist() == [1.0]
    wg.validate()


def test_one_question_one_answer_concept():
    g = KnowledgeGraph(["q", "a"], np.array([0]), np.array([1]), np.array([4]), np.array([1.0]))
    nodes, edges = extract_khop(g, {0, 1}, 1)
    wg = build_working_graph(g, nodes, edges, {0}, {1}, np.array([0.3, 0.8]))
    assert wg.n_nodes == 3
    assert wg.kg_ids.tolist() == [-1, 0, 1]
    assert wg.node_types.tolist() == [CONTEXT, QUESTION_CONCEPT, ANSWER_CONCEPT]
    assert wg.edges.tolist() == [[0, 1, CONTEXT_RELATION], [0, 2, CONTEXT_RELATION], [1, 2, 4]]
    assert wg.relevance.tolist() == [1.0, 0.3, 0.8]
    wg.validate(max_nodes=2)


def test_concept_on_both_sides_is_answer():
    g = star(2)
    nodes, edges = extract_khop(g, {0, 1}, 0)
    wg = build_working_graph(g, nodes, edges, {0, 1}, {1}, np.array([0.5, 0.5]))
    assert wg.node_types.tolist() == [CONTEXT, QUESTION_CONCEPT, ANSWER_CONCEPT]


def test_other_nodes_not_linked_to_context():
    g = star(3)
    nodes, edges = extract_khop(g, {0}, 1)
    wg = build_working_graph(g, nodes, edges, {0}, set(), np.full(4, 0.5))
    assert wg.node_types.tolist() == [CONTEXT, QUESTION_CONCEPT, OTHER, OTHER, OTHER]
    ctx = wg.edges[wg.edges[:, 2] == CONTEXT_RELATION]
    assert ctx.tolist() == [[0, 1, CONTEXT_RELATION]]


def test_validate_rejects_broken_graphs():
    good = WorkingGraph(np.array([-1, 5]), np.array([CONTEXT, ANSWER_CONCEPT]),
                        np.array([[0, 1, CONTEXT_RELATION]]), np.array([1.0, 0.5]))
    good.validate()
    with pytest.raises(ValueError):
        WorkingGraph(good.kg_ids, good.node_types, np.zeros((0, 3), np.int64), good.relevance).validate()
    with pytest.raises(ValueError):
        WorkingGraph(good.kg_ids, good.node_types, good.edges, np.array([1.0, 1.5])).validate()
    with pytest.raises(ValueError):
        good.validate(max_nodes=0)
    again = WorkingGraph.from_json(good.to_json())
    assert again.edges.tolist() == good.edges.tolist() and again.kg_ids.tolist() == good.kg_ids.tolist()


def test_spec_validation():
    SubgraphSpec(2, 200)
    with pytest.raises(ValueError):
        SubgraphSpec(0, 200)
    with pytest.raises(ValueError):
        SubgraphSpec(2, 0)
