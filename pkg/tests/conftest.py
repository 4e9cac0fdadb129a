from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fusionqa.kg_store import KnowledgeGraph, MergeTable, build_graph, iter_assertions
from fusionqa.subgraph import (
    ANSWER_CONCEPT,
    CONTEXT,
    CONTEXT_RELATION,
    N_NODE_TYPES,
    OTHER,
    QUESTION_CONCEPT,
    WorkingGraph,
)

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


def graph_from_file(name: str) -> KnowledgeGraph:
    with open(DATA / name, encoding="utf-8") as fh:
        return build_graph(iter_assertions(fh), MergeTable.default())


def random_kg(rng: np.random.Generator, n_nodes: int, n_edges: int, n_rel: int = 17) -> KnowledgeGraph:
    """Random multigraph with distinct (src, dst, rel) triples and no self loops."""
    seen = set()
    src, dst, rel = [], [], []
    tries = 0
    while len(seen) < n_edges and tries < 20 * n_edges + 10:
        tries += 1
        s, d = (int(x) for x in rng.integers(0, n_nodes, 2))
        r = int(rng.integers(n_rel))
        if s == d or (s, d, r) in seen:
            continue
        seen.add((s, d, r))
        src.append(s)
        dst.append(d)
        rel.append(r)
    names = [f"n{i}" for i in range(n_nodes)]
    return KnowledgeGraph(names, np.array(src, np.int64), np.array(dst, np.int64),
                          np.array(rel, np.int64), rng.uniform(0.1, 2.0, len(src)))


def random_working_graph(rng: np.random.Generator, n_kg: int, n_table: int, p_edge: float = 0.25) -> WorkingGraph:
    """Context node plus ``n_kg`` KG nodes drawn from a table of ``n_table`` rows."""
    kg_ids = np.concatenate([[-1], rng.choice(n_table, size=n_kg, replace=False)]) if n_kg else np.array([-1])
    types = np.concatenate([[CONTEXT], rng.choice([QUESTION_CONCEPT, ANSWER_CONCEPT, OTHER], size=n_kg)])
    edges = [(0, i, CONTEXT_RELATION) for i in range(1, n_kg + 1) if types[i] != OTHER]
    for i in range(1, n_kg + 1):
        for j in range(1, n_kg + 1):
            if i != j and rng.random() < p_edge:
                edges.append((i, j, int(rng.integers(17))))
    edges = np.array(edges, dtype=np.int64).reshape(-1, 3)
    relevance = np.concatenate([[1.0], rng.uniform(0, 1, n_kg)])
    return WorkingGraph(kg_ids.astype(np.int64), types.astype(np.int64), edges, relevance)


assert N_NODE_TYPES == 4


class Encoded:
    """A small synthetic benchmark grounded and encoded once per session."""

    def __init__(self, n_questions=500, n_nodes=600, facts=True, k=2, dim=32, seed=0):
        from fusionqa.encoder import HashEncoder, HashEncoderConfig
        from fusionqa.pipeline import Grounder, WorkingGraphBuilder
        from fusionqa.synthetic import generate_benchmark

        self.bench = generate_benchmark(n_questions, n_nodes, hops=2, seed=seed)
        self.kg = self.bench.graph()
        self.grounder = Grounder(self.kg, facts=facts).fit()
        self.builder = WorkingGraphBuilder(self.kg, HashEncoder(HashEncoderConfig(dim=dim)), k=k, max_nodes=200).fit()
        self.grounded = self.grounder.transform(self.bench.records)
        self.dataset = self.builder.transform(self.grounded)


_ENCODED = {}


def encoded(**kw) -> Encoded:
    key = tuple(sorted(kw.items()))
    if key not in _ENCODED:
        _ENCODED[key] = Encoded(**kw)
    return _ENCODED[key]


@pytest.fixture(scope="session")
def synth():
    return encoded()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
