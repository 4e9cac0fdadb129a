"""Featurization: QA records -> grounded examples -> encoded working graphs.

Both stages are scikit-learn transformers so they chain with the estimators
in :mod:`fusionqa.estimators` inside a ``Pipeline``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .encoder import EmbeddingProvider, HashEncoder, context_text, embed_context, node_text
from .facts import FactStore, FusionConfig, facts_for_record, fuse_context
from .grounding import N_CHOICES, DataError, GroundedExample, ground_example, parse_record
from .kg_store import KnowledgeGraph
from .subgraph import SubgraphSpec, WorkingGraph, build_working_graph, extract_khop, prune_to_cap

logger = logging.getLogger(__name__)


class NodeTable:
    """Lazily computed provider embeddings of KG concept names, indexed by node id."""

    def __init__(self, kg: KnowledgeGraph, provider: EmbeddingProvider):
        self.kg = kg
        self.provider = provider
        self.dim = provider.dim
        self._row: dict[int, int] = {}
        self._data = np.zeros((0, provider.dim))
        self._size = 0

    def ensure(self, ids: Iterable[int]) -> None:
        missing = sorted({int(i) for i in ids} - self._row.keys())
        if not missing:
            return
        vecs = np.asarray(self.provider.embed([node_text(self.kg.concepts[i]) for i in missing]), dtype=np.float64)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        need = self._size + len(missing)
        if need > self._data.shape[0]:
            grown = np.zeros((max(need, 2 * self._data.shape[0], 64), self.dim))
            grown[: self._size] = self._data[: self._size]
            self._data = grown
        self._data[self._size:need] = vecs / norms
        for j, i in enumerate(missing):
            self._row[i] = self._size + j
        self._size = need

    def __getitem__(self, ids) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        self.ensure(ids.tolist())
        rows = np.fromiter((self._row[int(i)] for i in ids), dtype=np.int64, count=ids.size)
        return self._data[rows]


@dataclass
class EncodedQuestion:
    example_id: str
    graphs: list[WorkingGraph]
    contexts: np.ndarray
    label: int | None = None
    texts: list[str] = field(default_factory=list)


class QADataset(Sequence):
    """Encoded questions sharing one node table. Slicing keeps the table."""

    def __init__(self, questions: list[EncodedQuestion], node_table, k: int | None = None, facts: bool | None = None):
        self.questions = list(questions)
        self.node_table = node_table
        self.k = k
        self.facts = facts

    def __len__(self) -> int:
        return len(self.questions)

    def __getitem__(self, idx):
        if isinstance(idx, (slice, list, np.ndarray)):
            if isinstance(idx, slice):
                qs = self.questions[idx]
            else:
                qs = [self.questions[int(i)] for i in idx]
            return QADataset(qs, self.node_table, self.k, self.facts)
        return self.questions[idx]

    @property
    def labels(self) -> np.ndarray:
        if any(q.label is None for q in self.questions):
            raise DataError("dataset contains unlabeled questions")
        return np.array([q.label for q in self.questions], dtype=np.int64)

    @property
    def input_dim(self) -> int:
        return int(self.questions[0].contexts.shape[1])


class Grounder(BaseEstimator, TransformerMixin):
    """Raw OpenBookQA records -> :class:`GroundedExample`, fusing facts when enabled."""

    def __init__(self, kg: KnowledgeGraph | None = None, fact_store: FactStore | None = None,
                 facts: bool = False, facts_per_question: int = 1, token_cap: int = 512,
                 separator: str = " / ", prefer_gold: bool = True, max_ngram: int = 4,
                 labeled: bool = True):
        self.kg = kg
        self.fact_store = fact_store
        self.facts = facts
        self.facts_per_question = facts_per_question
        self.token_cap = token_cap
        self.separator = separator
        self.prefer_gold = prefer_gold
        self.max_ngram = max_ngram
        self.labeled = labeled

    def fit(self, X=None, y=None):
        if self.kg is None:
            raise ValueError("Grounder needs a knowledge graph")
        return self

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.facts, self.facts_per_question, self.token_cap, self.separator, self.prefer_gold)

    def ground_one(self, record: dict) -> GroundedExample:
        cfg = self.fusion_config()
        parse_record(record, self.labeled)
        facts = facts_for_record(record, self.fact_store, cfg)
        return ground_example(record, self.kg.concept_index, facts or None, cfg, self.max_ngram, self.labeled)

    def transform(self, X: Iterable[dict]) -> list[GroundedExample]:
        return [self.ground_one(r) for r in X]


class WorkingGraphBuilder(BaseEstimator, TransformerMixin):
    """Grounded examples -> :class:`QADataset` of per-choice working graphs."""

    def __init__(self, kg: KnowledgeGraph | None = None, provider: EmbeddingProvider | None = None,
                 k: int = 2, max_nodes: int = 200, separator: str = " / "):
        self.kg = kg
        self.provider = provider
        self.k = k
        self.max_nodes = max_nodes
        self.separator = separator

    def fit(self, X=None, y=None):
        if self.kg is None:
            raise ValueError("WorkingGraphBuilder needs a knowledge graph")
        SubgraphSpec(self.k, self.max_nodes)
        provider = self.provider if self.provider is not None else HashEncoder()
        self.node_table_ = NodeTable(self.kg, provider)
        return self

    def _provider(self) -> EmbeddingProvider:
        return self.node_table_.provider

    def build_choice(self, ex: GroundedExample, j: int) -> tuple[WorkingGraph, np.ndarray, str]:
        text = context_text(ex.stem, ex.choices[j].text, ex.facts[j], self.separator)
        q, a = ex.question_concepts[j], ex.answer_concepts[j]
        topics = q | a
        nodes, edge_idx = extract_khop(self.kg, topics, self.k)
        c = embed_context(ex.stem, ex.choices[j].text, text, self._provider())
        if nodes.size:
            vecs = self.node_table_[nodes]
            relevance = np.clip((vecs @ c + 1.0) / 2.0, 0.0, 1.0)
        else:
            relevance = np.zeros(0)
        kept, kept_edges = prune_to_cap(self.kg, nodes, edge_idx, relevance, topics, self.max_nodes)
        if kept.size != nodes.size:
            relevance = relevance[np.isin(nodes, kept)]
        wg = build_working_graph(self.kg, kept, kept_edges, q, a, relevance)
        return wg, c, text

    def encode(self, ex: GroundedExample) -> EncodedQuestion:
        graphs, contexts, texts = [], [], []
        for j in range(N_CHOICES):
            wg, c, text = self.build_choice(ex, j)
            graphs.append(wg)
            contexts.append(c)
            texts.append(text)
        return EncodedQuestion(ex.example_id, graphs, np.stack(contexts), ex.label, texts)

    def transform(self, X: Iterable[GroundedExample]) -> QADataset:
        facts = None
        questions = []
        for ex in X:
            questions.append(self.encode(ex))
            facts = facts or any(ex.facts)
        return QADataset(questions, self.node_table_, self.k, bool(facts))
