"""Synthetic multi-hop benchmark with a ConceptNet-format graph dump.

Every question names a start concept ``q``. All four choices sit at exactly
``hops`` undirected steps from ``q``; only the correct one is reachable in
``hops - 1`` steps from the bridge concept adjacent to ``q`` that the
question's fact names. Without the fact the choices are structurally
interchangeable, so the fact (or the graph path it points into) is what
makes the question answerable.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grounding import default_stopwords
from .kg_store import DEFAULT_MERGED_NAMES, KnowledgeGraph, MergeTable, build_graph, iter_assertions

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_RAW_RELATIONS = {
    "antonym": "Antonym", "atlocation": "AtLocation", "capableof": "CapableOf", "causes": "Causes",
    "createdby": "CreatedBy", "isa": "IsA", "desires": "Desires", "hassubevent": "HasSubevent",
    "partof": "PartOf", "hascontext": "HasContext", "hasproperty": "HasProperty", "madeof": "MadeOf",
    "notcapableof": "NotCapableOf", "notdesires": "NotDesires", "receivesaction": "ReceivesAction",
    "relatedto": "RelatedTo", "usedfor": "UsedFor",
}
_TEMPLATE_WORDS = {"which", "concept", "lies", "steps", "from", "linked", "is", "to", "two", "three"}
LABELS = ("A", "B", "C", "D")


@dataclass
class SyntheticBenchmark:
    dump_lines: list[str]
    records: list[dict]
    hops: int

    def graph(self, table: MergeTable | None = None) -> KnowledgeGraph:
        return build_graph(iter_assertions(self.dump_lines), table or MergeTable.default())

    def splits(self, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[dict]]:
        n = len(self.records)
        n_train = int(round(fractions[0] * n))
        n_dev = int(round(fractions[1] * n))
        return {
            "train": self.records[:n_train],
            "dev": self.records[n_train:n_train + n_dev],
            "test": self.records[n_train + n_dev:],
        }

    @property
    def facts(self) -> list[str]:
        return [r["fact1"] for r in self.records]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"dump": out / "assertions.tsv", "facts": out / "facts.txt"}
        paths["dump"].write_text("\n".join(self.dump_lines) + "\n", encoding="utf-8")
        paths["facts"].write_text("\n".join(self.facts) + "\n", encoding="utf-8")
        for split, recs in self.splits().items():
            paths[split] = out / f"{split}.jsonl"
            paths[split].write_text("".join(json.dumps(r) + "\n" for r in recs), encoding="utf-8")
        return paths


def _names(n: int, rng: np.random.Generator) -> list[str]:
    stop = default_stopwords()
    seen: set[str] = set()
    names: list[str] = []
    while len(names) < n:
        word = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(3))
        if word in seen or word in stop or word in _TEMPLATE_WORDS:
            continue
        # plural folding must not link two names
        if word.endswith("s") or word + "s" in seen or word + "es" in seen:
            continue
        seen.add(word)
        names.append(word)
    return names


def _bfs(adj: list[set[int]], start: int, limit: int) -> dict[int, int]:
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        if dist[u] == limit:
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def generate_benchmark(
    n_questions: int = 1000,
    n_nodes: int = 2000,
    hops: int = 2,
    avg_degree: float = 3.0,
    seed: int = 0,
) -> SyntheticBenchmark:
    if hops < 2:
        raise ValueError("hops must be >= 2")
    rng = np.random.default_rng(seed)
    names = _names(n_nodes, rng)
    adj: list[set[int]] = [set() for _ in range(n_nodes)]
    lines = []
    n_edges = int(avg_degree * n_nodes / 2)
    merged = list(DEFAULT_MERGED_NAMES)
    while len(lines) < n_edges:
        u, v = (int(x) for x in rng.integers(0, n_nodes, size=2))
        if u == v or v in adj[u]:
            continue
        adj[u].add(v)
        adj[v].add(u)
        rel = _RAW_RELATIONS[merged[int(rng.integers(len(merged)))]]
        a, b = (u, v) if rng.random() < 0.5 else (v, u)
        lines.append(
            f"/a/[/r/{rel}/,/c/en/{names[a]}/,/c/en/{names[b]}/]\t/r/{rel}\t"
            f"/c/en/{names[a]}\t/c/en/{names[b]}\t{json.dumps({'weight': 1.0})}"
        )

    records: list[dict] = []
    attempts = 0
    while len(records) < n_questions:
        attempts += 1
        if attempts > 200 * n_questions:
            raise RuntimeError("could not generate enough questions; raise avg_degree")
        q = int(rng.integers(n_nodes))
        from_q = _bfs(adj, q, hops)
        ring = [v for v, d in from_q.items() if d == hops]
        bridges = sorted(adj[q])
        if len(ring) < 4 or not bridges:
            continue
        bridge = bridges[int(rng.integers(len(bridges)))]
        from_bridge = _bfs(adj, bridge, hops - 1)
        good = sorted(v for v in ring if from_bridge.get(v, hops) == hops - 1)
        bad = sorted(v for v in ring if v not in from_bridge)
        if not good or len(bad) < 3:
            continue
        answer = good[int(rng.integers(len(good)))]
        distractors = [bad[i] for i in rng.choice(len(bad), size=3, replace=False)]
        gold = int(rng.integers(4))
        options = distractors[:gold] + [answer] + distractors[gold:]
        word = "two" if hops == 2 else "three" if hops == 3 else str(hops)
        records.append({
            "id": f"syn{hops}-{len(records):04d}",
            "question": {
                "stem": f"Which concept lies {word} steps from {names[q]}?",
                "choices": [{"label": lab, "text": names[o]} for lab, o in zip(LABELS, options)],
            },
            "answerKey": LABELS[gold],
            "fact1": f"{names[q]} is linked to {names[bridge]}",
        })
    return SyntheticBenchmark(lines, records, hops)
