"""Line-delimited JSON caches of working graphs, keyed by a config hash."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable

import numpy as np

from .encoder import EmbeddingProvider, embed_context
from .grounding import N_CHOICES, GroundedExample
from .kg_store import KnowledgeGraph
from .model import ConfigError
from .pipeline import EncodedQuestion, NodeTable, QADataset
from .subgraph import WorkingGraph

# fields whose disagreement makes a cache unusable for a config
COMPAT_FIELDS = ("k", "max_nodes", "facts", "encoder", "graph_sha256")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def cache_path(cache_dir: str | Path, split: str, cfg: dict) -> Path:
    return Path(cache_dir) / f"{split}-{config_hash(cfg)}.jsonl"


def write_cache(path: Path, header: dict, examples: Iterable[tuple[GroundedExample, list]]) -> int:
    """Write header + one record per (example, choice) atomically; returns record count."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
    n = 0
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_header": header}, sort_keys=True) + "\n")
        for ex, graphs in examples:
            for j, (wg, text) in enumerate(graphs):
                fh.write(json.dumps({
                    "example_id": ex.example_id,
                    "choice_index": j,
                    "choice_label": ex.choices[j].label,
                    "choice_text": ex.choices[j].text,
                    "stem": ex.stem,
                    "label": ex.label,
                    "context_text": text,
                    "question_concepts": sorted(ex.question_concepts[j]),
                    "answer_concepts": sorted(ex.answer_concepts[j]),
                    "graph": wg.to_json(),
                }, sort_keys=True) + "\n")
                n += 1
    tmp.replace(path)
    return n


def read_header(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return json.loads(first)["_header"]


def read_records(path: Path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())["_header"]
        records = [json.loads(line) for line in fh if line.strip()]
    return header, records


def group_questions(records: list[dict]) -> list[list[dict]]:
    groups: dict[str, list[dict]] = {}
    for r in records:
        groups.setdefault(r["example_id"], []).append(r)
    out = []
    for rs in groups.values():
        rs.sort(key=lambda r: r["choice_index"])
        if len(rs) != N_CHOICES:
            raise ConfigError(f"cache holds {len(rs)} choices for {rs[0]['example_id']}")
        out.append(rs)
    return out


def load_dataset(path: Path, kg: KnowledgeGraph, provider: EmbeddingProvider,
                 node_table: NodeTable | None = None) -> QADataset:
    header, records = read_records(path)
    table = node_table or NodeTable(kg, provider)
    questions = []
    for rs in group_questions(records):
        graphs = [WorkingGraph.from_json(r["graph"]) for r in rs]
        contexts = np.stack([
            embed_context(r["stem"], r["choice_text"], r["context_text"], provider) for r in rs
        ])
        questions.append(EncodedQuestion(rs[0]["example_id"], graphs, contexts, rs[0]["label"],
                                         [r["context_text"] for r in rs]))
    return QADataset(questions, table, header["k"], header["facts"])


def find_compatible(cache_dir: Path, split: str, cfg: dict) -> Path:
    """Path of the cache for ``cfg``; on a miss, name the mismatched fields."""
    path = cache_path(cache_dir, split, cfg)
    if path.exists():
        return path
    candidates = sorted(Path(cache_dir).glob(f"{split}-*.jsonl"))
    if not candidates:
        raise ConfigError(f"no cache for split {split!r} in {cache_dir}; run the ground command first")
    diffs = []
    for cand in candidates:
        header = read_header(cand)
        diff = [f"{f} (cache {header.get(f)!r}, config {cfg.get(f)!r})" for f in COMPAT_FIELDS if header.get(f) != cfg.get(f)]
        diffs.append(diff)
    best = min(diffs, key=len)
    if not best:
        # extraction settings agree, so the QA or facts file differs
        header = read_header(candidates[diffs.index(best)])
        best = [f"{f} (cache {header.get(f)!r}, config {cfg.get(f)!r})"
                for f in ("qa_sha256", "facts_sha256") if header.get(f) != cfg.get(f)]
    detail = ", ".join(best) if best else "source files changed"
    raise ConfigError(f"config/cache mismatch for split {split!r}: {detail}")

