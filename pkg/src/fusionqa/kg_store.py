"""ConceptNet ingestion, relation merging and the immutable knowledge graph."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

logger = logging.getLogger(__name__)

DROP = -1
MAGIC = b"FQAKG\x00\r\n"
FORMAT_VERSION = 1
N_MERGED = 17

DEFAULT_MERGED_NAMES = (
    "antonym", "atlocation", "capableof", "causes", "createdby", "isa", "desires",
    "hassubevent", "partof", "hascontext", "hasproperty", "madeof", "notcapableof",
    "notdesires", "receivesaction", "relatedto", "usedfor",
)


class ParseError(ValueError):
    """A dump line could not be parsed. Recoverable: callers may skip it."""

    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno
        self.reason = reason


class GraphFormatError(RuntimeError):
    pass


class MemoryBudgetExceeded(MemoryError):
    def __init__(self, edges_processed: int, budget: int):
        super().__init__(
            f"edge budget of {budget} exceeded after {edges_processed} edges processed"
        )
        self.edges_processed = edges_processed


@dataclass(frozen=True)
class RawAssertion:
    uri: str
    relation: str
    start: str
    end: str
    weight: float = 1.0


def concept_name(uri: str) -> str:
    """``/c/en/Electric_Car/n/...`` -> ``electric_car``."""
    parts = uri.split("/")
    if len(parts) < 4 or parts[1] != "c":
        raise ValueError(f"not a concept URI: {uri!r}")
    return parts[3].lower()


def parse_assertion_line(line: str, lineno: int = 0) -> RawAssertion | None:
    """Parse one tab-separated dump record.

    Returns ``None`` when either endpoint is not an English concept.
    """
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 5:
        raise ParseError(lineno, f"expected 5 tab-separated fields, got {len(fields)}")
    uri, relation, start, end, meta = fields
    if not relation.startswith("/r/"):
        raise ParseError(lineno, f"relation {relation!r} does not start with /r/")
    if not start or not end:
        raise ParseError(lineno, "empty endpoint")
    try:
        info = json.loads(meta)
    except json.JSONDecodeError as exc:
        raise ParseError(lineno, f"unparseable metadata: {exc.msg}") from None
    if not isinstance(info, dict):
        raise ParseError(lineno, "metadata is not a JSON object")
    if not (start.startswith("/c/en/") and end.startswith("/c/en/")):
        return None
    weight = info.get("weight", 1.0)
    if not isinstance(weight, (int, float)) or isinstance(weight, bool) or weight < 0:
        raise ParseError(lineno, f"bad weight {weight!r}")
    return RawAssertion(uri, relation, start, end, float(weight))


def iter_assertions(lines: Iterable[str], strict: bool = False) -> Iterator[RawAssertion]:
    """Yield parsed English assertions, logging (or raising, if strict) bad lines."""
    for lineno, line in enumerate(lines, start=1):
        try:
            rec = parse_assertion_line(line, lineno)
        except ParseError as exc:
            if strict:
                raise
            logger.warning("skipping %s", exc)
            continue
        if rec is not None:
            yield rec


@dataclass
class MergeTable:
    """Maps raw relation names to one of the merged relation ids or DROP.

    A ``*`` in front of the merged name means the edge direction is reversed.
    """

    names: list[str]
    mapping: dict[str, tuple[int, bool]] = field(default_factory=dict)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "MergeTable":
        raw_rows = []
        for lineno, line in enumerate(lines, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                raw, merged = line.split("\t")
            except ValueError:
                raise ParseError(lineno, "merge table rows are 'raw<TAB>merged'") from None
            raw_rows.append((raw.strip().lower(), merged.strip().lower()))
        names: list[str] = []
        for _, merged in raw_rows:
            base = merged.lstrip("*")
            if merged != "drop" and base not in names:
                names.append(base)
        table = cls(names=names)
        for raw, merged in raw_rows:
            if merged == "drop":
                table.mapping[raw] = (DROP, False)
            else:
                table.mapping[raw] = (names.index(merged.lstrip("*")), merged.startswith("*"))
        return table

    @classmethod
    def load(cls, path: str | Path) -> "MergeTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    @classmethod
    def default(cls) -> "MergeTable":
        text = resources.files("fusionqa").joinpath("data/merge_table.tsv").read_text("utf-8")
        return cls.from_lines(text.splitlines())

    def lookup(self, raw: str) -> tuple[int, bool]:
        """Return ``(merged id | DROP, reversed)`` for a raw or merged name."""
        key = raw.lower()
        if key.startswith("/r/"):
            key = key[3:]
        if key.startswith("dbpedia/"):
            key = "dbpedia"
        if key in self.mapping:
            return self.mapping[key]
        if key in self.names:
            return self.names.index(key), False
        return DROP, False


def merge_relation(raw: str, table: MergeTable) -> int:
    return table.lookup(raw)[0]


@dataclass
class GraphStats:
    node_count: int
    edge_count: int
    relation_type_count: int
    histogram: dict[str, int]

    def report(self) -> str:
        lines = [
            f"nodes\t{self.node_count}",
            f"edges\t{self.edge_count}",
            f"relation_types\t{self.relation_type_count}",
        ]
        for name, count in sorted(self.histogram.items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"  {name}\t{count}")
        return "\n".join(lines)


class KnowledgeGraph:
    """Directed multigraph over concepts with merged relations and edge weights.

    Edges are stored sorted by (src, dst, rel); CSR out- and in-indices are
    derived from them. Instances are treated as read-only.
    """

    def __init__(
        self,
        concepts: list[str],
        src: np.ndarray,
        dst: np.ndarray,
        rel: np.ndarray,
        weight: np.ndarray,
        relation_names: list[str] | None = None,
    ):
        self.concepts = list(concepts)
        self.concept_index = {c: i for i, c in enumerate(self.concepts)}
        self.relation_names = list(relation_names or DEFAULT_MERGED_NAMES)
        order = np.lexsort((rel, dst, src))
        self.src = np.ascontiguousarray(src[order], dtype=np.int32)
        self.dst = np.ascontiguousarray(dst[order], dtype=np.int32)
        self.rel = np.ascontiguousarray(rel[order], dtype=np.int8)
        self.weight = np.ascontiguousarray(weight[order], dtype=np.float64)
        for arr in (self.src, self.dst, self.rel, self.weight):
            arr.setflags(write=False)
        self._check()
        n = self.node_count
        self.out_ptr = _indptr(self.src, n)
        # in-index: permutation of edges sorted by (dst, src, rel)
        self.in_order = np.lexsort((self.rel, self.src, self.dst)).astype(np.int64)
        self.in_ptr = _indptr(self.dst[self.in_order], n)
        self._undirected = None

    def _check(self) -> None:
        n = self.node_count
        if self.src.size and (self.src.max() >= n or self.dst.max() >= n):
            raise ValueError("edge endpoint out of range")
        if self.rel.size and (self.rel.min() < 0 or self.rel.max() >= N_MERGED):
            raise ValueError("relation id out of range")

    @property
    def node_count(self) -> int:
        return len(self.concepts)

    @property
    def edge_count(self) -> int:
        return int(self.src.size)

    def neighbors(self, node: int, direction: str = "out") -> list[tuple[int, int, float]]:
        """(neighbor, relation, weight) entries, one per incident edge.

        Ordered by neighbor id then relation id; with ``both``, an outgoing
        entry sorts before an incoming one with the same key.
        """
        if not 0 <= node < self.node_count:
            raise IndexError(f"node id {node} out of range [0, {self.node_count})")
        if direction not in ("out", "in", "both"):
            raise ValueError(f"direction must be out|in|both, got {direction!r}")
        entries = []
        if direction in ("out", "both"):
            lo, hi = self.out_ptr[node], self.out_ptr[node + 1]
            entries += [
                (int(self.dst[e]), int(self.rel[e]), float(self.weight[e]), 0)
                for e in range(lo, hi)
            ]
        if direction in ("in", "both"):
            lo, hi = self.in_ptr[node], self.in_ptr[node + 1]
            entries += [
                (int(self.src[e]), int(self.rel[e]), float(self.weight[e]), 1)
                for e in self.in_order[lo:hi]
            ]
        entries.sort(key=lambda t: (t[0], t[1], t[3]))
        return [t[:3] for t in entries]

    def undirected_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) of the symmetrized adjacency, built lazily."""
        if self._undirected is None:
            n = self.node_count
            a = np.concatenate([self.src, self.dst]).astype(np.int64)
            b = np.concatenate([self.dst, self.src]).astype(np.int64)
            order = np.lexsort((b, a))
            a, b = a[order], b[order]
            keep = np.ones(a.size, dtype=bool)
            keep[1:] = (a[1:] != a[:-1]) | (b[1:] != b[:-1])
            a, b = a[keep], b[keep]
            self._undirected = (_indptr(a, n), b)
        return self._undirected

    def stats(self) -> GraphStats:
        counts = np.bincount(self.rel.astype(np.int64), minlength=len(self.relation_names))
        hist = {self.relation_names[i]: int(c) for i, c in enumerate(counts) if c}
        return GraphStats(self.node_count, self.edge_count, len(hist), hist)

    def structurally_equal(self, other: "KnowledgeGraph") -> bool:
        return (
            self.concepts == other.concepts
            and self.relation_names == other.relation_names
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.rel, other.rel)
            and self.weight.tobytes() == other.weight.tobytes()
        )


def _indptr(sorted_keys: np.ndarray, n: int) -> np.ndarray:
    counts = np.bincount(sorted_keys.astype(np.int64), minlength=n) if n else np.zeros(0, np.int64)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr


def build_graph(
    assertions: Iterable[RawAssertion],
    table: MergeTable,
    max_edges: int | None = None,
) -> KnowledgeGraph:
    """Build a graph from assertions. Node ids follow first-seen order.

    Duplicate (src, dst, rel) triples keep the maximum weight. Self loops and
    dropped relations are discarded.
    """
    index: dict[str, int] = {}
    concepts: list[str] = []
    edges: dict[tuple[int, int, int], float] = {}

    def node_id(uri: str) -> int:
        name = concept_name(uri)
        nid = index.get(name)
        if nid is None:
            nid = index[name] = len(concepts)
            concepts.append(name)
        return nid

    processed = 0
    for a in assertions:
        processed += 1
        rel, reverse = table.lookup(a.relation)
        if rel == DROP:
            continue
        if concept_name(a.start) == concept_name(a.end):
            continue
        s, d = node_id(a.start), node_id(a.end)
        if reverse:
            s, d = d, s
        key = (s, d, rel)
        prev = edges.get(key)
        if prev is None:
            if max_edges is not None and len(edges) >= max_edges:
                raise MemoryBudgetExceeded(processed, max_edges)
            edges[key] = a.weight
        elif a.weight > prev:
            edges[key] = a.weight

    if edges:
        arr = np.array(list(edges.keys()), dtype=np.int64)
        weight = np.fromiter(edges.values(), dtype=np.float64, count=len(edges))
    else:
        arr = np.zeros((0, 3), dtype=np.int64)
        weight = np.zeros(0, dtype=np.float64)
    return KnowledgeGraph(concepts, arr[:, 0], arr[:, 1], arr[:, 2], weight, table.names)


# Binary layout (little endian):
#   magic[8] | u32 version | u32 n_rel | u64 n_nodes | u64 n_edges | u64 vocab_bytes
#   relation names ("\n"-joined utf-8, u32 length prefix)
#   vocab ("\n"-joined utf-8) | src i32[n] | dst i32[n] | rel i8[n] | weight f64[n]
_HEADER = struct.Struct("<8sIIQQQ")


def save_graph(g: KnowledgeGraph, path: str | Path) -> None:
    vocab = "\n".join(g.concepts).encode("utf-8")
    rels = "\n".join(g.relation_names).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(g.relation_names),
                              g.node_count, g.edge_count, len(vocab)))
        fh.write(struct.pack("<I", len(rels)))
        fh.write(rels)
        fh.write(vocab)
        fh.write(g.src.astype("<i4").tobytes())
        fh.write(g.dst.astype("<i4").tobytes())
        fh.write(g.rel.astype("i1").tobytes())
        fh.write(g.weight.astype("<f8").tobytes())
    tmp.replace(path)


def load_graph(path: str | Path) -> KnowledgeGraph:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise GraphFormatError(f"{path}: truncated header")
    magic, version, _n_rel, n_nodes, n_edges, vocab_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise GraphFormatError(f"{path}: bad magic bytes, not a graph file (version unknown)")
    if version != FORMAT_VERSION:
        raise GraphFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = _HEADER.size
    try:
        (rel_len,) = struct.unpack_from("<I", data, pos)
    except struct.error:
        raise GraphFormatError(f"{path}: truncated file") from None
    pos += 4
    expected = pos + rel_len + vocab_len + n_edges * (4 + 4 + 1 + 8)
    if len(data) != expected:
        raise GraphFormatError(f"{path}: truncated file ({len(data)} of {expected} bytes)")
    rel_names = data[pos:pos + rel_len].decode("utf-8").split("\n")
    pos += rel_len
    vocab = data[pos:pos + vocab_len].decode("utf-8")
    pos += vocab_len
    concepts = vocab.split("\n") if n_nodes else []
    if len(concepts) != n_nodes:
        raise GraphFormatError(f"{path}: vocabulary holds {len(concepts)} names, header says {n_nodes}")

    def take(dtype: str, width: int) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=n_edges, offset=pos)
        pos += width * n_edges
        return arr

    src, dst = take("<i4", 4), take("<i4", 4)
    rel, weight = take("i1", 1), take("<f8", 8)
    return KnowledgeGraph(concepts, src, dst, rel, weight, rel_names)
