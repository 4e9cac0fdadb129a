"""Surface n-gram concept grounding for OpenBookQA-style records."""
from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping

N_CHOICES = 4


class DataError(ValueError):
    pass


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    text = resources.files("fusionqa").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def normalize_text(text: str) -> list[str]:
    """Lowercase, replace punctuation/symbol characters by spaces, split on whitespace."""
    chars = [
        " " if unicodedata.category(ch)[0] in "PS" else ch
        for ch in text.lower()
    ]
    return "".join(chars).split()


def _fold_variants(gram: str) -> tuple[str, ...]:
    variants = [gram]
    if gram.endswith("es") and len(gram) > 3:
        variants.append(gram[:-2])
    if gram.endswith("s") and len(gram) > 2:
        variants.append(gram[:-1])
    return tuple(variants)


def extract_mentions(
    text: str,
    vocab: Mapping[str, int],
    max_ngram: int = 4,
    stopwords: frozenset[str] | None = None,
    fold_plurals: bool = True,
) -> set[int]:
    """Node ids of every vocabulary concept named by an n-gram of ``text``.

    All n-grams up to ``max_ngram`` are tried, longest first, and overlapping
    matches are all kept. Plural folding adds the de-suffixed form as an extra
    candidate; it never replaces the exact form.
    """
    if max_ngram < 1:
        raise ValueError("max_ngram must be >= 1")
    stop = default_stopwords() if stopwords is None else stopwords
    tokens = normalize_text(text)
    found: set[int] = set()
    for n in range(min(max_ngram, len(tokens)), 0, -1):
        for i in range(len(tokens) - n + 1):
            if n == 1 and tokens[i] in stop:
                continue
            gram = "_".join(tokens[i:i + n])
            candidates = _fold_variants(gram) if fold_plurals else (gram,)
            for cand in candidates:
                nid = vocab.get(cand)
                if nid is not None:
                    found.add(nid)
    return found


@dataclass
class Choice:
    label: str
    text: str


@dataclass
class GroundedExample:
    example_id: str
    stem: str
    choices: list[Choice]
    question_concepts: list[set[int]]
    answer_concepts: list[set[int]]
    label: int | None = None
    facts: list[str | None] = field(default_factory=lambda: [None] * N_CHOICES)

    def __post_init__(self):
        if len(self.choices) != N_CHOICES:
            raise DataError(f"{self.example_id}: expected {N_CHOICES} choices, got {len(self.choices)}")
        if self.label is not None and not 0 <= self.label < N_CHOICES:
            raise DataError(f"{self.example_id}: label {self.label} out of range")

    def to_json(self) -> dict:
        return {
            "id": self.example_id,
            "stem": self.stem,
            "choices": [{"label": c.label, "text": c.text} for c in self.choices],
            "question_concepts": [sorted(s) for s in self.question_concepts],
            "answer_concepts": [sorted(s) for s in self.answer_concepts],
            "label": self.label,
            "facts": self.facts,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundedExample":
        return cls(
            example_id=obj["id"],
            stem=obj["stem"],
            choices=[Choice(c["label"], c["text"]) for c in obj["choices"]],
            question_concepts=[set(s) for s in obj["question_concepts"]],
            answer_concepts=[set(s) for s in obj["answer_concepts"]],
            label=obj.get("label"),
            facts=obj.get("facts") or [None] * N_CHOICES,
        )


def parse_record(record: dict, labeled: bool = True) -> tuple[str, str, list[Choice], int | None]:
    """Validate an OpenBookQA JSON record; returns (id, stem, choices, label index)."""
    try:
        qid = str(record["id"])
        stem = record["question"]["stem"]
        choices = [Choice(str(c["label"]), c["text"]) for c in record["question"]["choices"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed record: missing {exc}") from None
    if len(choices) != N_CHOICES:
        raise DataError(f"{qid}: expected {N_CHOICES} choices, got {len(choices)}")
    key = record.get("answerKey")
    label = None
    if key is None or key == "":
        if labeled:
            raise DataError(f"{qid}: missing answerKey")
    else:
        labels = [c.label for c in choices]
        if key not in labels:
            raise DataError(f"{qid}: answerKey {key!r} not among choice labels {labels}")
        label = labels.index(key)
    return qid, stem, choices, label


def ground_example(
    record: dict,
    vocab: Mapping[str, int],
    facts: list[str] | None = None,
    fusion=None,
    max_ngram: int = 4,
    labeled: bool = True,
) -> GroundedExample:
    """Ground one QA record.

    With ``facts``, each choice's context is fused (see
    :func:`fusionqa.facts.fuse_context`) and the surviving fact text is
    grounded on the question side. A concept found both on the question side
    and in a choice is kept only as an answer concept for that choice.
    """
    from .facts import FusionConfig, fuse_context

    qid, stem, choices, label = parse_record(record, labeled)
    cfg = fusion or FusionConfig(enabled=bool(facts))
    stem_concepts = extract_mentions(stem, vocab, max_ngram)
    q_sets, a_sets, fused_texts = [], [], []
    for choice in choices:
        q = set(stem_concepts)
        fused = None
        if facts:
            fused = fuse_context(stem, choice.text, facts, cfg)
            core = stem + cfg.separator + choice.text
            fact_part = fused[: len(fused) - len(core)]
            q |= extract_mentions(fact_part, vocab, max_ngram)
        a = extract_mentions(choice.text, vocab, max_ngram)
        q_sets.append(q - a)
        a_sets.append(a)
        fused_texts.append(fused)
    return GroundedExample(qid, stem, choices, q_sets, a_sets, label, fused_texts)


def read_jsonl(lines: Iterable[str]) -> Iterable[tuple[int, dict]]:
    for lineno, line in enumerate(lines, start=1):
        if line.strip():
            yield lineno, json.loads(line)
