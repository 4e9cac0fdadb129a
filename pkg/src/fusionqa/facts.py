"""Knowledge-fact storage, lexical retrieval and context fusion under a token cap."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .grounding import DataError, default_stopwords, normalize_text


@dataclass(frozen=True)
class FusionConfig:
    enabled: bool = False
    facts_per_question: int = 1
    token_cap: int = 512
    separator: str = " / "
    prefer_gold: bool = True

    def __post_init__(self):
        if self.token_cap <= 0:
            raise ValueError("token_cap must be positive")
        if self.facts_per_question < 1:
            raise ValueError("facts_per_question must be >= 1")


class FactStore:
    def __init__(self, facts: list[str]):
        if not facts:
            raise DataError("fact store is empty")
        if any(not f.strip() for f in facts):
            raise DataError("empty fact")
        self.facts = list(facts)
        self._tokens = [normalize_text(f) for f in self.facts]
        stop = default_stopwords()
        self._content = [frozenset(t for t in toks if t not in stop) for toks in self._tokens]

    def __len__(self) -> int:
        return len(self.facts)

    def __getitem__(self, i: int) -> str:
        return self.facts[i]

    def token_count(self, i: int) -> int:
        return len(self._tokens[i])

    def scores(self, stem: str) -> list[float]:
        stop = default_stopwords()
        query = {t for t in normalize_text(stem) if t not in stop}
        return [
            len(query & content) / math.sqrt(max(len(toks), 1))
            for content, toks in zip(self._content, self._tokens)
        ]


def _strip_quotes(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        s = s[1:-1].strip()
    return s


def load_facts(path: str | Path) -> FactStore:
    with open(path, encoding="utf-8") as fh:
        facts = [_strip_quotes(line) for line in fh]
    facts = [f for f in facts if f]
    if not facts:
        raise DataError(f"{path}: no facts")
    return FactStore(facts)


def retrieve_facts(stem: str, store: FactStore, n: int = 1) -> list[str]:
    """Top-``n`` facts by overlap / sqrt(fact length); ties keep store order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = store.scores(stem)
    order = sorted(range(len(store)), key=lambda i: (-scores[i], i))
    return [store[i] for i in order[:n]]


def fuse_context(stem: str, choice_text: str, facts: list[str], cfg: FusionConfig = FusionConfig()) -> str:
    """Lay out ``facts / stem / choice``; drop leading fact tokens to fit the cap.

    Token counts are whitespace tokens. The stem and choice are never cut.
    """
    sep = cfg.separator
    core = stem + sep + choice_text
    n_core = len(core.split())
    if n_core > cfg.token_cap:
        raise DataError(f"stem and choice alone take {n_core} tokens, cap is {cfg.token_cap}")
    if not facts:
        return core
    block = sep.join(facts)
    fused = block + sep + core
    if len(fused.split()) <= cfg.token_cap:
        return fused
    budget = cfg.token_cap - n_core - len(sep.split())
    if budget <= 0:
        return core
    kept = block.split()[-budget:]
    return " ".join(kept) + sep + core


def facts_for_record(record: dict, store: FactStore | None, cfg: FusionConfig) -> list[str]:
    """Facts to fuse for one QA record (shared by all four choices)."""
    if not cfg.enabled:
        return []
    gold = record.get("fact1")
    if cfg.prefer_gold and gold:
        return [gold]
    if store is None:
        return []
    return retrieve_facts(record["question"]["stem"], store, cfg.facts_per_question)
