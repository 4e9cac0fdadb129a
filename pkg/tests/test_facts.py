import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionqa.facts import FactStore, FusionConfig, facts_for_record, fuse_context, load_facts, retrieve_facts
from fusionqa.grounding import DataError, default_stopwords, normalize_text

FACTS = [
    "the sun is a source of light",
    "plants need light to grow",
    "metal conducts heat",
    "a magnet attracts iron",
    "light travels faster than sound",
]


def oracle_rank(stem, facts):
    stop = default_stopwords()
    q = {t for t in normalize_text(stem) if t not in stop}
    scored = []
    for i, f in enumerate(facts):
        toks = normalize_text(f)
        content = {t for t in toks if t not in stop}
        scored.append((-(len(q & content) / math.sqrt(len(toks))), i))
    return [facts[i] for _, i in sorted(scored)]


# --------------------------------------------------------------- load_facts

def test_load_one_fact(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text('"metal conducts heat"\n')
    store = load_facts(p)
    assert len(store) == 1 and store[0] == "metal conducts heat"


def test_blank_middle_line_skipped(tmp_path):
    p = tmp_path / "f.txt"
    lines = ["a fact", "", "'another fact'", "   ", "third fact"]
    p.write_text("\n".join(lines) + "\n")
    store = load_facts(p)
    blanks = sum(1 for l in lines if not l.strip())
    assert len(store) == len(lines) - blanks
    assert store.facts == ["a fact", "another fact", "third fact"]


def test_empty_file_is_data_error(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("\n\n")
    with pytest.raises(DataError):
        load_facts(p)
    with pytest.raises(DataError):
        FactStore([])


# ----------------------------------------------------------- retrieve_facts

def test_zero_overlap_returns_store_order():
    store = FactStore(FACTS)
    assert retrieve_facts("zebra quagga", store, 3) == FACTS[:3]


def test_verbatim_fact_ranks_first():
    store = FactStore(FACTS)
    assert retrieve_facts("a magnet attracts iron", store, 1) == ["a magnet attracts iron"]


def test_two_word_stem_matches_brute_force():
    store = FactStore(FACTS)
    stem = "light heat"
    assert retrieve_facts(stem, store, 5) == oracle_rank(stem, FACTS)
    # hand values: overlap 1 for facts 0,1,2,4 with lengths 7,5,3,5
    assert retrieve_facts(stem, store, 2) == ["metal conducts heat", "plants need light to grow"]


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        retrieve_facts("x", FactStore(FACTS), 0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from(["sun", "light", "heat", "metal", "iron", "grow", "the", "sound"]), max_size=6),
       st.integers(1, 5))
def test_retrieval_is_prefix_of_total_order(words, n):
    stem = " ".join(words)
    store = FactStore(FACTS)
    full = retrieve_facts(stem, store, len(FACTS))
    assert sorted(full) == sorted(FACTS)
    assert retrieve_facts(stem, store, n) == full[:n]
    assert full == oracle_rank(stem, FACTS)


# ------------------------------------------------------------- fuse_context

def test_no_facts_is_stem_and_choice():
    assert fuse_context("Why?", "because", []) == "Why? / because"


def test_layout_with_facts():
    cfg = FusionConfig(enabled=True)
    assert fuse_context("Why?", "because", ["f one", "f two"], cfg) == "f one / f two / Why? / because"


def test_long_fact_truncated_from_front_to_exact_cap():
    fact = " ".join(f"w{i}" for i in range(600))
    stem, choice = "Which metal conducts heat best?", "copper"
    out = fuse_context(stem, choice, [fact], FusionConfig(enabled=True))
    toks = out.split()
    assert len(toks) == 512
    assert out.endswith(" / " + stem + " / " + choice)
    n_core = len((stem + " / " + choice).split())
    kept = toks[: 512 - n_core - 1]
    assert kept == fact.split()[-len(kept):]
    assert kept[-1] == "w599"


def test_core_over_cap_is_data_error():
    with pytest.raises(DataError):
        fuse_context("a b c d", "e f", [], FusionConfig(token_cap=5))


def test_typical_openbookqa_length_is_small():
    stem = "A magnet will stick to"
    out = fuse_context(stem, "a belt buckle", ["magnets attract metal"], FusionConfig(enabled=True))
    assert len(out.split()) <= 101


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(token_cap=0)
    with pytest.raises(ValueError):
        FusionConfig(facts_per_question=0)


text_piece = st.text(alphabet=st.sampled_from("abc xyz/\t"), max_size=40)


@settings(max_examples=300, deadline=None)
@given(text_piece, text_piece, st.lists(text_piece, max_size=4), st.integers(1, 60))
def test_cap_and_core_survival(stem, choice, facts, cap):
    cfg = FusionConfig(enabled=True, token_cap=cap)
    core = stem + " / " + choice
    if len(core.split()) > cap:
        with pytest.raises(DataError):
            fuse_context(stem, choice, facts, cfg)
        return
    out = fuse_context(stem, choice, facts, cfg)
    assert len(out.split()) <= cap
    assert out.endswith(core)


def test_facts_for_record_prefers_gold_then_retrieves():
    rec = {"question": {"stem": "what conducts heat"}, "fact1": "gold fact"}
    store = FactStore(FACTS)
    assert facts_for_record(rec, store, FusionConfig(enabled=False)) == []
    assert facts_for_record(rec, store, FusionConfig(enabled=True)) == ["gold fact"]
    assert facts_for_record(rec, store, FusionConfig(enabled=True, prefer_gold=False)) == ["metal conducts heat"]
    assert facts_for_record({"question": {"stem": "x"}}, None, FusionConfig(enabled=True)) == []
