import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import edit_cost

from lsca.evaluation import (
    ErrorCounts,
    MerReport,
    ScoringError,
    edit_distance,
    own_language_confidence,
    probe_csv,
    probe_dump,
    probe_svg,
    score_set,
    to_scoring_tokens,
)
from lsca.vocab import LabelSequence, VocabSet

V = VocabSet(["播", "放"], ["DAY@@", "DREAM"])


@pytest.mark.parametrize(
    "text,units",
    [
        ("你好hello world", ["你", "好", "hello", "world"]),
        ("DAY@@ DREAM", ["DAYDREAM"]),
        ("", []),
        ("播 <unk> 放", ["播", "<unk>", "放"]),
    ],
)
def test_scoring_tokens(text, units):
    assert to_scoring_tokens(text) == units


def test_edit_distance_examples():
    assert edit_distance(["你", "好", "hello", "world"], ["你", "hello", "world"]) == (0, 1, 0)
    assert edit_distance(list("abc"), list("abc")) == (0, 0, 0)
    assert edit_distance([], ["a", "b"]) == (0, 0, 2)
    assert edit_distance(["a", "b"], []) == (0, 2, 0)
    # a substitution is preferred to a deletion plus an insertion
    assert edit_distance(["a"], ["b"]) == (1, 0, 0)


def test_one_deletion_over_four_is_25():
    rep = score_set(["你好hello world"], ["你hello world"], ["cs"])
    assert rep.display("cs") == "25.00" and rep.display("overall") == "25.00"
    assert rep.mer() == 25.0
    assert rep.display("man") == "-" and rep.mer("man") is None


def test_perfect_and_errors():
    rep = score_set(["播放", "DREAM"], ["播放", "DREAM"], ["man", "eng"])
    assert all(rep.display(k) == "0.00" for k in ("man", "eng", "overall"))
    with pytest.raises(ScoringError, match="empty"):
        score_set([], [], [])
    with pytest.raises(ScoringError, match="category"):
        score_set(["a"], ["a"], [None])
    with pytest.raises(ScoringError, match="length"):
        score_set(["a"], [], ["man"])


def test_round_half_up():
    # 1/8 = 12.5% exactly; 1/3 -> 33.33; 2/3 -> 66.67; 1/80 -> 1.25 exactly
    assert MerReport({"overall": ErrorCounts(1, 0, 0, 3)}).display() == "33.33"
    assert MerReport({"overall": ErrorCounts(2, 0, 0, 3)}).display() == "66.67"
    assert MerReport({"overall": ErrorCounts(0, 1, 0, 80)}).display() == "1.25"
    assert MerReport({"overall": ErrorCounts(0, 0, 1, 800)}).display() == "0.13"  # 0.125 rounds up


def test_report_serialisation():
    rep = score_set(["你好hello world"], ["你hello world"], ["cs"])
    d = json.loads(rep.to_json())
    assert d["cs"] == {"S": 0, "D": 1, "I": 0, "N": 4, "mer_pct": 25.0}
    assert d["man"]["mer_pct"] is None
    assert "overall" in rep.to_text()


tokens = st.lists(st.sampled_from("abcd"), max_size=7)


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_distance_is_minimal(a, b):
    s, d, i = edit_distance(a, b)
    assert s + d + i == edit_cost(tuple(a), tuple(b))
    assert len(a) - d + i == len(b)


def test_metric_properties_on_random_triples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a, b, c = ([str(x) for x in rng.integers(0, 4, size=int(rng.integers(0, 9)))] for _ in range(3))
        dist = lambda x, y: sum(edit_distance(x, y))
        assert edit_distance(a, a) == (0, 0, 0)
        assert dist(a, b) == dist(b, a)
        assert dist(a, c) <= dist(a, b) + dist(b, c)


def test_score_set_order_invariant():
    refs = ["播放", "DAYDREAM", "播DREAM"]
    hyps = ["播", "DREAM", "放DREAM"]
    cats = ["man", "eng", "cs"]
    base = score_set(refs, hyps, cats).as_dict()
    for perm in itertools.permutations(range(3)):
        assert score_set([refs[k] for k in perm], [hyps[k] for k in perm], [cats[k] for k in perm]).as_dict() == base


def test_overall_is_sum_of_categories():
    rep = score_set(["播放", "DAYDREAM", "播DREAM"], ["播", "DREAM 放", "放DREAM"], ["man", "eng", "cs"])
    o = rep.counts["overall"]
    for f in ("S", "D", "I", "N"):
        assert getattr(o, f) == sum(getattr(rep.counts[k], f) for k in ("man", "eng", "cs"))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([2, 3, 4, 5]), max_size=6))
def test_scoring_units_stable_under_rendering(ids):
    text = V.detokenize(LabelSequence("mix", tuple(ids)))
    units = to_scoring_tokens(text)
    assert to_scoring_tokens(" ".join(units)) == units


def onehot_grid(rows, n):
    g = np.full((len(rows), n), 0.05)
    for t, k in enumerate(rows):
        g[t, k] = 1.0 - 0.05 * (n - 1)
    return g


def test_probe_rules():
    p_man = onehot_grid([0, 1, 0, 2], V.man_size)
    p_eng = onehot_grid([0, 3, 2, 1], V.eng_size)
    recs = probe_dump(p_man, p_eng, V)
    assert [r.frame for r in recs] == [1, 2, 3]
    assert (recs[0].man_token, recs[0].eng_token) == ("*", "DREAM")
    assert (recs[1].man_token, recs[1].eng_token) == ("#", "DAY@@")
    assert (recs[2].man_token, recs[2].eng_token) == ("播", "*")
    lines = probe_csv(recs).splitlines()
    assert lines[0] == "frame,man_token,man_prob,eng_token,eng_prob"
    assert lines[1].startswith("1,*,")
    # own-language frames: eng at 1 and 2, man at 3
    assert own_language_confidence(recs) == pytest.approx(p_man[3, 2])
    with pytest.raises(ScoringError):
        probe_dump(p_man, p_eng[:2], V)


def test_probe_svg_skips_unk():
    p_man = onehot_grid([1, 2], V.man_size)
    p_eng = onehot_grid([2, 1], V.eng_size)
    svg = probe_svg(probe_dump(p_man, p_eng, V), "u<1>")
    assert svg.startswith("<svg") and "u&lt;1&gt;" in svg
    assert svg.count("<circle") == 1 and svg.count('width="6"') == 1
