import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clinseq.corpus import EntitySpan, PredictionSet
from clinseq.evaluation import significance_code, significance_test, strict_micro_f1

S = EntitySpan


def ps(docs, name="m"):
    return PredictionSet(name, {k: tuple(v) for k, v in docs.items()})


GOLD3 = ps({"a": [S(0, 3, "X"), S(5, 8, "Y"), S(10, 12, "X")]}, "gold")
PRED2 = ps({"a": [S(0, 3, "X"), S(5, 9, "Y")]})


def test_identical_predictions():
    r = strict_micro_f1(GOLD3, GOLD3)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_empty_prediction_convention():
    r = strict_micro_f1(GOLD3, ps({"a": []}))
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)


def test_hand_built_fixture():
    r = strict_micro_f1(GOLD3, PRED2)
    # tp=1 fp=1 fn=2: P=1/2, R=1/3, F1=2PR/(P+R)=0.4
    assert r.precision == 0.5
    assert r.recall == 1 / 3
    assert r.f1 == 0.4
    assert r.per_type["Y"].fp == 1 and r.per_type["X"].fn == 1
    assert r.tp == sum(t.tp for t in r.per_type.values())


def test_label_must_match():
    r = strict_micro_f1(ps({"a": [S(0, 3, "X")]}), ps({"a": [S(0, 3, "Y")]}))
    assert r.tp == 0 and r.fp == 1 and r.fn == 1


def test_mismatched_documents():
    with pytest.raises(ValueError):
        strict_micro_f1(GOLD3, ps({"b": []}))


def test_overlapping_side_is_error():
    with pytest.raises(ValueError):
        ps({"a": [S(0, 3, "X"), S(2, 4, "X")]})


span_lists = st.lists(
    st.tuples(st.integers(0, 10), st.integers(1, 3), st.sampled_from("XY")), max_size=5
).map(lambda xs: sorted({S(4 * a, 4 * a + b, c) for a, b, c in xs}))


def _dedupe(spans):
    out, last = [], -1
    for s in sorted(spans):
        if s.start >= last:
            out.append(s)
            last = s.end
    return out


docs_strategy = st.dictionaries(st.sampled_from(["a", "b", "c"]), span_lists.map(_dedupe), min_size=1)


@settings(max_examples=200, deadline=None)
@given(g=docs_strategy, data=st.data())
def test_swap_gold_and_pred(g, data):
    p = {k: data.draw(span_lists.map(_dedupe)) for k in g}
    r1 = strict_micro_f1(ps(g), ps(p))
    r2 = strict_micro_f1(ps(p), ps(g))
    assert r1.precision == r2.recall and r1.recall == r2.precision and r1.f1 == r2.f1


@settings(max_examples=200, deadline=None)
@given(g=docs_strategy, data=st.data())
def test_adding_shared_span_never_lowers_f1(g, data):
    p = {k: data.draw(span_lists.map(_dedupe)) for k in g}
    base = strict_micro_f1(ps(g), ps(p))
    new = S(1000, 1003, "X")
    k = next(iter(g))
    g2, p2 = dict(g), dict(p)
    g2[k] = list(g[k]) + [new]
    p2[k] = list(p[k]) + [new]
    after = strict_micro_f1(ps(g2), ps(p2))
    assert after.tp == base.tp + 1
    assert after.f1 >= base.f1


def test_document_order_irrelevant():
    g = {"a": [S(0, 1, "X")], "b": [S(2, 3, "Y")]}
    p = {"b": [S(2, 3, "Y")], "a": []}
    assert strict_micro_f1(ps(g), ps(p)).f1 == strict_micro_f1(ps(dict(reversed(g.items()))), ps(p)).f1


@pytest.mark.parametrize("p,code", [(0.001, "***"), (0.0011, "**"), (0.0099, "**"), (0.01, "*"),
                                    (0.0499, "*"), (0.05, "n.s."), (1.0, "n.s.")])
def test_significance_codes(p, code):
    assert significance_code(p) == code


def test_identical_systems_p_is_one():
    r = significance_test(GOLD3, PRED2, PRED2, iterations=1000, seed=1)
    assert r.p_value == 1.0 and r.observed_delta == 0.0


def _three_docs():
    gold = ps({"a": [S(0, 2, "X"), S(4, 6, "X")], "b": [S(0, 2, "Y")], "c": [S(0, 1, "X"), S(3, 5, "Y")]})
    pa = ps({"a": [S(0, 2, "X"), S(4, 6, "X")], "b": [S(0, 2, "Y")], "c": [S(0, 1, "X")]})
    pb = ps({"a": [S(0, 2, "X")], "b": [], "c": [S(0, 1, "X"), S(3, 6, "Y")]})
    return gold, pa, pb


def brute_force_p(gold, pa, pb):
    """Enumerate all 2^D swap patterns, scoring each with the full evaluator."""
    docs = sorted(gold.documents)
    obs = abs(strict_micro_f1(gold, pa).f1 - strict_micro_f1(gold, pb).f1)
    hits = 0
    for pattern in itertools.product((0, 1), repeat=len(docs)):
        a = {d: (pb if s else pa).documents[d] for d, s in zip(docs, pattern)}
        b = {d: (pa if s else pb).documents[d] for d, s in zip(docs, pattern)}
        delta = abs(strict_micro_f1(gold, ps(a)).f1 - strict_micro_f1(gold, ps(b)).f1)
        hits += delta >= obs - 1e-12
    return hits / 2 ** len(docs)


def test_exact_randomization_matches_enumeration():
    gold, pa, pb = _three_docs()
    exact = significance_test(gold, pa, pb, exact=True)
    assert exact.p_value == brute_force_p(gold, pa, pb)
    approx = significance_test(gold, pa, pb, iterations=200000, seed=3)
    # binomial standard error at 2e5 draws is below 1.2e-3
    assert abs(approx.p_value - exact.p_value) < 0.006


def test_significance_deterministic():
    gold, pa, pb = _three_docs()
    assert significance_test(gold, pa, pb, 5000, seed=9) == significance_test(gold, pa, pb, 5000, seed=9)


def _null_system(rng, gold_spans):
    kept = [s for s in gold_spans if rng.random() < 0.7]
    extra = [S(1000 + 10 * i, 1003 + 10 * i, "X") for i in range(int(rng.integers(0, 4)))]
    return kept + extra


def test_null_calibration():
    """Under the null the p-value is roughly uniform (deciles within 0.1)."""
    # varied span counts keep the F1 difference close to continuous, so ties are rare
    rng = np.random.default_rng(0)
    ps_ = []
    for trial in range(200):
        gold, a, b = {}, {}, {}
        for d in range(30):
            g = [S(10 * i, 10 * i + 3, "X") for i in range(int(rng.integers(1, 12)))]
            gold[f"d{d}"] = g
            a[f"d{d}"] = _null_system(rng, g)
            b[f"d{d}"] = _null_system(rng, g)
        ps_.append(significance_test(ps(gold), ps(a), ps(b), iterations=499, seed=trial).p_value)
    ps_ = np.array(ps_)
    for q in np.arange(0.1, 1.0, 0.1):
        assert abs((ps_ <= q).mean() - q) <= 0.1
