import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kendalltau, spearmanr

from softquery.confidence import ClosedWorldBackend
from softquery.dataset import DatasetRecord
from softquery.errors import SoftQueryError
from softquery.metrics import (EvalPair, MetricUndefined, average_precision, error_accumulation_probe,
                               evaluate_run, kendall_tau, kendall_tau_b, ndcg, precision_at_k, spearman,
                               spearman_rho, value_error, write_table_csv)
from softquery.query import SoftAtom, SoftQuery
from softquery.synthetic import random_kg, random_tree_query

NEG = -math.inf


def test_tau_hand_cases():
    assert kendall_tau_b([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=0)
    assert kendall_tau_b([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert kendall_tau_b([1, 2, 3], [1, 2, 3]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert math.isnan(kendall_tau_b([1, 1], [1, 2]))


def test_zero_utilities_tie():
    assert kendall_tau_b([1, 2, 3], [NEG, NEG, 1.0]) == pytest.approx(kendalltau([1, 2, 3], [0, 0, 1])[0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=3, max_size=12))
def test_correlations_agree_with_scipy(pairs):
    x, y = map(np.array, zip(*pairs))
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    assert kendall_tau_b(x, y) == pytest.approx(kendalltau(x, y)[0], abs=1e-12)
    assert spearman(x, y) == pytest.approx(spearmanr(x, y)[0], abs=1e-12)


def test_precision_and_average_precision():
    pair = EvalPair({"e1": 1.0}, {"e0": 0.9, "e1": 0.5})
    assert precision_at_k(pair, 1) == 0.0
    assert precision_at_k(pair, 2) == 0.5
    assert average_precision(pair) == 0.5
    perfect = EvalPair({"a": 3.0, "b": 2.0, "c": 1.0}, {"a": 3.0, "b": 2.0, "c": 1.0})
    assert average_precision(perfect) == 1.0


def test_unpredicted_answers_go_to_the_tail():
    pair = EvalPair({"a": 1.0}, {"x": 0.9, "z": 0.4})
    assert pair.ranking() == ["x", "z", "a"]
    assert average_precision(pair) == pytest.approx(1 / 3)


def test_ndcg_cases():
    assert ndcg(EvalPair({"a": 2.0, "b": 1.0}, {"a": 2.0, "b": 1.0})) == 1.0
    swapped = ndcg(EvalPair({"a": 2.0, "b": 1.0}, {"a": 1.0, "b": 2.0}))
    dcg = 0.5 / math.log2(2) + 1.0 / math.log2(3)
    z = 1.0 / math.log2(2) + 0.5 / math.log2(3)
    assert swapped == pytest.approx(dcg / z, abs=1e-15)
    assert ndcg(EvalPair({"a": 1.0}, {"a": 0.2})) == 1.0


def test_rank_correlation_needs_two_answers():
    with pytest.raises(MetricUndefined):
        kendall_tau(EvalPair({"a": 1.0}, {"a": 1.0}))
    pair = EvalPair({"a": 1.0, "b": 2.0, "c": 3.0}, {"a": 1.0, "c": 2.0, "b": 3.0})
    assert kendall_tau(pair) == pytest.approx(1 / 3)
    assert spearman_rho(pair) == pytest.approx(0.5)


def test_answers_exclude_non_positive():
    assert EvalPair({"a": 0.0, "b": NEG, "c": 0.1}, {}).answers == {"c"}


def record(rid, qtype, truth):
    q = SoftQuery.of(SoftAtom("c", "r", "y", 0.0, 1.0))
    return DatasetRecord(rid, qtype, q, {}, truth, [0])


def test_evaluate_perfect_and_averaging(tmp_path):
    recs = [record("q1", "1P", {"a": 2.0, "b": 1.0}), record("q2", "2P", {"a": 1.0, "b": 3.0, "c": 2.0}),
            record("q3", "2P", {"a": 1.0})]
    preds = {"q1": {"a": 2.0, "b": 1.0}, "q2": {"a": 1.0, "b": 3.0, "c": 2.0}, "q3": {"a": 0.5}}
    report = evaluate_run(recs, preds)
    assert set(report["types"]) == {"1P", "2P"}
    for k in ("MAP", "NDCG", "rho", "tau"):
        assert report["average"][k] == 1.0
    assert report["types"]["2P"]["skipped"]["tau"] == 1
    path = tmp_path / "t.csv"
    write_table_csv(report, path, ["1P", "2P", "3P"])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["Metric", "1P", "2P", "3P", "AVG"]
    assert rows[1] == ["MAP", "100.0", "100.0", "", "100.0"]


def test_average_is_unweighted_over_types():
    recs = [record("q1", "1P", {"a": 1.0}), record("q2", "2P", {"a": 1.0}), record("q3", "2P", {"a": 1.0})]
    preds = {"q1": {"b": 1.0, "a": 0.5}, "q2": {"a": 1.0}, "q3": {"a": 1.0}}
    report = evaluate_run(recs, preds)
    assert report["average"]["MAP"] == pytest.approx((0.5 + 1.0) / 2)


def test_evaluate_errors():
    recs = [record("q1", "1P", {"a": 1.0})]
    with pytest.raises(SoftQueryError):
        evaluate_run(recs, {})
    with pytest.raises(SoftQueryError):
        evaluate_run(recs, {"zz": {"a": 1.0}})


def test_value_error_conventions():
    assert list(value_error([NEG, NEG, 1.0], [NEG, 0.5, 0.25])) == [0.0, math.inf, 0.75]


def test_probe_zero_noise(rng):
    kg = random_kg(rng, 6, 2)
    be = ClosedWorldBackend(kg, "train")
    q = random_tree_query(rng, 6, 2)
    (res,) = error_accumulation_probe(q, be, 0.0)
    assert res.max_error == 0.0 and res.bound == 0.0 and not res.violated


def test_probe_single_atom_is_tight(rng):
    kg = random_kg(rng, 6, 2, dyadic=False)
    be = ClosedWorldBackend(kg, "train")
    q = SoftQuery.of(SoftAtom(0, 1, "y", 0.0, 1.5))
    for res in error_accumulation_probe(q, be, 0.2, trials=5, seed=1):
        assert res.max_error <= res.bound
        assert res.max_error == pytest.approx(res.bound, abs=1e-12)
        assert not res.violated


def test_probe_random_trees(rng):
    kg = random_kg(rng, 7, 3, dyadic=False)
    be = ClosedWorldBackend(kg, "train")
    for i in range(20):
        q = random_tree_query(rng, 7, 3, dyadic=False)
        assert not any(r.violated for r in error_accumulation_probe(q, be, 0.2, trials=3, seed=i))
