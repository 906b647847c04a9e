import numpy as np
import pytest

from softquery.confidence import ClosedWorldBackend, DenseBackend
from softquery.errors import BudgetExceededError, NoCycleError, QueryValidationError
from softquery.inference import (InferenceConfig, annotate, answer_conjunctive, answer_query, enumerate_cycle,
                                 find_leaf, rank_answers, remove_constant_nodes, remove_leaf_node,
                                 remove_self_loops)
from softquery.oracle import brute_force_annotated, brute_force_utility
from softquery.query import SoftQuery, bind, parse_query
from softquery.semiring import ZERO
from softquery.synthetic import random_cycle_query, random_kg, random_tree_query

from conftest import dyadic_backend, make_kg, numeric

NEG = -np.inf


def test_one_projection_is_a_row(rng):
    be = dyadic_backend(rng, 6, 2)
    u = answer_query(numeric("(2, 1, y, 0, 1)", 6), be)
    expected = np.where(be.scores[1, 2] >= 0, be.scores[1, 2], NEG)
    assert np.array_equal(u, expected)


def test_constant_removal_leaves_only_y(rng):
    be = dyadic_backend(rng, 5, 2)
    conj = numeric("(1, 0, y, 0, 1) & (3, 1, y, 0, 1)", 5).disjuncts[0]
    g = remove_constant_nodes(annotate(conj, 5), be)
    assert list(g.states) == ["y"] and g.atoms == []
    assert np.array_equal(g.states["y"], be.scores[0, 1] + be.scores[1, 3])


def test_grounded_atom_goes_to_scalar(rng):
    be = dyadic_backend(rng, 5, 2)
    conj = numeric("(1, 0, y, 0, 1) & (2, 1, 4, 0, 2)", 5).disjuncts[0]
    g = remove_constant_nodes(annotate(conj, 5), be)
    assert g.scalar == 2 * be.scores[1, 2, 4]
    assert np.array_equal(answer_conjunctive(conj, be), be.scores[0, 1] + g.scalar)


def test_self_loop_rules():
    n = 4
    zero_diag = DenseBackend(np.zeros((1, n, n)))
    g = annotate(numeric("EXISTS x1 . (x1, 0, x1, 0, 1) & (x1, 0, y, 0, 1)", n, 1).disjuncts[0], n)
    assert np.array_equal(remove_self_loops(g, zero_diag).states["x1"], np.zeros(n))
    killing = DenseBackend(np.full((1, n, n), 0.3))
    g = annotate(numeric("(y, 0, y, 0.5, 1)", n, 1).disjuncts[0], n)
    assert np.all(remove_self_loops(g, killing).states["y"] == ZERO)


def test_two_projection_leaf_join(rng):
    be = dyadic_backend(rng, 5, 2)
    conj = numeric("EXISTS x1 . (0, 0, x1, 0, 1) & (x1, 1, y, 0, 1)", 5).disjuncts[0]
    g = remove_constant_nodes(annotate(conj, 5), be)
    assert find_leaf(g) == "x1"
    g = remove_leaf_node(g, be)
    expected = (be.scores[0, 0][:, None] + be.scores[1]).max(axis=0)
    assert np.array_equal(g.states["y"], expected)


def test_existential_leaf_with_zero_state(rng):
    be = dyadic_backend(rng, 5, 2)
    u = answer_query(numeric("EXISTS x1 . (2, 0, y, 0, 1) & (x1, 1, y, 0, 1)", 5), be)
    assert np.array_equal(u, be.scores[0, 2] + be.scores[1].max(axis=0))


@pytest.mark.parametrize("text", [
    "(0, 0, y, 0, 1) & (0, 1, y, 0, 1)",
    "EXISTS x1 . (x1, 0, y, 0, 1) & (x1, 1, y, 0.25, 2) & (3, 0, x1, 0, 1)",
    "EXISTS x1 . (x1, 0, y, 0, 1) & !(y, 1, x1, 0, 1)",
])
def test_multi_edges_match_oracle(rng, text):
    be = dyadic_backend(rng, 5, 2)
    q = numeric(text, 5)
    assert np.array_equal(answer_query(q, be), brute_force_utility(q, be))


def test_intro_example_by_hand():
    kg = make_kg([("ann", "Has", "Lead", 0.8), ("ann", "Has", "ML", 0.95), ("bob", "Has", "Lead", 0.6),
                  ("bob", "Has", "ML", 1.0)])
    be = ClosedWorldBackend(kg, "train")
    q = bind(parse_query("(y, Has, Lead, 0.7, 3.0) & (y, Has, ML, 0.9, 1.0)"), kg)
    u = answer_query(q, be)
    i = kg.entity_index
    assert u[i["ann"]] == pytest.approx(3 * 0.8 + 0.95)
    assert u[i["bob"]] == ZERO  # 0.6 < 0.7
    assert u[i["Lead"]] == ZERO and u[i["ML"]] == ZERO


def test_all_atoms_killed(rng):
    be = DenseBackend(np.full((2, 4, 4), 0.4))
    u = answer_query(numeric("EXISTS x1 . (0, 0, x1, 0.5, 1) & (x1, 1, y, 0.9, 1)", 4), be)
    assert np.all(u == ZERO)


def test_union_and_idempotence(rng):
    be = dyadic_backend(rng, 6, 2)
    q = numeric("(0, 0, y, 0, 1) | (1, 1, y, 0, 1)", 6)
    assert np.array_equal(answer_query(q, be), np.maximum(be.scores[0, 0], be.scores[1, 1]))
    single = numeric("EXISTS x1 . (0, 0, x1, 0, 1) & (x1, 1, y, 0, 1)", 6)
    doubled = SoftQuery(single.disjuncts * 2)
    assert np.array_equal(answer_query(doubled, be), answer_query(single, be))
    assert np.array_equal(answer_query(single, be), answer_conjunctive(single.disjuncts[0], be))


def test_triangle_matches_oracle(rng):
    be = dyadic_backend(rng, 4, 3)
    q = numeric("EXISTS x1, x2 . (y, 0, x1, 0, 1) & (x1, 1, x2, 0, 1) & (x2, 2, y, 0, 1)", 4, 3)
    assert np.array_equal(answer_query(q, be), brute_force_utility(q, be))


def test_cycle_guards(rng):
    be = dyadic_backend(rng, 4, 3)
    acyclic = annotate(numeric("EXISTS x1 . (0, 0, x1, 0, 1) & (x1, 1, y, 0, 1)", 4, 3).disjuncts[0], 4)
    with pytest.raises(NoCycleError):
        enumerate_cycle(acyclic, be)
    tri = numeric("EXISTS x1, x2 . (y, 0, x1, 0, 1) & (x1, 1, x2, 0, 1) & (x2, 2, y, 0, 1)", 4, 3)
    with pytest.raises(BudgetExceededError):
        answer_query(tri, be, InferenceConfig(cycle_budget=0))


def test_unbound_query_rejected(rng):
    with pytest.raises(QueryValidationError):
        answer_query(parse_query("(a, r, y, 0, 1)"), dyadic_backend(rng, 3, 1))


def test_rank_answers():
    assert rank_answers([0.9, NEG, 0.6]) == [(0, 0.9), (2, 0.6)]
    assert rank_answers([NEG, NEG]) == []
    assert rank_answers([0.5, 0.5]) == [(0, 0.5), (1, 0.5)]


def test_every_step_preserves_the_oracle_value(rng):
    for _ in range(40):
        kg = random_kg(rng, 7, 3)
        be = ClosedWorldBackend(kg, "train")
        conj = random_tree_query(rng, 7, 3, max_disjuncts=1).disjuncts[0]
        g = annotate(conj, 7)
        target = brute_force_annotated(g, be)
        g = remove_constant_nodes(g, be)
        assert np.array_equal(brute_force_annotated(g, be), target)
        g = remove_self_loops(g, be)
        assert np.array_equal(brute_force_annotated(g, be), target)
        while find_leaf(g) is not None:
            g = remove_leaf_node(g, be)
            assert np.array_equal(brute_force_annotated(g, be), target)


def test_leaf_order_does_not_matter(rng):
    be = dyadic_backend(rng, 6, 2)
    conj = numeric("EXISTS x1, x2 . (0, 0, x1, 0, 1) & (x1, 1, y, 0, 1) & (x2, 0, y, 0, 2) & (4, 1, x2, 0, 1)",
                   6).disjuncts[0]
    g = remove_constant_nodes(annotate(conj, 6), be)
    a = remove_leaf_node(remove_leaf_node(g, be, leaf="x1"), be, leaf="x2")
    b = remove_leaf_node(remove_leaf_node(g, be, leaf="x2"), be, leaf="x1")
    assert np.array_equal(a.states["y"], b.states["y"])


def test_random_trees_and_cycles_match_oracle(rng):
    for _ in range(60):
        kg = random_kg(rng, 8, 3)
        be = ClosedWorldBackend(kg, "train")
        q = random_tree_query(rng, 8, 3)
        assert np.array_equal(answer_query(q, be), brute_force_utility(q, be))
        c = random_cycle_query(rng, 8, 3)
        assert np.array_equal(answer_query(c, be), brute_force_utility(c, be))


def test_sparse_kernel_agrees_with_dense(rng):
    for _ in range(30):
        kg = random_kg(rng, 10, 3)
        be = ClosedWorldBackend(kg, "train")
        q = random_tree_query(rng, 10, 3)
        dense = answer_query(q, be)
        sparse = answer_query(q, be, InferenceConfig(dense_cutoff=0))
        assert np.array_equal(dense, sparse)


def test_pruning_never_increases_utility(rng):
    for _ in range(30):
        kg = random_kg(rng, 10, 3, dyadic=False)
        be = ClosedWorldBackend(kg, "train")
        q = random_tree_query(rng, 10, 3, dyadic=False)
        exact = answer_query(q, be)
        pruned = answer_query(q, be, InferenceConfig(delta2=0.05))
        assert np.all(pruned <= exact)


def test_trace_records_steps(rng):
    be = dyadic_backend(rng, 5, 2)
    trace = []
    answer_query(numeric("EXISTS x1 . (0, 0, x1, 0, 1) & (x1, 1, y, 0, 1) & (x1, 0, x1, 0, 1)", 5), be,
                 trace=trace)
    assert [e["step"] for e in trace] == ["constant", "self-loop", "leaf"]
    assert trace[-1]["node"] == "x1" and trace[-1]["into"] == "y"
