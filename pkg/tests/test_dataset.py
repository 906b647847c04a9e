import numpy as np
import pytest

from softquery.confidence import ClosedWorldBackend
from softquery.dataset import (QUERY_TYPES, TEMPLATES, DatasetConfig, DatasetRecord, RequirementStrategy,
                               assign_requirements, build_dataset, compute_answers, filter_useful,
                               load_records, maps_differ, sample_query_skeleton, write_records)
from softquery.errors import DatasetError
from softquery.inference import answer_query
from softquery.kg import RelationStats, write_kg
from softquery.oracle import brute_force_utility
from softquery.query import SoftAtom, SoftQuery, bind, parse_query
from softquery.synthetic import random_kg

from conftest import make_kg


@pytest.fixture(scope="module")
def kg():
    return random_kg(np.random.default_rng(7), 30, 4, density=0.08)


@pytest.mark.parametrize("qtype", QUERY_TYPES)
def test_skeleton_shape(kg, qtype):
    rng = np.random.default_rng(1)
    q = sample_query_skeleton(kg, qtype, rng)
    template = TEMPLATES[qtype]
    assert len(q.disjuncts) == len(template)
    for conj, edges in zip(q.disjuncts, template):
        assert len(conj.atoms) == len(edges)
        assert [a.negated for a in conj.atoms] == [e[3] for e in edges]
        assert len(conj.existentials) == len({n for e in edges for n in (e[0], e[2]) if n.startswith("x")})
        assert all(a.alpha == 0.0 and a.beta == 1.0 for a in conj.atoms)
    u = answer_query(q, ClosedWorldBackend(kg, "train"))
    assert (u > 0).any()


def test_one_projection_uses_a_fact(kg):
    q = sample_query_skeleton(kg, "1P", np.random.default_rng(3))
    (a,) = q.disjuncts[0].atoms
    assert any(kg.confidence("train", a.head, a.relation, o) > 0 for o in range(kg.num_entities))


def test_unknown_type(kg):
    with pytest.raises(DatasetError):
        sample_query_skeleton(kg, "9Z", np.random.default_rng(0))


def test_requirement_modes():
    q = SoftQuery.of(SoftAtom(0, 0, "y", 0.0, 1.0), SoftAtom(1, 0, "y", 0.0, 1.0))
    stats = {0: RelationStats(0, [0.8, 0.2, 0.6, 0.4])}
    plain = assign_requirements(q, RequirementStrategy("zero", "equal"), stats)
    assert all(a.alpha == 0.0 and a.beta == 1.0 for a in plain.atoms())
    high = assign_requirements(q, RequirementStrategy("high", "equal"), stats)
    assert all(a.alpha == 0.6 for a in high.atoms())
    rand = assign_requirements(q, RequirementStrategy("zero", "random", seed=4), stats)
    assert all(0.0 < a.beta <= 1.0 for a in rand.atoms())
    assert rand == assign_requirements(q, RequirementStrategy("zero", "random", seed=4), stats)
    with pytest.raises(ValueError):
        RequirementStrategy("extreme")


def test_hybrid_per_query_shares_alpha():
    q = SoftQuery.of(*(SoftAtom(i, 0, "y", 0.0, 1.0) for i in range(4)))
    stats = {0: RelationStats(0, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])}
    for seed in range(10):
        out = assign_requirements(q, RequirementStrategy("hybrid", per_query=True, seed=seed), stats)
        assert len({a.alpha for a in out.atoms()}) == 1


def test_compute_answers_cases():
    facts = [("c", "r", "a", 0.5), ("c", "r", "b", 0.9), ("c", "r", "d", 0.4), ("c", "r", "a", 0.8)]
    kg = make_kg(facts[:3], [0, 0, 1])
    be = {s: ClosedWorldBackend(kg, s) for s in ("train", "valid", "test")}
    q = bind(parse_query("(c, r, y, 0, 1)"), kg)
    before, after = compute_answers(q, be["train"], be["valid"])
    assert set(after) > set(before)
    ex_before, ex_after = compute_answers(q, be["train"], be["valid"], exact=True)
    assert (ex_before, ex_after) == (before, after)
    same, same2 = compute_answers(q, be["train"], be["train"])
    assert same == same2 and not maps_differ(same, same2)

    raised = make_kg([facts[0], facts[1], ("c", "r", "a", 0.8)], [0, 0, 2])
    assert raised.confidence("test", raised.entity_index["c"], 0, raised.entity_index["a"]) == 0.8
    rb = {s: ClosedWorldBackend(raised, s) for s in ("train", "test")}
    before, after = compute_answers(bind(parse_query("(c, r, y, 0, 1)"), raised), rb["train"], rb["test"])
    assert before.keys() == after.keys() and before != after


def test_filter_useful():
    q = SoftQuery.of(SoftAtom("c", "r", "y", 0.0, 1.0))
    assert not filter_useful(DatasetRecord("1", "1P", q, {"a": 1.0}, {"a": 1.0}, [0]))
    assert filter_useful(DatasetRecord("1", "1P", q, {"a": 1.0}, {"a": 0.5}, [0]))
    assert not filter_useful(DatasetRecord("1", "1P", q, {"a": 1.0}, {}, [0]))
    many = {str(i): 1.0 for i in range(5)}
    assert not filter_useful(DatasetRecord("1", "1P", q, {}, many, [0]), max_answers=4)
    assert filter_useful(DatasetRecord("1", "1P", q, many, many, [0], split="train"))


def test_load_rechecks(tmp_path):
    q = SoftQuery.of(SoftAtom("c", "r", "y", 0.0, 1.0))
    write_records(tmp_path / "x.jsonl", [DatasetRecord("1", "1P", q, {"a": 1.0}, {"a": 1.0}, [0])])
    with pytest.raises(DatasetError):
        load_records(tmp_path / "x.jsonl")
    assert len(load_records(tmp_path / "x.jsonl", check=False)) == 1


def test_eval_only_type_rejected(tmp_path):
    with pytest.raises(DatasetError):
        build_dataset(DatasetConfig(str(tmp_path), str(tmp_path / "o"), train_types=("3IN",)))


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_build_is_reproducible_and_records_reload(tmp_path, kg):
    write_kg(kg, tmp_path / "kg")
    outs = []
    for name in ("a", "b"):
        cfg = DatasetConfig(str(tmp_path / "kg"), str(tmp_path / name), n_train=5, n_eval=3, seed=11)
        report = build_dataset(cfg)
        outs.append(_files(tmp_path / name))
    assert outs[0] == outs[1]
    total = 0
    for path in (tmp_path / "a").rglob("*.jsonl"):
        for rec in load_records(path):
            total += 1
            assert rec.split == path.parent.name
    assert total == sum(sum(c.values()) for c in report["counts"].values()) > 0


def test_answers_match_oracle_in_records(tmp_path, kg):
    out = tmp_path / "ds"
    build_dataset(DatasetConfig("unused", str(out), train_types=("2P",), eval_types=("IP",), n_train=3,
                                n_eval=3, seed=2), kg=kg)
    be = {s: ClosedWorldBackend(kg, s) for s in ("valid", "test")}
    for rec in load_records(out / "test" / "IP.jsonl"):
        u = brute_force_utility(bind(rec.query, kg), be["test"])
        for name, v in rec.test_answers.items():
            assert u[kg.entity_index[name]] == v
