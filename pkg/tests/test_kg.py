import math

import numpy as np
import pytest

from softquery.errors import KGFormatError
from softquery.kg import RelationStats, load_kg, relation_percentile, write_kg

from conftest import make_kg


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_single_file(tmp_path):
    kg = load_kg(write(tmp_path / "kg.tsv", "a\tr\tb\t0.9\na\tr\tc\t0.6\n"))
    assert kg.num_entities == 3
    assert kg.num_relations == 1
    assert len(kg.facts_in("train")) == 2


def test_empty_file_rejected(tmp_path):
    with pytest.raises(KGFormatError, match="no facts"):
        load_kg(write(tmp_path / "kg.tsv", ""))


def test_confidence_out_of_range(tmp_path):
    with pytest.raises(KGFormatError, match="out of range"):
        load_kg(write(tmp_path / "kg.tsv", "a\tr\tb\t1.3\n"))


def test_malformed_line_reports_line_number(tmp_path):
    with pytest.raises(KGFormatError) as err:
        load_kg(write(tmp_path / "kg.tsv", "a\tr\tb\t0.5\na\tr\tc\n"))
    assert err.value.line == 2


def test_duplicate_within_file(tmp_path):
    with pytest.raises(KGFormatError, match="duplicate"):
        load_kg(write(tmp_path / "kg.tsv", "a\tr\tb\t0.5\na\tr\tb\t0.6\n"))


def test_missing_path():
    with pytest.raises(FileNotFoundError):
        load_kg("/definitely/not/here")


def test_split_directory_and_nesting(tmp_path):
    write(tmp_path / "train.tsv", "a\tr\tb\t0.9\n")
    write(tmp_path / "valid.tsv", "a\tr\tc\t0.4\n")
    write(tmp_path / "test.tsv", "b\tr\tc\t0.2\n")
    kg = load_kg(tmp_path)
    a, b, c = (kg.entity_index[x] for x in "abc")
    r = kg.relation_index["r"]
    assert kg.confidence("train", a, r, b) == 0.9
    assert kg.confidence("train", a, r, c) == 0.0
    assert kg.confidence("valid", a, r, c) == 0.4
    assert kg.confidence("test", b, r, c) == 0.2
    assert kg.confidence("valid", b, r, c) == 0.0
    train, valid, test = (set(kg.view(s)) for s in ("train", "valid", "test"))
    assert train <= valid <= test


def test_identical_repeat_across_splits_is_skipped(tmp_path):
    write(tmp_path / "train.tsv", "a\tr\tb\t0.9\n")
    write(tmp_path / "valid.tsv", "a\tr\tb\t0.9\n")
    kg = load_kg(tmp_path)
    assert len(kg.confidences) == 1


def test_closed_world_lookup(toy_kg):
    i = toy_kg.entity_index
    r1 = toy_kg.relation_index["r1"]
    assert toy_kg.confidence("train", i["a"], r1, i["b"]) == 0.9
    assert toy_kg.confidence("train", i["b"], r1, i["a"]) == 0.0
    # test-only fact is invisible to the train view
    assert toy_kg.confidence("train", i["b"], r1, i["e"]) == 0.0
    assert toy_kg.confidence("test", i["b"], r1, i["e"]) == 0.7


def test_relation_matrix_matches_lookup(toy_kg):
    for split in ("train", "valid", "test"):
        for r in range(toy_kg.num_relations):
            dense = toy_kg.relation_matrix(split, r).to_dense()
            for s in range(toy_kg.num_entities):
                for o in range(toy_kg.num_entities):
                    assert dense[s, o] == toy_kg.confidence(split, s, r, o)


def test_write_then_load_round_trip(toy_kg, tmp_path):
    write_kg(toy_kg, tmp_path)
    kg2 = load_kg(tmp_path)
    for split in ("train", "valid", "test"):
        assert {toy_kg.fact_names(k): v for k, v in toy_kg.view(split).items()} == \
               {kg2.fact_names(k): v for k, v in kg2.view(split).items()}


@pytest.mark.parametrize("q, expected", [(50, 0.4), (75, 0.6), (0, 0.2), (100, 0.8), (25, 0.2)])
def test_percentile_nearest_rank(q, expected):
    assert relation_percentile(RelationStats("r", [0.8, 0.2, 0.6, 0.4]), q) == expected


def test_percentile_singleton():
    for q in (0, 13, 50, 100):
        assert relation_percentile(RelationStats("r", [0.7]), q) == 0.7


def test_relation_stats_use_train_only(toy_kg):
    stats = toy_kg.relation_stats()
    r1 = toy_kg.relation_index["r1"]
    assert sorted(stats[r1].confidences) == [0.3, 0.9]


def test_confidences_in_unit_interval(toy_kg):
    assert np.all((toy_kg.confidences >= 0) & (toy_kg.confidences <= 1))
    assert not any(math.isnan(c) for c in toy_kg.confidences)


def test_from_facts_rejects_duplicates():
    with pytest.raises(KGFormatError):
        make_kg([("a", "r", "b", 0.1), ("a", "r", "b", 0.2)])
