import numpy as np
import pytest

from types import SimpleNamespace

from softquery.confidence import ClosedWorldBackend, DenseBackend
from softquery.kg import UncertainKG
from softquery.query import bind, parse_query


def make_kg(facts, tags=None, entities=None, relations=None):
    return UncertainKG.from_facts(facts, tags, entities=entities, relations=relations)


def numeric(text, n=7, n_rel=2):
    """Parse a query whose constants and relations are written as indices."""
    vocab = SimpleNamespace(entity_index={str(i): i for i in range(n)},
                            relation_index={str(i): i for i in range(n_rel)})
    return bind(parse_query(text), vocab)


def dyadic_backend(rng, n, n_rel, density=0.5):
    """Dense random scores on a 1/1024 grid, with roughly ``1 - density`` exact zeros."""
    scores = rng.integers(1, 1025, size=(n_rel, n, n)) / 1024
    scores[rng.random(scores.shape) >= density] = 0.0
    return DenseBackend(scores)


@pytest.fixture
def toy_kg():
    """Five entities, two relations, facts spread over the three splits."""
    facts = [
        ("a", "r1", "b", 0.9),
        ("b", "r2", "c", 0.6),
        ("a", "r1", "c", 0.3),
        ("c", "r2", "d", 0.8),
        ("d", "r1", "e", 0.5),
        ("b", "r1", "e", 0.7),
        ("e", "r2", "a", 0.4),
    ]
    tags = [0, 0, 0, 0, 1, 2, 0]
    return make_kg(facts, tags, entities=list("abcde"), relations=["r1", "r2"])


@pytest.fixture
def toy_backend(toy_kg):
    return ClosedWorldBackend(toy_kg, "train")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance")
        for line in sorted(module.RESULTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
