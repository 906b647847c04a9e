"""Answering soft queries over uncertain knowledge graphs in the (max, +) semiring."""

__version__ = "0.1.0"

from .confidence import ClosedWorldBackend, EmbeddingScorer  # noqa: E402
from .inference import InferenceConfig, answer_query, rank_answers  # noqa: E402
from .kg import UncertainKG, load_kg  # noqa: E402
from .oracle import brute_force_utility  # noqa: E402
from .query import SoftAtom, SoftConjunctiveQuery, SoftQuery, bind, parse_query  # noqa: E402

__all__ = [
    "ClosedWorldBackend", "EmbeddingScorer", "InferenceConfig", "SoftAtom", "SoftConjunctiveQuery",
    "SoftQuery", "UncertainKG", "answer_query", "bind", "brute_force_utility", "load_kg",
    "parse_query", "rank_answers",
]
