"""Uncertain knowledge graphs with nested train/valid/test views."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import KGFormatError
from .semiring import DefaultSparseMatrix

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
SPLIT_FILES = {"train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv"}


def split_rank(split: str) -> int:
    try:
        return SPLITS.index(split)
    except ValueError:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}") from None


@dataclass(frozen=True)
class RelationStats:
    relation: int
    confidences: tuple  # train split only; stored sorted

    def __post_init__(self):
        object.__setattr__(self, "confidences", tuple(sorted(float(c) for c in self.confidences)))

    @property
    def count(self) -> int:
        return len(self.confidences)


def relation_percentile(stats: RelationStats, q: float) -> float:
    """Nearest-rank percentile of the relation's train confidences."""
    if not stats.confidences:
        raise ValueError(f"no confidences recorded for relation {stats.relation}")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {q}")
    n = len(stats.confidences)
    rank = max(1, math.ceil(q / 100.0 * n))
    return stats.confidences[rank - 1]


@dataclass
class UncertainKG:
    """Entity/relation vocabularies plus quadruple facts tagged by split.

    A fact tagged ``valid`` belongs to the valid and test views; a ``train``
    fact belongs to all three.  When the same triple is listed in two split
    files with different confidences, each view uses the value from the
    largest split at or below it.
    """

    entities: list
    relations: list
    heads: np.ndarray
    rels: np.ndarray
    tails: np.ndarray
    confidences: np.ndarray
    split_tags: np.ndarray  # 0 train, 1 valid, 2 test
    entity_index: dict = field(init=False, repr=False)
    relation_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        if len(self.entity_index) != len(self.entities):
            raise ValueError("duplicate entity identifier")
        if len(self.relation_index) != len(self.relations):
            raise ValueError("duplicate relation identifier")
        c = self.confidences
        if c.size and (np.isnan(c).any() or c.min() < 0.0 or c.max() > 1.0):
            raise ValueError("confidence out of range")
        self._views = {}
        self._matrices = {}
        self._stats = None

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @classmethod
    def from_facts(cls, facts, split_tags=None, entities=None, relations=None):
        """Build from ``(head, relation, tail, confidence)`` name tuples."""
        ents = list(entities or [])
        rels = list(relations or [])
        e_idx = {e: i for i, e in enumerate(ents)}
        r_idx = {r: i for i, r in enumerate(rels)}
        rows = []
        for h, r, t, c in facts:
            for name in (h, t):
                if name not in e_idx:
                    e_idx[name] = len(ents)
                    ents.append(name)
            if r not in r_idx:
                r_idx[r] = len(rels)
                rels.append(r)
            rows.append((e_idx[h], r_idx[r], e_idx[t], float(c)))
        arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
        tags = np.zeros(len(rows), dtype=np.int8) if split_tags is None else np.asarray(
            [split_rank(s) if isinstance(s, str) else s for s in split_tags], dtype=np.int8)
        kg = cls(ents, rels, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64),
                 arr[:, 2].astype(np.int64), arr[:, 3].copy(), tags)
        kg._check_duplicates()
        return kg

    def _check_duplicates(self):
        seen = {}
        for i, key in enumerate(zip(self.heads.tolist(), self.rels.tolist(), self.tails.tolist())):
            tag = int(self.split_tags[i])
            if (key, tag) in seen:
                raise KGFormatError(f"duplicate fact {self.fact_names(key)} in split {SPLITS[tag]}")
            seen[(key, tag)] = i

    def fact_names(self, key):
        h, r, t = key
        return (self.entities[h], self.relations[r], self.entities[t])

    def view(self, split: str) -> dict:
        """``{(h, r, t): confidence}`` for every fact visible in ``split``."""
        rank = split_rank(split)
        if rank not in self._views:
            out = {}
            for tag in range(rank + 1):
                sel = np.nonzero(self.split_tags == tag)[0]
                for i in sel.tolist():
                    key = (int(self.heads[i]), int(self.rels[i]), int(self.tails[i]))
                    out[key] = float(self.confidences[i])
            self._views[rank] = out
        return self._views[rank]

    def confidence(self, split: str, s: int, r: int, o: int) -> float:
        """Closed-world confidence: stored value if the fact is visible, else 0."""
        self._check_index(s, r, o)
        return self.view(split).get((s, r, o), 0.0)

    def _check_index(self, s, r, o):
        n, m = self.num_entities, self.num_relations
        if not (0 <= s < n and 0 <= o < n):
            raise IndexError(f"entity index out of range: {(s, o)} with {n} entities")
        if not 0 <= r < m:
            raise IndexError(f"relation index {r} out of range ({m} relations)")

    def relation_matrix(self, split: str, r: int) -> DefaultSparseMatrix:
        """Observed confidences of relation ``r`` in ``split`` (default 0)."""
        key = (split_rank(split), r)
        if key not in self._matrices:
            facts = [(h, t, c) for (h, rr, t), c in self.view(split).items() if rr == r]
            if facts:
                h, t, c = (np.array(x) for x in zip(*facts))
            else:
                h = t = np.zeros(0, dtype=np.int64)
                c = np.zeros(0)
            self._matrices[key] = DefaultSparseMatrix.from_entries(
                self.num_entities, h, t, c, default=0.0)
        return self._matrices[key]

    def relation_stats(self) -> dict:
        """Per-relation sorted train confidences, for relations seen in train."""
        if self._stats is None:
            buckets = {}
            for (_, r, _), c in self.view("train").items():
                buckets.setdefault(r, []).append(c)
            self._stats = {r: RelationStats(r, tuple(sorted(cs))) for r, cs in sorted(buckets.items())}
        return self._stats

    def facts_in(self, split: str):
        """Sorted list of ``(h, r, t, confidence)`` visible in ``split``."""
        return sorted((h, r, t, c) for (h, r, t), c in self.view(split).items())


def _parse_tsv(path: Path):
    rows = []
    with open(path, encoding="utf-8") as fp:
        for lineno, raw in enumerate(fp, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise KGFormatError(f"expected 4 tab-separated fields, got {len(parts)}", path, lineno)
            h, r, t, c = parts
            try:
                conf = float(c)
            except ValueError:
                raise KGFormatError(f"confidence {c!r} is not a number", path, lineno) from None
            if math.isnan(conf) or not 0.0 <= conf <= 1.0:
                raise KGFormatError(f"confidence out of range: {c}", path, lineno)
            rows.append((h, r, t, conf, lineno))
    return rows


def load_kg(path, format: str = "tsv-quadruple") -> UncertainKG:
    """Load an uncertain KG.

    ``path`` is either a single TSV file (all facts go to the train split)
    or a directory holding ``train.tsv`` and optionally ``valid.tsv`` and
    ``test.tsv`` with incremental facts.  Indices follow first appearance
    in train, then valid, then test order.
    """
    if format != "tsv-quadruple":
        raise ValueError(f"unsupported KG format {format!r}")
    path = Path(path)
    if path.is_dir():
        files = [(tag, path / SPLIT_FILES[s]) for tag, s in enumerate(SPLITS)]
        if not files[0][1].exists():
            raise FileNotFoundError(files[0][1])
        files = [(tag, f) for tag, f in files if f.exists()]
    elif path.exists():
        files = [(0, path)]
    else:
        raise FileNotFoundError(path)

    facts, tags = [], []
    first_seen = {}
    for tag, f in files:
        local = set()
        for h, r, t, c, lineno in _parse_tsv(f):
            key = (h, r, t)
            if key in local:
                raise KGFormatError(f"duplicate fact {key}", f, lineno)
            local.add(key)
            if key in first_seen:
                prev_c = first_seen[key]
                if prev_c == c:
                    continue
                log.warning("%s:%d: fact %s repeats an earlier split with confidence %s -> %s",
                            f, lineno, key, prev_c, c)
            first_seen[key] = c
            facts.append((h, r, t, c))
            tags.append(tag)
    if not facts:
        raise KGFormatError("no facts", path)
    return UncertainKG.from_facts(facts, tags)


def write_kg(kg: UncertainKG, directory) -> None:
    """Write the three incremental split files understood by :func:`load_kg`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for tag, split in enumerate(SPLITS):
        sel = np.nonzero(kg.split_tags == tag)[0]
        with open(directory / SPLIT_FILES[split], "w", encoding="utf-8") as fp:
            for i in sel.tolist():
                h, r, t = kg.fact_names((int(kg.heads[i]), int(kg.rels[i]), int(kg.tails[i])))
                fp.write(f"{h}\t{r}\t{t}\t{float(kg.confidences[i])!r}\n")
