"""Soft-query dataset construction: templates, requirements, answers, filtering."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .confidence import ClosedWorldBackend
from .errors import DatasetError
from .inference import InferenceConfig, answer_query
from .kg import UncertainKG, load_kg, relation_percentile
from .oracle import DEFAULT_BUDGET, brute_force_utility
from .query import (SoftAtom, SoftConjunctiveQuery, SoftQuery,
                    query_from_json, query_to_json, unbind)
from .semiring import ZERO

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "1"

# (head node, relation slot, tail node, negated); "c*" nodes become constants.
TEMPLATES = {
    "1P": [[("c1", "r1", "y", False)]],
    "2P": [[("c1", "r1", "x1", False), ("x1", "r2", "y", False)]],
    "2I": [[("c1", "r1", "y", False), ("c2", "r2", "y", False)]],
    "2IN": [[("c1", "r1", "y", False), ("c2", "r2", "y", True)]],
    "2IL": [[("c1", "r1", "y", False), ("x1", "r2", "y", False)]],
    "2M": [[("c1", "r1", "y", False), ("c1", "r2", "y", False)]],
    "2U": [[("c1", "r1", "y", False)], [("c2", "r2", "y", False)]],
    "3IN": [[("c1", "r1", "y", False), ("c2", "r2", "y", False), ("c3", "r3", "y", True)]],
    "IP": [[("c1", "r1", "x1", False), ("c2", "r2", "x1", False), ("x1", "r3", "y", False)]],
    "INP": [[("c1", "r1", "x1", False), ("c2", "r2", "x1", True), ("x1", "r3", "y", False)]],
    "IM": [[("c1", "r1", "y", False), ("c2", "r2", "y", False), ("c2", "r3", "y", False)]],
    "UP": [[("c1", "r1", "x1", False), ("x1", "r2", "y", False)],
           [("c2", "r3", "x1", False), ("x1", "r4", "y", False)]],
}
QUERY_TYPES = tuple(TEMPLATES)
TRAIN_TYPES = ("1P", "2P", "2I", "2IN", "2IL")
ALPHA_MODES = ("zero", "low", "normal", "high", "hybrid")
BETA_MODES = ("equal", "random")
PERCENTILES = {"low": 25.0, "normal": 50.0, "high": 75.0}
SPLIT_VIEWS = {"train": ("train", "train"), "valid": ("train", "valid"), "test": ("valid", "test")}
CHANGE_TOLERANCE = 1e-12


class _FactIndex:
    def __init__(self, kg: UncertainKG, split="train"):
        self.kg = kg
        self.facts = kg.facts_in(split)
        self.by_tail = {}
        self.heads_of = {}
        self.pairs = {}
        for h, r, t, _ in self.facts:
            self.by_tail.setdefault(t, []).append((h, r))
            self.heads_of.setdefault(r, set()).add(h)
            self.pairs.setdefault((h, t), []).append(r)
        self.heads_of = {r: sorted(hs) for r, hs in self.heads_of.items()}
        self.relations = sorted(self.heads_of)
        self.fact_set = {(h, r, t) for h, r, t, _ in self.facts}


def _ground_disjunct(edges, index: _FactIndex, rng, answer):
    ground = {"y": answer}
    rels = {}
    pending = list(edges)
    while pending:
        heads = sorted({e[0] for e in pending if not e[3] and e[2] in ground and e[0] not in ground})
        if heads:
            node = heads[0]
            group = [e for e in pending if e[0] == node and not e[3] and e[2] in ground]
            candidates = None
            for e in group:
                hs = {h for h, _ in index.by_tail.get(ground[e[2]], [])}
                candidates = hs if candidates is None else candidates & hs
            candidates = sorted(candidates or ())
            rng.shuffle(candidates)
            for h in candidates:
                chosen = {}
                ok = True
                for e in group:
                    used = {chosen[o] for o in chosen if o[2] == e[2]}
                    options = [r for r in sorted(index.pairs.get((h, ground[e[2]]), [])) if r not in used]
                    if not options:
                        ok = False
                        break
                    chosen[e] = options[int(rng.integers(len(options)))]
                if ok:
                    ground[node] = h
                    rels.update(chosen)
                    break
            else:
                return None
            pending = [e for e in pending if e not in group]
            continue
        negs = [e for e in pending if e[3] and e[2] in ground and e[0] not in ground]
        if not negs:
            return None
        e = negs[0]
        r = index.relations[int(rng.integers(len(index.relations)))]
        heads = index.heads_of[r]
        h = heads[int(rng.integers(len(heads)))]
        for _ in range(8):
            if (h, r, ground[e[2]]) not in index.fact_set:
                break
            h = heads[int(rng.integers(len(heads)))]
        ground[e[0]] = h
        rels[e] = r
        pending.remove(e)

    def term(node):
        return ground[node] if node.startswith("c") else node

    atoms = tuple(SoftAtom(term(h), rels[(h, r, t, neg)], term(t), 0.0, 1.0, neg)
                  for (h, r, t, neg) in edges)
    existentials = tuple(sorted({n for e in edges for n in (e[0], e[2]) if n.startswith("x")}))
    return SoftConjunctiveQuery(atoms, existentials)


def sample_query_skeleton(kg_or_index, qtype: str, rng, retries: int = 50) -> SoftQuery:
    """Ground a template by walking train facts backwards from a sampled answer.

    The first disjunct is anchored on a randomly drawn fact's tail, so that
    entity has a finite utility under the train view when ``alpha = 0``.
    Requirements are left at ``alpha = 0, beta = 1``.
    """
    if qtype not in TEMPLATES:
        raise DatasetError(f"unknown query type {qtype!r}")
    index = kg_or_index if isinstance(kg_or_index, _FactIndex) else _FactIndex(kg_or_index)
    if not index.facts:
        raise DatasetError("the train split has no facts")
    for _ in range(retries):
        disjuncts = []
        for edges in TEMPLATES[qtype]:
            fact = index.facts[int(rng.integers(len(index.facts)))]
            conj = _ground_disjunct(edges, index, rng, fact[2])
            if conj is None:
                break
            disjuncts.append(conj)
        else:
            return SoftQuery(tuple(disjuncts))
    raise DatasetError(f"could not ground a {qtype} query after {retries} attempts")


@dataclass(frozen=True)
class RequirementStrategy:
    alpha_mode: str = "zero"
    beta_mode: str = "equal"
    seed: int = 0
    per_query: bool = False  # hybrid: one mode per query instead of per atom

    def __post_init__(self):
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.beta_mode not in BETA_MODES:
            raise ValueError(f"beta_mode must be one of {BETA_MODES}")


def assign_requirements(query: SoftQuery, strategy: RequirementStrategy, stats: dict, rng=None) -> SoftQuery:
    """Set alpha from relation percentiles and beta by strategy (bound query)."""
    rng = np.random.default_rng(strategy.seed) if rng is None else rng
    base_modes = ("zero", "low", "normal", "high")
    query_mode = base_modes[int(rng.integers(4))] if strategy.alpha_mode == "hybrid" and strategy.per_query else None

    def assign(atom):
        mode = strategy.alpha_mode
        if mode == "hybrid":
            mode = query_mode or base_modes[int(rng.integers(4))]
        if mode == "zero":
            alpha = 0.0
        else:
            if atom.relation not in stats:
                raise DatasetError(f"no train statistics for relation {atom.relation!r}")
            alpha = relation_percentile(stats[atom.relation], PERCENTILES[mode])
        beta = 1.0 if strategy.beta_mode == "equal" else 1.0 - float(rng.random())
        return SoftAtom(atom.head, atom.relation, atom.tail, alpha, beta, atom.negated)

    return query.map_atoms(assign)


def sparse_answers(u) -> dict:
    """``{entity index: utility}`` for entities with finite, positive utility."""
    u = np.asarray(u)
    idx = np.nonzero((u != ZERO) & (u > 0.0))[0]
    return {int(i): float(u[i]) for i in idx}


def compute_answers(query, backend_before, backend_after, exact=False, budget=DEFAULT_BUDGET,
                    config=InferenceConfig()):
    """Sparse utility maps of a bound query under two confidence views."""
    if exact:
        before = brute_force_utility(query, backend_before, budget)
        after = brute_force_utility(query, backend_after, budget)
    else:
        before = answer_query(query, backend_before, config)
        after = answer_query(query, backend_after, config)
    return sparse_answers(before), sparse_answers(after)


@dataclass
class DatasetRecord:
    id: str
    type: str
    query: SoftQuery  # names, not indices
    train_answers: dict  # entity name -> utility
    test_answers: dict
    seed: list
    split: str = "test"

    def to_json(self) -> dict:
        return {"id": self.id, "type": self.type, "split": self.split,
                "query": query_to_json(self.query),
                "train_answers": self.train_answers, "test_answers": self.test_answers,
                "seed": self.seed}

    @classmethod
    def from_json(cls, obj) -> "DatasetRecord":
        return cls(obj["id"], obj["type"], query_from_json(obj["query"]),
                   {k: float(v) for k, v in obj["train_answers"].items()},
                   {k: float(v) for k, v in obj["test_answers"].items()},
                   obj.get("seed"), obj.get("split", "test"))


def maps_differ(a: dict, b: dict, tol=CHANGE_TOLERANCE) -> bool:
    if a.keys() != b.keys():
        return True
    return any(abs(a[k] - b[k]) > tol for k in a)


def filter_useful(record: DatasetRecord, max_answers: int = 100) -> bool:
    """Keep evaluation records whose answers change between views.

    Training records are answered on one view only, so for them just the
    answer-count bound applies.
    """
    n = len(record.test_answers)
    if not 1 <= n <= max_answers:
        return False
    if record.split == "train":
        return True
    return maps_differ(record.train_answers, record.test_answers)


@dataclass
class DatasetConfig:
    kg_dir: str
    out_dir: str
    train_types: tuple = TRAIN_TYPES
    eval_types: tuple = QUERY_TYPES
    n_train: int = 100
    n_eval: int = 20
    alpha_mode: str = "hybrid"
    beta_mode: str = "random"
    hybrid_per_query: bool = False
    max_answers: int = 100
    retries: int = 50
    seed: int = 0
    exact: bool = False
    budget: int = DEFAULT_BUDGET

    def validate(self):
        bad = [t for t in self.train_types if t not in TRAIN_TYPES]
        if bad:
            raise DatasetError(f"evaluation-only query types requested for training: {bad}")
        bad = [t for t in self.eval_types if t not in TEMPLATES]
        if bad:
            raise DatasetError(f"unknown query types: {bad}")
        RequirementStrategy(self.alpha_mode, self.beta_mode)


def _record_for(kg, index, backends, qtype, split, seed_path, cfg: DatasetConfig):
    rng = np.random.default_rng(seed_path)
    strategy = RequirementStrategy(cfg.alpha_mode, cfg.beta_mode, per_query=cfg.hybrid_per_query)
    stats = kg.relation_stats()
    before_name, after_name = SPLIT_VIEWS[split]
    for attempt in range(cfg.retries):
        try:
            skeleton = sample_query_skeleton(index, qtype, rng, retries=1)
        except DatasetError:
            continue
        query = assign_requirements(skeleton, strategy, stats, rng)
        before, after = compute_answers(query, backends[before_name], backends[after_name],
                                        exact=cfg.exact, budget=cfg.budget)
        record = DatasetRecord(
            id=f"{split}-{qtype}-{seed_path[-1]}",
            type=qtype,
            query=unbind(query, kg),
            train_answers={kg.entities[e]: v for e, v in before.items()},
            test_answers={kg.entities[e]: v for e, v in after.items()},
            seed=list(seed_path) + [attempt],
            split=split,
        )
        if filter_useful(record, cfg.max_answers):
            return record
    return None


def build_dataset(cfg: DatasetConfig, kg: UncertainKG | None = None) -> dict:
    """Write one JSONL file of useful queries per split and query type.

    Returns the statistics report (also written to ``stats.json``).
    """
    cfg.validate()
    kg = load_kg(cfg.kg_dir) if kg is None else kg
    index = _FactIndex(kg)
    backends = {s: ClosedWorldBackend(kg, s) for s in ("train", "valid", "test")}
    out = Path(cfg.out_dir)
    report = {"template_version": TEMPLATE_VERSION, "seed": cfg.seed, "counts": {}, "shortfall": {}}
    plan = [("train", cfg.train_types, cfg.n_train), ("valid", cfg.eval_types, cfg.n_eval),
            ("test", cfg.eval_types, cfg.n_eval)]
    for split_id, (split, types, count) in enumerate(plan):
        (out / split).mkdir(parents=True, exist_ok=True)
        report["counts"][split] = {}
        for qtype in types:
            type_id = QUERY_TYPES.index(qtype)
            records = []
            for i in range(count):
                rec = _record_for(kg, index, backends, qtype, split, [cfg.seed, split_id, type_id, i], cfg)
                if rec is not None:
                    records.append(rec)
            write_records(out / split / f"{qtype}.jsonl", records)
            report["counts"][split][qtype] = len(records)
            if len(records) < count:
                report["shortfall"].setdefault(split, {})[qtype] = count - len(records)
                log.warning("%s/%s: %d of %d useful queries", split, qtype, len(records), count)
    # the output location does not influence the data, so it stays out of the file
    report["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()
                        if k != "out_dir"}
    (out / "stats.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def write_records(path, records):
    with open(path, "w", encoding="utf-8") as fp:
        for rec in records:
            fp.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_records(path, max_answers: int = 100, check: bool = True) -> list:
    """Read a JSONL dataset file, re-applying the useful-query check."""
    records = []
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            rec = DatasetRecord.from_json(json.loads(line))
            if check and not filter_useful(rec, max_answers):
                raise DatasetError(f"{path}:{lineno}: record {rec.id} fails the useful-query check")
            records.append(rec)
    return records
