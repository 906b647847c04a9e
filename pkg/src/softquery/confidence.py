"""Confidence backends, from exact fact lookup to a learned embedding scorer."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import KGFormatError
from .kg import UncertainKG, split_rank
from .semiring import DefaultSparseMatrix


class ConfidenceBackend:
    """A total function ``(s, r, o) -> [0, 1]`` plus per-relation matrices.

    Subclasses implement :meth:`score_matrix` (dense, uncached) or override
    :meth:`relation_matrix` directly when they are naturally sparse.
    """

    num_entities: int
    num_relations: int

    def confidence(self, s: int, r: int, o: int) -> float:
        raise NotImplementedError

    def score_matrix(self, r: int) -> np.ndarray:
        n = self.num_entities
        out = np.empty((n, n))
        for s in range(n):
            for o in range(n):
                out[s, o] = self.confidence(s, r, o)
        return out

    def relation_matrix(self, r: int, delta1: float | None = None) -> DefaultSparseMatrix:
        """Raw confidences of relation ``r``; entries below ``delta1`` read as 0."""
        cache = self.__dict__.setdefault("_matrix_cache", {})
        key = (r, delta1)
        if key not in cache:
            dense = np.clip(self.score_matrix(r), 0.0, 1.0)
            if delta1 is not None:
                dense = np.where(dense >= delta1, dense, 0.0)
            cache[key] = DefaultSparseMatrix.from_dense(dense, 0.0)
        return cache[key]


class ClosedWorldBackend(ConfidenceBackend):
    """Observed confidences of one split view; unobserved triples score 0."""

    def __init__(self, kg: UncertainKG, split: str = "train"):
        split_rank(split)
        self.kg = kg
        self.split = split
        self.num_entities = kg.num_entities
        self.num_relations = kg.num_relations

    def confidence(self, s, r, o):
        return self.kg.confidence(self.split, s, r, o)

    def score_matrix(self, r):
        return self.kg.relation_matrix(self.split, r).to_dense()

    def relation_matrix(self, r, delta1=None):
        m = self.kg.relation_matrix(self.split, r)
        if delta1 is None:
            return m
        return m.map(lambda v: np.where(v >= delta1, v, 0.0))


def lookup_backend(kg: UncertainKG, split: str) -> ClosedWorldBackend:
    return ClosedWorldBackend(kg, split)


class TableBackend(ConfidenceBackend):
    """Explicit ``{(s, r, o): score}`` table with default 0."""

    def __init__(self, num_entities, num_relations, table):
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.table = dict(table)
        for key, v in self.table.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"score {v} for {key} outside [0, 1]")

    def confidence(self, s, r, o):
        return self.table.get((s, r, o), 0.0)

    def score_matrix(self, r):
        out = np.zeros((self.num_entities, self.num_entities))
        for (s, rr, o), v in self.table.items():
            if rr == r:
                out[s, o] = v
        return out


def tabular_backend(scores_path, kg: UncertainKG) -> TableBackend:
    """Load externally predicted scores (``head<TAB>relation<TAB>tail<TAB>score``)."""
    path = Path(scores_path)
    table = {}
    with open(path, encoding="utf-8") as fp:
        for lineno, raw in enumerate(fp, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise KGFormatError(f"expected 4 tab-separated fields, got {len(parts)}", path, lineno)
            h, r, t, v = parts
            try:
                key = (kg.entity_index[h], kg.relation_index[r], kg.entity_index[t])
            except KeyError as exc:
                raise KGFormatError(f"unknown entity or relation {exc.args[0]!r}", path, lineno) from None
            try:
                score = float(v)
            except ValueError:
                raise KGFormatError(f"score {v!r} is not a number", path, lineno) from None
            if math.isnan(score) or not 0.0 <= score <= 1.0:
                raise KGFormatError(f"score out of range: {v}", path, lineno)
            table[key] = score
    return TableBackend(kg.num_entities, kg.num_relations, table)


class DenseBackend(ConfidenceBackend):
    """Backend over a precomputed ``(R, E, E)`` score tensor."""

    def __init__(self, scores):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 3 or scores.shape[1] != scores.shape[2]:
            raise ValueError("scores must have shape (R, E, E)")
        self.scores = np.clip(scores, 0.0, 1.0)
        self.num_relations, self.num_entities = scores.shape[0], scores.shape[1]

    def confidence(self, s, r, o):
        return float(self.scores[r, s, o])

    def score_matrix(self, r):
        return self.scores[r].copy()


def dense_scores(backend: ConfidenceBackend) -> np.ndarray:
    return np.stack([backend.score_matrix(r) for r in range(backend.num_relations)])


class AffineDistortedBackend(ConfidenceBackend):
    """``clamp(a * P + b)`` over a base backend; used to test calibration."""

    def __init__(self, base, a, b):
        self.base = base
        self.a = a
        self.b = b
        self.num_entities = base.num_entities
        self.num_relations = base.num_relations

    def confidence(self, s, r, o):
        return min(1.0, max(0.0, self.a * self.base.confidence(s, r, o) + self.b))

    def score_matrix(self, r):
        return np.clip(self.a * self.base.score_matrix(r) + self.b, 0.0, 1.0)


class NoisyBackend(ConfidenceBackend):
    """Base backend plus i.i.d. uniform noise in ``[-amplitude, amplitude]``, clamped."""

    def __init__(self, base, amplitude, seed):
        self.base = base
        self.amplitude = amplitude
        self.num_entities = base.num_entities
        self.num_relations = base.num_relations
        rng = np.random.default_rng(seed)
        n = self.num_entities
        noise = rng.uniform(-amplitude, amplitude, size=(self.num_relations, n, n))
        self.scores = np.clip(dense_scores(base) + noise, 0.0, 1.0)

    def confidence(self, s, r, o):
        return float(self.scores[r, s, o])

    def score_matrix(self, r):
        return self.scores[r].copy()


# --------------------------------------------------------------------------
# embedding scorer
# --------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class ScorerHyper:
    dim: int = 16
    epochs: int = 200
    learning_rate: float = 0.05
    negatives: int = 4
    seed: int = 0


class EmbeddingScorer(ConfidenceBackend):
    """Trilinear embedding model: ``sigmoid(sum_k e_s[k] * w_r[k] * e_o[k])``."""

    def __init__(self, entity_emb, relation_emb, hyper=None):
        self.entity_emb = np.asarray(entity_emb, dtype=np.float64)
        self.relation_emb = np.asarray(relation_emb, dtype=np.float64)
        if self.entity_emb.shape[1] != self.relation_emb.shape[1]:
            raise ValueError("entity and relation embeddings differ in dimension")
        self.num_entities = self.entity_emb.shape[0]
        self.num_relations = self.relation_emb.shape[0]
        self.hyper = hyper or ScorerHyper(dim=self.dim)

    @property
    def dim(self):
        return self.entity_emb.shape[1]

    @classmethod
    def initialize(cls, num_entities, num_relations, hyper: ScorerHyper):
        if hyper.dim <= 0:
            raise ValueError("embedding dimension must be positive")
        rng = np.random.default_rng(hyper.seed)
        scale = 1.0 / math.sqrt(hyper.dim)
        ent = rng.normal(0.0, scale, size=(num_entities, hyper.dim))
        rel = rng.normal(0.0, scale, size=(num_relations, hyper.dim))
        return cls(ent, rel, hyper)

    def score_batch(self, s, r, o):
        e = self.entity_emb
        return _sigmoid(np.sum(e[s] * self.relation_emb[r] * e[o], axis=-1))

    def confidence(self, s, r, o):
        return float(self.score_batch(np.array([s]), np.array([r]), np.array([o]))[0])

    def score_matrix(self, r):
        e = self.entity_emb
        return _sigmoid((e * self.relation_emb[r]) @ e.T)

    # -- checkpoint ---------------------------------------------------------

    MAGIC = b"SQES"

    def save(self, path):
        path = Path(path)
        with open(path, "wb") as fp:
            fp.write(self.MAGIC)
            fp.write(struct.pack("<IIII", 1, self.num_entities, self.num_relations, self.dim))
            fp.write(self.entity_emb.astype("<f8").tobytes())
            fp.write(self.relation_emb.astype("<f8").tobytes())
        sidecar = {"kind": "embedding-scorer", "format_version": 1, **asdict(self.hyper)}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != cls.MAGIC:
            raise KGFormatError("not an embedding-scorer checkpoint", path)
        version, n_e, n_r, d = struct.unpack_from("<IIII", raw, 4)
        if version != 1:
            raise KGFormatError(f"unsupported checkpoint version {version}", path)
        off = 4 + 16
        ent = np.frombuffer(raw, dtype="<f8", count=n_e * d, offset=off).reshape(n_e, d)
        off += 8 * n_e * d
        rel = np.frombuffer(raw, dtype="<f8", count=n_r * d, offset=off).reshape(n_r, d)
        hyper = ScorerHyper(dim=d)
        side = path.with_suffix(path.suffix + ".json")
        if side.exists():
            meta = json.loads(side.read_text())
            hyper = ScorerHyper(**{k: meta[k] for k in asdict(hyper) if k in meta})
        return cls(ent.astype(np.float64), rel.astype(np.float64), hyper)


def train_embedding_scorer(kg: UncertainKG, hyper: ScorerHyper, split: str = "train",
                           history: list | None = None) -> EmbeddingScorer:
    """Fit the trilinear scorer to observed confidences with full-batch Adam.

    Positives regress toward their confidence; ``hyper.negatives`` corrupted
    triples per positive (head or tail replaced uniformly) regress toward 0.
    The loss is the mean error on positives plus the mean error on negatives.
    Deterministic for a fixed ``hyper.seed``.  If ``history`` is given, the
    mean squared error on positives is appended once per epoch, before the
    update.
    """
    facts = kg.facts_in(split)
    if not facts:
        raise ValueError(f"split {split!r} has no facts")
    model = EmbeddingScorer.initialize(kg.num_entities, kg.num_relations, hyper)
    if hyper.epochs <= 0:
        return model
    rng = np.random.default_rng([hyper.seed, 1])
    h = np.array([f[0] for f in facts])
    r = np.array([f[1] for f in facts])
    t = np.array([f[2] for f in facts])
    y = np.array([f[3] for f in facts])
    n_pos = len(facts)
    ent, rel = model.entity_emb, model.relation_emb
    params = [ent, rel]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for epoch in range(1, hyper.epochs + 1):
        k = hyper.negatives
        nh = np.repeat(h, k)
        nt = np.repeat(t, k)
        nr = np.repeat(r, k)
        corrupt = rng.integers(0, kg.num_entities, size=n_pos * k)
        flip = rng.random(n_pos * k) < 0.5
        nh = np.where(flip, corrupt, nh)
        nt = np.where(flip, nt, corrupt)
        bs = np.concatenate([h, nh])
        br = np.concatenate([r, nr])
        bo = np.concatenate([t, nt])
        target = np.concatenate([y, np.zeros(n_pos * k)])

        es, wr, eo = ent[bs], rel[br], ent[bo]
        pred = _sigmoid(np.sum(es * wr * eo, axis=1))
        if history is not None:
            history.append(float(np.mean((pred[:n_pos] - y) ** 2)))
        # positives and negatives weigh equally, whatever the negative ratio
        weight = np.concatenate([np.full(n_pos, 1.0 / n_pos), np.full(n_pos * k, 1.0 / max(1, n_pos * k))])
        g = 2.0 * weight * (pred - target) * pred * (1.0 - pred)
        g = g[:, None]
        g_ent = np.zeros_like(ent)
        g_rel = np.zeros_like(rel)
        np.add.at(g_ent, bs, g * wr * eo)
        np.add.at(g_ent, bo, g * es * wr)
        np.add.at(g_rel, br, g * es * eo)
        for i, (p, gp) in enumerate(zip(params, (g_ent, g_rel))):
            m[i] = b1 * m[i] + (1 - b1) * gp
            v[i] = b2 * v[i] + (1 - b2) * gp * gp
            mh = m[i] / (1 - b1 ** epoch)
            vh = v[i] / (1 - b2 ** epoch)
            p -= hyper.learning_rate * mh / (np.sqrt(vh) + eps)
    return model
