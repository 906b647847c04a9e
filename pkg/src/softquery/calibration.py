"""Confidence calibration: necessity debiasing and a learned affine correction.

The learned correction rescales a base confidence ``p`` to
``p * (1 + rho) + lam`` (clamped to [0, 1]), where ``(rho, lam)`` is a sum
of per-entity and per-relation affine maps of fixed embeddings.  It is
fitted by minimising the squared utility error of ``alpha = 0`` queries,
with subgradients taken along the maximising assignment.  An L1 penalty on
the per-entity parameters, applied as a proximal step, keeps entity terms
that the data does not call for at exactly zero, so tied utilities stay tied.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .confidence import ConfidenceBackend, dense_scores
from .errors import KGFormatError, QueryValidationError
from .query import FREE_VAR, SoftQuery, _var_order, is_variable


@dataclass(frozen=True)
class DebiasConfig:
    delta_alpha: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.delta_alpha <= 1.0:
            raise ValueError("delta_alpha must lie in [0, 1]")


def debias_query(query: SoftQuery, cfg: DebiasConfig) -> SoftQuery:
    """Lower every atom's necessity by ``delta_alpha``, clamped at 0."""
    if cfg.delta_alpha == 0.0:
        return query
    return query.map_atoms(lambda a: replace(a, alpha=max(a.alpha - cfg.delta_alpha, 0.0)))


@dataclass
class AffineCalibration:
    entity_emb: np.ndarray  # (E, d), frozen
    relation_emb: np.ndarray  # (R, d), frozen
    w_ent: np.ndarray  # (E, 2, d)
    b_ent: np.ndarray  # (E, 2)
    w_rel: np.ndarray  # (R, 2, d)
    b_rel: np.ndarray  # (R, 2)

    @classmethod
    def zeros(cls, entity_emb, relation_emb):
        entity_emb = np.asarray(entity_emb, dtype=np.float64)
        relation_emb = np.asarray(relation_emb, dtype=np.float64)
        (n_e, d), (n_r, d2) = entity_emb.shape, relation_emb.shape
        if d != d2:
            raise ValueError("entity and relation embeddings differ in dimension")
        return cls(entity_emb, relation_emb, np.zeros((n_e, 2, d)), np.zeros((n_e, 2)),
                   np.zeros((n_r, 2, d)), np.zeros((n_r, 2)))

    @classmethod
    def for_scorer(cls, scorer):
        return cls.zeros(scorer.entity_emb, scorer.relation_emb)

    @property
    def dim(self):
        return self.entity_emb.shape[1]

    def params(self):
        return [self.w_ent, self.b_ent, self.w_rel, self.b_rel]

    def copy(self):
        return AffineCalibration(self.entity_emb, self.relation_emb,
                                 *(p.copy() for p in self.params()))

    def affine_terms(self):
        """Per-entity and per-relation ``(rho, lam)`` contributions."""
        a_ent = np.einsum("ekd,ed->ek", self.w_ent, self.entity_emb) + self.b_ent
        a_rel = np.einsum("rkd,rd->rk", self.w_rel, self.relation_emb) + self.b_rel
        return a_ent, a_rel

    def rho_lambda(self, s, r, o):
        a_ent, a_rel = self.affine_terms()
        rl = a_ent[s] + a_rel[r] + a_ent[o]
        return float(rl[0]), float(rl[1])

    def raw_matrix(self, base_scores_r, r, terms=None):
        """Unclamped calibrated scores of relation ``r`` over all pairs."""
        a_ent, a_rel = self.affine_terms() if terms is None else terms
        rho = (a_ent[:, 0][:, None] + a_rel[r, 0]) + a_ent[:, 0][None, :]
        lam = (a_ent[:, 1][:, None] + a_rel[r, 1]) + a_ent[:, 1][None, :]
        return base_scores_r * (1.0 + rho) + lam

    # -- checkpoint ---------------------------------------------------------

    MAGIC = b"SQAC"

    def save(self, path, meta=None):
        path = Path(path)
        n_e, n_r, d = self.entity_emb.shape[0], self.relation_emb.shape[0], self.dim
        with open(path, "wb") as fp:
            fp.write(self.MAGIC)
            fp.write(struct.pack("<IIII", 1, n_e, n_r, d))
            for arr in (self.entity_emb, self.relation_emb, *self.params()):
                fp.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        sidecar = {"kind": "affine-calibration", "format_version": 1, **(meta or {})}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != cls.MAGIC:
            raise KGFormatError("not an affine-calibration checkpoint", path)
        version, n_e, n_r, d = struct.unpack_from("<IIII", raw, 4)
        if version != 1:
            raise KGFormatError(f"unsupported checkpoint version {version}", path)
        shapes = [(n_e, d), (n_r, d), (n_e, 2, d), (n_e, 2), (n_r, 2, d), (n_r, 2)]
        off = 20
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
            off += 8 * count
        return cls(*arrays)


def calibrated_confidence(base, cal: AffineCalibration, s, r, o) -> float:
    p = base.confidence(s, r, o)
    rho, lam = cal.rho_lambda(s, r, o)
    return min(1.0, max(0.0, p * (1.0 + rho) + lam))


class CalibratedBackend(ConfidenceBackend):
    def __init__(self, base, cal: AffineCalibration):
        if cal.entity_emb.shape[0] != base.num_entities or cal.relation_emb.shape[0] != base.num_relations:
            raise ValueError("calibration shape does not match the base backend")
        self.base = base
        self.cal = cal
        self.num_entities = base.num_entities
        self.num_relations = base.num_relations

    def confidence(self, s, r, o):
        return calibrated_confidence(self.base, self.cal, s, r, o)

    def score_matrix(self, r):
        return np.clip(self.cal.raw_matrix(self.base.score_matrix(r), r), 0.0, 1.0)


# --------------------------------------------------------------------------
# differentiable evaluation (dense enumeration with argmax paths)
# --------------------------------------------------------------------------

def _conjunct_paths(conj, mats):
    """Utility per answer and the maximising assignment of every existential.

    ``mats[r]`` is a dense confidence matrix.  Ties resolve to the lowest
    entity index, variable by variable in declaration order.
    """
    variables = [FREE_VAR] + sorted(conj.existentials, key=_var_order)
    n = next(iter(mats.values())).shape[0]
    k = len(variables)
    total = np.zeros((n,) * k)
    for a in conj.atoms:
        p = mats[a.relation]
        q = 1.0 - p if a.negated else p
        vals = np.where(q >= a.alpha, a.beta * q, -np.inf)
        shape = [1] * k
        h_var, t_var = is_variable(a.head), is_variable(a.tail)
        if h_var and t_var and a.head == a.tail:
            vals = np.diagonal(vals).copy()
            shape[variables.index(a.head)] = n
        elif h_var and t_var:
            hi, ti = variables.index(a.head), variables.index(a.tail)
            if hi > ti:
                vals = vals.T
            shape[hi] = shape[ti] = n
        elif h_var:
            vals = vals[:, a.tail]
            shape[variables.index(a.head)] = n
        elif t_var:
            vals = vals[a.head, :]
            shape[variables.index(a.tail)] = n
        else:
            vals = np.array(vals[a.head, a.tail])
        total = total + vals.reshape(shape)
    flat = total.reshape(n, -1)
    best = np.argmax(flat, axis=1)
    util = flat[np.arange(n), best]
    assignment = {FREE_VAR: np.arange(n)}
    if k > 1:
        coords = np.unravel_index(best, (n,) * (k - 1))
        for var, c in zip(variables[1:], coords):
            assignment[var] = c
    return util, assignment


def _ground(term, assignment, n):
    if is_variable(term):
        return assignment[term]
    return np.full(n, term)


def query_utility_paths(query: SoftQuery, mats):
    """Utilities and, per answer, the maximising disjunct and its assignment."""
    best_u, best_d, paths = None, None, []
    for i, conj in enumerate(query.disjuncts):
        u, asg = _conjunct_paths(conj, mats)
        paths.append(asg)
        if best_u is None:
            best_u, best_d = u, np.zeros(len(u), dtype=np.int64)
        else:
            better = u > best_u
            best_u = np.where(better, u, best_u)
            best_d = np.where(better, i, best_d)
    return best_u, best_d, paths


@dataclass
class CalibrationExample:
    query: SoftQuery  # bound, every alpha == 0
    targets: dict  # entity index -> ground-truth utility (only > 0 entries are used)


def _check_alpha_zero(examples):
    for ex in examples:
        for a in ex.query.atoms():
            if a.alpha != 0.0:
                raise QueryValidationError("calibration training needs alpha = 0 on every atom")


def calibration_loss(cal: AffineCalibration, base_scores, examples, with_grad=True):
    """Summed squared utility error and its (sub)gradient w.r.t. the parameters.

    ``base_scores`` is the base backend's dense ``(R, E, E)`` score tensor.
    """
    terms = cal.affine_terms()
    rels = sorted({a.relation for ex in examples for a in ex.query.atoms()})
    raw = {r: cal.raw_matrix(base_scores[r], r, terms) for r in rels}
    mats = {r: np.clip(m, 0.0, 1.0) for r, m in raw.items()}
    n = base_scores.shape[1]
    loss = 0.0
    g_p = {r: np.zeros((n, n)) for r in rels}
    for ex in examples:
        idx = np.array(sorted(e for e, v in ex.targets.items() if v > 0.0), dtype=np.int64)
        if idx.size == 0:
            continue
        target = np.array([ex.targets[int(e)] for e in idx])
        u, which, paths = query_utility_paths(ex.query, mats)
        resid = u[idx] - target
        loss += float(np.sum(resid * resid))
        if not with_grad:
            continue
        for d, conj in enumerate(ex.query.disjuncts):
            sel = which[idx] == d
            if not sel.any():
                continue
            answers = idx[sel]
            coef = 2.0 * resid[sel]
            asg = paths[d]
            for a in conj.atoms:
                hs = _ground(a.head, asg, n)[answers]
                ts = _ground(a.tail, asg, n)[answers]
                sign = -a.beta if a.negated else a.beta
                np.add.at(g_p[a.relation], (hs, ts), coef * sign)
    if not with_grad:
        return loss, None

    g_ent = np.zeros((n, 2))
    g_rel = np.zeros((base_scores.shape[0], 2))
    for r in rels:
        inside = (raw[r] >= 0.0) & (raw[r] <= 1.0)
        g = np.where(inside, g_p[r], 0.0)
        g_rho = g * base_scores[r]
        g_lam = g
        for k, gk in enumerate((g_rho, g_lam)):
            g_ent[:, k] += gk.sum(axis=1) + gk.sum(axis=0)
            g_rel[r, k] += gk.sum()
    grads = [
        np.einsum("ek,ed->ekd", g_ent, cal.entity_emb),
        g_ent,
        np.einsum("rk,rd->rkd", g_rel, cal.relation_emb),
        g_rel,
    ]
    return loss, grads


@dataclass
class CalibrationHyper:
    learning_rate: float = 0.005
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    cosine_decay: bool = True  # anneal the step size to zero over the run
    entity_l1: float = 0.1  # proximal L1 strength on the per-entity parameters


def train_calibration(base, cal: AffineCalibration, examples, hyper: CalibrationHyper,
                      history: list | None = None) -> AffineCalibration:
    """Fit the affine parameters with minibatch Adam; deterministic given the seed."""
    _check_alpha_zero(examples)
    if not any(v > 0.0 for ex in examples for v in ex.targets.values()):
        raise ValueError("no answer with positive utility in the training set")
    base_scores = base if isinstance(base, np.ndarray) else dense_scores(base)
    cal = cal.copy()
    params = cal.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(hyper.seed)
    step = 0
    batches = -(-len(examples) // hyper.batch_size)
    total_steps = max(1, hyper.epochs * batches)
    for _ in range(hyper.epochs):
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = [examples[i] for i in order[start:start + hyper.batch_size]]
            loss, grads = calibration_loss(cal, base_scores, batch)
            epoch_loss += loss
            lr = hyper.learning_rate
            if hyper.cosine_decay:
                lr *= 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1
            for i, (p, g) in enumerate(zip(params, grads)):
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mh = m[i] / (1 - b1 ** step)
                vh = v[i] / (1 - b2 ** step)
                p -= lr * mh / (np.sqrt(vh) + eps)
                if hyper.entity_l1 and i < 2:
                    # soft-thresholding keeps unneeded entity terms at exactly zero
                    np.copyto(p, np.sign(p) * np.maximum(np.abs(p) - lr * hyper.entity_l1, 0.0))
        if history is not None:
            history.append(epoch_loss)
    return cal


def hyper_dict(hyper):
    return asdict(hyper)
