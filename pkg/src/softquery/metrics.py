"""Ranking metrics for predicted utility vectors, and the error-accumulation probe."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .confidence import NoisyBackend, dense_scores
from .errors import SoftQueryError
from .oracle import DEFAULT_BUDGET, brute_force_utility
from .query import SoftQuery, is_variable
from .semiring import ZERO, atom_values


@dataclass
class EvalPair:
    truth: dict  # entity -> ground-truth utility (test view)
    predicted: dict  # entity -> predicted utility
    qtype: str = ""
    order: dict | None = None  # entity -> vocabulary index, for tie-breaking

    def _key(self, e):
        if self.order is not None:
            return self.order.get(e, math.inf), str(e)
        return 0, e

    @property
    def answers(self):
        """Ground-truth answer set: finite, strictly positive utilities."""
        return {e for e, v in self.truth.items() if v != ZERO and v > 0.0}

    def ranking(self):
        """Predicted order: finite predictions best first, then unpredicted answers."""
        ranked = [e for e, v in self.predicted.items() if v != ZERO]
        ranked.sort(key=lambda e: (-self.predicted[e], self._key(e)))
        seen = set(ranked)
        tail = sorted((a for a in self.answers if a not in seen), key=self._key)
        return ranked + tail

    def ranks(self):
        return {e: i for i, e in enumerate(self.ranking(), start=1)}

    def truth_order(self):
        return sorted(self.answers, key=lambda e: (-self.truth[e], self._key(e)))


class MetricUndefined(SoftQueryError):
    pass


def _require_answers(pair, minimum=1):
    a = pair.answers
    if len(a) < minimum:
        raise MetricUndefined(f"needs at least {minimum} ground-truth answers, got {len(a)}")
    return a


def precision_at_k(pair: EvalPair, k: int) -> float:
    answers = _require_answers(pair)
    ranks = pair.ranks()
    return sum(1 for a in answers if ranks[a] <= k) / k


def average_precision(pair: EvalPair) -> float:
    """Mean of P@k over the positions of relevant entities in the full ranking."""
    answers = _require_answers(pair)
    total = 0.0
    hits = 0
    for k, e in enumerate(pair.ranking(), start=1):
        if e in answers:
            hits += 1
            total += hits / k
    return total / len(answers)


def mean_average_precision(pairs) -> float:
    return float(np.mean([average_precision(p) for p in pairs]))


def _eta(i):
    return 1.0 / math.log2(i + 1)


def ndcg(pair: EvalPair, k: int | None = None) -> float:
    """Reciprocal-rank gains of the true top-``k`` answers, position-discounted."""
    answers = _require_answers(pair)
    k = len(answers) if k is None else min(k, len(answers))
    ranks = pair.ranks()
    top = pair.truth_order()[:k]
    dcg = sum(_eta(i) / ranks[a] for i, a in enumerate(top, start=1))
    ideal = sum(_eta(i) / i for i in range(1, k + 1))
    return dcg / ideal


def _aligned(pair):
    answers = sorted(_require_answers(pair, 2), key=pair._key)
    x = np.array([pair.truth[a] for a in answers])
    y = np.array([pair.predicted.get(a, ZERO) for a in answers])
    return x, y


def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall tau by counting all pairs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    iu = np.triu_indices(len(x), k=1)
    # comparisons rather than differences so that two zeros tie
    dx = (np.greater.outer(x, x).astype(int) - np.less.outer(x, x))[iu]
    dy = (np.greater.outer(y, y).astype(int) - np.less.outer(y, y))[iu]
    n0 = len(dx)
    ties_x = int(np.count_nonzero(dx == 0))
    ties_y = int(np.count_nonzero(dy == 0))
    prod = dx * dy
    concordant = int(np.count_nonzero(prod > 0))
    discordant = int(np.count_nonzero(prod < 0))
    denom = math.sqrt((n0 - ties_x) * (n0 - ties_y))
    if denom == 0:
        return math.nan
    return (concordant - discordant) / denom


def spearman(x, y) -> float:
    rx = rankdata(x)
    ry = rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(np.dot(rx, rx) * np.dot(ry, ry)))
    if denom == 0:
        return math.nan
    return float(np.dot(rx, ry) / denom)


def kendall_tau(pair: EvalPair) -> float:
    return kendall_tau_b(*_aligned(pair))


def spearman_rho(pair: EvalPair) -> float:
    return spearman(*_aligned(pair))


METRICS = ("MAP", "NDCG", "rho", "tau")


def query_metrics(pair: EvalPair, ndcg_k=None) -> dict:
    out = {"MAP": average_precision(pair), "NDCG": ndcg(pair, ndcg_k)}
    for name, fn in (("rho", spearman_rho), ("tau", kendall_tau)):
        try:
            v = fn(pair)
        except MetricUndefined:
            v = math.nan
        out[name] = v
    return out


def evaluate_run(records, predictions: dict, entity_order: dict | None = None, ndcg_k=None) -> dict:
    """Per-type and averaged metrics.

    ``predictions`` maps record id to ``{entity: utility}``.  Queries whose
    rank correlation is undefined (fewer than two answers, or a constant
    side) are skipped for that metric and counted.
    """
    if not predictions:
        raise SoftQueryError("no predictions to evaluate")
    ids = {r.id for r in records}
    unknown = sorted(set(predictions) - ids)
    if unknown:
        raise SoftQueryError(f"predictions for unknown query ids: {unknown[:5]}")
    per_type = {}
    for rec in records:
        pair = EvalPair(rec.test_answers, predictions.get(rec.id, {}), rec.type, entity_order)
        if not pair.answers:
            continue
        m = query_metrics(pair, ndcg_k)
        bucket = per_type.setdefault(rec.type, {k: [] for k in METRICS} | {"skipped": {"rho": 0, "tau": 0}, "queries": 0})
        bucket["queries"] += 1
        for k in METRICS:
            if math.isnan(m[k]):
                bucket["skipped"][k] += 1
            else:
                bucket[k].append(m[k])
    report = {"types": {}, "average": {}}
    for qtype, bucket in per_type.items():
        row = {k: (float(np.mean(bucket[k])) if bucket[k] else math.nan) for k in METRICS}
        row["queries"] = bucket["queries"]
        row["skipped"] = bucket["skipped"]
        report["types"][qtype] = row
    for k in METRICS:
        vals = [row[k] for row in report["types"].values() if not math.isnan(row[k])]
        report["average"][k] = float(np.mean(vals)) if vals else math.nan
    return report


def write_table_csv(report: dict, path, types=None) -> None:
    """Metric rows by query-type columns, in percent, plus an AVG column."""
    types = list(types or report["types"])
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = csv.writer(fp)
        w.writerow(["Metric", *types, "AVG"])
        for k in METRICS:
            cells = []
            for t in types:
                v = report["types"].get(t, {}).get(k, math.nan)
                cells.append("" if math.isnan(v) else f"{100 * v:.1f}")
            avg = report["average"].get(k, math.nan)
            w.writerow([k, *cells, "" if math.isnan(avg) else f"{100 * avg:.1f}"])


# --------------------------------------------------------------------------
# error accumulation
# --------------------------------------------------------------------------

def value_error(a, b):
    """``|a - b|`` where two semiring zeros agree and one zero is infinitely far."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    za, zb = a == ZERO, b == ZERO
    with np.errstate(invalid="ignore"):
        diff = np.abs(a - b)
    return np.where(za & zb, 0.0, np.where(za | zb, np.inf, diff))


def atom_error_bound(atom, true_scores, noisy_scores) -> float:
    """Largest atom-value error over every entity pair the atom can touch."""
    rows = slice(None) if is_variable(atom.head) else [atom.head]
    cols = slice(None) if is_variable(atom.tail) else [atom.tail]
    p = true_scores[atom.relation][rows][:, cols]
    q = noisy_scores[atom.relation][rows][:, cols]
    if is_variable(atom.head) and atom.head == atom.tail:
        p, q = np.diagonal(p), np.diagonal(q)
    vp = atom_values(p, atom.alpha, atom.beta, atom.negated)
    vq = atom_values(q, atom.alpha, atom.beta, atom.negated)
    return float(value_error(vq, vp).max())


@dataclass
class ProbeResult:
    max_error: float
    bound: float
    violated: bool
    atom_bounds: list


def error_accumulation_probe(query: SoftQuery, backend_true, amplitude: float, trials: int = 1,
                             seed: int = 0, budget=DEFAULT_BUDGET, slack: float = 1e-12) -> list:
    """Perturb the backend and compare the utility error with the summed atom errors.

    For each trial the backend is replaced by ``clamp(P + noise)`` with
    noise uniform in ``[-amplitude, amplitude]``.  The per-atom error is
    measured over all entity pairs; a violation is an entity whose utility
    error exceeds the sum over the atoms of its conjunct, maximised over
    conjuncts.  ``slack`` absorbs floating-point rounding of the two sums.
    """
    true_scores = dense_scores(backend_true)
    exact = brute_force_utility(query, backend_true, budget)
    results = []
    for t in range(trials):
        noisy = NoisyBackend(backend_true, amplitude, [seed, t])
        approx = brute_force_utility(query, noisy, budget)
        bounds = [[atom_error_bound(a, true_scores, noisy.scores) for a in d.atoms]
                  for d in query.disjuncts]
        bound = max(sum(b) for b in bounds)
        err = float(value_error(approx, exact).max())
        results.append(ProbeResult(err, bound, bool(err > bound + slack * (1.0 + bound)), bounds))
    return results
