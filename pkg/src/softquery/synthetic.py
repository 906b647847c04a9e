"""Random toy knowledge graphs and soft queries for cross-checks and experiments.

With ``dyadic=True`` every confidence is a multiple of 1/1024 and every
importance a multiple of 1/16, so all sums formed during answering are
exact in double precision and results do not depend on summation order.
"""

from __future__ import annotations

import numpy as np

from .dataset import QUERY_TYPES, TEMPLATES, _FactIndex, sample_query_skeleton
from .errors import DatasetError
from .kg import UncertainKG
from .query import SoftAtom, SoftConjunctiveQuery, SoftQuery, is_forest

CONF_GRID = 1024
BETA_GRID = 16


def random_confidence(rng, dyadic=True):
    if dyadic:
        return int(rng.integers(1, CONF_GRID + 1)) / CONF_GRID
    return float(rng.uniform(0.001, 1.0))


def random_kg(rng, num_entities=20, num_relations=4, density=0.15, dyadic=True,
              split_probs=(0.7, 0.15, 0.15)) -> UncertainKG:
    """Uniformly random facts over ``e0..`` and ``r0..`` with train/valid/test tags."""
    n, m = num_entities, num_relations
    mask = rng.random((m, n, n)) < density
    # make sure every relation has at least one train fact
    for r in range(m):
        if not mask[r].any():
            mask[r, rng.integers(n), rng.integers(n)] = True
    facts, tags = [], []
    for r, h, t in zip(*np.nonzero(mask)):
        facts.append((f"e{h}", f"r{r}", f"e{t}", random_confidence(rng, dyadic)))
        tags.append(int(rng.choice(3, p=split_probs)))
    for r in range(m):
        rows = [i for i, f in enumerate(facts) if f[1] == f"r{r}"]
        if all(tags[i] != 0 for i in rows):
            tags[rows[0]] = 0
    return UncertainKG.from_facts(facts, tags, entities=[f"e{i}" for i in range(n)],
                                  relations=[f"r{i}" for i in range(m)])


def random_requirement(rng, dyadic=True):
    """``(alpha, beta)``: alpha is zero half of the time, beta lies in (0, 4]."""
    if rng.random() < 0.5:
        alpha = 0.0
    elif dyadic:
        alpha = int(rng.integers(0, CONF_GRID // 2)) / CONF_GRID
    else:
        alpha = float(rng.uniform(0.0, 0.5))
    if dyadic:
        beta = int(rng.integers(1, 4 * BETA_GRID + 1)) / BETA_GRID
    else:
        beta = float(rng.uniform(0.01, 4.0))
    return alpha, beta


def randomize_requirements(query: SoftQuery, rng, dyadic=True) -> SoftQuery:
    def assign(a):
        alpha, beta = random_requirement(rng, dyadic)
        return SoftAtom(a.head, a.relation, a.tail, alpha, beta, a.negated)
    return query.map_atoms(assign)


def _atom(rng, h, t, num_relations, dyadic, neg_prob):
    alpha, beta = random_requirement(rng, dyadic)
    return SoftAtom(h, int(rng.integers(num_relations)), t, alpha, beta, bool(rng.random() < neg_prob))


def _orient(rng, u, v):
    return (u, v) if rng.random() < 0.5 else (v, u)


def random_tree_conjunct(rng, num_entities, num_relations, max_existentials=3, dyadic=True,
                         neg_prob=0.2, extras=True) -> SoftConjunctiveQuery:
    """Random acyclic conjunct: a tree over ``y`` and existentials, plus anchors.

    Extra atoms (constant anchors, parallel edges, self-loops) never
    create a cycle in the variable graph.
    """
    k = int(rng.integers(0, max_existentials + 1))
    nodes = ["y"] + [f"x{i + 1}" for i in range(k)]
    atoms = []
    for i in range(1, len(nodes)):
        parent = nodes[int(rng.integers(i))]
        h, t = _orient(rng, parent, nodes[i])
        atoms.append(_atom(rng, h, t, num_relations, dyadic, neg_prob))
    n_anchor = int(rng.integers(0 if atoms else 1, 3))
    for _ in range(n_anchor):
        var = nodes[int(rng.integers(len(nodes)))]
        c = int(rng.integers(num_entities))
        h, t = _orient(rng, var, c)
        atoms.append(_atom(rng, h, t, num_relations, dyadic, neg_prob))
    if extras and atoms and rng.random() < 0.3:
        base = atoms[int(rng.integers(len(atoms)))]
        atoms.append(_atom(rng, base.head, base.tail, num_relations, dyadic, neg_prob))
    if extras and rng.random() < 0.2:
        var = nodes[int(rng.integers(len(nodes)))]
        atoms.append(_atom(rng, var, var, num_relations, dyadic, neg_prob))
    if extras and rng.random() < 0.1:
        atoms.append(_atom(rng, int(rng.integers(num_entities)), int(rng.integers(num_entities)),
                           num_relations, dyadic, neg_prob))
    order = rng.permutation(len(atoms))
    return SoftConjunctiveQuery(tuple(atoms[i] for i in order), tuple(nodes[1:]))


def random_tree_query(rng, num_entities, num_relations, max_existentials=3, dyadic=True,
                      max_disjuncts=2) -> SoftQuery:
    d = int(rng.integers(1, max_disjuncts + 1))
    return SoftQuery(tuple(random_tree_conjunct(rng, num_entities, num_relations, max_existentials, dyadic)
                           for _ in range(d)))


def random_template_query(rng, kg: UncertainKG, qtype: str, dyadic=True, index=None) -> SoftQuery:
    """A template-shaped bound query with random requirements.

    Falls back to random constants and relations when the facts cannot
    anchor the template (tiny or sparse graphs).
    """
    try:
        skeleton = sample_query_skeleton(index or _FactIndex(kg), qtype, rng, retries=10)
    except DatasetError:
        skeleton = random_template_skeleton(rng, qtype, kg.num_entities, kg.num_relations)
    return randomize_requirements(skeleton, rng, dyadic)


def random_template_skeleton(rng, qtype, num_entities, num_relations) -> SoftQuery:
    disjuncts = []
    for edges in TEMPLATES[qtype]:
        consts = {}
        rels = {}
        atoms = []
        for h, r, t, neg in edges:
            terms = []
            for node in (h, t):
                if node.startswith("c"):
                    node = consts.setdefault(node, int(rng.integers(num_entities)))
                terms.append(node)
            rel = rels.setdefault(r, int(rng.integers(num_relations)))
            atoms.append(SoftAtom(terms[0], rel, terms[1], 0.0, 1.0, neg))
        existentials = tuple(sorted({n for e in edges for n in (e[0], e[2]) if n.startswith("x")}))
        disjuncts.append(SoftConjunctiveQuery(tuple(atoms), existentials))
    return SoftQuery(tuple(disjuncts))


def random_cycle_query(rng, num_entities, num_relations, dyadic=True, neg_prob=0.2) -> SoftQuery:
    """Conjunct whose variable graph holds exactly one cycle of length 3 or 4.

    The cycle passes through ``y``; with some probability a further
    existential hangs off the cycle as a leaf, and a constant anchor is added.
    """
    length = int(rng.integers(3, 5))
    ring = ["y"] + [f"x{i + 1}" for i in range(length - 1)]
    atoms = []
    for i, u in enumerate(ring):
        h, t = _orient(rng, u, ring[(i + 1) % length])
        atoms.append(_atom(rng, h, t, num_relations, dyadic, neg_prob))
    existentials = ring[1:]
    if length == 3 and rng.random() < 0.5:
        leaf = f"x{length}"
        h, t = _orient(rng, ring[int(rng.integers(length))], leaf)
        atoms.append(_atom(rng, h, t, num_relations, dyadic, neg_prob))
        existentials = existentials + [leaf]
    if rng.random() < 0.5:
        var = ring[int(rng.integers(length))]
        h, t = _orient(rng, var, int(rng.integers(num_entities)))
        atoms.append(_atom(rng, h, t, num_relations, dyadic, neg_prob))
    conj = SoftConjunctiveQuery(tuple(atoms), tuple(existentials))
    variables = ["y"] + existentials
    pairs = [(a.head, a.tail) for a in atoms if isinstance(a.head, str) and isinstance(a.tail, str)]
    assert not is_forest(variables, pairs)
    return SoftQuery((conj,))


def mixed_queries(rng, kg: UncertainKG, count: int, dyadic=True, max_existentials=3):
    """Round-robin over the template types, interleaved with random trees."""
    index = _FactIndex(kg)
    out = []
    kinds = list(QUERY_TYPES) + ["tree"]
    for i in range(count):
        kind = kinds[i % len(kinds)]
        if kind == "tree":
            q = random_tree_query(rng, kg.num_entities, kg.num_relations, max_existentials, dyadic)
        else:
            q = random_template_query(rng, kg, kind, dyadic, index)
        out.append((kind, q))
    return out
