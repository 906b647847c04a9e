"""Query answering by equivalent graph transformations.

A conjunct is turned into an annotated graph (one state vector per
variable, initialised to zeros) and shrunk step by step:
constant nodes and self-loops are folded into state vectors, leaves are
joined into their neighbour, and cycles are broken by enumerating one
existential variable.  The state vector of ``y`` plus the scalar
accumulator is the utility vector.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .errors import BudgetExceededError, NoCycleError, NoLeafError, QueryValidationError
from .query import FREE_VAR, SoftConjunctiveQuery, SoftQuery, _var_order, format_atom, is_forest, is_variable
from .semiring import (DENSE_CUTOFF, ZERO, atom_values, init_state, max_plus_join, nnz,
                       prune_state)


@dataclass(frozen=True)
class InferenceConfig:
    delta1: float | None = None
    delta2: float | None = None
    debias: float = 0.0
    cycle_budget: int = 10**6
    dense_cutoff: int = DENSE_CUTOFF


@dataclass
class AnnotatedQueryGraph:
    states: dict  # variable name -> state vector
    atoms: list  # remaining bound SoftAtoms
    scalar: float = 0.0
    enumerated: int = 0

    @property
    def num_entities(self):
        return len(self.states[FREE_VAR])

    def copy(self):
        return AnnotatedQueryGraph({k: v.copy() for k, v in self.states.items()},
                                   list(self.atoms), self.scalar, self.enumerated)

    def variable_pairs(self):
        return [(a.head, a.tail) for a in self.atoms if is_variable(a.head) and is_variable(a.tail)]

    def neighbors(self, var):
        out = set()
        for a in self.atoms:
            if a.head == var and a.tail != var:
                out.add(a.tail)
            elif a.tail == var and a.head != var:
                out.add(a.head)
        return out


def _check_bound(conj):
    for a in conj.atoms:
        for t in (a.head, a.tail):
            if not (is_variable(t) or isinstance(t, (int, np.integer))):
                raise QueryValidationError(f"constant {t!r} is not bound to an entity index")
        if not isinstance(a.relation, (int, np.integer)):
            raise QueryValidationError(f"relation {a.relation!r} is not bound to an index")


def annotate(conj: SoftConjunctiveQuery, num_entities: int) -> AnnotatedQueryGraph:
    """Initial annotated graph; existentials that occur in no atom are dropped."""
    _check_bound(conj)
    used = {v for a in conj.atoms for v in a.variables()}
    states = {v: init_state(num_entities) for v in conj.variables() if v in used}
    return AnnotatedQueryGraph(states, list(conj.atoms))


def _emit(trace, **event):
    if trace is not None:
        trace.append(event)


def _raw(backend, r, config):
    return backend.relation_matrix(int(r), config.delta1)


def atom_matrix(backend, atom, config=InferenceConfig()):
    """Atom values over all ``(head, tail)`` entity pairs, as a sparse matrix."""
    raw = _raw(backend, atom.relation, config)
    return raw.map(lambda v: atom_values(v, atom.alpha, atom.beta, atom.negated))


def remove_constant_nodes(g, backend, config=InferenceConfig(), trace=None):
    """Fold every atom touching a constant into its variable's state (or the scalar)."""
    g = g.copy()
    keep = []
    for a in g.atoms:
        h_var, t_var = is_variable(a.head), is_variable(a.tail)
        if h_var and t_var:
            keep.append(a)
            continue
        raw = _raw(backend, a.relation, config)
        if not h_var and not t_var:
            v = atom_values(raw.get(int(a.head), int(a.tail)), a.alpha, a.beta, a.negated)
            g.scalar = g.scalar + float(v)
            _emit(trace, step="constant", atom=format_atom(a), node=None, scalar=g.scalar)
            continue
        if h_var:
            var, vec = a.head, raw.column(int(a.tail))
        else:
            var, vec = a.tail, raw.row(int(a.head))
        g.states[var] = g.states[var] + atom_values(vec, a.alpha, a.beta, a.negated)
        _emit(trace, step="constant", atom=format_atom(a), node=var, nnz=nnz(g.states[var]))
    g.atoms = keep
    return g


def remove_self_loops(g, backend, config=InferenceConfig(), trace=None):
    """Fold ``(z, r, z)`` atoms into the state of ``z`` through the relation's diagonal."""
    g = g.copy()
    keep = []
    for a in g.atoms:
        if a.head != a.tail:
            keep.append(a)
            continue
        diag = _raw(backend, a.relation, config).diagonal()
        g.states[a.head] = g.states[a.head] + atom_values(diag, a.alpha, a.beta, a.negated)
        _emit(trace, step="self-loop", atom=format_atom(a), node=a.head, nnz=nnz(g.states[a.head]))
    g.atoms = keep
    return g


def remove_isolated_node(g, var, trace=None):
    """An existential with no remaining atoms contributes the maximum of its state."""
    if var == FREE_VAR or g.neighbors(var) or any(var in (a.head, a.tail) for a in g.atoms):
        raise ValueError(f"{var} is not an isolated existential")
    g = g.copy()
    state = g.states.pop(var)
    g.scalar = g.scalar + float(state.max())
    _emit(trace, step="isolated", node=var, scalar=g.scalar)
    return g


def pair_matrix(g, backend, u, v, config=InferenceConfig()):
    """Cellwise sum of all atoms between ``u`` and ``v``, rows indexed by ``u``."""
    combined = None
    for a in g.atoms:
        if (a.head, a.tail) == (u, v):
            m = atom_matrix(backend, a, config)
        elif (a.head, a.tail) == (v, u):
            m = atom_matrix(backend, a, config).transpose()
        else:
            continue
        combined = m if combined is None else combined.otimes(m)
    return combined


def find_leaf(g):
    """Existential leaf with the fewest live entries; ``None`` if there is none."""
    best = None
    for var in g.states:
        if var == FREE_VAR or len(g.neighbors(var)) != 1:
            continue
        key = (nnz(g.states[var]), _var_order(var))
        if best is None or key < best[0]:
            best = (key, var)
    return None if best is None else best[1]


def remove_leaf_node(g, backend, config=InferenceConfig(), trace=None, leaf=None):
    """Join an existential leaf ``u`` into its only neighbour ``v``.

    ``state[v](o) += max_s [prune(state[u])(s) + m(s, o)]`` where ``m`` combines
    every parallel atom between ``u`` and ``v``.
    """
    u = find_leaf(g) if leaf is None else leaf
    if u is None:
        raise NoLeafError("no existential leaf node")
    (v,) = g.neighbors(u)
    g2 = g.copy()
    m = pair_matrix(g2, backend, u, v, config)
    c_u = prune_state(g2.states.pop(u), config.delta2)
    if trace is not None and config.delta2 is not None:
        orig = g.states[u]
        lost = (orig != ZERO) & (c_u == ZERO)
        if lost.any():
            contrib = float((orig[lost][:, None] + m.to_dense()[lost]).max())
            _emit(trace, step="prune", node=u, pruned=int(lost.sum()), max_contribution=contrib)
    g2.states[v] = max_plus_join(c_u, m, g2.states[v], dense_cutoff=config.dense_cutoff)
    removed = [a for a in g2.atoms if {a.head, a.tail} == {u, v}]
    g2.atoms = [a for a in g2.atoms if {a.head, a.tail} != {u, v}]
    _emit(trace, step="leaf", node=u, into=v, atoms=[format_atom(a) for a in removed],
          nnz=nnz(g2.states[v]))
    return g2


def _shortest_cycle_through(adj, x):
    best = math.inf
    for w in adj[x]:
        dist = {w: 0}
        queue = deque([w])
        while queue:
            n = queue.popleft()
            for m in adj[n]:
                if (n == w and m == x) or m in dist:
                    continue
                dist[m] = dist[n] + 1
                queue.append(m)
        if x in dist:
            best = min(best, dist[x] + 1)
    return best


def cycle_node(g):
    """Lowest-index existential among those on a shortest cycle."""
    adj = {v: set() for v in g.states}
    for a in g.atoms:
        if a.head != a.tail:
            adj[a.head].add(a.tail)
            adj[a.tail].add(a.head)
    best = None
    for var in g.states:
        if var == FREE_VAR:
            continue
        length = _shortest_cycle_through(adj, var)
        if length == math.inf:
            continue
        key = (length, _var_order(var))
        if best is None or key < best[0]:
            best = (key, var)
    return None if best is None else best[1]


def substitute(g, var, entity):
    """Treat existential ``var`` as the constant ``entity`` with offset ``state[var][entity]``."""
    g2 = g.copy()
    state = g2.states.pop(var)
    g2.scalar = g2.scalar + float(state[entity])

    def sub(t):
        return entity if t == var else t

    g2.atoms = [replace(a, head=sub(a.head), tail=sub(a.tail)) for a in g2.atoms]
    return g2


def enumerate_cycle(g, backend, config=InferenceConfig(), trace=None):
    """Break a cycle by enumerating one existential; returns the utility vector."""
    if is_forest(list(g.states), g.variable_pairs()):
        raise NoCycleError("no cycle in the query graph")
    n = g.num_entities
    depth = g.enumerated + 1
    if n ** depth > config.cycle_budget:
        raise BudgetExceededError(
            f"cycle enumeration needs {n}^{depth} assignments, budget is {config.cycle_budget}")
    x = cycle_node(g)
    _emit(trace, step="enumerate", node=x, candidates=nnz(g.states[x]))
    out = np.full(n, ZERO)
    for s in np.nonzero(g.states[x] != ZERO)[0].tolist():
        g2 = substitute(g, x, s)
        g2.enumerated = depth
        g2 = remove_constant_nodes(g2, backend, config)
        g2 = remove_self_loops(g2, backend, config)
        out = np.maximum(out, _shrink(g2, backend, config, None))
    return out


def _shrink(g, backend, config, trace):
    while True:
        if len(g.states) == 1:
            return g.states[FREE_VAR] + g.scalar
        isolated = [v for v in g.states if v != FREE_VAR and not g.neighbors(v)]
        if isolated:
            g = remove_isolated_node(g, min(isolated, key=_var_order), trace)
            continue
        if find_leaf(g) is not None:
            g = remove_leaf_node(g, backend, config, trace)
            continue
        return enumerate_cycle(g, backend, config, trace)


def answer_conjunctive(conj: SoftConjunctiveQuery, backend, config=InferenceConfig(), trace=None):
    """Utility vector of one bound conjunct."""
    g = annotate(conj, backend.num_entities)
    g = remove_constant_nodes(g, backend, config, trace)
    g = remove_self_loops(g, backend, config, trace)
    return _shrink(g, backend, config, trace)


def answer_query(query: SoftQuery, backend, config=InferenceConfig(), trace=None):
    """Elementwise max of the conjunct utility vectors."""
    if config.debias:
        from .calibration import DebiasConfig, debias_query
        query = debias_query(query, DebiasConfig(config.debias))
    out = None
    for conj in query.disjuncts:
        u = answer_conjunctive(conj, backend, config, trace)
        out = u if out is None else np.maximum(out, u)
    return out


def rank_answers(u):
    """``(entity, value)`` for finite entries, best first, ties by index."""
    u = np.asarray(u)
    idx = np.nonzero(u != ZERO)[0]
    order = np.lexsort((idx, -u[idx]))
    return [(int(i), float(u[i])) for i in idx[order]]
