"""Reference evaluator: enumerate every assignment of every variable.

Only pointwise ``backend.confidence`` calls and the scalar
:func:`~softquery.semiring.atom_value` are used; no sparse matrices and no
sparsity thresholds, so it stays independent of the optimised paths.
"""

from __future__ import annotations

import numpy as np

from .errors import BudgetExceededError, QueryValidationError
from .query import FREE_VAR, SoftQuery, _var_order, is_variable
from .semiring import ZERO, atom_value

DEFAULT_BUDGET = 10**6


def _lookup(term, assignment):
    if is_variable(term):
        try:
            return assignment[term]
        except KeyError:
            raise QueryValidationError(f"variable {term!r} is unassigned") from None
    return term


def eval_sentence(conj, assignment, backend) -> float:
    """Sum of the grounded atom values under a total assignment."""
    total = 0.0
    for a in conj.atoms:
        s, o = _lookup(a.head, assignment), _lookup(a.tail, assignment)
        p = backend.confidence(s, a.relation, o)
        total = total + atom_value(p, a.alpha, a.beta, a.negated)
    return total


def _atom_table(atom, variables, backend):
    """Atom value broadcastable over the axes of ``variables``."""
    n = backend.num_entities
    shape = [1] * len(variables)
    h_var, t_var = is_variable(atom.head), is_variable(atom.tail)
    table = np.empty((n if h_var else 1, n if t_var else 1))
    heads = range(n) if h_var else [atom.head]
    tails = range(n) if t_var else [atom.tail]
    for i, s in enumerate(heads):
        for j, o in enumerate(tails):
            p = backend.confidence(s, atom.relation, o)
            table[i, j] = atom_value(p, atom.alpha, atom.beta, atom.negated)
    if h_var and t_var and atom.head == atom.tail:
        table = np.diagonal(table).copy()
        shape[variables.index(atom.head)] = n
        return table.reshape(shape)
    if h_var and t_var:
        hi, ti = variables.index(atom.head), variables.index(atom.tail)
        if hi > ti:
            table = table.T
        shape[hi] = n
        shape[ti] = n
        return table.reshape(shape)
    if h_var:
        shape[variables.index(atom.head)] = n
    elif t_var:
        shape[variables.index(atom.tail)] = n
    else:
        return table.reshape(shape)
    return table.reshape(shape)


def enumerate_utility(variables, atoms, backend, unary=None, scalar=None, budget=DEFAULT_BUDGET):
    """Max over all non-free variables of the summed factors, per free-variable value.

    ``variables`` must start with ``y``.  Factors are added in the order:
    ``scalar``, each ``unary[var]`` (in ``variables`` order), then ``atoms``.
    """
    n = backend.num_entities
    if variables[0] != FREE_VAR:
        raise ValueError("the free variable must come first")
    count = n ** len(variables)
    if count > budget:
        raise BudgetExceededError(f"{n}^{len(variables)} assignments exceed budget {budget}")
    full = (n,) * len(variables)
    total = np.zeros(full)
    if scalar is not None:
        total = total + scalar
    for i, var in enumerate(variables):
        if unary and var in unary:
            shape = [1] * len(variables)
            shape[i] = n
            total = total + np.asarray(unary[var], dtype=np.float64).reshape(shape)
    for a in atoms:
        total = total + _atom_table(a, variables, backend)
    return total.reshape(n, -1).max(axis=1) if len(variables) > 1 else total


def brute_force_conjunct(conj, backend, budget=DEFAULT_BUDGET):
    variables = [FREE_VAR] + sorted(conj.existentials, key=_var_order)
    return enumerate_utility(variables, conj.atoms, backend, budget=budget)


def brute_force_utility(query: SoftQuery, backend, budget=DEFAULT_BUDGET):
    """Utility vector by full enumeration, maximised over disjuncts."""
    n = backend.num_entities
    total = sum(n ** (1 + len(d.existentials)) for d in query.disjuncts)
    if total > budget:
        raise BudgetExceededError(f"{total} assignments exceed budget {budget}")
    out = None
    for conj in query.disjuncts:
        u = brute_force_conjunct(conj, backend, budget)
        out = u if out is None else np.maximum(out, u)
    return out


def brute_force_annotated(g, backend, budget=DEFAULT_BUDGET):
    """Evaluate an annotated graph, treating state vectors as unary factors."""
    variables = [FREE_VAR] + sorted((v for v in g.states if v != FREE_VAR), key=_var_order)
    return enumerate_utility(variables, g.atoms, backend, unary=g.states, scalar=g.scalar, budget=budget)


def literal_utility(query: SoftQuery, backend):
    """Pure-Python loop over assignments; slow, used to check the vectorised oracle."""
    import itertools

    n = backend.num_entities
    out = np.full(n, ZERO)
    for conj in query.disjuncts:
        xs = sorted(conj.existentials, key=_var_order)
        for o in range(n):
            for combo in itertools.product(range(n), repeat=len(xs)):
                asg = dict(zip(xs, combo))
                asg[FREE_VAR] = o
                out[o] = max(out[o], eval_sentence(conj, asg, backend))
    return out
