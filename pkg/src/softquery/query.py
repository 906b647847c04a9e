"""Soft query data types with their text and JSON forms and query graphs.

Grammar (DNF is enforced syntactically)::

    query     := disjunct ( "|" disjunct )* ;
    disjunct  := [ "EXISTS" var ("," var)* "." ] atom ( "&" atom )* ;
    atom      := [ "!" ] "(" term "," ident "," term "," number "," number ")" ;
    term      := ident | "y" | "x" digits ;

Identifiers are bare runs of characters other than whitespace and
``,()&|!"``; anything else can be written as a JSON string literal.
Constants and relations are kept as names until :func:`bind` maps them to
KG indices.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace

from .errors import QuerySyntaxError, QueryValidationError

FREE_VAR = "y"
_EXIST_RE = re.compile(r"x\d+\Z")
_BARE_IDENT_RE = re.compile(r'[^\s,()&|!"]+')


def is_variable(term) -> bool:
    return isinstance(term, str) and (term == FREE_VAR or _EXIST_RE.match(term) is not None)


def is_existential(term) -> bool:
    return isinstance(term, str) and _EXIST_RE.match(term) is not None


def _var_order(v):
    return (0, 0) if v == FREE_VAR else (1, int(v[1:]))


@dataclass(frozen=True)
class SoftAtom:
    head: object  # variable or entity name, or a bound entity index
    relation: object
    tail: object
    alpha: float = 0.0
    beta: float = 1.0
    negated: bool = False

    def __post_init__(self):
        if not (isinstance(self.alpha, (int, float)) and 0.0 <= self.alpha <= 1.0):
            raise QueryValidationError(f"alpha must lie in [0, 1], got {self.alpha!r}")
        if not (isinstance(self.beta, (int, float)) and self.beta > 0.0 and math.isfinite(self.beta)):
            raise QueryValidationError(f"beta must be positive and finite, got {self.beta!r}")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))

    def terms(self):
        return (self.head, self.tail)

    def variables(self):
        return [t for t in (self.head, self.tail) if is_variable(t)]


@dataclass(frozen=True)
class SoftConjunctiveQuery:
    atoms: tuple
    existentials: tuple = ()
    free_variable: str = FREE_VAR

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "existentials", tuple(self.existentials))
        if self.free_variable != FREE_VAR:
            raise QueryValidationError("the free variable must be named 'y'")
        if not self.atoms:
            raise QueryValidationError("a conjunct needs at least one atom")
        declared = set(self.existentials)
        if len(declared) != len(self.existentials):
            raise QueryValidationError("existential declared twice")
        for v in self.existentials:
            if not is_existential(v):
                raise QueryValidationError(f"{v!r} is not an existential variable name (x<digits>)")
        used = set()
        for atom in self.atoms:
            for v in atom.variables():
                if v != FREE_VAR and v not in declared:
                    raise QueryValidationError(f"undeclared variable {v!r}")
                used.add(v)
        if FREE_VAR not in used:
            raise QueryValidationError("free variable 'y' does not occur in the conjunct")

    def variables(self):
        return [FREE_VAR] + sorted(self.existentials, key=_var_order)


@dataclass(frozen=True)
class SoftQuery:
    disjuncts: tuple

    def __post_init__(self):
        object.__setattr__(self, "disjuncts", tuple(self.disjuncts))
        if not self.disjuncts:
            raise QueryValidationError("a query needs at least one disjunct")

    @classmethod
    def of(cls, *atoms, existentials=()):
        """Single-disjunct convenience constructor."""
        return cls((SoftConjunctiveQuery(atoms, existentials),))

    def atoms(self):
        return [a for d in self.disjuncts for a in d.atoms]

    def map_atoms(self, func):
        return SoftQuery(tuple(
            replace(d, atoms=tuple(func(a) for a in d.atoms)) for d in self.disjuncts))


# --------------------------------------------------------------------------
# DSL
# --------------------------------------------------------------------------

class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def error(self, message):
        raise QuerySyntaxError(message, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self, token):
        self.skip_ws()
        return self.text.startswith(token, self.pos)

    def expect(self, token):
        if not self.peek(token):
            found = self.text[self.pos:self.pos + 10] or "end of input"
            self.error(f"expected {token!r}, found {found!r}")
        self.pos += len(token)

    def keyword(self, word):
        self.skip_ws()
        end = self.pos + len(word)
        if self.text.startswith(word, self.pos) and (end == len(self.text) or self.text[end].isspace()):
            self.pos = end
            return True
        return False

    def ident(self):
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] == '"':
            try:
                value, end = json.JSONDecoder().raw_decode(self.text, self.pos)
            except json.JSONDecodeError:
                self.error("unterminated string literal")
            self.pos = end
            return value, True
        m = _BARE_IDENT_RE.match(self.text, self.pos)
        if not m:
            self.error("expected identifier")
        self.pos = m.end()
        return m.group(0), False

    def number(self):
        start = self.pos
        text, quoted = self.ident()
        if quoted:
            self.pos = start
            self.error("expected number")
        try:
            value = float(text)
        except ValueError:
            self.pos = start
            self.error(f"expected number, found {text!r}")
        if not math.isfinite(value):
            self.pos = start
            self.error("numbers must be finite")
        return value

    def var(self):
        start = self.pos
        name, quoted = self.ident()
        if name.endswith(".") and not quoted:
            # "EXISTS x1." with the dot glued on
            name = name[:-1]
            self.pos -= 1
        if quoted or not is_existential(name):
            self.pos = start
            self.error(f"expected existential variable x<digits>, found {name!r}")
        return name

    def term(self):
        name, quoted = self.ident()
        if quoted and is_variable(name):
            self.error(f"constant {name!r} collides with a variable name")
        return name

    def atom(self):
        negated = False
        if self.peek("!"):
            self.pos += 1
            negated = True
        self.expect("(")
        start = self.pos
        h = self.term()
        self.expect(",")
        r, _ = self.ident()
        self.expect(",")
        t = self.term()
        self.expect(",")
        alpha = self.number()
        self.expect(",")
        beta = self.number()
        self.expect(")")
        try:
            return SoftAtom(h, r, t, alpha, beta, negated)
        except QueryValidationError as exc:
            raise QueryValidationError(f"{exc} (atom at position {start})") from None

    def disjunct(self):
        existentials = []
        if self.keyword("EXISTS"):
            existentials.append(self.var())
            while self.peek(","):
                self.pos += 1
                existentials.append(self.var())
            self.expect(".")
        atoms = [self.atom()]
        while self.peek("&"):
            self.pos += 1
            atoms.append(self.atom())
        return SoftConjunctiveQuery(tuple(atoms), tuple(existentials))

    def query(self):
        disjuncts = [self.disjunct()]
        while self.peek("|"):
            self.pos += 1
            disjuncts.append(self.disjunct())
        self.skip_ws()
        if self.pos != len(self.text):
            self.error(f"unexpected trailing input {self.text[self.pos:self.pos + 10]!r}")
        return SoftQuery(tuple(disjuncts))


def parse_query(text: str) -> SoftQuery:
    """Parse DSL text (or canonical JSON text) into a :class:`SoftQuery`."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return query_from_json(json.loads(text))
    return _Parser(text).query()


def _fmt_name(name):
    if isinstance(name, int):
        name = str(name)
    if _BARE_IDENT_RE.fullmatch(name) and name != "EXISTS" and not name.endswith("."):
        return name
    return json.dumps(name)


def _fmt_term(term):
    if is_variable(term):
        return term
    return _fmt_name(term)


def format_atom(atom: SoftAtom) -> str:
    body = (f"({_fmt_term(atom.head)}, {_fmt_name(atom.relation)}, {_fmt_term(atom.tail)}, "
            f"{atom.alpha!r}, {atom.beta!r})")
    return "!" + body if atom.negated else body


def format_query(query: SoftQuery) -> str:
    """Canonical DSL text; ``parse_query(format_query(q)) == q``."""
    parts = []
    for d in query.disjuncts:
        atoms = " & ".join(format_atom(a) for a in d.atoms)
        if d.existentials:
            atoms = f"EXISTS {', '.join(d.existentials)} . {atoms}"
        parts.append(atoms)
    return " | ".join(parts)


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------

def query_to_json(query: SoftQuery) -> dict:
    return {"disjuncts": [
        {"existentials": list(d.existentials),
         "atoms": [{"h": a.head, "r": a.relation, "t": a.tail, "alpha": a.alpha,
                    "beta": a.beta, "neg": a.negated} for a in d.atoms]}
        for d in query.disjuncts]}


def query_from_json(obj) -> SoftQuery:
    if isinstance(obj, str):
        obj = json.loads(obj)
    try:
        disjuncts = []
        for d in obj["disjuncts"]:
            atoms = tuple(SoftAtom(a["h"], a["r"], a["t"], a.get("alpha", 0.0), a.get("beta", 1.0),
                                   bool(a.get("neg", False))) for a in d["atoms"])
            disjuncts.append(SoftConjunctiveQuery(atoms, tuple(d.get("existentials", ()))))
    except (KeyError, TypeError) as exc:
        raise QueryValidationError(f"malformed query JSON: {exc!r}") from None
    return SoftQuery(tuple(disjuncts))


# --------------------------------------------------------------------------
# binding names to KG indices
# --------------------------------------------------------------------------

def bind(query: SoftQuery, kg) -> SoftQuery:
    """Replace constant and relation names by the KG's integer indices."""

    def term(t):
        if is_variable(t) or isinstance(t, int):
            return t
        try:
            return kg.entity_index[t]
        except KeyError:
            raise QueryValidationError(f"unknown entity {t!r}") from None

    def rel(r):
        if isinstance(r, int):
            return r
        try:
            return kg.relation_index[r]
        except KeyError:
            raise QueryValidationError(f"unknown relation {r!r}") from None

    return query.map_atoms(lambda a: replace(a, head=term(a.head), relation=rel(a.relation), tail=term(a.tail)))


def unbind(query: SoftQuery, kg) -> SoftQuery:
    """Inverse of :func:`bind`."""

    def term(t):
        return kg.entities[t] if isinstance(t, int) else t

    def rel(r):
        return kg.relations[r] if isinstance(r, int) else r

    return query.map_atoms(lambda a: replace(a, head=term(a.head), relation=rel(a.relation), tail=term(a.tail)))


# --------------------------------------------------------------------------
# query graphs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    kind: str  # "constant" | "existential" | "free"
    name: object


@dataclass(frozen=True)
class Edge:
    head: Node
    relation: object
    tail: Node
    alpha: float
    beta: float
    negated: bool

    @property
    def atom(self):
        return SoftAtom(self.head.name, self.relation, self.tail.name, self.alpha, self.beta, self.negated)


def _node(term):
    if term == FREE_VAR:
        return Node("free", term)
    if is_existential(term):
        return Node("existential", term)
    return Node("constant", term)


@dataclass(frozen=True)
class SoftQueryGraph:
    nodes: frozenset
    edges: tuple

    def neighbors(self, node):
        out = set()
        for e in self.edges:
            if e.head == node and e.tail != node:
                out.add(e.tail)
            elif e.tail == node and e.head != node:
                out.add(e.head)
        return out

    def leaves(self):
        return [n for n in self.nodes if len(self.neighbors(n)) == 1]

    def degree(self, node):
        return sum((e.head == node) + (e.tail == node) for e in self.edges)


def build_query_graph(conj: SoftConjunctiveQuery) -> SoftQueryGraph:
    """One node per distinct term, one edge per atom (parallel edges kept)."""
    nodes = set()
    edges = []
    for a in conj.atoms:
        h, t = _node(a.head), _node(a.tail)
        nodes.update((h, t))
        edges.append(Edge(h, a.relation, t, a.alpha, a.beta, a.negated))
    return SoftQueryGraph(frozenset(nodes), tuple(edges))


@dataclass(frozen=True)
class GraphDiagnostics:
    acyclic: bool
    connected: bool
    has_self_loop: bool
    free_present: bool


def _simple_adjacency(nodes, pairs):
    adj = {n: set() for n in nodes}
    for a, b in pairs:
        if a != b:
            adj[a].add(b)
            adj[b].add(a)
    return adj


def is_forest(nodes, pairs) -> bool:
    """True when the simple graph (parallel edges and loops collapsed) has no cycle."""
    adj = _simple_adjacency(nodes, pairs)
    n_edges = sum(len(v) for v in adj.values()) // 2
    return n_edges == len(adj) - len(_components(adj))


def _components(adj):
    seen = set()
    comps = []
    for start in sorted(adj, key=repr):
        if start in seen:
            continue
        stack = [start]
        comp = []
        seen.add(start)
        while stack:
            n = stack.pop()
            comp.append(n)
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        comps.append(comp)
    return comps


def validate(graph: SoftQueryGraph) -> GraphDiagnostics:
    pairs = [(e.head, e.tail) for e in graph.edges]
    adj = _simple_adjacency(graph.nodes, pairs)
    return GraphDiagnostics(
        acyclic=is_forest(graph.nodes, pairs),
        connected=len(_components(adj)) <= 1,
        has_self_loop=any(e.head == e.tail for e in graph.edges),
        free_present=any(n.kind == "free" for n in graph.nodes),
    )
