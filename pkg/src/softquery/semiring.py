"""Max-plus semiring arithmetic and sparse matrices with a default value.

Values live in the extended reals encoded as float64, with ``-inf`` as the
semiring zero.  Semiring addition is ``max`` and multiplication is ``+``,
so the multiplicative identity is the numeric ``0.0``.
"""

from __future__ import annotations

import math

import numpy as np

ZERO = -math.inf
ONE = 0.0

#: Joins over at most this many entities are evaluated densely.
DENSE_CUTOFF = 1024


def otimes(a: float, b: float) -> float:
    return a + b


def oplus(a: float, b: float) -> float:
    return a if a >= b else b


def _check_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")


def threshold(p: float, alpha: float) -> float:
    """``p`` if ``p >= alpha`` else the semiring zero."""
    _check_unit("p", p)
    _check_unit("alpha", alpha)
    return p if p >= alpha else ZERO


def atom_value(p: float, alpha: float, beta: float, negated: bool = False) -> float:
    """Value of one grounded soft atom: ``beta * [p]_alpha`` (or ``1 - p``)."""
    if not beta > 0.0 or math.isinf(beta):
        raise ValueError(f"beta must be a positive finite number, got {beta!r}")
    q = 1.0 - p if negated else p
    t = threshold(q, alpha)
    return ZERO if t == ZERO else beta * t


def atom_values(p, alpha: float, beta: float, negated: bool = False) -> np.ndarray:
    """Vectorised :func:`atom_value` over an array of confidences."""
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p if negated else p
    return np.where(q >= alpha, beta * q, ZERO)


def init_state(n: int) -> np.ndarray:
    """Fresh state vector: zero (the multiplicative identity) for every entity."""
    return np.zeros(n, dtype=np.float64)


def nnz(state: np.ndarray) -> int:
    return int(np.count_nonzero(state != ZERO))


def prune_state(state: np.ndarray, delta2: float | None) -> np.ndarray:
    """Drop entries strictly below ``delta2`` to the semiring zero.

    ``delta2=None`` disables pruning and returns the input unchanged.
    """
    if delta2 is None:
        return state
    if delta2 < 0:
        raise ValueError("delta2 must be non-negative")
    out = state.copy()
    out[out < delta2] = ZERO
    return out


class DefaultSparseMatrix:
    """Square matrix stored as exceptions over a uniform default value.

    Layout is compressed-column: the stored rows of column ``o`` are
    ``indices[indptr[o]:indptr[o + 1]]`` in ascending order, with values in
    ``data``.  No stored value equals ``default``.
    """

    __slots__ = ("n", "default", "indptr", "indices", "data", "_transpose")

    def __init__(self, n, default, indptr, indices, data):
        self.n = int(n)
        self.default = float(default)
        self.indptr = indptr
        self.indices = indices
        self.data = data
        self._transpose = None

    @classmethod
    def from_entries(cls, n, rows, cols, values, default=0.0):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape):
            raise ValueError("rows, cols and values must have the same length")
        if np.isnan(values).any() or math.isnan(default):
            raise ValueError("NaN is not a semiring value")
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
            raise IndexError("entry index out of range")
        keys = cols * n + rows
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if keys.size > 1 and np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate matrix entry")
        return cls._from_sorted_keys(n, keys, values[order], default)

    @classmethod
    def _from_sorted_keys(cls, n, keys, values, default):
        keep = values != default
        keys = keys[keep]
        values = values[keep]
        cols = keys // n
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols, minlength=n), out=indptr[1:])
        return cls(n, default, indptr, (keys % n).astype(np.int64), values.astype(np.float64))

    @classmethod
    def from_dense(cls, dense, default):
        dense = np.asarray(dense, dtype=np.float64)
        n = dense.shape[0]
        if dense.shape != (n, n):
            raise ValueError("matrix must be square")
        cols, rows = np.nonzero(dense.T != default)
        return cls.from_entries(n, rows, cols, dense[rows, cols], default)

    @classmethod
    def full(cls, n, default):
        return cls(n, default, np.zeros(n + 1, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64))

    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def nnz(self):
        return int(self.data.size)

    def _keys(self):
        cols = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))
        return cols * self.n + self.indices

    def entries(self):
        """Stored ``(rows, cols, values)`` in column-major order."""
        cols = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))
        return self.indices.copy(), cols, self.data.copy()

    def get(self, row, col):
        lo, hi = self.indptr[col], self.indptr[col + 1]
        i = lo + np.searchsorted(self.indices[lo:hi], row)
        if i < hi and self.indices[i] == row:
            return float(self.data[i])
        return self.default

    def column(self, col):
        """Dense column ``col``."""
        out = np.full(self.n, self.default)
        lo, hi = self.indptr[col], self.indptr[col + 1]
        out[self.indices[lo:hi]] = self.data[lo:hi]
        return out

    def row(self, row):
        """Dense row ``row``."""
        return self.transpose().column(row)

    def diagonal(self):
        out = np.full(self.n, self.default)
        rows, cols, vals = self.entries()
        on_diag = rows == cols
        out[rows[on_diag]] = vals[on_diag]
        return out

    def to_dense(self):
        out = np.full((self.n, self.n), self.default)
        rows, cols, vals = self.entries()
        out[rows, cols] = vals
        return out

    def transpose(self):
        if self._transpose is None:
            rows, cols, vals = self.entries()
            t = DefaultSparseMatrix.from_entries(self.n, cols, rows, vals, self.default)
            t._transpose = self
            self._transpose = t
        return self._transpose

    def map(self, func):
        """Apply an elementwise function to every cell, default included."""
        data = np.asarray(func(self.data), dtype=np.float64)
        default = float(np.asarray(func(np.array([self.default])))[0])
        return DefaultSparseMatrix._from_sorted_keys(self.n, self._keys(), data, default)

    def otimes(self, other):
        """Cellwise semiring product (addition) of two matrices of the same shape."""
        if other.n != self.n:
            raise ValueError("shape mismatch")
        ka, kb = self._keys(), other._keys()
        keys = np.union1d(ka, kb)
        va = np.full(keys.size, self.default)
        vb = np.full(keys.size, other.default)
        va[np.searchsorted(keys, ka)] = self.data
        vb[np.searchsorted(keys, kb)] = other.data
        return DefaultSparseMatrix._from_sorted_keys(
            self.n, keys, va + vb, self.default + other.default)

    def __eq__(self, other):
        if not isinstance(other, DefaultSparseMatrix):
            return NotImplemented
        return (self.n == other.n and self.default == other.default
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.data, other.data))

    __hash__ = None

    def __repr__(self):
        return f"DefaultSparseMatrix(n={self.n}, default={self.default}, nnz={self.nnz})"

    def dump_tsv(self, fp):
        fp.write(f"#default={self.default!r}\n")
        rows, cols, vals = self.entries()
        for r, c, v in zip(rows.tolist(), cols.tolist(), vals.tolist()):
            fp.write(f"{r}\t{c}\t{v!r}\n")


class ShiftedMatrix:
    """Lazy ``(M +_r row_shift) +_c col_shift`` view; never densified eagerly."""

    def __init__(self, matrix, row_shift=None, col_shift=None):
        self.matrix = matrix
        self.row_shift = row_shift
        self.col_shift = col_shift

    def get(self, row, col):
        v = self.matrix.get(row, col)
        if self.row_shift is not None:
            v = v + self.row_shift[row]
        if self.col_shift is not None:
            v = v + self.col_shift[col]
        return v

    def to_dense(self):
        out = self.matrix.to_dense()
        if self.row_shift is not None:
            out = out + self.row_shift[:, None]
        if self.col_shift is not None:
            out = out + self.col_shift[None, :]
        return out

    def column_max(self, dense_cutoff=DENSE_CUTOFF):
        """``max_s`` of every column, through the join kernel."""
        n = self.matrix.n
        rows = self.row_shift if self.row_shift is not None else init_state(n)
        cols = self.col_shift if self.col_shift is not None else init_state(n)
        return max_plus_join(rows, self.matrix, cols, dense_cutoff=dense_cutoff)


def _as_state(b, n):
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (n,):
        raise ValueError(f"vector of length {n} expected, got shape {b.shape}")
    return b


def row_add(m, b):
    """``(M +_r b)(s, o) = M(s, o) + b(s)``, as a lazy view."""
    if isinstance(m, ShiftedMatrix):
        b = _as_state(b, m.matrix.n)
        shift = b if m.row_shift is None else m.row_shift + b
        return ShiftedMatrix(m.matrix, shift, m.col_shift)
    return ShiftedMatrix(m, _as_state(b, m.n), None)


def col_add(m, b):
    """``(M +_c b)(s, o) = M(s, o) + b(o)``, as a lazy view."""
    if isinstance(m, ShiftedMatrix):
        b = _as_state(b, m.matrix.n)
        shift = b if m.col_shift is None else m.col_shift + b
        return ShiftedMatrix(m.matrix, m.row_shift, shift)
    return ShiftedMatrix(m, None, _as_state(b, m.n))


def max_plus_join(c_u, m, c_v, dense_cutoff=DENSE_CUTOFF):
    """``c_v(o) + max_s [c_u(s) + m(s, o)]`` for every ``o``, exact.

    Unstored cells take ``m.default``.  Above ``dense_cutoff`` entities the
    default term of each column is found by scanning ``c_u`` in descending
    order and skipping the rows stored in that column, so the cost is
    ``O(n log n + nnz)`` instead of ``O(n^2)``.
    """
    n = m.n
    c_u = _as_state(c_u, n)
    c_v = _as_state(c_v, n)
    if n <= dense_cutoff:
        inner = (c_u[:, None] + m.to_dense()).max(axis=0)
        return c_v + inner

    counts = np.diff(m.indptr)
    stored = np.full(n, ZERO)
    if m.nnz:
        vals = c_u[m.indices] + m.data
        nonempty = counts > 0
        stored[nonempty] = np.maximum.reduceat(vals, m.indptr[:-1][nonempty])

    fallback = np.full(n, ZERO)
    if m.default != ZERO:
        order = np.argsort(-c_u, kind="stable")
        rank = np.empty(n, dtype=np.int64)
        rank[order] = np.arange(n)
        # first rank (in descending c_u order) not stored in each column
        first_free = counts.copy()
        if m.nnz:
            col_of = np.repeat(np.arange(n, dtype=np.int64), counts)
            stored_rank = rank[m.indices]
            srt = np.lexsort((stored_rank, col_of))
            stored_rank = stored_rank[srt]
            pos = np.arange(m.nnz) - m.indptr[col_of]
            gap = stored_rank != pos
            np.minimum.at(first_free, col_of[gap], pos[gap])
        has_free = first_free < n
        best_row = order[first_free[has_free]]
        fallback[has_free] = c_u[best_row] + m.default
    return c_v + np.maximum(stored, fallback)
