"""Compressed sparse row matrices and the products used for graph propagation.

The CSR arrays are owned here; products are dispatched to ``scipy.sparse``
for speed, with the scipy wrapper built lazily and cached per matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sp

NormalizationScheme = Literal["none", "row-stochastic", "symmetric"]


class DimensionError(ValueError):
    """Raised when operand shapes do not agree."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        offsets = np.asarray(self.row_offsets, dtype=np.int64)
        cols = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values)
        if vals.dtype.kind != "f":
            vals = vals.astype(np.float64)
        if offsets.shape != (self.n_rows + 1,):
            raise DimensionError(f"row_offsets must have length {self.n_rows + 1}, got {offsets.shape}")
        if offsets[0] != 0 or offsets[-1] != len(cols) or len(cols) != len(vals):
            raise ValueError("row_offsets inconsistent with stored entries")
        if np.any(np.diff(offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if len(cols) and (cols.min() < 0 or cols.max() >= self.n_cols):
            raise DimensionError("column index out of range")
        object.__setattr__(self, "row_offsets", _readonly(offsets))
        object.__setattr__(self, "col_indices", _readonly(cols))
        object.__setattr__(self, "values", _readonly(vals))

    # construction -------------------------------------------------------

    @classmethod
    def from_coo(cls, rows, cols, values, shape: tuple[int, int], *, binary: bool = False) -> "SparseMatrix":
        """Build from triplets. Duplicates are summed, or collapsed to 1 when ``binary``."""
        n_rows, n_cols = shape
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        if values is None:
            values = np.ones(len(rows))
        values = np.asarray(values).ravel()
        if not (len(rows) == len(cols) == len(values)):
            raise DimensionError("rows, cols and values must have equal length")
        if len(rows) and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
            raise DimensionError(f"index out of range for shape {shape}")
        keys = rows * n_cols + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        if binary:
            vals = np.ones(len(uniq))
        else:
            vals = np.bincount(inverse, weights=values, minlength=len(uniq))
            if values.dtype == np.float32:
                vals = vals.astype(np.float32)
        r = uniq // n_cols if n_cols else uniq
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=n_rows), out=offsets[1:])
        return cls(n_rows, n_cols, offsets, uniq - r * n_cols, vals)

    @classmethod
    def _unchecked(cls, n_rows, n_cols, row_offsets, col_indices, values) -> "SparseMatrix":
        """Wrap arrays already known to be canonical CSR."""
        m = object.__new__(cls)
        for name, val in (("n_rows", n_rows), ("n_cols", n_cols), ("row_offsets", row_offsets),
                          ("col_indices", col_indices), ("values", values)):
            object.__setattr__(m, name, val)
        return m

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = np.asarray(a, dtype=float)
        r, c = np.nonzero(a)
        return cls.from_coo(r, c, a[r, c], a.shape)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @classmethod
    def zeros(cls, n_rows: int, n_cols: int) -> "SparseMatrix":
        return cls(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))

    # views --------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @cached_property
    def row_indices(self) -> np.ndarray:
        return _readonly(np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets)))

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        out[self.row_indices, self.col_indices] = self.values
        return out

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_coo(self.col_indices, self.row_indices, self.values, (self.n_cols, self.n_rows))

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def astype(self, dtype) -> "SparseMatrix":
        return SparseMatrix(self.n_rows, self.n_cols, self.row_offsets, self.col_indices, self.values.astype(dtype))

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


# kernels -----------------------------------------------------------------


def matvec(m: SparseMatrix, v: np.ndarray) -> np.ndarray:
    """Sparse times dense; ``v`` is ``n_cols`` or ``n_cols x d``."""
    v = np.asarray(v)
    if v.shape[0] != m.n_cols:
        raise DimensionError(f"cannot multiply {m.shape} by {v.shape}")
    return np.asarray(m._csr @ v)


def rmatvec(m: SparseMatrix, v: np.ndarray) -> np.ndarray:
    """Transposed product ``m.T @ v`` without building the transpose."""
    v = np.asarray(v)
    if v.shape[0] != m.n_rows:
        raise DimensionError(f"cannot multiply {m.shape[::-1]} by {v.shape}")
    return np.asarray(m._csr.T @ v)


def chain_matvec(chain: Sequence[SparseMatrix], v: np.ndarray) -> np.ndarray:
    """Evaluate ``chain[0] @ chain[1] @ ... @ v`` right to left as nested matvecs."""
    if len(chain) == 0:
        raise ValueError("chain must contain at least one matrix")
    for left, right in zip(chain[:-1], chain[1:]):
        if left.n_cols != right.n_rows:
            raise DimensionError(f"incompatible chain shapes {left.shape} and {right.shape}")
    out = v
    for m in reversed(chain):
        out = matvec(m, out)
    return out


def normalize(m: SparseMatrix, scheme: NormalizationScheme = "symmetric") -> SparseMatrix:
    """Degree normalization. Rows with zero degree stay empty."""
    if scheme == "none":
        return m
    # empty weights make bincount return integers
    deg = np.bincount(m.row_indices, weights=m.values, minlength=m.n_rows).astype(np.float64, copy=False)
    if scheme == "row-stochastic":
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg != 0)
        return row_scale(m, inv)
    if scheme == "symmetric":
        if m.n_rows != m.n_cols:
            raise DimensionError("symmetric normalization requires a square matrix")
        t = m.transpose()
        if not (np.array_equal(t.row_offsets, m.row_offsets) and np.array_equal(t.col_indices, m.col_indices)):
            raise ValueError("symmetric normalization requires a symmetric sparsity pattern")
        inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
        vals = m.values * inv_sqrt[m.row_indices] * inv_sqrt[m.col_indices]
        return SparseMatrix(m.n_rows, m.n_cols, m.row_offsets, m.col_indices, vals)
    raise ValueError(f"unknown normalization scheme {scheme!r}")


def row_scale(m: SparseMatrix, s: np.ndarray) -> SparseMatrix:
    """``diag(s) @ m`` with the sparsity pattern kept as is."""
    s = np.asarray(s)
    if s.shape != (m.n_rows,):
        raise DimensionError(f"scale vector of shape {s.shape} does not match {m.n_rows} rows")
    return SparseMatrix._unchecked(m.n_rows, m.n_cols, m.row_offsets, m.col_indices, m.values * s[m.row_indices])


def col_scale(m: SparseMatrix, s: np.ndarray) -> SparseMatrix:
    """``m @ diag(s)``."""
    s = np.asarray(s)
    if s.shape != (m.n_cols,):
        raise DimensionError(f"scale vector of shape {s.shape} does not match {m.n_cols} columns")
    return SparseMatrix._unchecked(m.n_rows, m.n_cols, m.row_offsets, m.col_indices, m.values * s[m.col_indices])


def sparse_add(a: SparseMatrix, b: SparseMatrix, wa: float = 1.0, wb: float = 1.0) -> SparseMatrix:
    """``wa * a + wb * b`` over the union of both patterns (zeros are kept)."""
    if a.shape != b.shape:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    rows = np.concatenate([a.row_indices, b.row_indices])
    cols = np.concatenate([a.col_indices, b.col_indices])
    vals = np.concatenate([wa * a.values, wb * b.values])
    return SparseMatrix.from_coo(rows, cols, vals, a.shape)


class UnionLayout:
    """Shared union pattern of same-shape matrices, for repeated weighted sums."""

    def __init__(self, mats: Sequence[SparseMatrix]):
        shape = mats[0].shape
        if any(m.shape != shape for m in mats):
            raise DimensionError("all matrices must share one shape")
        self.mats = list(mats)
        rows = np.concatenate([m.row_indices for m in mats])
        cols = np.concatenate([m.col_indices for m in mats])
        self.pattern = SparseMatrix.from_coo(rows, cols, np.zeros(len(rows)), shape)
        keys = self.pattern.row_indices * shape[1] + self.pattern.col_indices
        self.positions = np.concatenate([np.searchsorted(keys, m.row_indices * shape[1] + m.col_indices) for m in mats])
        self._pattern_csr = self.pattern._csr

    def combine(self, row_weights=None, col_weights=None) -> SparseMatrix:
        """``sum_j diag(row_weights[:, j]) @ mats[j] @ diag(col_weights[:, j])``."""
        parts = []
        for j, m in enumerate(self.mats):
            v = m.values
            if row_weights is not None:
                v = v * row_weights[m.row_indices, j]
            if col_weights is not None:
                v = v * col_weights[m.col_indices, j]
            parts.append(v)
        p = self.pattern
        vals = np.bincount(self.positions, weights=np.concatenate(parts), minlength=p.nnz).astype(parts[0].dtype, copy=False)
        out = SparseMatrix._unchecked(p.n_rows, p.n_cols, p.row_offsets, p.col_indices, vals)
        # share the validated scipy index arrays instead of re-checking them
        out.__dict__["_csr"] = self._pattern_csr._with_data(vals, copy=False)
        return out
