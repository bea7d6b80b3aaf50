"""Preconditioners applied as M⁻¹v: identity and zero fill-in incomplete Cholesky."""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

import numba
import numpy as np

from sparse_core import (
    CsrMatrix,
    DimensionMismatchError,
    has_symmetric_pattern,
    is_exact,
    is_numerically_symmetric,
    max_row_nnz,
    power_iteration,
    transpose,
    write_matrix_market,
)

logger = logging.getLogger(__name__)

ZERO_PIVOT_SUBSTITUTE = 1e-8


class FactorizationError(ValueError):
    """The matrix cannot be factored by IC(0)."""


class IdentityPreconditioner:
    """M = I; application returns a copy of its input."""

    mu_tilde = 1

    def __init__(self, n: int):
        self.n = n

    def apply(self, v: np.ndarray) -> np.ndarray:
        if v.shape != (self.n,):
            raise DimensionMismatchError(f"preconditioner of size {self.n} applied to shape {v.shape}")
        return v.copy()

    def __repr__(self):
        return f"IdentityPreconditioner(n={self.n})"


@numba.njit(cache=True, nogil=True)
def _ic0_rows(offsets, cols, vals, zero_pivot):
    n = offsets.shape[0] - 1
    data = vals.copy()
    flags = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        start = offsets[i]
        diag = offsets[i + 1] - 1
        for p in range(start, diag):
            k = cols[p]
            acc = data[p]
            a = start
            b = offsets[k]
            b_end = offsets[k + 1] - 1
            while a < p and b < b_end:
                if cols[a] == cols[b]:
                    acc -= data[a] * data[b]
                    a += 1
                    b += 1
                elif cols[a] < cols[b]:
                    a += 1
                else:
                    b += 1
            data[p] = acc / data[offsets[k + 1] - 1]
        pivot = data[diag]
        for p in range(start, diag):
            pivot -= data[p] * data[p]
        if pivot <= 0.0:
            flags[i] = True
            pivot = -pivot if pivot < 0.0 else zero_pivot
        data[diag] = math.sqrt(pivot)
    return data, flags


@numba.njit(cache=True, nogil=True)
def _forward_solve(offsets, cols, vals, rhs):
    n = rhs.shape[0]
    y = np.empty(n)
    for i in range(n):
        diag = offsets[i + 1] - 1
        acc = 0.0
        for p in range(offsets[i], diag):
            acc += vals[p] * y[cols[p]]
        y[i] = (rhs[i] - acc) / vals[diag]
    return y


@numba.njit(cache=True, nogil=True)
def _backward_solve(offsets, cols, vals, rhs):
    n = rhs.shape[0]
    z = np.empty(n)
    for i in range(n - 1, -1, -1):
        diag = offsets[i]
        acc = 0.0
        for p in range(diag + 1, offsets[i + 1]):
            acc += vals[p] * z[cols[p]]
        z[i] = (rhs[i] - acc) / vals[diag]
    return z


def _exact_forward_solve(L: CsrMatrix, rhs: np.ndarray) -> np.ndarray:
    y = np.empty(L.n_rows, dtype=object)
    for i in range(L.n_rows):
        diag = L.row_offsets[i + 1] - 1
        acc = Fraction(0)
        for p in range(L.row_offsets[i], diag):
            acc += Fraction(float(L.values[p])) * y[L.col_indices[p]]
        y[i] = (Fraction(rhs[i]) - acc) / Fraction(float(L.values[diag]))
    return y


def _exact_backward_solve(Lt: CsrMatrix, rhs: np.ndarray) -> np.ndarray:
    z = np.empty(Lt.n_rows, dtype=object)
    for i in range(Lt.n_rows - 1, -1, -1):
        diag = Lt.row_offsets[i]
        acc = Fraction(0)
        for p in range(diag + 1, Lt.row_offsets[i + 1]):
            acc += Fraction(float(Lt.values[p])) * z[Lt.col_indices[p]]
        z[i] = (rhs[i] - acc) / Fraction(float(Lt.values[diag]))
    return z


@dataclass(frozen=True, eq=False)
class IccFactor:
    """M = L·Lᵀ with L on the lower-triangular pattern of A."""

    L: CsrMatrix
    pivot_flags: np.ndarray
    Lt: CsrMatrix = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "Lt", transpose(self.L))

    @property
    def n(self) -> int:
        return self.L.n_rows

    @property
    def diag_shift_applied(self) -> bool:
        return bool(np.any(self.pivot_flags))

    @property
    def mu_tilde(self) -> int:
        # proxy for the row nnz of M⁻¹, which is dense for triangular solves
        return 2 * max_row_nnz(self.L) - 1

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Forward solve L·y = v, then backward solve Lᵀ·z = y."""
        if v.shape != (self.n,):
            raise DimensionMismatchError(f"preconditioner of size {self.n} applied to shape {v.shape}")
        if is_exact(v):
            return _exact_backward_solve(self.Lt, _exact_forward_solve(self.L, v))
        rhs = np.ascontiguousarray(v, dtype=np.float64)
        y = _forward_solve(self.L.row_offsets, self.L.col_indices, self.L.values, rhs)
        return _backward_solve(self.Lt.row_offsets, self.Lt.col_indices, self.Lt.values, y)


Preconditioner = Union[IdentityPreconditioner, IccFactor]


def _lower_triangle(A: CsrMatrix) -> CsrMatrix:
    rows = A.row_indices()
    keep = A.col_indices <= rows
    counts = np.bincount(rows[keep], minlength=A.n_rows)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return CsrMatrix(A.n_rows, A.n_cols, offsets, A.col_indices[keep], A.values[keep])


def icc0_factor(A: CsrMatrix) -> IccFactor:
    """Incomplete Cholesky with zero fill-in, computed row by row.

    Non-positive pivots (indefinite input) are replaced by their absolute
    value, or by 1e-8 when exactly zero, and flagged.
    """
    if not A.is_square:
        raise FactorizationError(f"ICC(0) needs a square matrix, got {A.shape}")
    if not has_symmetric_pattern(A):
        raise FactorizationError("ICC(0) needs a symmetric sparsity pattern")
    lower = _lower_triangle(A)
    has_diag = np.diff(lower.row_offsets) > 0
    rows = np.flatnonzero(has_diag)
    has_diag[rows] = lower.col_indices[lower.row_offsets[rows + 1] - 1] == rows
    if not has_diag.all():
        missing = int(np.flatnonzero(~has_diag)[0])
        raise FactorizationError(f"structurally missing diagonal entry in row {missing}")
    if not is_numerically_symmetric(A):
        logger.warning("ICC(0) applied to a matrix with unsymmetric values; only the lower triangle is used")

    data, flags = _ic0_rows(lower.row_offsets, lower.col_indices, lower.values, ZERO_PIVOT_SUBSTITUTE)
    factor = IccFactor(CsrMatrix(lower.n_rows, lower.n_cols, lower.row_offsets, lower.col_indices, data), flags)
    shifted = int(np.count_nonzero(flags))
    if shifted:
        logger.warning(f"ICC(0): {shifted} non-positive pivots replaced")
    logger.info(f"ICC(0) factor: N={factor.n}, nnz(L)={factor.L.nnz}, mu_tilde={factor.mu_tilde}")
    return factor


def apply_preconditioner(M: Preconditioner, v: np.ndarray) -> np.ndarray:
    return M.apply(v)


def estimate_preconditioner_norm(M: Preconditioner, tol: float = 1e-8, max_iters: int = 500) -> float:
    """∥M⁻¹∥₂ from power iteration on v ↦ M⁻ᵀ(M⁻¹v); M is symmetric so M⁻ᵀ = M⁻¹."""
    n = M.n
    eigenvalue = power_iteration(lambda v: M.apply(M.apply(v)), n, tol, max_iters, label="M⁻ᵀM⁻¹")
    return math.sqrt(max(eigenvalue, 0.0))


def export_factor(path, factor: IccFactor):
    write_matrix_market(path, factor.L)
    logger.info(f"Wrote ICC(0) factor to {path}")
