"""Sparse CSR kernels with a fixed floating-point operation order.

All reductions accumulate sequentially, left to right, in binary64 with no
reassociation and no fused multiply-add, so repeated runs reproduce every
rounding error bitwise. Object arrays of ``fractions.Fraction`` run through the
same loops in exact arithmetic, which is what the rational replay relies on.

Also home of the stencil generators for the five test problems TP1..TP5.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Tuple

import numba
import numpy as np
import numpy.typing as npt
import scipy.io
import scipy.sparse

logger = logging.getLogger(__name__)

UNIT_ROUNDOFF = 2.0 ** -53

DenseVector = npt.NDArray[np.float64]

POWER_ITERATION_TOL = 1e-8
POWER_ITERATION_MAX_ITERS = 500


class DimensionMismatchError(ValueError):
    """Operand sizes do not agree."""


class InvalidProblemError(ValueError):
    """A stencil problem specification cannot be built."""


class PowerIterationWarning(RuntimeWarning):
    """Power iteration hit its iteration cap before meeting the tolerance."""


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix with binary64 values."""

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", np.ascontiguousarray(self.row_offsets, dtype=np.int64))
        object.__setattr__(self, "col_indices", np.ascontiguousarray(self.col_indices, dtype=np.int64))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float64))
        self._validate()

    def _validate(self):
        offsets = self.row_offsets
        if offsets.shape != (self.n_rows + 1,):
            raise ValueError(f"row_offsets must have length {self.n_rows + 1}, got {offsets.shape[0]}")
        if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
            raise ValueError("row_offsets must start at 0 and be non-decreasing")
        nnz = int(offsets[-1])
        if self.col_indices.shape != (nnz,) or self.values.shape != (nnz,):
            raise ValueError(f"expected {nnz} column indices and values")
        if nnz == 0:
            return
        if self.col_indices.min() < 0 or self.col_indices.max() >= self.n_cols:
            raise ValueError("column index out of range")
        rows = np.repeat(np.arange(self.n_rows), np.diff(offsets))
        same_row = rows[1:] == rows[:-1]
        if np.any(same_row & (self.col_indices[1:] <= self.col_indices[:-1])):
            raise ValueError("column indices must be strictly increasing within each row")

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def is_square(self) -> bool:
        return self.n_rows == self.n_cols

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_offsets))

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix(
            (self.values.copy(), self.col_indices.copy(), self.row_offsets.copy()),
            shape=self.shape,
        )

    @classmethod
    def from_scipy(cls, matrix) -> "CsrMatrix":
        csr = scipy.sparse.csr_matrix(matrix, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data)

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))


def to_dense(A: CsrMatrix) -> np.ndarray:
    dense = np.zeros(A.shape)
    dense[A.row_indices(), A.col_indices] = A.values
    return dense


def transpose(A: CsrMatrix) -> CsrMatrix:
    """Aᵀ with column indices sorted within each row."""
    rows = A.row_indices()
    order = np.lexsort((rows, A.col_indices))
    counts = np.bincount(A.col_indices, minlength=A.n_cols)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return CsrMatrix(A.n_cols, A.n_rows, offsets, rows[order], A.values[order])


def has_symmetric_pattern(A: CsrMatrix) -> bool:
    if not A.is_square:
        return False
    At = transpose(A)
    return bool(np.array_equal(A.row_offsets, At.row_offsets) and np.array_equal(A.col_indices, At.col_indices))


def is_numerically_symmetric(A: CsrMatrix) -> bool:
    """Bitwise symmetry of the stored values."""
    if not has_symmetric_pattern(A):
        return False
    return bool(np.array_equal(A.values, transpose(A).values))


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _csr_matvec(row_offsets, col_indices, values, v, out):
    for i in range(out.shape[0]):
        acc = 0.0
        for k in range(row_offsets[i], row_offsets[i + 1]):
            acc += values[k] * v[col_indices[k]]
        out[i] = acc
    return out


@numba.njit(cache=True, nogil=True)
def _sequential_dot(u, v):
    acc = 0.0
    for i in range(u.shape[0]):
        acc += u[i] * v[i]
    return acc


def is_exact(v: np.ndarray) -> bool:
    """True for object arrays holding exact rationals."""
    return v.dtype == object


def zeros_like(v: np.ndarray) -> np.ndarray:
    if is_exact(v):
        return np.array([Fraction(0)] * v.shape[0], dtype=object)
    return np.zeros_like(v, dtype=np.float64)


def _as_float_vector(v) -> np.ndarray:
    return np.ascontiguousarray(v, dtype=np.float64)


def _exact_matvec(A: CsrMatrix, v: np.ndarray) -> np.ndarray:
    out = np.empty(A.n_rows, dtype=object)
    for i in range(A.n_rows):
        acc = Fraction(0)
        for k in range(A.row_offsets[i], A.row_offsets[i + 1]):
            acc += Fraction(float(A.values[k])) * v[A.col_indices[k]]
        out[i] = acc
    return out


def spmv(A: CsrMatrix, v: np.ndarray) -> np.ndarray:
    """y = A·v, accumulating each row in stored column order."""
    if v.shape != (A.n_cols,):
        raise DimensionMismatchError(f"spmv: matrix has {A.n_cols} columns, vector has shape {v.shape}")
    if is_exact(v):
        return _exact_matvec(A, v)
    out = np.empty(A.n_rows, dtype=np.float64)
    return _csr_matvec(A.row_offsets, A.col_indices, A.values, _as_float_vector(v), out)


def dot(u: np.ndarray, v: np.ndarray):
    """Sequential left-to-right inner product."""
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionMismatchError(f"dot: shapes {u.shape} and {v.shape} differ")
    if is_exact(u) or is_exact(v):
        acc = Fraction(0)
        for a, b in zip(u, v):
            acc += Fraction(a) * Fraction(b)
        return acc
    return float(_sequential_dot(_as_float_vector(u), _as_float_vector(v)))


def axpy(alpha, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise fl(alpha·x + y)."""
    if x.shape != y.shape:
        raise DimensionMismatchError(f"axpy: shapes {x.shape} and {y.shape} differ")
    if (is_exact(x) or is_exact(y)) and isinstance(alpha, float):
        alpha = Fraction(alpha)
    return alpha * x + y


def norm2(v: np.ndarray) -> float:
    return math.sqrt(dot(v, v))


def scale_matrix(A: CsrMatrix, s: float) -> CsrMatrix:
    if s == 0:
        raise ValueError("scale factor must be non-zero")
    return CsrMatrix(A.n_rows, A.n_cols, A.row_offsets, A.col_indices, A.values * s)


def max_row_nnz(A: CsrMatrix) -> int:
    if A.n_rows == 0:
        return 0
    return int(np.max(np.diff(A.row_offsets)))


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    n: int,
    tol: float = POWER_ITERATION_TOL,
    max_iters: int = POWER_ITERATION_MAX_ITERS,
    label: str = "operator",
) -> float:
    """Dominant eigenvalue of a symmetric positive semi-definite operator.

    Args:
        apply: the operator as a function of a vector
        n: dimension
        tol: stop once the relative change of the Rayleigh quotient is below tol
        max_iters: iteration cap; reaching it emits a PowerIterationWarning

    Returns:
        The eigenvalue estimate (not its square root).
    """
    v = np.ones(n)
    v[0] += 1e-3
    v = v / norm2(v)
    estimate = 0.0
    for iteration in range(1, max_iters + 1):
        w = apply(v)
        rayleigh = dot(v, w)
        w_norm = norm2(w)
        if w_norm == 0.0:
            return 0.0
        v = w / w_norm
        if iteration > 1 and abs(rayleigh - estimate) < tol * abs(rayleigh):
            logger.debug(f"Power iteration on {label} converged after {iteration} steps")
            return rayleigh
        estimate = rayleigh
    logger.warning(f"Power iteration on {label} did not converge in {max_iters} steps")
    warnings.warn(f"power iteration on {label} stopped after {max_iters} steps", PowerIterationWarning)
    return estimate


def estimate_two_norm(A: CsrMatrix, tol: float = POWER_ITERATION_TOL, max_iters: int = POWER_ITERATION_MAX_ITERS) -> float:
    """∥A∥₂ from power iteration on AᵀA."""
    if not A.is_square:
        raise DimensionMismatchError(f"estimate_two_norm needs a square matrix, got {A.shape}")
    At = transpose(A)
    eigenvalue = power_iteration(lambda v: spmv(At, spmv(A, v)), A.n_rows, tol, max_iters, label="AᵀA")
    return math.sqrt(max(eigenvalue, 0.0))


def right_hand_side(A: CsrMatrix) -> np.ndarray:
    """b = A·x_ex with x_ex = 1/√N in every entry."""
    x_exact = np.full(A.n_cols, 1.0 / math.sqrt(A.n_cols))
    return spmv(A, x_exact)


# ---------------------------------------------------------------------------
# Stencil test problems
# ---------------------------------------------------------------------------

class ProblemId(str, Enum):
    TP1 = "TP1"
    TP2 = "TP2"
    TP3 = "TP3"
    TP4 = "TP4"
    TP5 = "TP5"


@dataclass(frozen=True)
class ProblemDefaults:
    grid: Tuple[int, int, int]
    epsilon: Optional[float]
    stencil: str
    preconditioner: str
    symmetric: bool
    note: str


PROBLEM_TABLE: Dict[ProblemId, ProblemDefaults] = {
    ProblemId.TP1: ProblemDefaults((200, 200, 1), None, "2D 5pt", "icc0", True, "Poisson"),
    ProblemId.TP2: ProblemDefaults((1000, 1000, 1), 1e-3, "2D 5pt", "none", False, "upper legs -1+eps"),
    ProblemId.TP3: ProblemDefaults((500, 500, 1), 5e-4, "2D 5pt", "icc0", True, "shifted, indefinite"),
    ProblemId.TP4: ProblemDefaults((200, 200, 1), None, "2D 9pt", "icc0", True, "20 / -4 / -1"),
    ProblemId.TP5: ProblemDefaults((50, 50, 50), 1e-2, "3D 7pt", "icc0", True, "shifted"),
}


@dataclass(frozen=True)
class StencilSpec:
    """A test problem with its grid; unset fields take the table defaults."""

    problem_id: ProblemId
    nx: Optional[int] = None
    ny: Optional[int] = None
    nz: Optional[int] = None
    epsilon: Optional[float] = None
    normalize: bool = True

    def __post_init__(self):
        try:
            pid = ProblemId(self.problem_id)
        except ValueError:
            raise InvalidProblemError(f"unknown problem id: {self.problem_id!r}")
        defaults = PROBLEM_TABLE[pid]
        object.__setattr__(self, "problem_id", pid)
        for name, value in zip(("nx", "ny", "nz"), defaults.grid):
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", defaults.epsilon)

    @property
    def is_3d(self) -> bool:
        return self.problem_id is ProblemId.TP5

    @property
    def n(self) -> int:
        return self.nx * self.ny * (self.nz if self.is_3d else 1)

    def label(self) -> str:
        dims = f"{self.nx}x{self.ny}" + (f"x{self.nz}" if self.is_3d else "")
        eps = f" eps={self.epsilon!r}" if self.epsilon is not None else ""
        return f"{self.problem_id.value} {dims}{eps}"


def _stencil_legs(spec: StencilSpec) -> List[Tuple[int, int, int, float]]:
    """(dz, dy, dx, value) legs sorted so that columns come out ascending."""
    eps = spec.epsilon
    pid = spec.problem_id
    if pid is ProblemId.TP1:
        legs = [(0, -1, 0, -1.0), (0, 0, -1, -1.0), (0, 0, 0, 4.0), (0, 0, 1, -1.0), (0, 1, 0, -1.0)]
    elif pid is ProblemId.TP2:
        upper = -1.0 + eps
        legs = [(0, -1, 0, -1.0), (0, 0, -1, -1.0), (0, 0, 0, 4.0), (0, 0, 1, upper), (0, 1, 0, upper)]
    elif pid is ProblemId.TP3:
        legs = [(0, -1, 0, -1.0), (0, 0, -1, -1.0), (0, 0, 0, 4.0 - eps), (0, 0, 1, -1.0), (0, 1, 0, -1.0)]
    elif pid is ProblemId.TP4:
        legs = [
            (0, -1, -1, -1.0), (0, -1, 0, -4.0), (0, -1, 1, -1.0),
            (0, 0, -1, -4.0), (0, 0, 0, 20.0), (0, 0, 1, -4.0),
            (0, 1, -1, -1.0), (0, 1, 0, -4.0), (0, 1, 1, -1.0),
        ]
    else:
        legs = [
            (-1, 0, 0, -1.0), (0, -1, 0, -1.0), (0, 0, -1, -1.0), (0, 0, 0, 6.0 - eps),
            (0, 0, 1, -1.0), (0, 1, 0, -1.0), (1, 0, 0, -1.0),
        ]
    return sorted(legs)


def validate_spec(spec: StencilSpec):
    dims = [spec.nx, spec.ny] + ([spec.nz] if spec.is_3d else [])
    if any(not isinstance(d, (int, np.integer)) or d < 2 for d in dims):
        raise InvalidProblemError(f"{spec.problem_id.value}: grid counts must be integers >= 2, got {dims}")
    if spec.problem_id in (ProblemId.TP2, ProblemId.TP3, ProblemId.TP5):
        if spec.epsilon is None or not 0.0 < spec.epsilon < 1.0:
            raise InvalidProblemError(f"{spec.problem_id.value}: epsilon must lie in (0, 1), got {spec.epsilon}")


def stencil_matrix(spec: StencilSpec) -> CsrMatrix:
    """Finite-difference matrix of a test problem, x-fastest ordering, Dirichlet legs dropped."""
    validate_spec(spec)
    nx, ny = spec.nx, spec.ny
    nz = spec.nz if spec.is_3d else 1
    n = nx * ny * nz
    idx = np.arange(n, dtype=np.int64)
    ix, iy, iz = idx % nx, (idx // nx) % ny, idx // (nx * ny)

    legs = _stencil_legs(spec)
    cols = np.empty((n, len(legs)), dtype=np.int64)
    vals = np.empty((n, len(legs)), dtype=np.float64)
    inside = np.empty((n, len(legs)), dtype=bool)
    for j, (dz, dy, dx, value) in enumerate(legs):
        jx, jy, jz = ix + dx, iy + dy, iz + dz
        inside[:, j] = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny) & (jz >= 0) & (jz < nz)
        cols[:, j] = idx + dx + dy * nx + dz * nx * ny
        vals[:, j] = value

    offsets = np.concatenate(([0], np.cumsum(inside.sum(axis=1))))
    A = CsrMatrix(n, n, offsets, cols[inside], vals[inside])
    logger.info(f"Built {spec.label()}: N={n}, nnz={A.nnz}")

    if spec.normalize:
        norm = estimate_two_norm(A)
        A = scale_matrix(A, 1.0 / norm)
        logger.info(f"Normalized {spec.problem_id.value} by estimated 2-norm {norm!r}")
    return A


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_matrix_market(path) -> CsrMatrix:
    """Coordinate or array Matrix Market file; symmetric storage is expanded."""
    data = scipy.io.mmread(str(path))
    if not scipy.sparse.issparse(data):
        data = scipy.sparse.csr_matrix(np.asarray(data, dtype=np.float64))
    matrix = CsrMatrix.from_scipy(data)
    logger.info(f"Read {matrix.n_rows}x{matrix.n_cols} matrix with {matrix.nnz} entries from {path}")
    return matrix


def write_matrix_market(path, A: CsrMatrix, symmetric: bool = False):
    symmetry = "symmetric" if symmetric else "general"
    scipy.io.mmwrite(str(path), A.to_scipy().tocoo(), field="real", precision=17, symmetry=symmetry)


def write_vector(path, v: np.ndarray):
    with open(path, "w", encoding="utf-8") as f:
        for value in v:
            f.write(repr(float(value)) + "\n")


def read_vector(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        return np.array([float(line) for line in f if line.strip()], dtype=np.float64)
