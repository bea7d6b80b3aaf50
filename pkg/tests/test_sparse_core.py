"""Unit tests for sparse_core.py"""
import os
import shutil
import tempfile
import unittest
import warnings
from fractions import Fraction

import numpy as np
from hypothesis import given, settings, strategies as st

from sparse_core import (
    PROBLEM_TABLE,
    CsrMatrix,
    DimensionMismatchError,
    InvalidProblemError,
    PowerIterationWarning,
    ProblemId,
    StencilSpec,
    axpy,
    dot,
    estimate_two_norm,
    has_symmetric_pattern,
    is_numerically_symmetric,
    max_row_nnz,
    norm2,
    power_iteration,
    read_matrix_market,
    read_vector,
    right_hand_side,
    scale_matrix,
    spmv,
    stencil_matrix,
    to_dense,
    transpose,
    write_matrix_market,
    write_vector,
)


def laplacian_1d(n):
    """Tridiagonal [-1, 2, -1] in CSR form."""
    dense = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    return CsrMatrix.from_scipy(dense)


class TestCsrMatrix(unittest.TestCase):
    def test_rejects_unsorted_columns(self):
        """Column indices must increase within a row."""
        with self.assertRaises(ValueError):
            CsrMatrix(1, 3, [0, 2], [2, 0], [1.0, 1.0])

    def test_rejects_bad_offsets(self):
        """row_offsets must start at 0 and match nnz."""
        with self.assertRaises(ValueError):
            CsrMatrix(2, 2, [1, 1, 2], [0, 1], [1.0, 1.0])
        with self.assertRaises(ValueError):
            CsrMatrix(2, 2, [0, 1], [0], [1.0])

    def test_rejects_column_out_of_range(self):
        with self.assertRaises(ValueError):
            CsrMatrix(1, 2, [0, 1], [2], [1.0])

    def test_scipy_round_trip(self):
        """from_scipy and to_scipy preserve every entry."""
        dense = np.array([[4.0, 0.0, -1.0], [0.0, 3.0, 0.0], [-1.0, 0.0, 5.0]])
        A = CsrMatrix.from_scipy(dense)
        np.testing.assert_array_equal(A.to_scipy().toarray(), dense)
        np.testing.assert_array_equal(to_dense(A), dense)
        self.assertEqual(A.nnz, 5)

    def test_transpose(self):
        dense = np.array([[1.0, 2.0, 0.0], [0.0, 3.0, 4.0]])
        At = transpose(CsrMatrix.from_scipy(dense))
        self.assertEqual(At.shape, (3, 2))
        np.testing.assert_array_equal(to_dense(At), dense.T)

    def test_symmetry_checks(self):
        """TP1 is symmetric, TP2 has a symmetric pattern with unsymmetric values."""
        tp1 = stencil_matrix(StencilSpec("TP1", nx=4, ny=4, normalize=False))
        tp2 = stencil_matrix(StencilSpec("TP2", nx=4, ny=4, normalize=False))
        self.assertTrue(is_numerically_symmetric(tp1))
        self.assertTrue(has_symmetric_pattern(tp2))
        self.assertFalse(is_numerically_symmetric(tp2))


class TestKernels(unittest.TestCase):
    def test_spmv_identity_is_bitwise(self):
        """Identity times v returns v bitwise."""
        v = np.random.default_rng(3).standard_normal(7)
        np.testing.assert_array_equal(spmv(CsrMatrix.identity(7), v), v)

    def test_spmv_laplacian_telescopes(self):
        """[-1, 2, -1] applied to (1, 2, 3, 4, 5) gives (0, 0, 0, 0, 6)."""
        result = spmv(laplacian_1d(5), np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
        np.testing.assert_array_equal(result, [0.0, 0.0, 0.0, 0.0, 6.0])

    def test_spmv_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            spmv(CsrMatrix.identity(3), np.ones(4))

    def test_dot_examples(self):
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        self.assertEqual(dot(e1, e1), 1.0)
        self.assertEqual(dot(e1, e2), 0.0)
        self.assertEqual(dot(np.ones(4), np.array([1.0, 2.0, 3.0, 4.0])), 10.0)
        with self.assertRaises(DimensionMismatchError):
            dot(np.ones(2), np.ones(3))

    def test_dot_is_sequential(self):
        """Accumulation is strictly left to right."""
        u = np.array([1e16, 1.0, -1e16, 1.0])
        self.assertEqual(dot(u, np.ones(4)), 1.0)

    def test_axpy_examples(self):
        x = np.array([1.5, -2.0, 3.25])
        y = np.array([0.1, 0.2, 0.3])
        np.testing.assert_array_equal(axpy(0.0, x, y), y)
        np.testing.assert_array_equal(axpy(1.0, x, np.zeros(3)), x)
        np.testing.assert_array_equal(axpy(-1.0, x, x), np.zeros(3))

    def test_norm2_examples(self):
        self.assertEqual(norm2(np.zeros(3)), 0.0)
        self.assertEqual(norm2(np.array([0.0, 1.0, 0.0])), 1.0)
        self.assertEqual(norm2(np.array([3.0, 4.0])), 5.0)

    def test_exact_mode(self):
        """Object arrays of Fraction run through the same kernels exactly."""
        A = laplacian_1d(3)
        v = np.array([Fraction(1, 3), Fraction(1, 7), Fraction(2)], dtype=object)
        result = spmv(A, v)
        self.assertEqual(list(result), [Fraction(11, 21), Fraction(-43, 21), Fraction(27, 7)])
        self.assertEqual(dot(v, v), Fraction(1, 9) + Fraction(1, 49) + 4)

    def test_scale_matrix(self):
        A = laplacian_1d(4)
        np.testing.assert_array_equal(scale_matrix(A, 1.0).values, A.values)
        np.testing.assert_allclose(scale_matrix(scale_matrix(A, 2.0), 0.5).values, A.values, rtol=2.3e-16)
        D = CsrMatrix(2, 2, [0, 1, 2], [0, 1], [2.0, 2.0])
        np.testing.assert_array_equal(to_dense(scale_matrix(D, 0.5)), np.eye(2))

    def test_max_row_nnz(self):
        self.assertEqual(max_row_nnz(CsrMatrix.identity(5)), 1)
        self.assertEqual(max_row_nnz(stencil_matrix(StencilSpec("TP1", nx=5, ny=5))), 5)
        self.assertEqual(max_row_nnz(stencil_matrix(StencilSpec("TP4", nx=5, ny=5))), 9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=1, max_value=8), st.integers(0, 2**31 - 1))
    def test_spmv_matches_dense_product(self, rows, cols, seed):
        """spmv agrees with a dense product on random sparse matrices."""
        rng = np.random.default_rng(seed)
        dense = rng.standard_normal((rows, cols)) * (rng.random((rows, cols)) < 0.5)
        v = rng.standard_normal(cols)
        np.testing.assert_allclose(spmv(CsrMatrix.from_scipy(dense), v), dense @ v, rtol=1e-12, atol=1e-12)


class TestNormEstimates(unittest.TestCase):
    def test_identity(self):
        self.assertAlmostEqual(estimate_two_norm(CsrMatrix.identity(6)), 1.0, places=7)

    def test_diagonal(self):
        D = CsrMatrix(3, 3, [0, 1, 2, 3], [0, 1, 2], [1.0, 2.0, 3.0])
        self.assertAlmostEqual(estimate_two_norm(D), 3.0, places=6)

    def test_tp1_against_dense_svd(self):
        """Un-normalized 10x10 TP1 matches the largest singular value."""
        A = stencil_matrix(StencilSpec("TP1", nx=10, ny=10, normalize=False))
        expected = np.linalg.svd(to_dense(A), compute_uv=False)[0]
        self.assertLess(abs(estimate_two_norm(A) - expected) / expected, 1e-6)

    def test_warning_on_iteration_cap(self):
        """Hitting max_iters warns and still returns an estimate."""
        D = CsrMatrix(2, 2, [0, 1, 2], [0, 1], [1.0, 0.999999])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            estimate = power_iteration(lambda v: spmv(D, v), 2, tol=1e-300, max_iters=3)
        self.assertTrue(any(issubclass(w.category, PowerIterationWarning) for w in caught))
        self.assertGreater(estimate, 0.99)

    def test_normalized_problem_has_unit_norm(self):
        A = stencil_matrix(StencilSpec("TP1", nx=8, ny=8))
        self.assertAlmostEqual(np.linalg.norm(to_dense(A), 2), 1.0, delta=1e-6)


class TestStencilProblems(unittest.TestCase):
    def test_registry_defaults(self):
        """Table defaults: TP1 200x200, TP2 1000x1000 unpreconditioned, TP5 50^3."""
        self.assertEqual(StencilSpec(ProblemId.TP1).n, 40_000)
        self.assertEqual(StencilSpec("TP2").n, 1_000_000)
        self.assertEqual(PROBLEM_TABLE[ProblemId.TP2].preconditioner, "none")
        tp5 = StencilSpec("TP5")
        self.assertEqual(tp5.n, 125_000)
        self.assertEqual(tp5.epsilon, 1e-2)

    def test_tp1_rows_sum_to_zero_inside(self):
        """Interior rows of TP1 applied to ones vanish."""
        nx = ny = 6
        A = stencil_matrix(StencilSpec("TP1", nx=nx, ny=ny, normalize=False))
        result = spmv(A, np.ones(A.n_cols)).reshape(ny, nx)
        np.testing.assert_array_equal(result[1:-1, 1:-1], 0.0)
        self.assertEqual(result[0, 0], 2.0)

    def test_tp2_transpose_difference(self):
        """TP2 4x4 with eps=1e-3: max |A - A^T| is eps."""
        A = stencil_matrix(StencilSpec("TP2", nx=4, ny=4, epsilon=1e-3, normalize=False))
        dense = to_dense(A)
        self.assertAlmostEqual(np.max(np.abs(dense - dense.T)), 1e-3, places=15)

    def test_tp2_matches_brute_force(self):
        nx, ny, eps = 3, 4, 1e-3
        A = to_dense(stencil_matrix(StencilSpec("TP2", nx=nx, ny=ny, epsilon=eps, normalize=False)))
        expected = np.zeros((nx * ny, nx * ny))
        for iy in range(ny):
            for ix in range(nx):
                row = ix + iy * nx
                expected[row, row] = 4.0
                if ix > 0:
                    expected[row, row - 1] = -1.0
                if ix < nx - 1:
                    expected[row, row + 1] = -1.0 + eps
                if iy > 0:
                    expected[row, row - nx] = -1.0
                if iy < ny - 1:
                    expected[row, row + nx] = -1.0 + eps
        np.testing.assert_array_equal(A, expected)

    def test_tp3_shift_and_tp4_stencil(self):
        tp3 = to_dense(stencil_matrix(StencilSpec("TP3", nx=4, ny=4, normalize=False)))
        self.assertEqual(tp3[5, 5], 4.0 - 5e-4)
        tp4 = to_dense(stencil_matrix(StencilSpec("TP4", nx=4, ny=4, normalize=False)))
        self.assertEqual(tp4[5, 5], 20.0)
        self.assertEqual(tp4[5, 6], -4.0)
        self.assertEqual(tp4[5, 10], -1.0)

    def test_tp5_is_3d(self):
        A = stencil_matrix(StencilSpec("TP5", nx=3, ny=3, nz=3, normalize=False))
        self.assertEqual(A.n_rows, 27)
        self.assertEqual(to_dense(A)[13, 13], 6.0 - 1e-2)
        self.assertEqual(max_row_nnz(A), 7)

    def test_invalid_specs(self):
        with self.assertRaises(InvalidProblemError):
            StencilSpec("TP9")
        with self.assertRaises(InvalidProblemError):
            stencil_matrix(StencilSpec("TP1", nx=1, ny=4))
        with self.assertRaises(InvalidProblemError):
            stencil_matrix(StencilSpec("TP2", nx=4, ny=4, epsilon=1.5))

    def test_right_hand_side(self):
        """b = A·(1/√N)."""
        A = stencil_matrix(StencilSpec("TP1", nx=4, ny=4, normalize=False))
        b = right_hand_side(A)
        np.testing.assert_allclose(b, to_dense(A) @ np.full(16, 0.25))

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from(["TP1", "TP2", "TP3", "TP4"]), st.integers(2, 9), st.integers(2, 9))
    def test_stencil_structure(self, problem, nx, ny):
        """Every 2D problem has N = nx·ny rows, a symmetric pattern and no stored zeros."""
        A = stencil_matrix(StencilSpec(problem, nx=nx, ny=ny, normalize=False))
        self.assertEqual(A.n_rows, nx * ny)
        self.assertTrue(has_symmetric_pattern(A))
        self.assertTrue(np.all(A.values != 0.0))


class TestFileFormats(unittest.TestCase):
    def setUp(self):
        """Create temporary directory for tests."""
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.test_dir)

    def test_matrix_market_round_trip(self):
        A = stencil_matrix(StencilSpec("TP2", nx=3, ny=3))
        path = os.path.join(self.test_dir, "tp2.mtx")
        write_matrix_market(path, A)
        B = read_matrix_market(path)
        np.testing.assert_array_equal(to_dense(B), to_dense(A))

    def test_symmetric_storage_is_expanded(self):
        A = stencil_matrix(StencilSpec("TP1", nx=3, ny=3))
        path = os.path.join(self.test_dir, "tp1.mtx")
        write_matrix_market(path, A, symmetric=True)
        np.testing.assert_array_equal(to_dense(read_matrix_market(path)), to_dense(A))

    def test_vector_round_trip(self):
        v = np.array([0.1, -1e-300, 3.0, 1.0 / 3.0])
        path = os.path.join(self.test_dir, "v.txt")
        write_vector(path, v)
        np.testing.assert_array_equal(read_vector(path), v)


if __name__ == '__main__':
    unittest.main()
