"""Rational-arithmetic oracle for local rounding errors.

A binary64 solve is recorded snapshot by snapshot; every recurrence is then
re-evaluated in exact arithmetic from the computed (barred) quantities, which
yields the local errors δ exactly. Meant for tiny systems only.
"""
import copy
import logging
import math
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from preconditioner import Preconditioner, apply_preconditioner
from sparse_core import CsrMatrix, dot, spmv
from stability_analysis import GapInstrument, GapRecord, LocalBoundState, LocalErrors

logger = logging.getLogger(__name__)


def to_exact(v: np.ndarray) -> np.ndarray:
    """Object array holding the exact rational value of every binary64 entry."""
    return np.array([Fraction(float(value)) for value in v], dtype=object)


def exact_norm(v: np.ndarray) -> float:
    """2-norm of an exact vector; only the final square root is rounded."""
    return math.sqrt(dot(v, v))


def _fr(value) -> Fraction:
    return Fraction(value) if isinstance(value, Fraction) else Fraction(float(value))


class StateRecorder(GapInstrument):
    """GapInstrument that also keeps a shallow snapshot of every checkpoint."""

    def __init__(self, A: CsrMatrix, M: Preconditioner, b: np.ndarray, consts: Optional[LocalBoundState] = None):
        super().__init__(A, M, b, consts)
        self.snapshots = []

    def on_start(self, state) -> GapRecord:
        self.snapshots.append(copy.copy(state))
        return super().on_start(state)

    def on_iteration(self, state) -> GapRecord:
        self.snapshots.append(copy.copy(state))
        return super().on_iteration(state)


class _Exact:
    def __init__(self, A: CsrMatrix, M: Preconditioner):
        self.A = A
        self.M = M

    def vec(self, v: np.ndarray) -> np.ndarray:
        return to_exact(v)

    def a(self, v: np.ndarray) -> np.ndarray:
        return spmv(self.A, to_exact(v))

    def minv(self, v: np.ndarray) -> np.ndarray:
        return apply_preconditioner(self.M, to_exact(v))

    def a_minv(self, v: np.ndarray) -> np.ndarray:
        return spmv(self.A, self.minv(v))


def pipelined_recurrence_errors(state, A: CsrMatrix, M: Preconditioner) -> LocalErrors:
    """Exact norms of the eleven local errors of one pipelined BiCGStab iteration.

    Explicit products (m, t, n, v) are replaced by exact M⁻¹ and A applied to
    the computed w̄ and z̄, so their rounding is part of the δ they enter.
    """
    ex = _Exact(A, M)
    E = ex.vec
    alpha, beta, omega, omega_prev = (_fr(state.alpha), _fr(state.beta), _fr(state.omega), _fr(state.omega_prev))

    minv_w = ex.minv(state.w_prev)
    a_minv_w = ex.a_minv(state.w_prev)
    minv_z = ex.minv(state.z)
    a_minv_z = ex.a_minv(state.z)
    minv_z_prev = ex.minv(state.z_prev)
    a_minv_z_prev = ex.a_minv(state.z_prev)

    errors = {
        "g": E(state.g) - (E(state.k_prev) + beta * (E(state.g_prev) - omega_prev * E(state.ell_prev))),
        "s": E(state.s) - (E(state.w_prev) + beta * (E(state.s_prev) - omega_prev * E(state.z_prev))),
        "ell": E(state.ell) - (minv_w + beta * (E(state.ell_prev) - omega_prev * minv_z_prev)),
        "z": E(state.z) - (a_minv_w + beta * (E(state.z_prev) - omega_prev * a_minv_z_prev)),
        "q": E(state.q) - (E(state.r_prev) - alpha * E(state.s)),
        "u": E(state.u) - (E(state.k_prev) - alpha * E(state.ell)),
        "y": E(state.y) - (E(state.w_prev) - alpha * E(state.z)),
        "x": E(state.x) - (E(state.x_prev) + alpha * E(state.g) + omega * E(state.u)),
        "r": E(state.r) - (E(state.q) - omega * E(state.y)),
        "k": E(state.k) - (E(state.u) - omega * (minv_w - alpha * minv_z)),
        "w": E(state.w) - (E(state.y) - omega * (a_minv_w - alpha * a_minv_z)),
    }
    return LocalErrors(**{name: exact_norm(delta) for name, delta in errors.items()})


def _classic_deltas(state, A: CsrMatrix, M: Preconditioner):
    ex = _Exact(A, M)
    E = ex.vec
    alpha, omega = _fr(state.alpha), _fr(state.omega)
    return {
        "x": E(state.x) - (E(state.x_prev) + alpha * ex.minv(state.p) + omega * ex.minv(state.q)),
        "r": E(state.r) - (E(state.q) - omega * ex.a_minv(state.q)),
        "q": E(state.q) - (E(state.r_prev) - alpha * ex.a_minv(state.p)),
    }


def classic_recurrence_errors(state, A: CsrMatrix, M: Preconditioner) -> LocalErrors:
    """Exact norms of δx, δr, δq of one classic BiCGStab iteration, measured against exact M⁻¹p̄ and M⁻¹q̄."""
    deltas = _classic_deltas(state, A, M)
    return LocalErrors(**{name: exact_norm(delta) for name, delta in deltas.items()})


def exact_residual_gap(state, A: CsrMatrix, b: np.ndarray) -> np.ndarray:
    """(b − A x̄) − r̄ evaluated exactly."""
    return to_exact(b) - spmv(A, to_exact(state.x)) - to_exact(state.r)


def classic_superposition_residual(snapshots: Sequence, A: CsrMatrix, M: Preconditioner, b: np.ndarray) -> List[Fraction]:
    """Largest entry of |Δr_i − (Δr_0 − Σ_j (Aδx_{j+1} + δr_{j+1} + δq_j))| for every recorded i.

    Zero everywhere in exact arithmetic for classic BiCGStab.
    """
    gap0 = exact_residual_gap(snapshots[0], A, b)
    accumulated = gap0
    residuals = [Fraction(0)]
    for snapshot in snapshots[1:]:
        deltas = _classic_deltas(snapshot, A, M)
        accumulated = accumulated - (spmv(A, deltas["x"]) + deltas["r"] + deltas["q"])
        difference = exact_residual_gap(snapshot, A, b) - accumulated
        residuals.append(max(abs(value) for value in difference))
    logger.debug(f"Superposition check over {len(residuals)} snapshots, max residual {max(residuals)}")
    return residuals
