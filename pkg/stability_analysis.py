"""Rounding-error instrumentation for the Krylov solvers.

Measures the gaps between recursively updated and explicitly computed
quantities, evaluates the local rounding-error bounds of every recurrence,
builds the error propagation matrices and their products, runs the cheap
per-iteration bound f^r on the residual gap and decides residual replacement.

The pipelined CG solver reuses the BiCGStab slots (u→k, p→g, q→ℓ) so that
gaps, bounds and replacement are shared; it is the ω = 0 special case.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numba
import numpy as np

from preconditioner import IdentityPreconditioner, Preconditioner, apply_preconditioner, estimate_preconditioner_norm
from sparse_core import UNIT_ROUNDOFF, CsrMatrix, estimate_two_norm, max_row_nnz, norm2, spmv

if TYPE_CHECKING:
    from krylov_solvers import SolverState

logger = logging.getLogger(__name__)

SQRT_EPS = math.sqrt(UNIT_ROUNDOFF)
NORM_SAFETY_FACTOR = 1.01

PRODUCT_NAMES = ("U", "OU", "BA", "UEA", "BAEA", "BPA", "UC", "BAC", "BD")
PCG_PRODUCT_NAMES = ("U", "BA", "UEA", "BAEA")
MATRIX_NAMES = ("A", "B", "E", "P", "C", "D", "O")

CLASSIC_METHODS = ("bicgstab", "cg")
PIPELINED_METHODS = ("bicgstab_pipelined", "pcg_pipelined")

REPLACEMENT_SPMV = 4
REPLACEMENT_PRECOND = 2


@dataclass(frozen=True)
class GapRecord:
    """Measured gaps and bound for one iteration index."""

    i: int
    recursive_residual_norm: float
    true_residual_norm: float
    gap_r: float
    gap_s: float
    gap_w: float
    gap_z: float
    gap_k: float
    gap_l: float
    bound_f_r: float
    replaced: bool = False


@dataclass
class CoefficientTrace:
    """Scalar coefficients of a run.

    ``betas[0]`` is the fixed β_0 = 0, so after n completed iterations there
    are n alphas, n omegas and n + 1 betas.
    """

    alphas: List[float] = field(default_factory=list)
    omegas: List[float] = field(default_factory=list)
    betas: List[float] = field(default_factory=lambda: [0.0])

    def __len__(self):
        return len(self.alphas)

    def record(self, alpha, omega):
        self.alphas.append(alpha)
        self.omegas.append(omega)

    def close(self, beta):
        while len(self.betas) < len(self.alphas):
            self.betas.append(0.0)
        if len(self.betas) == len(self.alphas):
            self.betas.append(beta if math.isfinite(beta) else 0.0)

    def arrays(self, upto: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(α_0..α_{upto-1}, β_0..β_upto, ω_0..ω_{upto-1}) as float arrays."""
        upto = len(self) if upto is None else upto
        if upto > len(self):
            raise ValueError(f"trace holds {len(self)} iterations, {upto} requested")
        betas = list(self.betas[: upto + 1])
        betas += [0.0] * (upto + 1 - len(betas))
        return (
            np.array([float(a) for a in self.alphas[:upto]], dtype=np.float64),
            np.array([float(b) for b in betas], dtype=np.float64),
            np.array([float(w) for w in self.omegas[:upto]], dtype=np.float64),
        )


@dataclass
class ConvergenceHistory:
    records: List[GapRecord]
    trace: CoefficientTrace
    status: str
    method: str
    problem: str = ""
    tol: float = float("nan")
    norm_b: float = float("nan")
    column_norms: List[Tuple[float, ...]] = field(default_factory=list)
    matrix_norms: List[Tuple[float, ...]] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    @property
    def replacement_iterations(self) -> List[int]:
        return [record.i for record in self.records if record.replaced]


@dataclass
class LocalBoundState:
    """Running gap bounds plus the constants entering the local bounds."""

    norm_a: float
    norm_minv: float
    mu: int
    mu_tilde: int
    sqrt_n: float
    eps: float = UNIT_ROUNDOFF
    dr: float = 0.0
    ds: float = 0.0
    dw: float = 0.0
    dz: float = 0.0
    dk: float = 0.0
    dl: float = 0.0

    @property
    def f_r(self) -> float:
        return self.dr

    @property
    def spmv_factor(self) -> float:
        return self.mu * self.sqrt_n * self.norm_a

    @property
    def precond_factor(self) -> float:
        return self.mu_tilde * self.sqrt_n * self.norm_minv

    @property
    def combined_factor(self) -> float:
        return self.mu_tilde * self.sqrt_n * self.norm_a * self.norm_minv


def bound_constants(A: CsrMatrix, M: Preconditioner, safety: float = NORM_SAFETY_FACTOR) -> LocalBoundState:
    """Norm estimates inflated by ``safety`` together with μ, μ̃ and √N."""
    norm_a = estimate_two_norm(A) * safety
    if isinstance(M, IdentityPreconditioner):
        norm_minv = safety
    else:
        norm_minv = estimate_preconditioner_norm(M) * safety
    consts = LocalBoundState(
        norm_a=norm_a,
        norm_minv=norm_minv,
        mu=max_row_nnz(A),
        mu_tilde=M.mu_tilde,
        sqrt_n=math.sqrt(A.n_rows),
    )
    logger.info(f"Bound constants: ||A||<={norm_a!r}, ||M^-1||<={norm_minv!r}, mu={consts.mu}, mu~={consts.mu_tilde}")
    return consts


# ---------------------------------------------------------------------------
# Gaps
# ---------------------------------------------------------------------------

def _explicit_gap(apply, source, target) -> float:
    if source is None or target is None:
        return 0.0
    return norm2(apply(source) - target)


def measure_gaps(state: "SolverState", A: CsrMatrix, M: Preconditioner, b: np.ndarray) -> GapRecord:
    """Gap norms from fresh explicit products; the state is left untouched."""
    true_residual = b - spmv(A, state.x)

    def matvec(v):
        return spmv(A, v)

    def precond(v):
        return apply_preconditioner(M, v)

    return GapRecord(
        i=state.i,
        recursive_residual_norm=norm2(state.r),
        true_residual_norm=norm2(true_residual),
        gap_r=norm2(true_residual - state.r),
        gap_s=_explicit_gap(matvec, state.g, state.s),
        gap_w=_explicit_gap(matvec, state.k, state.w),
        gap_z=_explicit_gap(matvec, state.ell, state.z),
        gap_k=_explicit_gap(precond, state.r, state.k),
        gap_l=_explicit_gap(precond, state.s, state.ell),
        bound_f_r=state.gap_bound,
        replaced=state.replaced,
    )


# ---------------------------------------------------------------------------
# Local rounding-error bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalErrors:
    """Upper bounds on the norms of the local recurrence errors δ."""

    g: float = 0.0
    x: float = 0.0
    s: float = 0.0
    r: float = 0.0
    ell: float = 0.0
    z: float = 0.0
    k: float = 0.0
    w: float = 0.0
    q: float = 0.0
    u: float = 0.0
    y: float = 0.0


def _norm(v) -> float:
    return 0.0 if v is None else norm2(v)


def local_error_bounds(state: "SolverState", consts: LocalBoundState) -> LocalErrors:
    """Local error bounds of one pipelined BiCGStab iteration."""
    eps = consts.eps
    sa, sm, sam = consts.spmv_factor, consts.precond_factor, consts.combined_factor
    a, be, om, omp = abs(state.alpha), abs(state.beta), abs(state.omega), abs(state.omega_prev)

    x_i, r_i, k_i, w_i = _norm(state.x_prev), _norm(state.r_prev), _norm(state.k_prev), _norm(state.w_prev)
    g, s, ell, z = _norm(state.g), _norm(state.s), _norm(state.ell), _norm(state.z)
    q, u, y = _norm(state.q), _norm(state.u), _norm(state.y)
    m, t, n, v = _norm(state.m), _norm(state.t), _norm(state.n), _norm(state.v)
    g_p, s_p, l_p, z_p = _norm(state.g_prev), _norm(state.s_prev), _norm(state.ell_prev), _norm(state.z_prev)
    n_p, v_p = _norm(state.n_prev), _norm(state.v_prev)
    bw = be * omp

    return LocalErrors(
        g=(k_i + 3 * be * g_p + 4 * bw * l_p) * eps,
        x=(2 * x_i + 3 * a * g + 2 * om * u) * eps,
        s=(w_i + 3 * be * s_p + 4 * bw * z_p) * eps,
        r=(q + 2 * om * y) * eps,
        ell=(m + sm * w_i + 3 * be * l_p + 4 * bw * n_p + sm * bw * z_p) * eps,
        z=(t + sa * m + sam * w_i + 3 * be * z_p + 4 * bw * v_p + sa * bw * n_p + sam * bw * z_p) * eps,
        k=(u + 3 * om * m + sm * om * w_i + 4 * om * a * n + sm * om * a * z) * eps,
        w=(y + 3 * om * t + sa * om * m + sam * om * w_i + 4 * om * a * v + sa * om * a * n + sam * om * a * z) * eps,
        q=(r_i + 2 * a * s) * eps,
        u=(k_i + 2 * a * ell) * eps,
        y=(w_i + 2 * a * z) * eps,
    )


def classic_local_error_bounds(state: "SolverState", consts: LocalBoundState) -> LocalErrors:
    """δx, δr, δq of classic BiCGStab; spmv and preconditioner errors included."""
    eps = consts.eps
    sa, sm, sam = consts.spmv_factor, consts.precond_factor, consts.combined_factor
    a, om = abs(state.alpha), abs(state.omega)
    x_i, r_i = _norm(state.x_prev), _norm(state.r_prev)
    g, p, u, q, y, s = _norm(state.g), _norm(state.p), _norm(state.u), _norm(state.q), _norm(state.y), _norm(state.s)
    return LocalErrors(
        x=(2 * x_i + 3 * a * g + sm * a * p + 2 * om * u + sm * om * q) * eps,
        r=(q + 2 * om * y + sa * om * u + sam * om * q) * eps,
        q=(r_i + 2 * a * s + sa * a * g + sam * a * p) * eps,
    )


def cg_local_error_bounds(state: "SolverState", consts: LocalBoundState) -> LocalErrors:
    eps = consts.eps
    a = abs(state.alpha)
    g, s = _norm(state.g), _norm(state.s)
    return LocalErrors(
        x=(_norm(state.x_prev) + 2 * a * g) * eps,
        r=(_norm(state.r_prev) + 2 * a * s + consts.spmv_factor * a * g) * eps,
    )


def pipelined_cg_local_error_bounds(state: "SolverState", consts: LocalBoundState) -> LocalErrors:
    eps = consts.eps
    sa, sm, sam = consts.spmv_factor, consts.precond_factor, consts.combined_factor
    a, be = abs(state.alpha), abs(state.beta)
    x_i, r_i, k_i, w_i = _norm(state.x_prev), _norm(state.r_prev), _norm(state.k_prev), _norm(state.w_prev)
    g, s, ell, z = _norm(state.g), _norm(state.s), _norm(state.ell), _norm(state.z)
    m, n = _norm(state.m), _norm(state.n)
    return LocalErrors(
        g=(k_i + 2 * be * _norm(state.g_prev)) * eps,
        s=(w_i + 2 * be * _norm(state.s_prev)) * eps,
        ell=(m + sm * w_i + 2 * be * _norm(state.ell_prev)) * eps,
        z=(n + sa * m + sam * w_i + 2 * be * _norm(state.z_prev)) * eps,
        x=(x_i + 2 * a * g) * eps,
        r=(r_i + 2 * a * s) * eps,
        k=(k_i + 2 * a * ell) * eps,
        w=(w_i + 2 * a * z) * eps,
    )


LOCAL_BOUNDS = {
    "bicgstab": classic_local_error_bounds,
    "bicgstab_pipelined": local_error_bounds,
    "cg": cg_local_error_bounds,
    "pcg_pipelined": pipelined_cg_local_error_bounds,
}


def update_gap_bound(bounds: LocalBoundState, state: "SolverState", local: LocalErrors) -> LocalBoundState:
    """Advance the running gap bounds by one iteration (triangle inequality).

    Classic methods never feed the s, w, z slots, so for them only the
    superposition of local errors accumulates in f^r.
    """
    a, be, om, omp = abs(state.alpha), abs(state.beta), abs(state.omega), abs(state.omega_prev)
    na, nm = bounds.norm_a, bounds.norm_minv

    dz = be * bounds.dz + (na * local.ell + local.z)
    ds = bounds.dw + be * bounds.ds + be * omp * bounds.dz + (na * local.g + local.s)
    dr = (bounds.dr + a * ds + om * bounds.dw + om * a * dz
          + (na * local.x + local.r + om * na * local.u + local.q + om * local.y))
    dw = bounds.dw + a * dz + (na * local.k + local.w + na * local.u + local.y)
    dl = be * bounds.dl + (nm * local.s + local.ell)
    dk = bounds.dk + a * dl + (nm * local.r + local.k + nm * local.q + local.u + om * nm * local.y)

    bounds.dr, bounds.ds, bounds.dw, bounds.dz, bounds.dk, bounds.dl = dr, ds, dw, dz, dk, dl
    return bounds


def preconditioned_gap_bound(state: "SolverState", bounds: LocalBoundState) -> float:
    """Running bound on ∥Δk∥ = ∥M⁻¹r̄ − k̄∥."""
    return bounds.dk


def initial_gap_bounds(bounds: LocalBoundState, state: "SolverState", b: np.ndarray, pipelined: bool) -> LocalBoundState:
    """Single-evaluation gap bounds of the explicitly initialized variables."""
    eps = bounds.eps
    bounds.dr = ((bounds.spmv_factor + bounds.norm_a) * _norm(state.x) + norm2(b)) * eps
    bounds.ds = bounds.dz = bounds.dl = 0.0
    if pipelined:
        bounds.dw = bounds.spmv_factor * _norm(state.k) * eps
        bounds.dk = bounds.precond_factor * _norm(state.r) * eps
    else:
        bounds.dw = bounds.dk = 0.0
    return bounds


def reset_gap_bounds(bounds: LocalBoundState, state: "SolverState", b: np.ndarray) -> LocalBoundState:
    """Bounds right after the six replaced variables were recomputed."""
    eps = bounds.eps
    sa, sm = bounds.spmv_factor, bounds.precond_factor
    bounds.dr = ((sa + bounds.norm_a) * _norm(state.x) + norm2(b)) * eps
    bounds.dw = sa * _norm(state.k) * eps
    bounds.ds = sa * _norm(state.g) * eps
    bounds.dz = sa * _norm(state.ell) * eps
    bounds.dk = sm * _norm(state.r) * eps
    bounds.dl = sm * _norm(state.s) * eps
    return bounds


class GapBoundTracker:
    """Runs f^r alongside one solve."""

    def __init__(self, method: str, consts: LocalBoundState):
        self.method = method
        self.bounds = replace(consts)
        self._local = LOCAL_BOUNDS[method]
        self.last_local = LocalErrors()

    @property
    def f_r(self) -> float:
        return self.bounds.f_r

    @property
    def f_k(self) -> float:
        return self.bounds.dk

    def start(self, state: "SolverState", b: np.ndarray):
        initial_gap_bounds(self.bounds, state, b, pipelined=self.method in PIPELINED_METHODS)

    def advance(self, state: "SolverState") -> float:
        self.last_local = self._local(state, self.bounds)
        update_gap_bound(self.bounds, state, self.last_local)
        return self.bounds.f_r

    def reset(self, state: "SolverState", b: np.ndarray):
        reset_gap_bounds(self.bounds, state, b)


# ---------------------------------------------------------------------------
# Residual replacement
# ---------------------------------------------------------------------------

class ReplacementKind(str, Enum):
    NONE = "none"
    PERIODIC = "periodic"
    AUTOMATED = "automated"


@dataclass(frozen=True)
class ReplacementPolicy:
    kind: ReplacementKind = ReplacementKind.NONE
    period: int = 0
    tau: float = SQRT_EPS
    stop_threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind is ReplacementKind.PERIODIC and self.period < 1:
            raise ValueError(f"replacement period must be >= 1, got {self.period}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def none(cls) -> "ReplacementPolicy":
        return cls()

    @classmethod
    def periodic(cls, period: int) -> "ReplacementPolicy":
        return cls(ReplacementKind.PERIODIC, period=period)

    @classmethod
    def automated(cls, tau: float = SQRT_EPS) -> "ReplacementPolicy":
        return cls(ReplacementKind.AUTOMATED, tau=tau)

    @classmethod
    def parse(cls, text: str) -> "ReplacementPolicy":
        """``none``, ``auto``, ``auto:<tau>`` or ``periodic:<period>``."""
        name, _, arg = text.strip().lower().partition(":")
        if name == "none":
            return cls.none()
        if name in ("auto", "automated"):
            return cls.automated(float(arg)) if arg else cls.automated()
        if name == "periodic" and arg:
            return cls.periodic(int(arg))
        raise ValueError(f"unknown replacement policy: {text!r}")

    def bind(self, r0_norm: float) -> "ReplacementPolicy":
        """Fix the periodic stop rule ∥r̄_i∥ < √ε·∥r̄_0∥ for one solve."""
        return replace(self, stop_threshold=SQRT_EPS * r0_norm)

    def describe(self) -> str:
        if self.kind is ReplacementKind.PERIODIC:
            return f"periodic:{self.period}"
        if self.kind is ReplacementKind.AUTOMATED:
            return "auto" if self.tau == SQRT_EPS else f"auto:{self.tau!r}"
        return "none"


ReplacementWindow = Tuple[Tuple[float, float], Tuple[float, float]]


def should_replace(policy: ReplacementPolicy, window: ReplacementWindow, i: int) -> bool:
    """Decide replacement for iteration index i.

    ``window`` is ((f^r_{i-1}, ∥r̄_{i-1}∥), (f^r_i, ∥r̄_i∥)).
    """
    (f_prev, r_prev), (f_cur, r_cur) = window
    if policy.kind is ReplacementKind.PERIODIC:
        if i <= 0 or i % policy.period != 0:
            return False
        return policy.stop_threshold is None or r_cur >= policy.stop_threshold
    if policy.kind is ReplacementKind.AUTOMATED:
        return f_prev <= policy.tau * r_prev and f_cur > policy.tau * r_cur
    return False


def perform_replacement(
    state: "SolverState",
    A: CsrMatrix,
    M: Preconditioner,
    b: np.ndarray,
    tracker: Optional[GapBoundTracker] = None,
) -> "SolverState":
    """Recompute r, k, w, s, ℓ, z explicitly from x and g."""
    state.r = b - spmv(A, state.x)
    state.k = apply_preconditioner(M, state.r)
    state.w = spmv(A, state.k)
    state.s = spmv(A, state.g)
    state.ell = apply_preconditioner(M, state.s)
    state.z = spmv(A, state.ell)
    state.replaced = True
    state.last_replacement = state.i
    if tracker is not None:
        tracker.reset(state, b)
    return state


# ---------------------------------------------------------------------------
# Propagation matrices
# ---------------------------------------------------------------------------

def propagation_matrices(trace: CoefficientTrace, upto: int) -> Dict[str, np.ndarray]:
    """The eight (upto+1)×(upto+1) error propagation matrices."""
    alphas, betas, omegas = trace.arrays(upto)
    size = upto + 1
    A = np.zeros((size, size))
    B = np.zeros((size, size))
    P = np.zeros((size, size))
    C = np.zeros((size, size))
    D = np.zeros((size, size))
    for j in range(size):
        B[j, j] = 1.0
        for k in range(j + 1, size):
            B[j, k] = B[j, k - 1] * betas[k]
    for j in range(upto):
        A[j, j + 1:] = -alphas[j]
        P[j, j + 1:] = -omegas[j] * B[j, j + 1:]
        C[j, j + 1:] = -omegas[j]
        D[j, j + 1:] = omegas[j] * alphas[j]
    E = B.copy()
    E[0, :] = 0.0
    O = np.diag(np.concatenate(([0.0], -omegas)))
    U = np.triu(np.ones((size, size)))
    return {"A": A, "B": B, "E": E, "P": P, "C": C, "D": D, "O": O, "U": U}


def dense_products(mats: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    A, B, E, P, C, D, O, U = (mats[name] for name in ("A", "B", "E", "P", "C", "D", "O", "U"))
    return {
        "U": U,
        "OU": O @ U,
        "BA": B @ A,
        "UEA": U @ E @ A,
        "BAEA": B @ A @ E @ A,
        "BPA": B @ P @ A,
        "UC": U @ C,
        "BAC": B @ A @ C,
        "BD": B @ D,
    }


@numba.njit(cache=True)
def _apply_b(betas, v):
    h = v.copy()
    for j in range(v.shape[0] - 2, -1, -1):
        h[j] = v[j] + betas[j + 1] * h[j + 1]
    return h


def _apply_u(v: np.ndarray) -> np.ndarray:
    return np.cumsum(v[::-1])[::-1]


def _apply_a(alphas: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    out[:-1] = -alphas * _apply_u(v)[1:]
    return out


def _apply_e(betas: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = _apply_b(betas, v)
    out[0] = 0.0
    return out


def _apply_p(betas: np.ndarray, omegas: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = _apply_b(betas, v)
    out = np.zeros_like(v)
    out[:-1] = -omegas * betas[1:] * h[1:]
    return out


def product_column_norms(trace: CoefficientTrace, i: int, reset_at: int = 0) -> Tuple[float, ...]:
    """Max-norms of column i of the nine products, in PRODUCT_NAMES order.

    Each column is formed by structured matrix-vector products in O(i);
    rows above ``reset_at`` are zeroed after a replacement.
    """
    alphas, betas, omegas = trace.arrays(i)
    a_col = np.append(-alphas, 0.0)
    c_col = np.append(-omegas, 0.0)
    d_col = np.append(omegas * alphas, 0.0)

    ea = _apply_e(betas, a_col)
    columns = (
        np.ones(i + 1),
        np.concatenate(([0.0], -omegas)),
        _apply_b(betas, a_col),
        _apply_u(ea),
        _apply_b(betas, _apply_a(alphas, ea)),
        _apply_b(betas, _apply_p(betas, omegas, a_col)),
        _apply_u(c_col),
        _apply_b(betas, _apply_a(alphas, c_col)),
        _apply_b(betas, d_col),
    )
    norms = []
    for column in columns:
        column = column.copy()
        column[:reset_at] = 0.0
        norms.append(float(np.max(np.abs(column))))
    return tuple(norms)


def matrix_max_norms(trace: CoefficientTrace, upto: int, reset_at: int = 0) -> Tuple[float, ...]:
    """Max-norms of 𝒜, ℬ, ℰ, 𝒫, 𝒞, 𝒟, 𝒪 with rows above ``reset_at`` zeroed."""
    mats = propagation_matrices(trace, upto)
    norms = []
    for name in MATRIX_NAMES:
        rows = mats[name][reset_at:]
        norms.append(float(np.max(np.abs(rows))) if rows.size else 0.0)
    return tuple(norms)


def norm_series(trace: CoefficientTrace, n_records: int, replacements: Sequence[int]) -> Tuple[List[tuple], List[tuple]]:
    """Per-record product column norms and running matrix max-norms."""
    alphas, betas, omegas = trace.arrays(min(len(trace), max(n_records - 1, 0)))
    replaced = set(replacements)
    reset_at = 0
    running = np.zeros(len(MATRIX_NAMES))
    b_col = np.ones(1)
    columns, matrices = [], []
    for i in range(n_records):
        if i in replaced:
            reset_at = i
            running[:] = 0.0
        if i > 0:
            b_col = np.append(b_col * betas[i], 1.0)
        columns.append(product_column_norms(trace, i, reset_at))

        lo = reset_at
        fresh = np.zeros(len(MATRIX_NAMES))
        if lo < i:
            fresh[0] = np.max(np.abs(alphas[lo:i]))
            fresh[3] = np.max(np.abs(omegas[lo:i] * b_col[lo:i]))
            fresh[4] = np.max(np.abs(omegas[lo:i]))
            fresh[5] = np.max(np.abs(omegas[lo:i] * alphas[lo:i]))
        fresh[1] = np.max(np.abs(b_col[lo:]))
        e_rows = b_col[max(lo, 1):]
        fresh[2] = np.max(np.abs(e_rows)) if e_rows.size else 0.0
        if i >= 1:
            fresh[6] = abs(omegas[i - 1])
        running = np.maximum(running, fresh)
        matrices.append(tuple(float(value) for value in running))
    return columns, matrices


def gap_system_matrix(trace: CoefficientTrace, i: int) -> np.ndarray:
    """Operator mapping (Δr_i, Δs_{i-1}, Δw_i, Δz_{i-1}) to (Δr_{i+1}, Δs_i, Δw_{i+1}, Δz_i)."""
    alphas, betas, omegas = trace.arrays(i + 1)
    a, be, om = alphas[i], betas[i], omegas[i]
    om_prev = omegas[i - 1] if i > 0 else 0.0
    return np.array([
        [1.0, -a * be, -(a + om), a * be * (om + om_prev)],
        [0.0, be, 1.0, -be * om_prev],
        [0.0, 0.0, 1.0, -a * be],
        [0.0, 0.0, 0.0, be],
    ])


def unroll_gap_system(trace: CoefficientTrace, upto: int, initial: Sequence[float]) -> Dict[str, np.ndarray]:
    """Scalar gap recursion with zero local errors from (Δr_0, Δs_0, Δw_0, Δz_0)."""
    alphas, _, omegas = trace.arrays(upto)
    dr0, ds0, dw0, dz0 = initial
    R, S, W, Z = np.zeros(upto + 1), np.zeros(upto), np.zeros(upto + 1), np.zeros(upto)
    R[0], W[0] = dr0, dw0
    if upto == 0:
        return {"r": R, "s": S, "w": W, "z": Z}
    S[0], Z[0] = ds0, dz0
    R[1] = R[0] - alphas[0] * S[0] - omegas[0] * W[0] + omegas[0] * alphas[0] * Z[0]
    W[1] = W[0] - alphas[0] * Z[0]
    for i in range(1, upto):
        R[i + 1], S[i], W[i + 1], Z[i] = gap_system_matrix(trace, i) @ np.array([R[i], S[i - 1], W[i], Z[i - 1]])
    return {"r": R, "s": S, "w": W, "z": Z}


def matrix_form_gaps(trace: CoefficientTrace, upto: int, initial: Sequence[float]) -> Dict[str, np.ndarray]:
    """Same gaps as row vectors built from the propagation matrices."""
    mats = propagation_matrices(trace, upto)
    size = upto + 1
    theta = {}
    for name, value in zip("rswz", initial):
        theta[name] = np.zeros(size)
        theta[name][0] = value
    Z = theta["z"] @ mats["B"]
    W = theta["w"] @ mats["U"] + Z @ mats["A"]
    S = theta["s"] @ mats["B"] + W @ mats["E"] + Z @ mats["P"]
    R = theta["r"] @ mats["U"] + S @ mats["A"] + W @ mats["C"] + Z @ mats["D"]
    return {"r": R, "s": S, "w": W, "z": Z}


# ---------------------------------------------------------------------------
# Instrumentation hook
# ---------------------------------------------------------------------------

class GapInstrument:
    """Measures a GapRecord at every solver checkpoint."""

    def __init__(self, A: CsrMatrix, M: Preconditioner, b: np.ndarray, consts: Optional[LocalBoundState] = None):
        self.A = A
        self.M = M
        self.b = b
        self.consts = consts

    def on_start(self, state: "SolverState") -> GapRecord:
        return measure_gaps(state, self.A, self.M, self.b)

    def on_iteration(self, state: "SolverState") -> GapRecord:
        record = measure_gaps(state, self.A, self.M, self.b)
        logger.debug(
            f"iter {record.i}: rec={record.recursive_residual_norm:.3e} "
            f"true={record.true_residual_norm:.3e} gap={record.gap_r:.3e} f_r={record.bound_f_r:.3e}"
        )
        return record

    def finalize(self, history: ConvergenceHistory) -> ConvergenceHistory:
        n_records = len(history.records)
        if history.method in CLASSIC_METHODS:
            superposition = (1.0,) + (0.0,) * (len(PRODUCT_NAMES) - 1)
            columns = [superposition] * n_records
            matrices = [(0.0,) * len(MATRIX_NAMES)] * n_records
        else:
            columns, matrices = norm_series(history.trace, n_records, history.replacement_iterations)
        return replace(history, column_norms=columns, matrix_norms=matrices)
