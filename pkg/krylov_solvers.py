"""Classic and pipelined preconditioned BiCGStab and CG.

Every solver follows its recurrences line for line with left-to-right
floating-point evaluation, so runs are bitwise reproducible. Instrumentation
and residual replacement hook in at one checkpoint per iteration, right after
x, r (and for pipelined methods k, w) have been updated.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from preconditioner import Preconditioner, apply_preconditioner
from sparse_core import CsrMatrix, DimensionMismatchError, dot, is_exact, norm2, spmv, zeros_like
from stability_analysis import (
    REPLACEMENT_PRECOND,
    REPLACEMENT_SPMV,
    CoefficientTrace,
    ConvergenceHistory,
    GapBoundTracker,
    GapInstrument,
    GapRecord,
    ReplacementKind,
    ReplacementPolicy,
    bound_constants,
    perform_replacement,
    should_replace,
)

logger = logging.getLogger(__name__)


class BreakdownError(ArithmeticError):
    """A denominator vanished or a scalar became non-finite."""


class SolveStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    BREAKDOWN = "breakdown"
    STAGNATION = "stagnation"


class StoppingNorm(str, Enum):
    RECURSIVE = "recursive"
    TRUE_RESIDUAL = "true_residual"


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-6
    max_iters: int = 20000
    breakdown_eps: float = 1e-30
    stopping_norm: StoppingNorm = StoppingNorm.RECURSIVE
    stagnation_window: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "stopping_norm", StoppingNorm(self.stopping_norm))
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.breakdown_eps < 0:
            raise ValueError(f"breakdown_eps must be non-negative, got {self.breakdown_eps}")
        if self.stagnation_window < 1:
            raise ValueError(f"stagnation_window must be >= 1, got {self.stagnation_window}")


@dataclass
class SolverState:
    """Iteration variables of one solve.

    At the checkpoint of iteration i the fields hold x_{i+1}, r_{i+1} (and
    k_{i+1}, w_{i+1}) next to the i-indexed directions; the ``*_prev`` fields
    hold the values the recurrences of iteration i started from. Variables a
    method does not use stay None.
    """

    method: str
    i: int = 0
    x: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    ell: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None
    n: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    r0_shadow: Optional[np.ndarray] = None
    x_prev: Optional[np.ndarray] = None
    r_prev: Optional[np.ndarray] = None
    k_prev: Optional[np.ndarray] = None
    w_prev: Optional[np.ndarray] = None
    g_prev: Optional[np.ndarray] = None
    s_prev: Optional[np.ndarray] = None
    ell_prev: Optional[np.ndarray] = None
    z_prev: Optional[np.ndarray] = None
    n_prev: Optional[np.ndarray] = None
    v_prev: Optional[np.ndarray] = None
    alpha: float = 0.0
    beta: float = 0.0
    omega: float = 0.0
    omega_prev: float = 0.0
    dot_cache: Dict[str, float] = field(default_factory=dict)
    gap_bound: float = float("nan")
    replaced: bool = False
    last_replacement: Optional[int] = None


@dataclass
class OperationCounts:
    spmv: int = 0
    precond: int = 0
    replacement_spmv: int = 0
    replacement_precond: int = 0


@dataclass
class SolveResult:
    x_final: np.ndarray
    status: SolveStatus
    history: ConvergenceHistory
    trace: CoefficientTrace
    iterations: int
    counts: OperationCounts
    replacements: List[int] = field(default_factory=list)
    message: str = ""


class _CountingOperators:
    def __init__(self, A: CsrMatrix, M: Preconditioner, counts: OperationCounts):
        self.A = A
        self.M = M
        self.counts = counts

    def matvec(self, v: np.ndarray) -> np.ndarray:
        self.counts.spmv += 1
        return spmv(self.A, v)

    def precondition(self, v: np.ndarray) -> np.ndarray:
        self.counts.precond += 1
        return apply_preconditioner(self.M, v)


class _ConvergenceMonitor:
    """Tolerance test plus the diagnostic stagnation detector."""

    def __init__(self, threshold: float, window: int):
        self.threshold = threshold
        self.window = window
        self.best = math.inf
        self.since_best = 0

    def check(self, residual_norm: float) -> Optional[SolveStatus]:
        if not math.isfinite(residual_norm):
            raise BreakdownError(f"residual norm became {residual_norm}")
        if residual_norm <= self.threshold:
            return SolveStatus.CONVERGED
        if residual_norm < self.best * (1.0 - 1e-3):
            self.best = residual_norm
            self.since_best = 0
        else:
            self.since_best += 1
            if self.since_best >= self.window:
                return SolveStatus.STAGNATION
        return None


def _require(value, threshold: float, label: str):
    """Return value unless it is non-finite or |value| <= threshold."""
    if not math.isfinite(value):
        raise BreakdownError(f"{label} is {value}")
    if not abs(value) > threshold:
        raise BreakdownError(f"{label} = {value!r} below breakdown threshold {threshold!r}")
    return value


def _finite(value, label: str):
    if not math.isfinite(value):
        raise BreakdownError(f"{label} is {value}")
    return value


def _closing_beta(compute: Callable[[], float]) -> float:
    try:
        beta = compute()
    except (ZeroDivisionError, ArithmeticError):
        return 0.0
    return beta if math.isfinite(beta) else 0.0


def _check_dimensions(A: CsrMatrix, M: Preconditioner, b: np.ndarray, x0: np.ndarray):
    if not A.is_square:
        raise DimensionMismatchError(f"solver needs a square matrix, got {A.shape}")
    for name, vector in (("b", b), ("x0", x0)):
        if vector.shape != (A.n_rows,):
            raise DimensionMismatchError(f"{name} has shape {vector.shape}, matrix is {A.shape}")
    if M.n != A.n_rows:
        raise DimensionMismatchError(f"preconditioner has size {M.n}, matrix is {A.shape}")


class _SolveRun:
    """Bookkeeping shared by all four solvers: counts, history, bound and replacement."""

    def __init__(
        self,
        method: str,
        A: CsrMatrix,
        M: Preconditioner,
        b: np.ndarray,
        opts: SolveOptions,
        rr: ReplacementPolicy,
        instr: Optional[GapInstrument],
    ):
        self.method = method
        self.A = A
        self.M = M
        self.b = b
        self.opts = opts
        self.policy = rr
        self.instr = instr
        self.counts = OperationCounts()
        self.ops = _CountingOperators(A, M, self.counts)
        self.trace = CoefficientTrace()
        self.records: List[GapRecord] = []
        self.replacements: List[int] = []
        self.monitor = _ConvergenceMonitor(opts.tol * norm2(b), opts.stagnation_window)
        self.tracker: Optional[GapBoundTracker] = None
        if instr is not None or rr.kind is ReplacementKind.AUTOMATED:
            consts = instr.consts if instr is not None and instr.consts is not None else bound_constants(A, M)
            self.tracker = GapBoundTracker(method, consts)
        self._window_tail: Tuple[float, float] = (math.nan, math.nan)

    def zero(self, like: np.ndarray):
        return Fraction(0) if is_exact(like) else 0.0

    def _stopping_norm(self, state: SolverState, recursive_norm: float) -> float:
        if self.opts.stopping_norm is StoppingNorm.TRUE_RESIDUAL:
            return norm2(self.b - spmv(self.A, state.x))
        return recursive_norm

    def _record(self, state: SolverState, recursive_norm: float, first: bool = False):
        if self.instr is None:
            self.records.append(GapRecord(
                i=state.i,
                recursive_residual_norm=recursive_norm,
                true_residual_norm=math.nan,
                gap_r=math.nan, gap_s=math.nan, gap_w=math.nan,
                gap_z=math.nan, gap_k=math.nan, gap_l=math.nan,
                bound_f_r=state.gap_bound,
                replaced=state.replaced,
            ))
        elif first:
            self.records.append(self.instr.on_start(state))
        else:
            self.records.append(self.instr.on_iteration(state))

    def start(self, state: SolverState) -> Optional[SolveStatus]:
        r0_norm = norm2(state.r)
        self.policy = self.policy.bind(r0_norm)
        if self.tracker is not None:
            self.tracker.start(state, self.b)
            state.gap_bound = self.tracker.f_r
        self._window_tail = (state.gap_bound, r0_norm)
        self._record(state, r0_norm, first=True)
        logger.info(f"{self.method}: ||r0||={r0_norm:.6e}, target {self.monitor.threshold:.6e}, rr={self.policy.describe()}")
        if r0_norm <= self.monitor.threshold:
            return SolveStatus.CONVERGED
        return None

    def checkpoint(self, state: SolverState) -> Optional[SolveStatus]:
        """Bound update, replacement decision and record at the line-20 point."""
        state.replaced = False
        rnorm = norm2(state.r)
        if self.tracker is not None:
            state.gap_bound = self.tracker.advance(state)
        window = (self._window_tail, (state.gap_bound, rnorm))
        if should_replace(self.policy, window, state.i):
            perform_replacement(state, self.A, self.M, self.b, self.tracker)
            self.counts.replacement_spmv += REPLACEMENT_SPMV
            self.counts.replacement_precond += REPLACEMENT_PRECOND
            self.replacements.append(state.i)
            rnorm = norm2(state.r)
            if self.tracker is not None:
                state.gap_bound = self.tracker.f_r
            logger.info(f"{self.method}: residual replacement at iteration {state.i}, ||r||={rnorm:.6e}")
        self._window_tail = (state.gap_bound, rnorm)
        if self.policy.kind is ReplacementKind.PERIODIC and rnorm < self.policy.stop_threshold:
            # periodic replacement stops for good once ||r|| < sqrt(eps)·||r0||
            logger.info(f"{self.method}: periodic replacement switched off at iteration {state.i}")
            self.policy = ReplacementPolicy.none()
        self._record(state, rnorm)
        return self.monitor.check(self._stopping_norm(state, rnorm))

    def finish(self, state: SolverState, status: SolveStatus, message: str = "") -> SolveResult:
        self.trace.close(0.0)
        history = ConvergenceHistory(
            records=self.records,
            trace=self.trace,
            status=status.value,
            method=self.method,
            tol=self.opts.tol,
            norm_b=norm2(self.b),
        )
        if self.instr is not None:
            history = self.instr.finalize(history)
        iterations = len(self.records) - 1
        if status is SolveStatus.STAGNATION:
            logger.warning(f"{self.method}: stagnation after {iterations} iterations")
        logger.info(
            f"{self.method}: {status.value} after {iterations} iterations, "
            f"{len(self.replacements)} replacements, spmv={self.counts.spmv}, precond={self.counts.precond}"
        )
        return SolveResult(
            x_final=state.x,
            status=status,
            history=history,
            trace=self.trace,
            iterations=iterations,
            counts=self.counts,
            replacements=list(self.replacements),
            message=message,
        )


def _execute(run: _SolveRun, state: SolverState, loop: Callable[[_SolveRun, SolverState], SolveStatus]) -> SolveResult:
    try:
        status = loop(run, state)
        message = ""
    except BreakdownError as e:
        logger.error(f"{run.method} breakdown at iteration {state.i}: {e}")
        status = SolveStatus.BREAKDOWN
        message = str(e)
    return run.finish(state, status, message)


def _converged_half_step(run: _SolveRun, q: np.ndarray, yy) -> bool:
    """(y, y) vanished; accept x + αg when q is already below tolerance."""
    if norm2(q) <= run.monitor.threshold:
        return True
    raise BreakdownError(f"(y_i, y_i) = {yy!r} below breakdown threshold {run.opts.breakdown_eps!r}")


# ---------------------------------------------------------------------------
# Classic BiCGStab
# ---------------------------------------------------------------------------

def _bicgstab_classic_loop(run: _SolveRun, state: SolverState) -> SolveStatus:
    ops, opts = run.ops, run.opts
    eps = opts.breakdown_eps
    x = state.x
    r = run.b - ops.matvec(x)
    r0 = r
    p = r
    zero = run.zero(r)
    state.r, state.p, state.r0_shadow = r, p, r0
    state.alpha = state.beta = state.omega = state.omega_prev = zero
    stop = run.start(state)
    if stop:
        return stop
    r0_norm = norm2(r0)
    rho = _require(dot(r0, r), 0.0, "(r0, r0)")
    beta = zero

    for i in range(opts.max_iters):
        g = ops.precondition(p)
        s = ops.matvec(g)
        r0s = dot(r0, s)
        alpha = rho / _require(r0s, eps * r0_norm * norm2(s), "(r0, s_i)")
        q = r - alpha * s
        u = ops.precondition(q)
        y = ops.matvec(u)
        qy = dot(q, y)
        yy = dot(y, y)

        x_prev, r_prev = x, r
        if abs(yy) < eps and _converged_half_step(run, q, yy):
            omega = zero
            x = x + alpha * g
            r = q
        else:
            omega = _require(qy / _require(yy, eps, "(y_i, y_i)"), 0.0, "omega")
            x = x + alpha * g + omega * u
            r = q - omega * y

        state.i = i + 1
        state.x, state.r, state.x_prev, state.r_prev = x, r, x_prev, r_prev
        state.p, state.g, state.s, state.q, state.u, state.y = p, g, s, q, u, y
        state.omega_prev, state.alpha, state.beta, state.omega = state.omega, alpha, beta, omega
        state.dot_cache = {"r0_s": r0s, "q_y": qy, "y_y": yy}
        run.trace.record(alpha, omega)
        status = run.checkpoint(state)

        r0r = dot(r0, r)
        state.dot_cache["r0_r"] = r0r
        if status:
            run.trace.close(_closing_beta(lambda: (alpha / omega) * r0r / rho))
            return status
        beta = (alpha / _require(omega, 0.0, "omega")) * r0r / rho
        _finite(beta, "beta")
        p = r + beta * (p - omega * s)
        run.trace.close(beta)
        rho = _require(r0r, 0.0, "(r0, r_i)")
    return SolveStatus.MAX_ITERS


def bicgstab_classic(
    A: CsrMatrix,
    M: Preconditioner,
    b: np.ndarray,
    x0: np.ndarray,
    opts: Optional[SolveOptions] = None,
    instr: Optional[GapInstrument] = None,
) -> SolveResult:
    """Classic preconditioned BiCGStab: 4 dot products, 2 spmv and 2 preconditioner applications per iteration."""
    _check_dimensions(A, M, b, x0)
    run = _SolveRun("bicgstab", A, M, b, opts or SolveOptions(), ReplacementPolicy.none(), instr)
    return _execute(run, SolverState(method="bicgstab", x=x0), _bicgstab_classic_loop)


# ---------------------------------------------------------------------------
# Pipelined BiCGStab
# ---------------------------------------------------------------------------

def _bicgstab_pipelined_loop(run: _SolveRun, state: SolverState) -> SolveStatus:
    ops, opts = run.ops, run.opts
    eps = opts.breakdown_eps
    x = state.x
    r = run.b - ops.matvec(x)
    k = ops.precondition(r)
    w = ops.matvec(k)
    m = ops.precondition(w)
    t = ops.matvec(m)
    r0 = r
    zero = run.zero(r)
    vec0 = zeros_like(r)
    g = s = ell = z = n = v = vec0
    state.r, state.k, state.w, state.m, state.t, state.r0_shadow = r, k, w, m, t, r0
    state.alpha = state.beta = state.omega = state.omega_prev = zero
    stop = run.start(state)
    if stop:
        return stop

    rho = _require(dot(r0, r), 0.0, "(r0, r0)")
    r0w = dot(r0, w)
    alpha = rho / _require(r0w, eps, "(r0, w0)")
    beta = zero
    omega_prev = zero

    for i in range(opts.max_iters):
        g_prev, s_prev, ell_prev, z_prev, n_prev, v_prev = g, s, ell, z, n, v
        g = k + beta * (g - omega_prev * ell)
        s = w + beta * (s - omega_prev * z)
        ell = m + beta * (ell - omega_prev * n)
        z = t + beta * (z - omega_prev * v)
        q = r - alpha * s
        u = k - alpha * ell
        y = w - alpha * z
        qy = dot(q, y)
        yy = dot(y, y)
        n = ops.precondition(z)
        v = ops.matvec(n)

        x_prev, r_prev, k_prev, w_prev = x, r, k, w
        if abs(yy) < eps and _converged_half_step(run, q, yy):
            omega = zero
            x = x + alpha * g
            r, k, w = q, u, y
        else:
            omega = _require(qy / _require(yy, eps, "(y_i, y_i)"), 0.0, "omega")
            x = x + alpha * g + omega * u
            r = q - omega * y
            k = u - omega * (m - alpha * n)
            w = y - omega * (t - alpha * v)

        state.i = i + 1
        state.x, state.r, state.k, state.w = x, r, k, w
        state.x_prev, state.r_prev, state.k_prev, state.w_prev = x_prev, r_prev, k_prev, w_prev
        state.g, state.s, state.ell, state.z, state.q, state.u, state.y = g, s, ell, z, q, u, y
        state.m, state.t, state.n, state.v = m, t, n, v
        state.g_prev, state.s_prev, state.ell_prev, state.z_prev = g_prev, s_prev, ell_prev, z_prev
        state.n_prev, state.v_prev = n_prev, v_prev
        state.alpha, state.beta, state.omega, state.omega_prev = alpha, beta, omega, omega_prev
        state.dot_cache = {"q_y": qy, "y_y": yy}
        run.trace.record(alpha, omega)
        status = run.checkpoint(state)
        x, r, k, w = state.x, state.r, state.k, state.w
        s, ell, z = state.s, state.ell, state.z

        r0r = dot(r0, r)
        r0w = dot(r0, w)
        r0s = dot(r0, s)
        r0z = dot(r0, z)
        state.dot_cache.update(r0_r=r0r, r0_w=r0w, r0_s=r0s, r0_z=r0z)
        m = ops.precondition(w)
        t = ops.matvec(m)
        if status:
            run.trace.close(_closing_beta(lambda: (alpha / omega) * r0r / rho))
            return status

        beta = (alpha / _require(omega, 0.0, "omega")) * r0r / rho
        den = r0w + beta * r0s - beta * omega * r0z
        alpha_next = r0r / _require(den, eps, "alpha denominator")
        run.trace.close(_finite(beta, "beta"))
        rho = _require(r0r, 0.0, "(r0, r_i)")
        alpha = _require(alpha_next, 0.0, "alpha")
        omega_prev = omega
    return SolveStatus.MAX_ITERS


def bicgstab_pipelined(
    A: CsrMatrix,
    M: Preconditioner,
    b: np.ndarray,
    x0: np.ndarray,
    opts: Optional[SolveOptions] = None,
    rr: Optional[ReplacementPolicy] = None,
    instr: Optional[GapInstrument] = None,
) -> SolveResult:
    """Pipelined preconditioned BiCGStab with optional residual replacement.

    Args:
        A: system matrix
        M: preconditioner, applied as M⁻¹v
        b: right-hand side
        x0: initial guess
        opts: stopping and breakdown options
        rr: replacement policy, none by default
        instr: per-iteration gap instrumentation

    Returns:
        SolveResult with the history of every iterate including x0.
    """
    _check_dimensions(A, M, b, x0)
    run = _SolveRun("bicgstab_pipelined", A, M, b, opts or SolveOptions(), rr or ReplacementPolicy.none(), instr)
    return _execute(run, SolverState(method="bicgstab_pipelined", x=x0), _bicgstab_pipelined_loop)


# ---------------------------------------------------------------------------
# CG
# ---------------------------------------------------------------------------

def _cg_classic_loop(run: _SolveRun, state: SolverState) -> SolveStatus:
    ops, opts = run.ops, run.opts
    x = state.x
    r = run.b - ops.matvec(x)
    k = ops.precondition(r)
    g = k
    zero = run.zero(r)
    state.r = r
    state.alpha = state.beta = state.omega = state.omega_prev = zero
    stop = run.start(state)
    if stop:
        return stop
    rho = _require(dot(r, k), 0.0, "(r0, M^-1 r0)")
    beta = zero

    for i in range(opts.max_iters):
        s = ops.matvec(g)
        gs = dot(g, s)
        if not gs > 0:
            raise BreakdownError(f"(p_i, A p_i) = {gs!r} is not positive")
        alpha = _require(rho / gs, 0.0, "alpha")
        x_prev, r_prev = x, r
        x = x + alpha * g
        r = r - alpha * s

        state.i = i + 1
        state.x, state.r, state.x_prev, state.r_prev = x, r, x_prev, r_prev
        state.g, state.s = g, s
        state.alpha, state.beta = alpha, beta
        state.dot_cache = {"p_Ap": gs}
        run.trace.record(alpha, zero)
        status = run.checkpoint(state)
        if status:
            run.trace.close(0.0)
            return status

        k = ops.precondition(r)
        rho_next = dot(r, k)
        beta = _finite(rho_next / rho, "beta")
        g = k + beta * g
        run.trace.close(beta)
        rho = _require(rho_next, 0.0, "(r_i, M^-1 r_i)")
    return SolveStatus.MAX_ITERS


def cg_classic(
    A: CsrMatrix,
    M: Preconditioner,
    b: np.ndarray,
    x0: np.ndarray,
    opts: Optional[SolveOptions] = None,
    instr: Optional[GapInstrument] = None,
) -> SolveResult:
    """Preconditioned CG; A and M are assumed SPD."""
    _check_dimensions(A, M, b, x0)
    run = _SolveRun("cg", A, M, b, opts or SolveOptions(), ReplacementPolicy.none(), instr)
    return _execute(run, SolverState(method="cg", x=x0), _cg_classic_loop)


def _cg_pipelined_loop(run: _SolveRun, state: SolverState) -> SolveStatus:
    # preconditioned residual u lives in k, direction p in g, M⁻¹s in ell
    ops, opts = run.ops, run.opts
    eps = opts.breakdown_eps
    x = state.x
    r = run.b - ops.matvec(x)
    k = ops.precondition(r)
    w = ops.matvec(k)
    zero = run.zero(r)
    vec0 = zeros_like(r)
    g = s = ell = z = vec0
    state.r, state.k, state.w = r, k, w
    state.alpha = state.beta = state.omega = state.omega_prev = zero
    stop = run.start(state)
    if stop:
        return stop

    gamma = _require(dot(r, k), 0.0, "(r0, u0)")
    beta = zero
    alpha_prev = None

    for i in range(opts.max_iters):
        delta = dot(w, k)
        m = ops.precondition(w)
        n = ops.matvec(m)
        den = delta if alpha_prev is None else delta - beta * gamma / alpha_prev
        alpha = _require(gamma / _require(den, eps, "alpha denominator"), 0.0, "alpha")

        g_prev, s_prev, ell_prev, z_prev = g, s, ell, z
        x_prev, r_prev, k_prev, w_prev = x, r, k, w
        z = n + beta * z
        ell = m + beta * ell
        s = w + beta * s
        g = k + beta * g
        x = x + alpha * g
        r = r - alpha * s
        k = k - alpha * ell
        w = w - alpha * z

        state.i = i + 1
        state.x, state.r, state.k, state.w = x, r, k, w
        state.x_prev, state.r_prev, state.k_prev, state.w_prev = x_prev, r_prev, k_prev, w_prev
        state.g, state.s, state.ell, state.z, state.m, state.n = g, s, ell, z, m, n
        state.g_prev, state.s_prev, state.ell_prev, state.z_prev = g_prev, s_prev, ell_prev, z_prev
        state.alpha, state.beta = alpha, beta
        state.dot_cache = {"w_u": delta}
        run.trace.record(alpha, zero)
        status = run.checkpoint(state)
        x, r, k, w = state.x, state.r, state.k, state.w
        s, ell, z = state.s, state.ell, state.z

        gamma_next = dot(r, k)
        state.dot_cache["r_u"] = gamma_next
        if status:
            run.trace.close(_closing_beta(lambda: gamma_next / gamma))
            return status
        beta = _finite(gamma_next / gamma, "beta")
        run.trace.close(beta)
        gamma = _require(gamma_next, 0.0, "(r_i, u_i)")
        alpha_prev = alpha
    return SolveStatus.MAX_ITERS


def cg_pipelined(
    A: CsrMatrix,
    M: Preconditioner,
    b: np.ndarray,
    x0: np.ndarray,
    opts: Optional[SolveOptions] = None,
    rr: Optional[ReplacementPolicy] = None,
    instr: Optional[GapInstrument] = None,
) -> SolveResult:
    """Pipelined preconditioned CG (single reduction per iteration, overlapped with M⁻¹ and A)."""
    _check_dimensions(A, M, b, x0)
    run = _SolveRun("pcg_pipelined", A, M, b, opts or SolveOptions(), rr or ReplacementPolicy.none(), instr)
    return _execute(run, SolverState(method="pcg_pipelined", x=x0), _cg_pipelined_loop)


SOLVERS = {
    "bicgstab": bicgstab_classic,
    "bicgstab_pipelined": bicgstab_pipelined,
    "cg": cg_classic,
    "pcg_pipelined": cg_pipelined,
}

PIPELINED_SOLVERS = ("bicgstab_pipelined", "pcg_pipelined")


def solve(
    method: str,
    A: CsrMatrix,
    M: Preconditioner,
    b: np.ndarray,
    x0: np.ndarray,
    opts: Optional[SolveOptions] = None,
    rr: Optional[ReplacementPolicy] = None,
    instr: Optional[GapInstrument] = None,
) -> SolveResult:
    """Dispatch by method name; the replacement policy only reaches pipelined solvers."""
    if method not in SOLVERS:
        raise ValueError(f"unknown solver: {method!r}")
    if method in PIPELINED_SOLVERS:
        return SOLVERS[method](A, M, b, x0, opts=opts, rr=rr, instr=instr)
    if rr is not None and rr.kind is not ReplacementKind.NONE:
        logger.warning(f"{method}: replacement policy {rr.describe()} ignored for a classic solver")
    return SOLVERS[method](A, M, b, x0, opts=opts, instr=instr)
