"""Mixed complementarity problems with box bounds and a semismooth Newton solver.

A box-constrained MCP asks for z in [lower, upper] such that componentwise
either z_j sits at its lower bound with F_j(z) >= 0, at its upper bound
with F_j(z) <= 0, or strictly inside with F_j(z) = 0.  The solver works on
a Fischer-Burmeister reformulation: phi(a, b) = a + b - sqrt(a^2 + b^2)
vanishes exactly when a >= 0, b >= 0 and a*b = 0, so the three
complementarity cases collapse into the root set of a single semismooth
residual.  Newton steps on that residual with Armijo backtracking on the
squared-norm merit function give fast local convergence; diagonal
regularization and a gradient fallback cover singular Jacobians.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import DifferentiableMap, eval_with_jacobians


class SolveStatus(enum.Enum):
    SOLVED = "solved"
    MAX_ITERATIONS = "max_iterations"
    LINE_SEARCH_FAILURE = "line_search_failure"
    NUMERICAL_BREAKDOWN = "numerical_breakdown"


@dataclass
class BoxBounds:
    """Elementwise bounds; entries may be -inf / +inf."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("bounds must be 1-d arrays of equal length")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    def __len__(self) -> int:
        return self.lower.shape[0]

    def clamp(self, z: np.ndarray) -> np.ndarray:
        return np.clip(z, self.lower, self.upper)

    @staticmethod
    def free(dim: int) -> "BoxBounds":
        return BoxBounds(np.full(dim, -np.inf), np.full(dim, np.inf))


@dataclass
class MCPProblem:
    """Problem data (F, lower, upper) for a parametric family of MCPs.

    ``f``, ``jac_z`` and ``jac_theta`` evaluate the residual map and its
    Jacobians at (z, theta); shapes are (d,), (d, d) and (d, p).
    """

    dim: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_z: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_theta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    bounds: BoxBounds
    param_dim: int = 0

    def __post_init__(self):
        if len(self.bounds) != self.dim:
            raise ValueError("bounds length does not match problem dimension")

    @classmethod
    def from_map(cls, dmap: DifferentiableMap, bounds: BoxBounds) -> "MCPProblem":
        def f(z, theta):
            v, _, _ = eval_with_jacobians(dmap, z, theta)
            return v

        def jac_z(z, theta):
            _, jz, _ = eval_with_jacobians(dmap, z, theta)
            return jz

        def jac_theta(z, theta):
            _, _, jt = eval_with_jacobians(dmap, z, theta)
            return jt

        return cls(dmap.dim_z, f, jac_z, jac_theta, bounds, dmap.dim_theta)


@dataclass
class SolverConfig:
    tolerance: float = 1e-8
    max_iterations: int = 100
    armijo_coeff: float = 1e-4
    backtrack_ratio: float = 0.5
    min_step: float = 1e-12
    regularization: float = 1e-10

    def __post_init__(self):
        if not (0.0 < self.backtrack_ratio < 1.0):
            raise ValueError("backtracking ratio must lie in (0, 1)")
        for name in ("tolerance", "max_iterations", "armijo_coeff", "min_step", "regularization"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class MCPSolution:
    z_star: np.ndarray
    status: SolveStatus
    merit_residual: float
    iterations: int

    @property
    def solved(self) -> bool:
        return self.status is SolveStatus.SOLVED


def fischer_burmeister(a, b):
    """phi(a, b) = a + b - sqrt(a^2 + b^2); zero iff a >= 0, b >= 0, a*b = 0."""
    return a + b - np.hypot(a, b)


def _bound_masks(bounds: BoxBounds):
    has_lower = np.isfinite(bounds.lower)
    has_upper = np.isfinite(bounds.upper)
    return (
        ~has_lower & ~has_upper,
        has_lower & ~has_upper,
        ~has_lower & has_upper,
        has_lower & has_upper,
    )


def mcp_residual(problem: MCPProblem, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Componentwise Fischer-Burmeister reformulation of the MCP conditions."""
    z = np.asarray(z, dtype=float)
    if z.shape != (problem.dim,):
        raise ValueError(f"z has shape {z.shape}, expected ({problem.dim},)")
    fv = np.asarray(problem.f(z, theta), dtype=float)
    if fv.shape != (problem.dim,):
        raise ValueError("residual map returned wrong dimension")
    return _reformulate(fv, z, problem.bounds)


def _reformulate(fv: np.ndarray, z: np.ndarray, bounds: BoxBounds) -> np.ndarray:
    free, lo_only, up_only, both = _bound_masks(bounds)
    r = np.empty_like(fv)
    r[free] = fv[free]
    if np.any(lo_only):
        r[lo_only] = fischer_burmeister(z[lo_only] - bounds.lower[lo_only], fv[lo_only])
    if np.any(up_only):
        r[up_only] = -fischer_burmeister(bounds.upper[up_only] - z[up_only], -fv[up_only])
    if np.any(both):
        inner = -fischer_burmeister(bounds.upper[both] - z[both], -fv[both])
        r[both] = fischer_burmeister(z[both] - bounds.lower[both], inner)
    return r


def _fb_partials(a: np.ndarray, b: np.ndarray):
    # Generalized gradient of phi; at the origin pick the element for the
    # direction (1, 1), which keeps the Newton matrix well scaled.
    s = np.hypot(a, b)
    tiny = s < 1e-14
    s_safe = np.where(tiny, 1.0, s)
    da = 1.0 - a / s_safe
    db = 1.0 - b / s_safe
    da[tiny] = 1.0 - np.sqrt(0.5)
    db[tiny] = 1.0 - np.sqrt(0.5)
    return da, db


def _residual_and_jacobian(problem: MCPProblem, z: np.ndarray, theta: np.ndarray):
    fv = np.asarray(problem.f(z, theta), dtype=float)
    jf = np.asarray(problem.jac_z(z, theta), dtype=float)
    bounds = problem.bounds
    free, lo_only, up_only, both = _bound_masks(bounds)

    r = _reformulate(fv, z, bounds)
    # Row j of the residual Jacobian is alpha_j * e_j + beta_j * (dF_j/dz).
    alpha = np.zeros(problem.dim)
    beta = np.ones(problem.dim)
    if np.any(lo_only):
        da, db = _fb_partials(z[lo_only] - bounds.lower[lo_only], fv[lo_only])
        alpha[lo_only] = da
        beta[lo_only] = db
    if np.any(up_only):
        da, db = _fb_partials(bounds.upper[up_only] - z[up_only], -fv[up_only])
        alpha[up_only] = da
        beta[up_only] = db
    if np.any(both):
        a_up = bounds.upper[both] - z[both]
        da_in, db_in = _fb_partials(a_up, -fv[both])
        inner = -fischer_burmeister(a_up, -fv[both])
        da_out, db_out = _fb_partials(z[both] - bounds.lower[both], inner)
        alpha[both] = da_out + db_out * da_in
        beta[both] = db_out * db_in
    jr = beta[:, None] * jf
    jr[np.arange(problem.dim), np.arange(problem.dim)] += alpha
    return r, jr


def solve_mcp(
    problem: MCPProblem,
    theta: Optional[np.ndarray] = None,
    initial_guess: Optional[np.ndarray] = None,
    config: Optional[SolverConfig] = None,
) -> MCPSolution:
    """Semismooth Newton with Armijo backtracking on 0.5*||r||^2.

    The initial guess is clamped into the bounds.  Failures are reported in
    the returned status together with the best iterate found; the call
    never raises for numerical trouble.
    """
    config = config or SolverConfig()
    theta = np.zeros(problem.param_dim) if theta is None else np.asarray(theta, dtype=float)
    z = problem.bounds.clamp(
        np.zeros(problem.dim) if initial_guess is None else np.asarray(initial_guess, dtype=float)
    )

    best_z = z.copy()
    best_norm = np.inf
    status = SolveStatus.MAX_ITERATIONS
    iterations = 0
    stall = 0

    # The residual alone is much cheaper than residual plus Jacobian, so
    # convergence is checked first and the Jacobian only assembled for an
    # actual Newton step; the accepted line-search trial already carries the
    # next iterate's residual.
    try:
        r = _reformulate(np.asarray(problem.f(z, theta), dtype=float), z, problem.bounds)
    except FloatingPointError:
        r = np.array([np.nan])

    for it in range(config.max_iterations + 1):
        if not np.all(np.isfinite(r)):
            status = SolveStatus.NUMERICAL_BREAKDOWN
            break
        norm = float(np.max(np.abs(r)))
        if norm < 0.999 * best_norm:
            stall = 0
        else:
            stall += 1
        if norm < best_norm:
            best_norm, best_z = norm, z.copy()
        if norm <= config.tolerance:
            status = SolveStatus.SOLVED
            iterations = it
            break
        if it == config.max_iterations:
            iterations = it
            break
        if stall >= 10:
            # Ten iterations without meaningful progress: the line search is
            # only accepting null steps, typically an infeasible instance.
            status = SolveStatus.LINE_SEARCH_FAILURE
            iterations = it
            break
        try:
            r, jr = _residual_and_jacobian(problem, z, theta)
        except FloatingPointError:
            status = SolveStatus.NUMERICAL_BREAKDOWN
            break
        if not np.all(np.isfinite(jr)):
            status = SolveStatus.NUMERICAL_BREAKDOWN
            break

        grad = jr.T @ r  # gradient of the merit function
        step = _newton_direction(jr, r, config)
        if step is None or float(grad @ step) >= 0.0:
            step = -grad  # fall back to steepest descent on the merit
        merit = 0.5 * float(r @ r)
        accepted = False
        for direction in (step, -grad):
            slope = float(grad @ direction)
            if slope >= 0.0:
                continue
            t = 1.0
            while t >= config.min_step:
                trial = z + t * direction
                try:
                    r_trial = _reformulate(
                        np.asarray(problem.f(trial, theta), dtype=float), trial, problem.bounds
                    )
                except FloatingPointError:
                    r_trial = np.array([np.nan])
                if np.all(np.isfinite(r_trial)):
                    merit_trial = 0.5 * float(r_trial @ r_trial)
                    if merit_trial <= merit + config.armijo_coeff * t * slope:
                        z = trial
                        r = r_trial
                        accepted = True
                        break
                t *= config.backtrack_ratio
            if accepted:
                break
        iterations = it + 1
        if not accepted:
            status = SolveStatus.LINE_SEARCH_FAILURE
            break

    z_final = best_z
    # Roots of the reformulation satisfy the bounds up to solver tolerance;
    # snap back exactly when the projection does not hurt the residual.
    clamped = problem.bounds.clamp(z_final)
    if not np.array_equal(clamped, z_final):
        try:
            r_cl = mcp_residual(problem, clamped, theta)
            if np.all(np.isfinite(r_cl)) and float(np.max(np.abs(r_cl))) <= max(best_norm, config.tolerance):
                z_final = clamped
                best_norm = float(np.max(np.abs(r_cl)))
        except (ValueError, FloatingPointError):
            pass
    if status is SolveStatus.SOLVED and best_norm > config.tolerance:
        status = SolveStatus.MAX_ITERATIONS
    return MCPSolution(z_final, status, best_norm, iterations)


def _newton_direction(jr: np.ndarray, r: np.ndarray, config: SolverConfig) -> Optional[np.ndarray]:
    shift = config.regularization
    mat = jr
    for attempt in range(4):
        try:
            d = np.linalg.solve(mat, -r)
        except np.linalg.LinAlgError:
            d = None
        if d is not None and np.all(np.isfinite(d)):
            return d
        # Retry with an escalating diagonal shift; give up after 3 shifts.
        mat = jr + shift * np.eye(jr.shape[0])
        shift *= 1e4
    return None


def complementarity_cases(problem: MCPProblem, z: np.ndarray, theta: np.ndarray, tol: float):
    """Classify each component into the lower/interior/upper case.

    Returns three boolean arrays (case_lower, case_interior, case_upper);
    a solution within ``tol`` satisfies exactly one case per component.
    """
    fv = np.asarray(problem.f(z, theta), dtype=float)
    lo, up = problem.bounds.lower, problem.bounds.upper
    at_lower = (z - lo) <= tol
    at_upper = (up - z) <= tol
    fixed = at_lower & at_upper  # degenerate lower == upper components
    case_lower = at_lower & ~fixed & (fv >= -tol)
    case_upper = at_upper & ~fixed & (fv <= tol)
    case_interior = ~at_lower & ~at_upper & (np.abs(fv) <= tol)
    case_lower |= fixed
    return case_lower, case_interior, case_upper
