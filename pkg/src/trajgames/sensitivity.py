"""Differentiate MCP solutions with respect to problem parameters.

At a solution, components sitting strictly at a bound stay there under
small parameter perturbations (their derivative vanishes), while the
strictly interior components keep the residual map at its root, so the
implicit function theorem yields their derivative from the reduced linear
system  (dF/dz)|_inactive  *  dz/dtheta  =  -dF/dtheta|_inactive.

Weakly active components (at a bound with F = 0) have no classical
derivative; following the optimistic heuristic, they are treated as
inactive when forming the reduced system, which selects one subderivative.
The reduced system may be singular; a least-squares solve with a
numerical-rank cutoff then returns the minimum-norm solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .autodiff import NumericalBreakdown
from .mcp import MCPProblem


@dataclass
class ActiveSetPartition:
    """Index partition at a solved point.

    ``active_tilde`` holds strictly active bound components, ``inactive_bar``
    strictly interior roots of F, and ``weak_hat`` components at a bound
    with F = 0.  The three sets partition [0, d); derivative computations
    merge ``weak_hat`` into the inactive set.
    """

    active_tilde: np.ndarray
    inactive_bar: np.ndarray
    weak_hat: np.ndarray
    epsilon: float

    @property
    def merged_inactive(self) -> np.ndarray:
        return np.sort(np.concatenate([self.inactive_bar, self.weak_hat]))

    def same_as(self, other: "ActiveSetPartition") -> bool:
        return (
            np.array_equal(self.active_tilde, other.active_tilde)
            and np.array_equal(self.inactive_bar, other.inactive_bar)
            and np.array_equal(self.weak_hat, other.weak_hat)
        )


@dataclass
class SolutionSensitivity:
    """Jacobian of the solution map theta -> z*(theta) at one solution."""

    jacobian: np.ndarray  # (d, p); rows of active_tilde are exactly zero
    partition: ActiveSetPartition
    least_squares_residual: float
    rank_deficient: bool


def partition_indices(
    problem: MCPProblem, z_star: np.ndarray, theta: np.ndarray, epsilon: float = 1e-7
) -> ActiveSetPartition:
    """Classify components as strongly active, interior, or weakly active."""
    fv = np.asarray(problem.f(z_star, theta), dtype=float)
    lo, up = problem.bounds.lower, problem.bounds.upper
    at_bound = np.minimum(z_star - lo, up - z_star) <= epsilon
    f_zero = np.abs(fv) <= epsilon
    idx = np.arange(problem.dim)
    weak = at_bound & f_zero
    return ActiveSetPartition(
        active_tilde=idx[at_bound & ~f_zero],
        inactive_bar=idx[~at_bound],
        weak_hat=idx[weak],
        epsilon=epsilon,
    )


def differentiate_solution(
    problem: MCPProblem,
    z_star: np.ndarray,
    theta: np.ndarray,
    partition: ActiveSetPartition,
) -> SolutionSensitivity:
    """Assemble the full d-by-p solution Jacobian at a solved point."""
    d, p = problem.dim, problem.param_dim
    jac = np.zeros((d, p))
    bar = partition.merged_inactive
    if bar.size == 0 or p == 0:
        return SolutionSensitivity(jac, partition, 0.0, False)

    jz = np.asarray(problem.jac_z(z_star, theta), dtype=float)
    jt = np.asarray(problem.jac_theta(z_star, theta), dtype=float)
    a = jz[np.ix_(bar, bar)]
    b = -jt[bar, :]

    solution = None
    rank_deficient = False
    try:
        candidate = np.linalg.solve(a, b)
        if np.all(np.isfinite(candidate)):
            res = a @ candidate - b
            if float(np.max(np.abs(res))) <= 1e-6 * max(1.0, float(np.max(np.abs(b))) if b.size else 1.0):
                solution = candidate
    except np.linalg.LinAlgError:
        pass
    if solution is None:
        # Orthogonal-factorization least squares with a numerical-rank
        # cutoff; returns the minimum-norm solution on rank deficiency.
        rcond = max(a.shape) * np.finfo(float).eps
        solution, _, rank = scipy.linalg.lstsq(a, b, cond=rcond, lapack_driver="gelsy")[:3]
        rank_deficient = rank < bar.size

    if not np.all(np.isfinite(solution)):
        raise NumericalBreakdown("non-finite solution sensitivity")
    residual = float(np.linalg.norm(a @ solution - b)) if solution.size else 0.0
    jac[bar, :] = solution
    return SolutionSensitivity(jac, partition, residual, rank_deficient)


def solution_sensitivity(
    problem: MCPProblem, z_star: np.ndarray, theta: np.ndarray, epsilon: float = 1e-7
) -> SolutionSensitivity:
    """Convenience wrapper: partition then differentiate."""
    return differentiate_solution(problem, z_star, theta, partition_indices(problem, z_star, theta, epsilon))
