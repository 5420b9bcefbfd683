"""Maximum-likelihood estimation of game parameters from observed play.

The ego keeps a sliding window of (possibly partial, possibly noisy)
observations of its opponents and explains them as a Nash game replayed
over the window: the game family is solved at the current parameter guess,
the induced trajectories are projected through the observation map, and
the squared mismatch is the negative log-likelihood under an isotropic
Gaussian noise model.  Because the solver is differentiable, plain
gradient descent on that objective updates the parameter estimate online;
each descent step costs one warm-started solve plus one solution
sensitivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .games import PrimalDualLayout, TrajectoryGame
from .mcp import MCPSolution, SolveStatus, SolverConfig, solve_mcp
from .sensitivity import solution_sensitivity


class ForwardSolveFailed(RuntimeError):
    """Raised when the inner game solve does not converge."""

    def __init__(self, status: SolveStatus):
        super().__init__(f"forward solve failed: {status.value}")
        self.status = status


@dataclass
class ObservationBuffer:
    """Fixed-length FIFO window of observation vectors with timestamps."""

    capacity: int = 10
    stamps: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def push(self, stamp: int, y: np.ndarray):
        self.stamps.append(int(stamp))
        self.values.append(np.asarray(y, dtype=float))
        while len(self.stamps) > self.capacity:
            self.stamps.pop(0)
            self.values.pop(0)

    def __len__(self) -> int:
        return len(self.stamps)

    def flat(self) -> np.ndarray:
        if not self.values:
            return np.zeros(0)
        return np.concatenate(self.values)

    def copy(self) -> "ObservationBuffer":
        return ObservationBuffer(self.capacity, list(self.stamps), [v.copy() for v in self.values])


@dataclass
class ObservationModel:
    """Linear selection of observed players' positions or full states."""

    observed_players: list
    mode: str = "position_only"  # or "full"
    sigma: float = 0.0

    def __post_init__(self):
        if self.mode not in ("position_only", "full"):
            raise ValueError(f"unknown observation mode {self.mode!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def components(self) -> np.ndarray:
        return np.arange(2) if self.mode == "position_only" else np.arange(4)

    def observe_state(self, x_joint: np.ndarray, state_dim: int = 4) -> np.ndarray:
        comps = self.components()
        return np.concatenate([x_joint[state_dim * j + comps] for j in self.observed_players])

    def project(self, X: np.ndarray, U: np.ndarray, window: int) -> np.ndarray:
        """Expected observation sequence for the first ``window`` knots."""
        if window > X.shape[0]:
            raise ValueError("observation window exceeds trajectory horizon")
        comps = self.components()
        out = np.empty((window, len(self.observed_players) * len(comps)))
        for t in range(window):
            out[t] = np.concatenate([X[t, 4 * j + comps] for j in self.observed_players])
        return out

    def selection_indices(self, layout: PrimalDualLayout, window: int) -> np.ndarray:
        """Global z-indices matching the flattened buffer ordering."""
        comps = self.components()
        rows = []
        for t in range(window):
            for j in self.observed_players:
                rows.append(layout.state_index(j, t, comps))
        return np.concatenate(rows) if rows else np.zeros(0, dtype=int)


@dataclass
class EstimatorConfig:
    learning_rate: float = 0.02
    max_steps: int = 30
    stop_tol: float = 1e-4
    theta_lower: Optional[np.ndarray] = None  # clamp box over the full theta vector
    theta_upper: Optional[np.ndarray] = None
    # Fixed per-component step scaling (a unit reparameterization of theta):
    # initial-state components see far higher likelihood curvature than
    # objective parameters, so descending them with one global rate either
    # diverges or crawls.  Scales are scenario constants, not adapted online.
    lr_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.stop_tol <= 0 or self.max_steps < 0:
            raise ValueError("invalid estimator configuration")


def negative_log_likelihood(buffer: ObservationBuffer, X: np.ndarray, U: np.ndarray, model: ObservationModel) -> float:
    """|| Y - r(X, U) ||^2; constant offsets and 1/sigma^2 fold into the
    learning rate under the isotropic Gaussian model."""
    expected = model.project(X, U, len(buffer))
    resid = buffer.flat() - expected.reshape(-1)
    return float(resid @ resid)


def likelihood_gradient(
    game: TrajectoryGame,
    theta: np.ndarray,
    buffer: ObservationBuffer,
    model: ObservationModel,
    solver_config: Optional[SolverConfig] = None,
    initial_guess: Optional[np.ndarray] = None,
):
    """One differentiable solve: returns (nll, d nll / d theta, solution).

    The gradient composes the observation residual with the constant
    trajectory-selection map and the solution sensitivity.
    """
    compiled = game.compiled()
    problem, layout = compiled.problem, compiled.layout
    solver_config = solver_config or SolverConfig()
    sol = solve_mcp(problem, theta, initial_guess, solver_config)
    if not sol.solved:
        raise ForwardSolveFailed(sol.status)
    if layout.theta_dim == 0:
        return 0.0, np.zeros(0), sol
    sel = model.selection_indices(layout, len(buffer))
    resid = sol.z_star[sel] - buffer.flat()
    nll = float(resid @ resid)
    sens = solution_sensitivity(problem, sol.z_star, theta)
    grad = 2.0 * resid @ sens.jacobian[sel, :]
    return nll, grad, sol


@dataclass
class EstimateDiagnostics:
    steps: int = 0
    nll_history: list = field(default_factory=list)
    grad_norm: float = np.inf
    failed_solves: int = 0
    converged: bool = False

    @property
    def final_nll(self) -> float:
        return self.nll_history[-1] if self.nll_history else np.nan

    @property
    def all_failed(self) -> bool:
        return self.failed_solves > 0 and not self.nll_history


def update_estimate(
    game: TrajectoryGame,
    theta_tilde: np.ndarray,
    buffer: ObservationBuffer,
    model: ObservationModel,
    config: EstimatorConfig,
    mask: Optional[np.ndarray] = None,
    initial_guess: Optional[np.ndarray] = None,
    cold_guess: Optional[np.ndarray] = None,
):
    """Gradient-descent refinement of the parameter estimate.

    Runs at most ``max_steps`` descent steps, stopping early when the
    masked gradient norm falls below ``stop_tol``.  Solver failures never
    raise: a failed warm-started solve is retried once from ``cold_guess``,
    and if that also fails the best estimate so far is returned with
    diagnostics, so a planner tick can always proceed.

    Returns (theta_new, diagnostics, last_solution).
    """
    layout = game.layout
    theta = np.asarray(theta_tilde, dtype=float).copy()
    mask = np.ones(layout.theta_dim, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    diag = EstimateDiagnostics()
    warm = initial_guess
    last_sol = None

    for _ in range(config.max_steps):
        try:
            nll, grad, sol = likelihood_gradient(game, theta, buffer, model, None, warm)
        except ForwardSolveFailed:
            if cold_guess is not None and warm is not cold_guess:
                try:
                    nll, grad, sol = likelihood_gradient(game, theta, buffer, model, None, cold_guess)
                except ForwardSolveFailed:
                    diag.failed_solves += 1
                    break
            else:
                diag.failed_solves += 1
                break
        last_sol = sol
        warm = sol.z_star
        diag.nll_history.append(nll)
        g = np.where(mask, grad, 0.0)
        if config.lr_scale is not None:
            g = g * config.lr_scale
        diag.grad_norm = float(np.linalg.norm(g))
        if diag.grad_norm <= config.stop_tol:
            diag.converged = True
            break
        theta = theta - config.learning_rate * g
        if config.theta_lower is not None:
            theta = np.maximum(theta, config.theta_lower)
        if config.theta_upper is not None:
            theta = np.minimum(theta, config.theta_upper)
        diag.steps += 1
    return theta, diag, last_sol
