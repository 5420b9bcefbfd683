"""Receding-horizon game-theoretic planners and the episode simulator.

Three ego planners share one forward-game backend:

* adaptive: refine the opponent-parameter estimate by gradient descent
  through the differentiable solver, then solve the full constrained game
  at the estimate and apply the first ego input;
* kkt_baseline: same loop, but the estimation game drops every inequality
  row (soft cubic penalties remain), while planning still uses the full
  constrained game;
* constant-velocity MPC: opponents are extrapolated from the latest
  observation and frozen; the ego solves a single-player problem against
  those predictions.

Opponent behavior in simulation comes from a ground-truth solve of the
hidden game; ego and opponents advance a shared state by their first
inputs each tick.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .estimation import (
    EstimatorConfig,
    ObservationBuffer,
    ObservationModel,
    update_estimate,
)
from .games import Theta, extract_trajectories, shift_solution
from .mcp import SolveStatus, SolverConfig, solve_mcp
from .scenarios import Scenario

ADAPTIVE_MPGP = "adaptive_mpgp"
KKT_BASELINE = "kkt_baseline"
CONSTANT_VELOCITY_MPC = "constant_velocity_mpc"
GROUND_TRUTH = "ground_truth"
METHODS = (ADAPTIVE_MPGP, KKT_BASELINE, CONSTANT_VELOCITY_MPC, GROUND_TRUTH)


@dataclass
class PlannerConfig:
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(tolerance=1e-8, max_iterations=60))
    estimate_initial_state: Optional[bool] = None  # default: infer in position_only mode
    use_warm_start: bool = True
    estimation_family: str = "full"  # "full" | "kkt"
    nn_init: Optional[object] = None  # callable buffer -> dict of pref slot values


@dataclass
class PlannerState:
    theta_tilde: np.ndarray
    buffer: ObservationBuffer
    ego_history: ObservationBuffer
    last_forward: Optional[np.ndarray] = None
    last_inverse: Optional[np.ndarray] = None
    tick: int = 0


@dataclass
class PlanResult:
    ego_control: np.ndarray
    predicted_X: Optional[np.ndarray]
    predicted_U: Optional[np.ndarray]
    solve_status: SolveStatus
    infeasible: bool
    theta_estimate: np.ndarray
    nll: float
    estimator_steps: int = 0
    estimator_failures: int = 0
    forward_iterations: int = 0
    compute_ms: float = 0.0


def make_planner_state(scenario: Scenario, config: PlannerConfig) -> PlannerState:
    game = scenario.kkt_game if config.estimation_family == "kkt" else scenario.est_game
    layout = game.layout
    theta = np.zeros(layout.theta_dim)
    for name, value in scenario.prior_params.items():
        off, dim = layout.slots[name]
        theta[off : off + dim] = value
    cap = scenario.horizon
    return PlannerState(theta, ObservationBuffer(cap), ObservationBuffer(cap))


def observation_model(scenario: Scenario) -> ObservationModel:
    return ObservationModel(
        observed_players=scenario.opponent_indices(),
        mode=scenario.observation_mode,
        sigma=scenario.noise_sigma,
    )


def make_estimator_config(scenario: Scenario, estimation_family: str = "full", **overrides) -> EstimatorConfig:
    """Estimator configuration from the scenario's tuned defaults: global
    learning rate, per-block step scales, and clamp boxes for the estimate."""
    game = scenario.kkt_game if estimation_family == "kkt" else scenario.est_game
    layout = game.layout
    d = dict(scenario.estimator_defaults)
    d.update(overrides)
    scale = np.ones(layout.theta_dim)
    for j in scenario.opponent_indices():
        idx = layout.xhat_index(j)
        scale[idx[:2]] = d.get("scale_xhat_pos", 1.0)
        scale[idx[2:]] = d.get("scale_xhat_vel", 1.0)
    for name in scenario.prior_params:
        off, dim = layout.slots[name]
        scale[off : off + dim] = d.get("scale_prefs", 1.0)
    lo = np.full(layout.theta_dim, -np.inf)
    hi = np.full(layout.theta_dim, np.inf)
    if scenario.xhat_lower is not None:
        for j in scenario.opponent_indices():
            idx = layout.xhat_index(j)
            lo[idx] = scenario.xhat_lower
            hi[idx] = scenario.xhat_upper
    for name, v in scenario.theta_lower.items():
        off, dim = layout.slots[name]
        lo[off : off + dim] = v
    for name, v in scenario.theta_upper.items():
        off, dim = layout.slots[name]
        hi[off : off + dim] = v
    return EstimatorConfig(
        learning_rate=d.get("learning_rate", 0.02),
        max_steps=d.get("max_steps", 30),
        stop_tol=d.get("stop_tol", 1e-4),
        theta_lower=lo,
        theta_upper=hi,
        lr_scale=scale,
    )


def default_planner_config(scenario: Scenario, method: str = ADAPTIVE_MPGP, **est_overrides) -> PlannerConfig:
    family = "kkt" if method == KKT_BASELINE else "full"
    return PlannerConfig(
        estimator=make_estimator_config(scenario, family, **est_overrides),
        estimation_family=family,
    )


def theta_bounds_vectors(scenario: Scenario, layout) -> tuple:
    lo = np.full(layout.theta_dim, -np.inf)
    hi = np.full(layout.theta_dim, np.inf)
    for name, v in scenario.theta_lower.items():
        off, dim = layout.slots[name]
        lo[off : off + dim] = v
    for name, v in scenario.theta_upper.items():
        off, dim = layout.slots[name]
        hi[off : off + dim] = v
    return lo, hi


def _estimation_mask(scenario: Scenario, layout, estimate_initial_state: bool) -> np.ndarray:
    mask = np.zeros(layout.theta_dim, dtype=bool)
    for name in scenario.prior_params:
        off, dim = layout.slots[name]
        mask[off : off + dim] = True
    if estimate_initial_state:
        for j in scenario.opponent_indices():
            mask[layout.xhat_index(j)] = True
    return mask


def _rollout_guess(layout, x_joint: np.ndarray) -> np.ndarray:
    """Cold-start guess: hold every player at its current state."""
    z = np.zeros(layout.dim)
    off = 0
    for i in range(layout.n_players):
        n = layout.state_dims[i]
        for t in range(layout.horizon):
            z[layout.state_index(i, t)] = x_joint[off : off + n]
        off += n
    return z


def _fd_velocity(buffer: ObservationBuffer, n_opp: int, dt: float) -> np.ndarray:
    """Per-opponent planar velocity from the last two position observations."""
    if len(buffer) < 2:
        return np.zeros((n_opp, 2))
    newest = buffer.values[-1].reshape(n_opp, -1)
    prev = buffer.values[-2].reshape(n_opp, -1)
    gap = buffer.stamps[-1] - buffer.stamps[-2]
    return (newest[:, :2] - prev[:, :2]) / (dt * max(gap, 1))


def _opponent_states_now(scenario, model, buffer, inv_solution, est_layout):
    """Current full state of every opponent, best available estimate.

    ``inv_solution`` must be this tick's replay solution or None; a stale
    replay would pin the forward game at states that no longer exist.
    """
    n_opp = len(scenario.opponent_indices())
    if model.mode == "full":
        return buffer.values[-1].reshape(n_opp, 4)
    pos = buffer.values[-1].reshape(n_opp, -1)[:, :2]
    if inv_solution is not None:
        # Positions come straight from the newest observation (exact up to
        # sensor noise); the replay supplies the unobserved velocities.
        X, _ = extract_trajectories(est_layout, inv_solution)
        knot = len(buffer) - 1
        vel = np.stack([X[knot, 4 * j + 2 : 4 * j + 4] for j in scenario.opponent_indices()])
    else:
        vel = _fd_velocity(buffer, n_opp, scenario.dt)
    return np.hstack([pos, vel])


def step_adaptive_mpgp(
    state: PlannerState,
    new_observation: np.ndarray,
    ego_state: np.ndarray,
    scenario: Scenario,
    config: PlannerConfig,
):
    """One planner tick: update buffer, refine the estimate, solve the
    forward game at the estimate, return the first ego input."""
    t_start = time.perf_counter()
    est_game = scenario.kkt_game if config.estimation_family == "kkt" else scenario.est_game
    est_layout = est_game.layout
    model = observation_model(scenario)
    estimate_x0 = (
        config.estimate_initial_state
        if config.estimate_initial_state is not None
        else model.mode == "position_only"
    )

    buffer = state.buffer.copy()
    ego_hist = state.ego_history.copy()
    old_start = buffer.stamps[0] if len(buffer) else None
    buffer.push(state.tick, new_observation)
    ego_hist.push(state.tick, ego_state)
    new_start = buffer.stamps[0]

    theta = state.theta_tilde.copy()
    # Pin the ego's replay initial state from its own history.
    theta[est_layout.xhat_index(0)] = ego_hist.values[0]
    n_opp = len(scenario.opponent_indices())
    if model.mode == "full":
        oldest = buffer.values[0].reshape(n_opp, 4)
        for k, j in enumerate(scenario.opponent_indices()):
            theta[est_layout.xhat_index(j)] = oldest[k]
    else:
        if state.last_inverse is None or old_start is None:
            pos = buffer.values[0].reshape(n_opp, -1)[:, :2]
            vel = _fd_velocity(buffer, n_opp, scenario.dt)
            for k, j in enumerate(scenario.opponent_indices()):
                theta[est_layout.xhat_index(j)] = np.concatenate([pos[k], vel[k]])
        elif new_start > old_start:
            # The window slid: advance the inferred initial state along the
            # previous replay solution.
            X_prev, _ = extract_trajectories(est_layout, state.last_inverse)
            knot = min(new_start - old_start, scenario.horizon - 1)
            for j in scenario.opponent_indices():
                theta[est_layout.xhat_index(j)] = X_prev[knot, 4 * j : 4 * j + 4]

    if config.nn_init is not None and len(buffer) == buffer.capacity:
        for name, value in config.nn_init(buffer).items():
            off, dim = est_layout.slots[name]
            theta[off : off + dim] = value

    mask = _estimation_mask(scenario, est_layout, estimate_x0)
    replay_x0 = np.concatenate([theta[est_layout.xhat_index(i)] for i in range(est_layout.n_players)])
    cold_inv = _rollout_guess(est_layout, replay_x0)
    if config.use_warm_start and state.last_inverse is not None:
        warm_inv = state.last_inverse
        if old_start is not None and new_start > old_start:
            warm_inv = shift_solution(est_layout, warm_inv)
    else:
        warm_inv = cold_inv
    theta_new, diag, inv_sol = update_estimate(
        est_game, theta, buffer, model, config.estimator, mask, warm_inv, cold_guess=cold_inv
    )
    # A dead replay warm start must not be carried forward: next tick
    # restarts from a rollout at the pinned window state.
    inv_z = inv_sol.z_star if inv_sol is not None else None

    # Forward game at the refreshed estimate, from the current joint state.
    fwd_game = scenario.forward_game
    layout = fwd_game.layout
    fwd_theta = np.zeros(layout.theta_dim)
    fwd_theta[layout.xhat_index(0)] = ego_state
    opp_now = _opponent_states_now(scenario, model, buffer, inv_z, est_layout)
    for k, j in enumerate(scenario.opponent_indices()):
        fwd_theta[layout.xhat_index(j)] = opp_now[k]
    for name in scenario.prior_params:
        off, dim = layout.slots[name]
        eoff, _ = est_layout.slots[name]
        fwd_theta[off : off + dim] = theta_new[eoff : eoff + dim]

    x_joint_now = np.concatenate([ego_state] + [opp_now[k] for k in range(n_opp)])
    cold = _rollout_guess(layout, x_joint_now)
    if config.use_warm_start and state.last_forward is not None:
        guess = shift_solution(layout, state.last_forward)
    else:
        guess = cold
    problem = fwd_game.compiled().problem
    fsol = solve_mcp(problem, fwd_theta, guess, config.solver)
    if not fsol.solved and guess is not cold:
        # A shifted warm start can strand Newton in a merit local minimum;
        # only a failure from the cold rollout counts as infeasible.
        retry = solve_mcp(problem, fwd_theta, cold, config.solver)
        if retry.solved:
            fsol = retry

    if fsol.solved:
        pX, pU = extract_trajectories(layout, fsol.z_star)
        ego_u = fsol.z_star[layout.control_index(0, 0)].copy()
        last_forward = fsol.z_star
    else:
        # Fallback: reuse the previous plan shifted one step; zero input if
        # no plan exists yet.
        if state.last_forward is not None:
            shifted = shift_solution(layout, state.last_forward)
            pX, pU = extract_trajectories(layout, shifted)
            ego_u = shifted[layout.control_index(0, 0)].copy()
            last_forward = shifted
        else:
            pX = pU = None
            ego_u = np.zeros(layout.control_dims[0])
            last_forward = None

    result = PlanResult(
        ego_control=ego_u,
        predicted_X=pX,
        predicted_U=pU,
        solve_status=fsol.status,
        infeasible=not fsol.solved,
        theta_estimate=theta_new.copy(),
        nll=diag.final_nll,
        estimator_steps=diag.steps,
        estimator_failures=diag.failed_solves,
        forward_iterations=fsol.iterations,
        compute_ms=1e3 * (time.perf_counter() - t_start),
    )
    new_state = PlannerState(
        theta_tilde=theta_new,
        buffer=buffer,
        ego_history=ego_hist,
        last_forward=last_forward,
        last_inverse=inv_z,
        tick=state.tick + 1,
    )
    return result, new_state


def predict_constant_velocity(positions: np.ndarray, velocities: np.ndarray, dt: float, horizon: int) -> np.ndarray:
    """Extrapolated opponent positions for knots 0..horizon-1 (knot 0 is the
    current position), shape (horizon, n_opp, 2)."""
    steps = np.arange(horizon)[:, None, None]
    return positions[None, :, :] + velocities[None, :, :] * (dt * steps)


def step_constant_velocity_mpc(
    state: PlannerState,
    new_observation: np.ndarray,
    ego_state: np.ndarray,
    scenario: Scenario,
    config: PlannerConfig,
):
    """Non-interactive baseline: freeze opponents on straight-line paths and
    solve the ego's single-player problem against them."""
    t_start = time.perf_counter()
    model = observation_model(scenario)
    buffer = state.buffer.copy()
    ego_hist = state.ego_history.copy()
    buffer.push(state.tick, new_observation)
    ego_hist.push(state.tick, ego_state)

    n_opp = len(scenario.opponent_indices())
    if model.mode == "full":
        obs = buffer.values[-1].reshape(n_opp, 4)
        pos, vel = obs[:, :2], obs[:, 2:]
    else:
        pos = buffer.values[-1].reshape(n_opp, -1)[:, :2].copy()
        vel = _fd_velocity(buffer, n_opp, scenario.dt)
    preds = predict_constant_velocity(pos, vel, scenario.dt, scenario.horizon)

    game = scenario.mpc_game
    layout = game.layout
    theta = np.zeros(layout.theta_dim)
    theta[layout.xhat_index(0)] = ego_state
    for name, k in scenario.mpc_pred_slots:
        off, dim = layout.slots[name]
        theta[off : off + dim] = preds[:, k - 1, :].reshape(-1)[:dim]

    cold = _rollout_guess(layout, ego_state)
    if config.use_warm_start and state.last_forward is not None:
        guess = shift_solution(layout, state.last_forward)
    else:
        guess = cold
    problem = game.compiled().problem
    fsol = solve_mcp(problem, theta, guess, config.solver)
    if not fsol.solved and guess is not cold:
        retry = solve_mcp(problem, theta, cold, config.solver)
        if retry.solved:
            fsol = retry

    horizon = scenario.horizon
    pX = np.zeros((horizon, 4 * scenario.n_players))
    for k in range(n_opp):
        pX[:, 4 * (k + 1) : 4 * (k + 1) + 2] = preds[:, k, :]
        pX[:, 4 * (k + 1) + 2 : 4 * (k + 1) + 4] = vel[k]

    if fsol.solved:
        ego_X, ego_U = extract_trajectories(layout, fsol.z_star)
        ego_u = fsol.z_star[layout.control_index(0, 0)].copy()
        last_forward = fsol.z_star
        pX[:, :4] = ego_X
    else:
        if state.last_forward is not None:
            shifted = shift_solution(layout, state.last_forward)
            ego_X, _ = extract_trajectories(layout, shifted)
            ego_u = shifted[layout.control_index(0, 0)].copy()
            last_forward = shifted
            pX[:, :4] = ego_X
        else:
            ego_u = np.zeros(layout.control_dims[0])
            last_forward = None
            pX = None

    result = PlanResult(
        ego_control=ego_u,
        predicted_X=pX,
        predicted_U=None,
        solve_status=fsol.status,
        infeasible=not fsol.solved,
        theta_estimate=state.theta_tilde.copy(),
        nll=np.nan,
        forward_iterations=fsol.iterations,
        compute_ms=1e3 * (time.perf_counter() - t_start),
    )
    new_state = PlannerState(
        theta_tilde=state.theta_tilde,
        buffer=buffer,
        ego_history=ego_hist,
        last_forward=last_forward,
        last_inverse=None,
        tick=state.tick + 1,
    )
    return result, new_state


def estimate_kkt_constrained(
    buffer: ObservationBuffer,
    scenario: Scenario,
    theta_tilde: np.ndarray,
    config: PlannerConfig,
    ego_initial_state: Optional[np.ndarray] = None,
    initial_guess: Optional[np.ndarray] = None,
):
    """Estimation step of the inequality-free baseline; planning remains the
    caller's job and uses the fully constrained game."""
    if len(buffer) == 0:
        return theta_tilde.copy(), None
    game = scenario.kkt_game
    layout = game.layout
    theta = theta_tilde.copy()
    if ego_initial_state is not None:
        theta[layout.xhat_index(0)] = ego_initial_state
    model = observation_model(scenario)
    mask = _estimation_mask(scenario, layout, model.mode == "position_only")
    theta_new, diag, _ = update_estimate(game, theta, buffer, model, config.estimator, mask, initial_guess)
    return theta_new, diag


# ---------------------------------------------------------------------------
# Episode simulation
# ---------------------------------------------------------------------------


@dataclass
class EpisodeTrace:
    scenario_name: str
    method: str
    seed: int
    d_min: float
    horizon: int
    dt: float
    theta_true: object
    states: np.ndarray  # (ticks+1, 4*N)
    ego_controls: np.ndarray  # (ticks, 2)
    theta_errors: np.ndarray  # (ticks,)
    nlls: np.ndarray
    infeasible: np.ndarray  # bool per tick (forward solve failed)
    estimator_failures: np.ndarray
    collisions: np.ndarray  # bool per tick
    compute_ms: np.ndarray
    forward_iterations: np.ndarray
    predicted_opp_pos: list  # per tick: (horizon, n_opp, 2) or None
    ego_cost: float = 0.0
    opp_cost: float = 0.0
    gt_failures: int = 0

    @property
    def collided(self) -> bool:
        return bool(self.collisions.any())

    @property
    def final_theta_error(self) -> float:
        return float(self.theta_errors[-1])


def _pref_error(scenario: Scenario, layout, theta_vec: np.ndarray, theta_true: Theta) -> float:
    diffs = []
    for name, true_val in theta_true.objective_params.items():
        off, dim = layout.slots[name]
        diffs.append(theta_vec[off : off + dim] - true_val)
    return float(np.linalg.norm(np.concatenate(diffs))) if diffs else 0.0


def simulate_episode(
    scenario: Scenario,
    method: str,
    seed: int,
    config: Optional[PlannerConfig] = None,
    ticks: Optional[int] = None,
) -> EpisodeTrace:
    """Run one closed-loop episode; opponents play the hidden true game."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    config = config or default_planner_config(scenario, method)
    if method == KKT_BASELINE:
        config = replace(config, estimation_family="kkt")
    ticks = scenario.ticks if ticks is None else ticks

    theta_true, x0 = scenario.sampler(seed)
    gt_game = scenario.ground_truth_game(theta_true)
    gt_layout = gt_game.layout
    gt_problem = gt_game.compiled().problem
    gt_theta_base = theta_true.to_vector(gt_layout)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))

    model = observation_model(scenario)
    n = scenario.n_players
    state = make_planner_state(scenario, config)
    est_layout = (scenario.kkt_game if config.estimation_family == "kkt" else scenario.est_game).layout

    x = x0.copy()
    states = [x.copy()]
    ego_controls, theta_errors, nlls = [], [], []
    infeasible, est_failures, collisions, compute_ms, fwd_iters = [], [], [], [], []
    predicted = []
    ego_cost = 0.0
    opp_cost = 0.0
    gt_warm = None
    gt_failures = 0

    for tick in range(ticks):
        y = model.observe_state(x)
        if model.sigma > 0:
            y = y + rng.normal(0.0, model.sigma, size=y.shape)
        ego_state = x[:4].copy()

        if method in (ADAPTIVE_MPGP, KKT_BASELINE):
            result, state = step_adaptive_mpgp(state, y, ego_state, scenario, config)
        elif method == CONSTANT_VELOCITY_MPC:
            result, state = step_constant_velocity_mpc(state, y, ego_state, scenario, config)
        else:
            result = None  # ground truth: ego input comes from the true game

        gt_theta = gt_theta_base.copy()
        gt_theta[: gt_layout.xhat_dim] = x
        guess = shift_solution(gt_layout, gt_warm) if gt_warm is not None else _rollout_guess(gt_layout, x)
        gt_sol = solve_mcp(gt_problem, gt_theta, guess, config.solver)
        if gt_sol.solved:
            gt_warm = gt_sol.z_star
        else:
            gt_failures += 1
            gt_warm = guess

        u_all = np.zeros((n, 2))
        for i in range(n):
            u_all[i] = gt_warm[gt_layout.control_index(i, 0)]
        if result is not None:
            u_all[0] = result.ego_control

        x_next = np.concatenate(
            [scenario.game.players[i].dynamics.step(x[4 * i : 4 * i + 4], u_all[i]) for i in range(n)]
        )

        pos = x_next.reshape(n, 4)[:, :2]
        dists = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        # The shared constraint is active at equilibrium, so executed
        # distances sit numerically on the boundary; count only genuine dips.
        collisions.append(bool(dists.min() < scenario.d_min - 1e-9))

        ego_cost += scenario.stage_cost(0, x, u_all[0], x_next, theta_true)
        opp_cost += np.mean(
            [scenario.stage_cost(j, x, u_all[j], x_next, theta_true) for j in range(1, n)]
        )

        if result is not None:
            ego_controls.append(result.ego_control)
            theta_errors.append(_pref_error(scenario, est_layout, result.theta_estimate, theta_true))
            nlls.append(result.nll)
            infeasible.append(result.infeasible)
            est_failures.append(result.estimator_failures)
            compute_ms.append(result.compute_ms)
            fwd_iters.append(result.forward_iterations)
            if result.predicted_X is not None:
                predicted.append(result.predicted_X[:, [4 * j + k for j in range(1, n) for k in (0, 1)]].reshape(scenario.horizon, n - 1, 2))
            else:
                predicted.append(None)
        else:
            ego_controls.append(u_all[0])
            theta_errors.append(0.0)
            nlls.append(np.nan)
            infeasible.append(not gt_sol.solved)
            est_failures.append(0)
            compute_ms.append(0.0)
            fwd_iters.append(gt_sol.iterations)
            X_gt, _ = extract_trajectories(gt_layout, gt_warm)
            predicted.append(X_gt[:, [4 * j + k for j in range(1, n) for k in (0, 1)]].reshape(scenario.horizon, n - 1, 2))

        x = x_next
        states.append(x.copy())

    return EpisodeTrace(
        scenario_name=scenario.name,
        method=method,
        seed=seed,
        d_min=scenario.d_min,
        horizon=scenario.horizon,
        dt=scenario.dt,
        theta_true=theta_true,
        states=np.asarray(states),
        ego_controls=np.asarray(ego_controls),
        theta_errors=np.asarray(theta_errors),
        nlls=np.asarray(nlls),
        infeasible=np.asarray(infeasible, dtype=bool),
        estimator_failures=np.asarray(est_failures),
        collisions=np.asarray(collisions, dtype=bool),
        compute_ms=np.asarray(compute_ms),
        forward_iterations=np.asarray(fwd_iters),
        predicted_opp_pos=predicted,
        ego_cost=ego_cost,
        opp_cost=float(opp_cost),
        gt_failures=gt_failures,
    )
