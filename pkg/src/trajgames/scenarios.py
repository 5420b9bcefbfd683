"""Concrete game instances: planar double-integrator agents, a 2-player
tracking game, and an N-player ramp-merge on a two-lane road.

All numeric defaults (arena size, bounds, weights, road geometry) live in
the shipped JSON config files; the dataclasses here mirror those files.
State per agent is (px, py, vx, vy), control is planar acceleration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .games import (
    AffineDynamics,
    GameBuilder,
    PointGapCost,
    ProximityPenaltyCost,
    ProximityPointCost,
    QuadraticCost,
    Theta,
    ThetaRef,
    TrajectoryGame,
)

POS = np.array([0, 1])
VEL = np.array([2, 3])


@dataclass
class DoubleIntegratorDynamics:
    """Exact zero-order-hold discretization of a planar double integrator."""

    dt: float = 0.1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def affine(self) -> AffineDynamics:
        dt = self.dt
        a = np.eye(4)
        a[0, 2] = a[1, 3] = dt
        b = np.array([[0.5 * dt**2, 0.0], [0.0, 0.5 * dt**2], [dt, 0.0], [0.0, dt]])
        return AffineDynamics(a, b)

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.affine().step(np.asarray(x, dtype=float), np.asarray(u, dtype=float))


def step_dynamics(dyn: DoubleIntegratorDynamics, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return dyn.step(x, u)


# ---------------------------------------------------------------------------
# 2-player tracking game
# ---------------------------------------------------------------------------


@dataclass
class TrackingGameSpec:
    horizon: int = 10
    dt: float = 0.1
    d_min: float = 0.5
    control_weight: float = 0.1
    penalty_weight: float = 50.0
    # Pursuit weight of the tracker relative to the target's unit goal
    # weight.  At equal weights the pursuit force never vanishes at the
    # standoff, so the executed pair circulates forever instead of
    # settling; a lighter pursuit lets the target actually reach its goal.
    track_weight: float = 0.2
    # The soft proximity penalty acts from d_min + penalty_margin, so the
    # agents hold a smooth standoff instead of grinding on the hard
    # constraint boundary; with a zero margin the steady state sits exactly
    # on the constraint and the executed pair never settles.
    penalty_margin: float = 0.35
    accel_bound: float = 2.0
    speed_bound: Optional[float] = 2.0
    arena_half: float = 4.0
    goal_margin: float = 1.0

    def __post_init__(self):
        if self.d_min <= 0 or self.arena_half <= 0:
            raise ValueError("d_min and arena size must be positive")

    @property
    def penalty_radius(self) -> float:
        return self.d_min + self.penalty_margin


def make_tracking_game(
    spec: TrackingGameSpec,
    include_inequalities: bool = True,
    keepout_radius: Optional[float] = None,
    keepout_from_knot: int = 1,
) -> TrajectoryGame:
    """Tracker (player 0, the ego) pursues a target (player 1) whose fixed
    goal position is the single unknown objective parameter.

    ``keepout_radius`` / ``keepout_from_knot`` override the shared collision
    rows; the ego's planning copy uses a small safety inflation with rows
    starting one knot later, so a plan remains feasible while recovering
    from an executed dip into the margin.
    """
    T = spec.horizon
    keepout_radius = spec.d_min if keepout_radius is None else keepout_radius
    dyn = DoubleIntegratorDynamics(spec.dt).affine()
    b = GameBuilder(T)
    trk = b.add_player(dyn)
    tgt = b.add_player(dyn)
    b.add_param_slot("goal", 2)

    for t in range(1, T):
        p_trk = b.state_index(trk, t, POS)
        p_tgt = b.state_index(tgt, t, POS)
        # The tracker pursues the target's current position (one knot of
        # lag); pursuing the simultaneous position makes the tracker cut
        # ahead and block the target's path.
        b.add_cost(PointGapCost(trk, p_trk, b.state_index(tgt, t - 1, POS), spec.track_weight))
        b.add_cost(QuadraticCost(tgt, p_tgt, 1.0, ThetaRef("goal")))
        b.add_cost(ProximityPenaltyCost(trk, p_trk, p_tgt, spec.penalty_weight, spec.penalty_radius))
        b.add_cost(ProximityPenaltyCost(tgt, p_tgt, p_trk, spec.penalty_weight, spec.penalty_radius))
    for i in (trk, tgt):
        all_u = np.concatenate([b.control_index(i, t) for t in range(T)])
        b.add_cost(QuadraticCost(i, all_u, spec.control_weight))
        if include_inequalities:
            b.add_private_bounds(i, all_u, lower=-spec.accel_bound, upper=spec.accel_bound)
            if spec.speed_bound is not None:
                vel = np.concatenate([b.state_index(i, t, VEL) for t in range(1, T)])
                b.add_private_bounds(i, vel, lower=-spec.speed_bound, upper=spec.speed_bound)
    if include_inequalities:
        for t in range(keepout_from_knot, T):
            b.add_shared_keepout(b.state_index(trk, t, POS), b.state_index(tgt, t, POS), keepout_radius)
    return b.build()


def make_tracking_mpc_game(spec: TrackingGameSpec, keepout_radius: Optional[float] = None) -> TrajectoryGame:
    """Single-player surrogate: the tracker plans against frozen predicted
    target positions supplied through the parameter vector."""
    T = spec.horizon
    keepout_radius = spec.d_min if keepout_radius is None else keepout_radius
    dyn = DoubleIntegratorDynamics(spec.dt).affine()
    b = GameBuilder(T)
    ego = b.add_player(dyn)
    b.add_param_slot("pred", 2 * T)  # predicted target positions, knots 0..T-1

    for t in range(1, T):
        lag_ref = ThetaRef("pred", np.array([2 * (t - 1), 2 * (t - 1) + 1]))
        sim_ref = ThetaRef("pred", np.array([2 * t, 2 * t + 1]))
        pos = b.state_index(ego, t, POS)
        b.add_cost(QuadraticCost(ego, pos, spec.track_weight, lag_ref))
        b.add_cost(ProximityPointCost(ego, pos, sim_ref, spec.penalty_weight, spec.penalty_radius))
        if t >= 2:
            b.add_private_keepout(ego, pos, sim_ref, keepout_radius)
    all_u = np.concatenate([b.control_index(ego, t) for t in range(T)])
    b.add_cost(QuadraticCost(ego, all_u, spec.control_weight))
    b.add_private_bounds(ego, all_u, lower=-spec.accel_bound, upper=spec.accel_bound)
    if spec.speed_bound is not None:
        vel = np.concatenate([b.state_index(ego, t, VEL) for t in range(1, T)])
        b.add_private_bounds(ego, vel, lower=-spec.speed_bound, upper=spec.speed_bound)
    return b.build()


def tracking_cost(spec: TrackingGameSpec, X: np.ndarray, U: np.ndarray, player: int, theta_goal) -> float:
    """Per-player objective evaluated on joint trajectory arrays of shape
    (T, 8) and (T, 4); player 0 tracks player 1, player 1 heads to the goal."""
    T = X.shape[0]
    own_pos = X[:, 4 * player + POS]
    other_pos = X[:, 4 * (1 - player) + POS]
    own_u = U[:, 2 * player : 2 * player + 2]
    total = 0.0
    w_pos = spec.track_weight if player == 0 else 1.0
    for t in range(T - 1):
        goal = other_pos[t] if player == 0 else np.asarray(theta_goal, dtype=float)
        total += w_pos * float(np.sum((own_pos[t + 1] - goal) ** 2))
        gap = np.linalg.norm(own_pos[t + 1] - other_pos[t + 1])
        total += spec.penalty_weight * max(0.0, spec.penalty_radius - gap) ** 3
    total += spec.control_weight * float(np.sum(own_u**2))
    return total


def sample_tracking_trial(spec: TrackingGameSpec, seed: int):
    """Goal and collision-free initial states, deterministic per seed.

    The goal is placed on the far side of the tracker from the target, so
    the target's route passes the tracker's neighborhood and the coupled
    collision constraints actually shape the observed interaction.
    """
    rng = np.random.default_rng(seed)
    box = spec.arena_half - spec.goal_margin
    r_min = max(2.0 * spec.d_min + 0.2, 2.6)
    for _ in range(1000):
        p_trk = rng.uniform(-1.0, 1.0, size=2)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        r1 = rng.uniform(r_min, r_min + 0.8)
        p_tgt = p_trk + r1 * np.array([np.cos(ang), np.sin(ang)])
        ang2 = ang + np.pi + rng.uniform(-0.35, 0.35)
        r2 = rng.uniform(1.0, 2.0)
        goal = p_trk + r2 * np.array([np.cos(ang2), np.sin(ang2)])
        inside = np.all(np.abs(p_tgt) <= box) and np.all(np.abs(goal) <= box)
        if inside and np.linalg.norm(p_trk - p_tgt) >= 2.0 * spec.d_min:
            break
    else:
        raise RuntimeError("could not sample a tracking trial within the arena")
    x0 = np.concatenate([p_trk, np.zeros(2), p_tgt, np.zeros(2)])
    return Theta(initial_state=x0, objective_params={"goal": goal}), x0


# ---------------------------------------------------------------------------
# N-player ramp merge
# ---------------------------------------------------------------------------


@dataclass
class RampMergeSpec:
    n_players: int = 7
    horizon: int = 10
    dt: float = 0.1
    d_min: float = 0.8
    w_velocity: float = 1.0
    w_lane: float = 1.0
    control_weight: float = 0.1
    penalty_weight: float = 50.0
    accel_bound: float = 2.0
    lane_width: float = 3.5
    speed_range: tuple = (0.8, 1.6)
    ego_v_ref: float = 1.4
    ego_y_start: float = 0.5
    light_x: Optional[float] = 9.0
    x_span: float = 6.0

    def __post_init__(self):
        if self.n_players < 2:
            raise ValueError("ramp merge needs at least two players")
        if self.speed_range[0] <= 0:
            raise ValueError("reference speeds must be positive")

    @property
    def road_width(self) -> float:
        return 2.0 * self.lane_width

    @property
    def lane_centers(self) -> np.ndarray:
        return np.array([0.5 * self.lane_width, 1.5 * self.lane_width])

    @property
    def y_margin(self) -> float:
        return 0.5 * self.d_min


def make_ramp_merge(
    spec: RampMergeSpec,
    include_inequalities: bool = True,
    light_players: tuple = (),
    keepout_radius: Optional[float] = None,
    keepout_from_knot: int = 1,
) -> TrajectoryGame:
    """Ego (player 0) merges from the bottom road edge into traffic whose
    preferred speed and lateral position are unknown.

    ``light_players`` lists the indices subject to the traffic-light bound
    (an upper limit on the along-road position); membership is decided at
    sampling time from each vehicle's reference lane.
    """
    T = spec.horizon
    dyn = DoubleIntegratorDynamics(spec.dt).affine()
    b = GameBuilder(T)
    for _ in range(spec.n_players):
        b.add_player(dyn)
    for i in range(1, spec.n_players):
        b.add_param_slot(f"prefs{i}", 2)  # (reference speed, reference lateral position)

    for i in range(spec.n_players):
        for t in range(1, T):
            vx = b.state_index(i, t, np.array([2]))
            py = b.state_index(i, t, np.array([1]))
            if i == 0:
                b.add_cost(QuadraticCost(i, vx, spec.w_velocity, np.array([spec.ego_v_ref])))
                b.add_cost(QuadraticCost(i, py, spec.w_lane, np.array([spec.lane_centers[0]])))
            else:
                b.add_cost(QuadraticCost(i, vx, spec.w_velocity, ThetaRef(f"prefs{i}", np.array([0]))))
                b.add_cost(QuadraticCost(i, py, spec.w_lane, ThetaRef(f"prefs{i}", np.array([1]))))
            for j in range(spec.n_players):
                if j != i:
                    b.add_cost(
                        ProximityPenaltyCost(
                            i,
                            b.state_index(i, t, POS),
                            b.state_index(j, t, POS),
                            spec.penalty_weight,
                            spec.d_min,
                        )
                    )
        all_u = np.concatenate([b.control_index(i, t) for t in range(T)])
        b.add_cost(QuadraticCost(i, all_u, spec.control_weight))
        if include_inequalities:
            b.add_private_bounds(i, all_u, lower=-spec.accel_bound, upper=spec.accel_bound)
            ys = np.concatenate([b.state_index(i, t, np.array([1])) for t in range(1, T)])
            b.add_private_bounds(i, ys, lower=spec.y_margin, upper=spec.road_width - spec.y_margin)
            if spec.light_x is not None and i in light_players:
                xs = np.concatenate([b.state_index(i, t, np.array([0])) for t in range(1, T)])
                b.add_private_bounds(i, xs, upper=spec.light_x)
    if include_inequalities:
        radius = spec.d_min if keepout_radius is None else keepout_radius
        for i in range(spec.n_players):
            for j in range(i + 1, spec.n_players):
                for t in range(keepout_from_knot, T):
                    b.add_shared_keepout(
                        b.state_index(i, t, POS), b.state_index(j, t, POS), radius
                    )
    return b.build()


def make_ramp_merge_mpc_game(
    spec: RampMergeSpec, ego_in_light: bool, keepout_radius: Optional[float] = None
) -> TrajectoryGame:
    """Single-player merge surrogate against frozen opponent predictions."""
    T = spec.horizon
    dyn = DoubleIntegratorDynamics(spec.dt).affine()
    b = GameBuilder(T)
    ego = b.add_player(dyn)
    for j in range(1, spec.n_players):
        b.add_param_slot(f"pred{j}", 2 * T)  # predicted positions, knots 0..T-1

    for t in range(1, T):
        vx = b.state_index(ego, t, np.array([2]))
        py = b.state_index(ego, t, np.array([1]))
        b.add_cost(QuadraticCost(ego, vx, spec.w_velocity, np.array([spec.ego_v_ref])))
        b.add_cost(QuadraticCost(ego, py, spec.w_lane, np.array([spec.lane_centers[0]])))
        pos = b.state_index(ego, t, POS)
        radius = spec.d_min if keepout_radius is None else keepout_radius
        for j in range(1, spec.n_players):
            ref = ThetaRef(f"pred{j}", np.array([2 * t, 2 * t + 1]))
            b.add_cost(ProximityPointCost(ego, pos, ref, spec.penalty_weight, spec.d_min))
            if t >= 2:
                b.add_private_keepout(ego, pos, ref, radius)
    all_u = np.concatenate([b.control_index(ego, t) for t in range(T)])
    b.add_cost(QuadraticCost(ego, all_u, spec.control_weight))
    b.add_private_bounds(ego, all_u, lower=-spec.accel_bound, upper=spec.accel_bound)
    ys = np.concatenate([b.state_index(ego, t, np.array([1])) for t in range(1, T)])
    b.add_private_bounds(ego, ys, lower=spec.y_margin, upper=spec.road_width - spec.y_margin)
    if spec.light_x is not None and ego_in_light:
        xs = np.concatenate([b.state_index(ego, t, np.array([0])) for t in range(1, T)])
        b.add_private_bounds(ego, xs, upper=spec.light_x)
    return b.build()


def sample_merge_trial(spec: RampMergeSpec, seed: int):
    """Opponent lanes, gaps, and preferences; ego enters at the road edge."""
    rng = np.random.default_rng(seed)
    n_opp = spec.n_players - 1
    lanes = rng.integers(0, 2, size=n_opp)
    lanes[0] = 0  # guarantee traffic in the merge lane
    prefs = {}
    states = [None] * spec.n_players
    states[0] = np.array([0.6, spec.ego_y_start, 1.0, 0.0])
    for k in range(n_opp):
        i = k + 1
        v_ref = rng.uniform(*spec.speed_range)
        y_ref = spec.lane_centers[lanes[k]]
        prefs[f"prefs{i}"] = np.array([v_ref, y_ref])
    for attempt in range(200):
        for k in range(n_opp):
            i = k + 1
            x = rng.uniform(0.8, 0.8 + spec.x_span)
            y = spec.lane_centers[lanes[k]] + rng.uniform(-0.3, 0.3)
            states[i] = np.array([x, y, prefs[f"prefs{i}"][0], 0.0])
        pos = np.array([s[:2] for s in states])
        dists = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= 2.0 * spec.d_min:
            break
    else:
        raise RuntimeError("could not sample collision-free initial states")
    x0 = np.concatenate(states)
    light_players = tuple(
        i
        for i in range(spec.n_players)
        if spec.light_x is not None
        and (i == 0 or prefs[f"prefs{i}"][1] == spec.lane_centers[0])
    )
    return Theta(initial_state=x0, objective_params=prefs), x0, light_players


# ---------------------------------------------------------------------------
# Scenario wrapper used by the planner, harness and server
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """Everything a planner needs: compiled game families, samplers,
    observation configuration, estimation priors, and realized stage costs."""

    name: str
    n_players: int
    horizon: int
    dt: float
    d_min: float
    game: TrajectoryGame
    est_game: TrajectoryGame  # inverse-game family used by the estimator
    kkt_game: TrajectoryGame  # inequality-free family for the KKT baseline
    mpc_game: TrajectoryGame
    observation_mode: str  # "position_only" | "full"
    noise_sigma: float
    ticks: int
    prior_params: dict
    theta_lower: dict
    theta_upper: dict
    stage_cost: Callable  # (player, x_joint, u_player, x_next_joint, theta) -> float
    sampler: Callable  # seed -> (Theta, x0)
    mpc_pred_slots: list
    speed_bound: Optional[float] = None
    plan_game: Optional[TrajectoryGame] = None  # ego's forward family (safety-inflated)
    gt_game_factory: Optional[Callable] = None  # Theta -> TrajectoryGame (defaults to `game`)
    xhat_lower: Optional[np.ndarray] = None  # clamp box for inferred initial states
    xhat_upper: Optional[np.ndarray] = None
    estimator_defaults: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def ground_truth_game(self, theta_true: Theta) -> TrajectoryGame:
        if self.gt_game_factory is None:
            return self.game
        return self.gt_game_factory(theta_true)

    @property
    def forward_game(self) -> TrajectoryGame:
        return self.plan_game if self.plan_game is not None else self.game

    @property
    def state_dim(self) -> int:
        return 4

    def opponent_indices(self):
        return list(range(1, self.n_players))


def tracking_scenario(config: Optional[dict] = None) -> Scenario:
    cfg = dict(config or {})
    spec = TrackingGameSpec(
        horizon=cfg.get("horizon", 10),
        dt=cfg.get("dt", 0.1),
        d_min=cfg.get("d_min", 0.5),
        penalty_margin=cfg.get("weights", {}).get("penalty_margin", 0.35),
        track_weight=cfg.get("weights", {}).get("track", 0.2),
        control_weight=cfg.get("weights", {}).get("control", 0.1),
        penalty_weight=cfg.get("weights", {}).get("penalty", 50.0),
        accel_bound=cfg.get("bounds", {}).get("accel", 2.0),
        speed_bound=cfg.get("bounds", {}).get("speed", 2.0),
        arena_half=cfg.get("geometry", {}).get("arena_half", 4.0),
        goal_margin=cfg.get("geometry", {}).get("goal_margin", 1.0),
    )
    game = make_tracking_game(spec)
    kkt_game = make_tracking_game(spec, include_inequalities=False)
    safety = cfg.get("weights", {}).get("safety_margin", 0.06)
    plan_game = make_tracking_game(spec, keepout_radius=spec.d_min + safety, keepout_from_knot=2)
    mpc_game = make_tracking_mpc_game(spec, keepout_radius=spec.d_min + safety)
    box = spec.arena_half

    def stage_cost(player, x, u, x_next, theta: Theta):
        own = x_next[4 * player + POS]
        other = x_next[4 * (1 - player) + POS]
        # The tracker is scored against the target's pre-transition position.
        goal = x[4 * (1 - player) + POS] if player == 0 else theta.objective_params["goal"]
        w_pos = spec.track_weight if player == 0 else 1.0
        c = w_pos * float(np.sum((own - goal) ** 2))
        c += spec.control_weight * float(np.sum(np.asarray(u) ** 2))
        gap = float(np.linalg.norm(own - other))
        c += spec.penalty_weight * max(0.0, spec.penalty_radius - gap) ** 3
        return c

    return Scenario(
        name="tracking",
        n_players=2,
        horizon=spec.horizon,
        dt=spec.dt,
        d_min=spec.d_min,
        game=game,
        est_game=game,
        kkt_game=kkt_game,
        mpc_game=mpc_game,
        plan_game=plan_game,
        observation_mode=cfg.get("observation_mode", "position_only"),
        noise_sigma=cfg.get("noise_sigma", 0.0),
        ticks=cfg.get("ticks", 70),
        prior_params={"goal": np.zeros(2)},  # arena center
        theta_lower={"goal": np.array([-box, -box])},
        theta_upper={"goal": np.array([box, box])},
        stage_cost=stage_cost,
        sampler=lambda seed: sample_tracking_trial(spec, seed)[:2],
        mpc_pred_slots=[("pred", 1)],
        speed_bound=spec.speed_bound,
        xhat_lower=np.array([-box, -box, -(spec.speed_bound or 4.0), -(spec.speed_bound or 4.0)]),
        xhat_upper=np.array([box, box, spec.speed_bound or 4.0, spec.speed_bound or 4.0]),
        estimator_defaults=dict(
            cfg.get(
                "estimator",
                {
                    "learning_rate": 0.35,
                    "max_steps": 9,
                    "stop_tol": 3e-4,
                    "scale_xhat_pos": 0.05,
                    "scale_xhat_vel": 0.2,
                    "scale_prefs": 2.0,
                },
            )
        ),
        extra={"spec": spec},
    )


def ramp_merge_scenario(config: Optional[dict] = None) -> Scenario:
    cfg = dict(config or {})
    spec = RampMergeSpec(
        n_players=cfg.get("n_players", 7),
        horizon=cfg.get("horizon", 10),
        dt=cfg.get("dt", 0.1),
        d_min=cfg.get("d_min", 0.8),
        w_velocity=cfg.get("weights", {}).get("velocity", 1.0),
        w_lane=cfg.get("weights", {}).get("lane", 1.0),
        control_weight=cfg.get("weights", {}).get("control", 0.1),
        penalty_weight=cfg.get("weights", {}).get("penalty", 50.0),
        accel_bound=cfg.get("bounds", {}).get("accel", 2.0),
        lane_width=cfg.get("geometry", {}).get("lane_width", 3.5),
        speed_range=tuple(cfg.get("bounds", {}).get("speed_range", (0.8, 1.6))),
        light_x=cfg.get("geometry", {}).get("light_x", 9.0),
        x_span=cfg.get("geometry", {}).get("x_span", 6.0),
    )
    # The ego is always light-bound (it merges into the blocked lane); which
    # opponents brake for the light is a ground-truth fact it cannot know, so
    # the simulator rebuilds the true game per trial while the ego's planning
    # and estimation families stay fixed.
    game = make_ramp_merge(spec, light_players=(0,))
    kkt_game = make_ramp_merge(spec, include_inequalities=False)
    safety = cfg.get("weights", {}).get("safety_margin", 0.06)
    plan_game = make_ramp_merge(
        spec, light_players=(0,), keepout_radius=spec.d_min + safety, keepout_from_knot=2
    )
    mpc_game = make_ramp_merge_mpc_game(spec, ego_in_light=True, keepout_radius=spec.d_min + safety)

    def gt_game_factory(theta_true: Theta) -> TrajectoryGame:
        members = [0]
        for i in range(1, spec.n_players):
            if theta_true.objective_params[f"prefs{i}"][1] == spec.lane_centers[0]:
                members.append(i)
        return make_ramp_merge(spec, light_players=tuple(members))

    def stage_cost(player, x, u, x_next, theta: Theta):
        own = x_next[4 * player : 4 * player + 4]
        if player == 0:
            v_ref, y_ref = spec.ego_v_ref, spec.lane_centers[0]
        else:
            v_ref, y_ref = theta.objective_params[f"prefs{player}"]
        c = spec.w_velocity * (own[2] - v_ref) ** 2 + spec.w_lane * (own[1] - y_ref) ** 2
        c += spec.control_weight * float(np.sum(np.asarray(u) ** 2))
        for j in range(spec.n_players):
            if j == player:
                continue
            gap = float(np.linalg.norm(own[:2] - x_next[4 * j + POS]))
            c += spec.penalty_weight * max(0.0, spec.d_min - gap) ** 3
        return float(c)

    mid_v = 0.5 * (spec.speed_range[0] + spec.speed_range[1])
    prior = {f"prefs{i}": np.array([mid_v, spec.lane_centers[0]]) for i in range(1, spec.n_players)}
    lo = {f"prefs{i}": np.array([0.1, spec.y_margin]) for i in range(1, spec.n_players)}
    hi = {
        f"prefs{i}": np.array([spec.speed_range[1] + 1.0, spec.road_width - spec.y_margin])
        for i in range(1, spec.n_players)
    }

    def sampler(seed):
        theta, x0, _ = sample_merge_trial(spec, seed)
        return theta, x0

    return Scenario(
        name="ramp_merge",
        n_players=spec.n_players,
        horizon=spec.horizon,
        dt=spec.dt,
        d_min=spec.d_min,
        game=game,
        est_game=game,
        kkt_game=kkt_game,
        mpc_game=mpc_game,
        plan_game=plan_game,
        observation_mode=cfg.get("observation_mode", "position_only"),
        noise_sigma=cfg.get("noise_sigma", 0.0),
        ticks=cfg.get("ticks", 25),
        prior_params=prior,
        theta_lower=lo,
        theta_upper=hi,
        stage_cost=stage_cost,
        sampler=sampler,
        mpc_pred_slots=[(f"pred{j}", j) for j in range(1, spec.n_players)],
        gt_game_factory=gt_game_factory,
        xhat_lower=np.array([-5.0, spec.y_margin, -1.0, -2.0]),
        xhat_upper=np.array([40.0, spec.road_width - spec.y_margin, 4.0, 2.0]),
        estimator_defaults=dict(
            cfg.get(
                "estimator",
                {
                    "learning_rate": 0.25,
                    "max_steps": 6,
                    "stop_tol": 1e-4,
                    "scale_xhat_pos": 0.05,
                    "scale_xhat_vel": 0.2,
                    "scale_prefs": 1.0,
                },
            )
        ),
        extra={"spec": spec},
    )


SCENARIOS = {"tracking": tracking_scenario, "ramp_merge": ramp_merge_scenario}


def scenario_from_config(cfg: dict) -> Scenario:
    name = cfg.get("scenario")
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}")
    return SCENARIOS[name](cfg)
