"""Declarative N-player trajectory games and their compilation to MCPs.

A game couples per-player trajectory optimization problems: each player
owns states and controls over a common horizon, minimizes a cost that may
depend on everyone's states, and is subject to private constraints plus
shared inequality constraints with a single common multiplier.  Stacking
every player's stationarity conditions, all equality constraints, and all
inequality rows (complementary to nonnegative multipliers) yields one
square mixed complementarity problem over

    z = [X^1, U^1, ..., X^N, U^N, mu, plam^1, ..., plam^N, slam]

parameterized by theta = [initial joint state, named parameter slots].

Compilation separates the assembly into a constant skeleton (quadratic
cost Hessians, affine constraint Jacobians, multiplier couplings) plus a
small number of state-dependent pairwise terms (proximity penalties and
distance keep-outs), so residual and Jacobian evaluations inside the
solver stay cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg

from .mcp import BoxBounds, MCPProblem


@dataclass
class AffineDynamics:
    """x_next = a @ x + b @ u + c with constant Jacobians."""

    a: np.ndarray
    b: np.ndarray
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.c is None:
            self.c = np.zeros(self.a.shape[0])
        if self.a.shape[0] != self.a.shape[1] or self.a.shape[0] != self.b.shape[0]:
            raise ValueError("inconsistent dynamics shapes")

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    @property
    def control_dim(self) -> int:
        return self.b.shape[1]

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.a @ x + self.b @ u + self.c


@dataclass
class ThetaRef:
    """Reference to components of a named parameter slot."""

    slot: str
    comps: Optional[np.ndarray] = None  # defaults to the whole slot


@dataclass
class QuadraticCost:
    """weight * || z[idx] - target ||^2; target constant or a theta slot."""

    player: int
    idx: np.ndarray
    weight: float
    target: Union[None, np.ndarray, ThetaRef] = None


@dataclass
class PointGapCost:
    """weight * || z[idx_a] - z[idx_b] ||^2 (idx_b may belong to another player)."""

    player: int
    idx_a: np.ndarray
    idx_b: np.ndarray
    weight: float


@dataclass
class ProximityPenaltyCost:
    """weight * max(0, d_min - ||z[own] - z[other]||)^3, twice differentiable."""

    player: int
    own_idx: np.ndarray
    other_idx: np.ndarray
    weight: float
    d_min: float


@dataclass
class ProximityPointCost:
    """Proximity penalty against a fixed or parameter-valued point."""

    player: int
    own_idx: np.ndarray
    center: Union[np.ndarray, "ThetaRef"]
    weight: float
    d_min: float


CostTerm = Union[QuadraticCost, PointGapCost, ProximityPenaltyCost, ProximityPointCost]


@dataclass
class BoundRows:
    """Private affine rows z[idx] - lower >= 0 and/or upper - z[idx] >= 0."""

    player: int
    idx: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @property
    def row_count(self) -> int:
        n = 0
        if self.lower is not None:
            n += len(self.idx)
        if self.upper is not None:
            n += len(self.idx)
        return n


@dataclass
class KeepoutPair:
    """Shared row ||z[idx_a] - z[idx_b]|| - d_min >= 0."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    d_min: float


@dataclass
class KeepoutPoint:
    """Private row ||z[own_idx] - center|| - d_min >= 0 (center constant or theta)."""

    player: int
    own_idx: np.ndarray
    center: Union[np.ndarray, ThetaRef]
    d_min: float


@dataclass
class PlayerSpec:
    state_dim: int
    control_dim: int
    dynamics: AffineDynamics


@dataclass
class PrimalDualLayout:
    """Index bookkeeping for the stacked primal-dual vector."""

    horizon: int
    state_dims: list
    control_dims: list
    x_off: list
    u_off: list
    n_primal: int
    mu_off: list
    n_eq: int
    plam_off: list
    plam_dim: list
    slam_off: int
    n_shared: int
    dim: int
    xhat_off: list
    xhat_dim: int
    slots: dict  # name -> (offset, dim) within theta
    theta_dim: int

    @property
    def n_players(self) -> int:
        return len(self.state_dims)

    def state_index(self, player: int, t: int, comps=None) -> np.ndarray:
        base = self.x_off[player] + t * self.state_dims[player]
        comps = np.arange(self.state_dims[player]) if comps is None else np.asarray(comps)
        return base + comps

    def control_index(self, player: int, t: int, comps=None) -> np.ndarray:
        base = self.u_off[player] + t * self.control_dims[player]
        comps = np.arange(self.control_dims[player]) if comps is None else np.asarray(comps)
        return base + comps

    def primal_slice(self, player: int) -> np.ndarray:
        T = self.horizon
        return np.concatenate(
            [
                self.x_off[player] + np.arange(T * self.state_dims[player]),
                self.u_off[player] + np.arange(T * self.control_dims[player]),
            ]
        )

    def owner_of(self, idx: np.ndarray) -> int:
        k = int(np.min(idx))
        for i in range(self.n_players):
            lo_x = self.x_off[i]
            hi_u = self.u_off[i] + self.horizon * self.control_dims[i]
            if lo_x <= k < hi_u:
                if np.all((idx >= lo_x) & (idx < hi_u)):
                    return i
                break
        raise ValueError("indices do not lie within a single player's primal block")

    def slot_index(self, ref: Union[str, ThetaRef]) -> np.ndarray:
        if isinstance(ref, str):
            ref = ThetaRef(ref)
        off, dim = self.slots[ref.slot]
        comps = np.arange(dim) if ref.comps is None else np.asarray(ref.comps)
        return off + comps

    def xhat_index(self, player: int) -> np.ndarray:
        return self.xhat_off[player] + np.arange(self.state_dims[player])


def extract_trajectories(layout: PrimalDualLayout, z: np.ndarray):
    """Pull the joint state and control trajectories out of a stacked vector."""
    if z.shape[0] != layout.dim and z.shape[0] != layout.n_primal:
        raise ValueError("vector length does not match layout")
    T = layout.horizon
    X = np.empty((T, sum(layout.state_dims)))
    U = np.empty((T, sum(layout.control_dims)))
    for t in range(T):
        xs = [z[layout.state_index(i, t)] for i in range(layout.n_players)]
        us = [z[layout.control_index(i, t)] for i in range(layout.n_players)]
        X[t] = np.concatenate(xs)
        U[t] = np.concatenate(us)
    return X, U


def embed_trajectories(layout: PrimalDualLayout, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Inverse of extract_trajectories; multipliers are left at zero."""
    z = np.zeros(layout.dim)
    for t in range(layout.horizon):
        xo = uo = 0
        for i in range(layout.n_players):
            n, m = layout.state_dims[i], layout.control_dims[i]
            z[layout.state_index(i, t)] = X[t, xo : xo + n]
            z[layout.control_index(i, t)] = U[t, uo : uo + m]
            xo += n
            uo += m
    return z


@dataclass
class Theta:
    """Game parameters: joint initial state plus per-opponent objective vectors."""

    initial_state: np.ndarray
    objective_params: dict  # slot name -> vector

    def to_vector(self, layout: PrimalDualLayout) -> np.ndarray:
        theta = np.zeros(layout.theta_dim)
        theta[: layout.xhat_dim] = self.initial_state
        for name, value in self.objective_params.items():
            off, dim = layout.slots[name]
            value = np.asarray(value, dtype=float)
            if value.shape != (dim,):
                raise ValueError(f"slot {name!r} expects dimension {dim}")
            theta[off : off + dim] = value
        return theta

    @classmethod
    def from_vector(cls, layout: PrimalDualLayout, theta: np.ndarray) -> "Theta":
        params = {
            name: theta[off : off + dim].copy() for name, (off, dim) in layout.slots.items()
        }
        return cls(theta[: layout.xhat_dim].copy(), params)


class GameBuilder:
    """Incrementally declare players, costs and constraints, then build()."""

    def __init__(self, horizon: int):
        if horizon < 2:
            raise ValueError("horizon must be at least 2")
        self.horizon = horizon
        self.players: list[PlayerSpec] = []
        self.cost_terms: list[CostTerm] = []
        self.bound_groups: list[BoundRows] = []
        self.keepout_pairs: list[KeepoutPair] = []
        self.keepout_points: list[KeepoutPoint] = []
        self._slots: dict[str, int] = {}
        self._players_frozen = False

    def add_player(self, dynamics: AffineDynamics) -> int:
        if self._players_frozen:
            raise RuntimeError("players must be declared before costs and constraints")
        self.players.append(PlayerSpec(dynamics.state_dim, dynamics.control_dim, dynamics))
        return len(self.players) - 1

    # -- index helpers (freeze the player list on first use) ---------------

    def _freeze(self):
        self._players_frozen = True

    def _primal_offsets(self):
        off = 0
        x_off, u_off = [], []
        for p in self.players:
            x_off.append(off)
            off += self.horizon * p.state_dim
            u_off.append(off)
            off += self.horizon * p.control_dim
        return x_off, u_off, off

    def state_index(self, player: int, t: int, comps=None) -> np.ndarray:
        self._freeze()
        x_off, _, _ = self._primal_offsets()
        n = self.players[player].state_dim
        comps = np.arange(n) if comps is None else np.asarray(comps)
        return x_off[player] + t * n + comps

    def control_index(self, player: int, t: int, comps=None) -> np.ndarray:
        self._freeze()
        _, u_off, _ = self._primal_offsets()
        m = self.players[player].control_dim
        comps = np.arange(m) if comps is None else np.asarray(comps)
        return u_off[player] + t * m + comps

    def add_param_slot(self, name: str, dim: int):
        if name in self._slots:
            raise ValueError(f"duplicate parameter slot {name!r}")
        self._slots[name] = dim

    def add_cost(self, term: CostTerm):
        self._freeze()
        self.cost_terms.append(term)

    def add_private_bounds(self, player: int, idx, lower=None, upper=None):
        self._freeze()
        idx = np.asarray(idx, dtype=int)
        lower = None if lower is None else np.broadcast_to(np.asarray(lower, dtype=float), idx.shape).copy()
        upper = None if upper is None else np.broadcast_to(np.asarray(upper, dtype=float), idx.shape).copy()
        self.bound_groups.append(BoundRows(player, idx, lower, upper))

    def add_shared_keepout(self, idx_a, idx_b, d_min: float):
        self._freeze()
        self.keepout_pairs.append(
            KeepoutPair(np.asarray(idx_a, dtype=int), np.asarray(idx_b, dtype=int), float(d_min))
        )

    def add_private_keepout(self, player: int, own_idx, center, d_min: float):
        self._freeze()
        if not isinstance(center, ThetaRef):
            center = np.asarray(center, dtype=float)
        self.keepout_points.append(
            KeepoutPoint(player, np.asarray(own_idx, dtype=int), center, float(d_min))
        )

    def build(self) -> "TrajectoryGame":
        self._freeze()
        x_off, u_off, n_primal = self._primal_offsets()
        T = self.horizon
        mu_off, off = [], n_primal
        for p in self.players:
            mu_off.append(off)
            off += T * p.state_dim
        n_eq = off - n_primal
        plam_off, plam_dim = [], []
        for i in range(len(self.players)):
            plam_off.append(off)
            rows = sum(g.row_count for g in self.bound_groups if g.player == i)
            rows += sum(1 for g in self.keepout_points if g.player == i)
            plam_dim.append(rows)
            off += rows
        slam_off = off
        n_shared = len(self.keepout_pairs)
        dim = off + n_shared

        xhat_off, t_off = [], 0
        for p in self.players:
            xhat_off.append(t_off)
            t_off += p.state_dim
        xhat_dim = t_off
        slots = {}
        for name, sdim in self._slots.items():
            slots[name] = (t_off, sdim)
            t_off += sdim

        layout = PrimalDualLayout(
            horizon=T,
            state_dims=[p.state_dim for p in self.players],
            control_dims=[p.control_dim for p in self.players],
            x_off=x_off,
            u_off=u_off,
            n_primal=n_primal,
            mu_off=mu_off,
            n_eq=n_eq,
            plam_off=plam_off,
            plam_dim=plam_dim,
            slam_off=slam_off,
            n_shared=n_shared,
            dim=dim,
            xhat_off=xhat_off,
            xhat_dim=xhat_dim,
            slots=slots,
            theta_dim=t_off,
        )
        return TrajectoryGame(
            players=list(self.players),
            horizon=T,
            layout=layout,
            cost_terms=list(self.cost_terms),
            bound_groups=list(self.bound_groups),
            keepout_pairs=list(self.keepout_pairs),
            keepout_points=list(self.keepout_points),
        )


@dataclass
class TrajectoryGame:
    players: list
    horizon: int
    layout: PrimalDualLayout
    cost_terms: list
    bound_groups: list
    keepout_pairs: list
    keepout_points: list
    _compiled: Optional["CompiledGame"] = field(default=None, repr=False, compare=False)

    def compiled(self) -> "CompiledGame":
        if self._compiled is None:
            self._compiled = CompiledGame(self)
        return self._compiled


class CompiledGame:
    """Constant skeleton plus vectorized state-dependent terms for one game."""

    def __init__(self, game: TrajectoryGame):
        self.game = game
        lay = game.layout
        self.layout = lay
        d, p = lay.dim, lay.theta_dim
        K = np.zeros((d, d))
        k0 = np.zeros(d)
        Kt = np.zeros((d, p))

        for i, spec in enumerate(game.players):
            self._install_equalities(i, spec, K, k0, Kt)
        self._install_quadratics(K, k0, Kt)
        self._install_bounds(K, k0)
        self._group_penalties()
        self._group_keepouts()

        self.K = K
        self.k0 = k0
        self.Ktheta = Kt
        self.has_dynamic_theta = self.kp_theta_rows.size > 0 or self.pp_theta_rows.size > 0
        self._memo_key_f = None
        self._memo_f = None
        self._memo_key_jz = None
        self._jz_buffer = None

        lower = np.full(d, -np.inf)
        upper = np.full(d, np.inf)
        lam_start = lay.n_primal + lay.n_eq
        lower[lam_start:] = 0.0
        self.bounds = BoxBounds(lower, upper)
        self.problem = MCPProblem(
            dim=d,
            f=self.eval_residual,
            jac_z=self.eval_jacobian_z,
            jac_theta=self.eval_jacobian_theta,
            bounds=self.bounds,
            param_dim=p,
        )

    # -- constant skeleton --------------------------------------------------

    def _install_equalities(self, i, spec, K, k0, Kt):
        lay = self.layout
        T = lay.horizon
        dyn = spec.dynamics
        eq_row0 = lay.mu_off[i]  # rows of h in F coincide with mu indices in z
        # initial state: x_0 - xhat = 0
        x0 = lay.state_index(i, 0)
        K[eq_row0 + np.arange(spec.state_dim), x0] = 1.0
        Kt[eq_row0 + np.arange(spec.state_dim), lay.xhat_index(i)] = -1.0
        # dynamics: x_{t+1} - a x_t - b u_t - c = 0
        for t in range(T - 1):
            r = eq_row0 + (t + 1) * spec.state_dim + np.arange(spec.state_dim)
            K[r[:, None], lay.state_index(i, t + 1)[None, :]] = np.eye(spec.state_dim)
            K[r[:, None], lay.state_index(i, t)[None, :]] = -dyn.a
            K[r[:, None], lay.control_index(i, t)[None, :]] = -dyn.b
            if np.any(dyn.c):
                k0[r] += -dyn.c
        # stationarity coupling: + (dh/d own)^T mu
        own = lay.primal_slice(i)
        blk = K[np.ix_(eq_row0 + np.arange(T * spec.state_dim), own)]
        K[np.ix_(own, eq_row0 + np.arange(T * spec.state_dim))] += blk.T

    def _install_quadratics(self, K, k0, Kt):
        lay = self.layout
        for term in self.game.cost_terms:
            if isinstance(term, QuadraticCost):
                idx = np.asarray(term.idx, dtype=int)
                if lay.owner_of(idx) != term.player:
                    raise ValueError("quadratic cost indices must belong to the owning player")
                K[idx, idx] += 2.0 * term.weight
                if isinstance(term.target, ThetaRef):
                    tindex = lay.slot_index(term.target)
                    Kt[idx, tindex] += -2.0 * term.weight
                elif term.target is not None:
                    k0[idx] += -2.0 * term.weight * np.asarray(term.target, dtype=float)
            elif isinstance(term, PointGapCost):
                a = np.asarray(term.idx_a, dtype=int)
                b = np.asarray(term.idx_b, dtype=int)
                w2 = 2.0 * term.weight
                for own, other in ((a, b), (b, a)):
                    if lay.owner_of(own) == term.player:
                        K[own, own] += w2
                        K[own, other] -= w2

    def _install_bounds(self, K, k0):
        lay = self.layout
        cursor = {i: lay.plam_off[i] for i in range(lay.n_players)}
        self._bound_rows = []
        for g in self.game.bound_groups:
            idx = g.idx
            if lay.owner_of(idx) != g.player:
                raise ValueError("private bounds must reference the owning player's variables")
            for sign, values in (("lower", g.lower), ("upper", g.upper)):
                if values is None:
                    continue
                rows = cursor[g.player] + np.arange(len(idx))
                cursor[g.player] += len(idx)
                if sign == "lower":
                    K[rows, idx] = 1.0
                    k0[rows] += -values
                    K[idx, rows] += -1.0
                else:
                    K[rows, idx] = -1.0
                    k0[rows] += values
                    K[idx, rows] += 1.0
        self._kp_cursor = cursor

    @staticmethod
    def _stack(rows, width, dtype=int):
        if not rows:
            return np.zeros((0, width), dtype=dtype)
        return np.array(rows, dtype=dtype)

    def _group_penalties(self):
        terms = [t for t in self.game.cost_terms if isinstance(t, ProximityPenaltyCost)]
        lay = self.layout
        for t in terms:
            if lay.owner_of(np.asarray(t.own_idx)) != t.player:
                raise ValueError("penalty own indices must belong to the owning player")
        width = len(terms[0].own_idx) if terms else 2
        self.pen_own = self._stack([t.own_idx for t in terms], width)
        self.pen_other = self._stack([t.other_idx for t in terms], width)
        self.pen_w = np.array([t.weight for t in terms])
        self.pen_d = np.array([t.d_min for t in terms])
        d = lay.dim
        if terms:
            self.pen_flat_oo = self.pen_own[:, :, None] * d + self.pen_own[:, None, :]
            self.pen_flat_ox = self.pen_own[:, :, None] * d + self.pen_other[:, None, :]

        pts = [t for t in self.game.cost_terms if isinstance(t, ProximityPointCost)]
        width = len(pts[0].own_idx) if pts else 2
        self.pp_own = self._stack([t.own_idx for t in pts], width)
        self.pp_w = np.array([t.weight for t in pts])
        self.pp_d = np.array([t.d_min for t in pts])
        ctheta, cconst, theta_rows = [], [], []
        for k, t in enumerate(pts):
            if isinstance(t.center, ThetaRef):
                ctheta.append(lay.slot_index(t.center))
                cconst.append(np.zeros(len(t.own_idx)))
                theta_rows.append(k)
            else:
                ctheta.append(np.full(len(t.own_idx), -1))
                cconst.append(np.asarray(t.center, dtype=float))
        self.pp_center_theta = self._stack(ctheta, width)
        self.pp_center_const = self._stack(cconst, width, dtype=float)
        self.pp_theta_rows = np.array(theta_rows, dtype=int)

    def _group_keepouts(self):
        lay = self.layout
        pairs = self.game.keepout_pairs
        width = len(pairs[0].idx_a) if pairs else 2
        self.ko_a = self._stack([g.idx_a for g in pairs], width)
        self.ko_b = self._stack([g.idx_b for g in pairs], width)
        self.ko_d = np.array([g.d_min for g in pairs])
        self.ko_row = lay.slam_off + np.arange(len(pairs))

        pts = self.game.keepout_points
        kp_rows = []
        for g in pts:
            kp_rows.append(self._kp_cursor[g.player])
            self._kp_cursor[g.player] += 1
        width = len(pts[0].own_idx) if pts else 2
        self.kp_own = self._stack([g.own_idx for g in pts], width)
        self.kp_row = np.array(kp_rows, dtype=int)
        self.kp_d = np.array([g.d_min for g in pts])
        ctheta, cconst = [], []
        theta_rows = []
        for k, g in enumerate(pts):
            if isinstance(g.center, ThetaRef):
                ctheta.append(lay.slot_index(g.center))
                cconst.append(np.zeros(len(g.own_idx)))
                theta_rows.append(k)
            else:
                ctheta.append(np.full(len(g.own_idx), -1))
                cconst.append(g.center)
        self.kp_center_theta = self._stack(ctheta, width)
        self.kp_center_const = self._stack(cconst, width, dtype=float)
        self.kp_theta_rows = np.array(theta_rows, dtype=int)

    # -- evaluation ----------------------------------------------------------

    def _pairwise(self, z, own, other_vals):
        delta = z[own] - other_vals
        s = np.sqrt(np.sum(delta * delta, axis=1))
        return delta, np.maximum(s, 1e-12)

    @staticmethod
    def _penalty_hessian(delta, s, w, d_min):
        """Active mask and Hessian blocks of the cubic proximity penalty."""
        m = d_min - s
        act = (m > 0.0) & (s > 1e-12)
        if not np.any(act):
            return act, np.zeros((0, delta.shape[1], delta.shape[1]))
        n = delta[act] / s[act][:, None]
        eye = np.eye(delta.shape[1])
        nn = n[:, :, None] * n[:, None, :]
        ww, mm, ss = w[act], m[act], s[act]
        H = (6.0 * ww * mm)[:, None, None] * nn - (3.0 * ww * mm**2 / ss)[:, None, None] * (eye - nn)
        return act, H

    @staticmethod
    def _resolve_centers(theta, const, theta_idx, theta_rows):
        centers = const.copy()
        if theta_rows.size:
            centers[theta_rows] = theta[theta_idx[theta_rows]]
        return centers

    def _kp_centers(self, theta):
        if self.kp_own.size == 0:
            return np.zeros((0, 0))
        return self._resolve_centers(theta, self.kp_center_const, self.kp_center_theta, self.kp_theta_rows)

    def _pp_centers(self, theta):
        if self.pp_own.size == 0:
            return np.zeros((0, 0))
        return self._resolve_centers(theta, self.pp_center_const, self.pp_center_theta, self.pp_theta_rows)

    def eval_residual(self, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
        # One residual is evaluated several times per Newton iteration
        # (line search, Jacobian coefficients, active-set classification);
        # memoize the most recent point.
        key = (z.tobytes(), theta.tobytes())
        if key == self._memo_key_f:
            return self._memo_f
        F = self._residual_uncached(z, theta)
        self._memo_key_f = key
        self._memo_f = F
        return F

    def _residual_uncached(self, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
        F = self.K @ z + self.k0
        if self.layout.theta_dim:
            F += self.Ktheta @ theta
        if self.pen_own.size:
            delta, s = self._pairwise(z, self.pen_own, z[self.pen_other])
            m = self.pen_d - s
            act = (m > 0.0) & (s > 1e-12)
            if np.any(act):
                coef = -3.0 * self.pen_w[act] * m[act] ** 2 / s[act]
                np.add.at(F, self.pen_own[act], coef[:, None] * delta[act])
        if self.pp_own.size:
            delta, s = self._pairwise(z, self.pp_own, self._pp_centers(theta))
            m = self.pp_d - s
            act = (m > 0.0) & (s > 1e-12)
            if np.any(act):
                coef = -3.0 * self.pp_w[act] * m[act] ** 2 / s[act]
                np.add.at(F, self.pp_own[act], coef[:, None] * delta[act])
        if self.ko_row.size:
            delta, s = self._pairwise(z, self.ko_a, z[self.ko_b])
            lam = z[self.ko_row]
            n = delta / s[:, None]
            F[self.ko_row] += s - self.ko_d
            np.add.at(F, self.ko_a, -lam[:, None] * n)
            np.add.at(F, self.ko_b, lam[:, None] * n)
        if self.kp_row.size:
            delta, s = self._pairwise(z, self.kp_own, self._kp_centers(theta))
            lam = z[self.kp_row]
            n = delta / s[:, None]
            F[self.kp_row] += s - self.kp_d
            np.add.at(F, self.kp_own, -lam[:, None] * n)
        return F

    def eval_jacobian_z(self, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
        # Returned matrix is a reused buffer; callers treat it as read-only.
        key = (z.tobytes(), theta.tobytes())
        if key == self._memo_key_jz:
            return self._jz_buffer
        if self._jz_buffer is None:
            self._jz_buffer = np.empty_like(self.K)
        M = self._jz_buffer
        np.copyto(M, self.K)
        self._memo_key_jz = key
        d = self.layout.dim
        flat = M.ravel()
        if self.pen_own.size:
            delta, s = self._pairwise(z, self.pen_own, z[self.pen_other])
            act, H = self._penalty_hessian(delta, s, self.pen_w, self.pen_d)
            if np.any(act):
                np.add.at(flat, self.pen_flat_oo[act].ravel(), H.ravel())
                np.add.at(flat, self.pen_flat_ox[act].ravel(), -H.ravel())
        if self.pp_own.size:
            delta, s = self._pairwise(z, self.pp_own, self._pp_centers(theta))
            act, H = self._penalty_hessian(delta, s, self.pp_w, self.pp_d)
            if np.any(act):
                oo = self.pp_own[act][:, :, None] * d + self.pp_own[act][:, None, :]
                np.add.at(flat, oo.ravel(), H.ravel())
        if self.ko_row.size:
            delta, s = self._pairwise(z, self.ko_a, z[self.ko_b])
            lam = z[self.ko_row]
            n = delta / s[:, None]
            eye = np.eye(delta.shape[1])
            nn = n[:, :, None] * n[:, None, :]
            Hg = (eye - nn) / s[:, None, None]
            rows = self.ko_row[:, None]
            np.add.at(flat, (rows * d + self.ko_a).ravel(), n.ravel())
            np.add.at(flat, (rows * d + self.ko_b).ravel(), -n.ravel())
            np.add.at(flat, (self.ko_a * d + rows).ravel(), -n.ravel())
            np.add.at(flat, (self.ko_b * d + rows).ravel(), n.ravel())
            lamH = lam[:, None, None] * Hg
            for rset, cset, sign in (
                (self.ko_a, self.ko_a, -1.0),
                (self.ko_a, self.ko_b, 1.0),
                (self.ko_b, self.ko_a, 1.0),
                (self.ko_b, self.ko_b, -1.0),
            ):
                np.add.at(flat, (rset[:, :, None] * d + cset[:, None, :]).ravel(), sign * lamH.ravel())
        if self.kp_row.size:
            delta, s = self._pairwise(z, self.kp_own, self._kp_centers(theta))
            lam = z[self.kp_row]
            n = delta / s[:, None]
            eye = np.eye(delta.shape[1])
            nn = n[:, :, None] * n[:, None, :]
            Hg = (eye - nn) / s[:, None, None]
            rows = self.kp_row[:, None]
            np.add.at(flat, (rows * d + self.kp_own).ravel(), n.ravel())
            np.add.at(flat, (self.kp_own * d + rows).ravel(), -n.ravel())
            lamH = lam[:, None, None] * Hg
            np.add.at(flat, (self.kp_own[:, :, None] * d + self.kp_own[:, None, :]).ravel(), -lamH.ravel())
        return M

    def eval_jacobian_theta(self, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
        if not self.has_dynamic_theta:
            return self.Ktheta
        Jt = self.Ktheta.copy()
        p = self.layout.theta_dim
        flat = Jt.ravel()
        if self.kp_theta_rows.size:
            rows = self.kp_theta_rows
            delta, s = self._pairwise(z, self.kp_own[rows], self._kp_centers(theta)[rows])
            lam = z[self.kp_row[rows]]
            n = delta / s[:, None]
            eye = np.eye(delta.shape[1])
            nn = n[:, :, None] * n[:, None, :]
            Hg = (eye - nn) / s[:, None, None]
            r = self.kp_row[rows][:, None]
            np.add.at(flat, (r * p + self.kp_center_theta[rows]).ravel(), -n.ravel())
            lamH = lam[:, None, None] * Hg
            np.add.at(
                flat,
                (self.kp_own[rows][:, :, None] * p + self.kp_center_theta[rows][:, None, :]).ravel(),
                lamH.ravel(),
            )
        if self.pp_theta_rows.size:
            rows = self.pp_theta_rows
            delta, s = self._pairwise(z, self.pp_own[rows], self._pp_centers(theta)[rows])
            act, H = self._penalty_hessian(delta, s, self.pp_w[rows], self.pp_d[rows])
            if np.any(act):
                own = self.pp_own[rows][act]
                tcols = self.pp_center_theta[rows][act]
                np.add.at(flat, (own[:, :, None] * p + tcols[:, None, :]).ravel(), -H.ravel())
        return Jt

    # -- diagnostics -----------------------------------------------------------

    def cost_value(self, player: int, z: np.ndarray, theta: np.ndarray) -> float:
        """Objective of one player at a primal-dual point (multipliers ignored)."""
        total = 0.0
        lay = self.layout
        for term in self.game.cost_terms:
            if term.player != player:
                continue
            if isinstance(term, QuadraticCost):
                if isinstance(term.target, ThetaRef):
                    target = theta[lay.slot_index(term.target)]
                elif term.target is None:
                    target = 0.0
                else:
                    target = term.target
                gap = z[term.idx] - target
                total += term.weight * float(gap @ gap)
            elif isinstance(term, PointGapCost):
                gap = z[term.idx_a] - z[term.idx_b]
                total += term.weight * float(gap @ gap)
            elif isinstance(term, ProximityPenaltyCost):
                gap = z[term.own_idx] - z[term.other_idx]
                m = term.d_min - float(np.linalg.norm(gap))
                if m > 0:
                    total += term.weight * m**3
            elif isinstance(term, ProximityPointCost):
                center = theta[lay.slot_index(term.center)] if isinstance(term.center, ThetaRef) else term.center
                m = term.d_min - float(np.linalg.norm(z[term.own_idx] - center))
                if m > 0:
                    total += term.weight * m**3
        return total


def build_mcp(game: TrajectoryGame, theta: Optional[Theta] = None):
    """Compile a game into its parametric MCP; returns (problem, layout).

    ``theta`` is only validated for shape here; parameter values are passed
    to the solver at call time.
    """
    compiled = game.compiled()
    if theta is not None:
        theta.to_vector(game.layout)
    return compiled.problem, game.layout


def lagrangian_gradient(
    game: TrajectoryGame, layout: PrimalDualLayout, z: np.ndarray, theta: np.ndarray, player: int
) -> np.ndarray:
    """Gradient of player's Lagrangian with respect to its own trajectory.

    This is by construction the corresponding stationarity block of the
    compiled residual map.
    """
    F = game.compiled().eval_residual(z, theta)
    return F[layout.primal_slice(player)]


def check_second_order(
    game: TrajectoryGame,
    layout: PrimalDualLayout,
    z_star: np.ndarray,
    theta: np.ndarray,
    activity_tol: float = 1e-6,
) -> str:
    """A-posteriori curvature check at a solved point.

    Projects each player's Lagrangian Hessian onto the nullspace of the
    active constraint Jacobians; returns "sufficient" when every projected
    Hessian is positive definite, otherwise "indeterminate".  The test is
    one-sided: it never certifies absence of an equilibrium.
    """
    compiled = game.compiled()
    M = compiled.eval_jacobian_z(z_star, theta)
    F = compiled.eval_residual(z_star, theta)
    for i in range(layout.n_players):
        own = layout.primal_slice(i)
        hess = M[np.ix_(own, own)]
        rows = [M[np.ix_(layout.mu_off[i] + np.arange(layout.horizon * layout.state_dims[i]), own)]]
        for section_off, section_dim in (
            (layout.plam_off[i], layout.plam_dim[i]),
            (layout.slam_off, layout.n_shared),
        ):
            r = section_off + np.arange(section_dim)
            active = r[np.abs(F[r]) <= activity_tol]
            if active.size:
                rows.append(M[np.ix_(active, own)])
        jac = np.vstack(rows)
        basis = scipy.linalg.null_space(jac)
        if basis.shape[1] == 0:
            continue
        reduced = basis.T @ hess @ basis
        eigs = np.linalg.eigvalsh(0.5 * (reduced + reduced.T))
        if eigs.min() <= 1e-9:
            return "indeterminate"
    return "sufficient"


def shift_solution(layout: PrimalDualLayout, z: np.ndarray) -> np.ndarray:
    """Warm-start helper: advance primal trajectories one step in time.

    States and controls shift left with the final knot duplicated;
    multipliers are kept, which Newton corrects in a step or two.
    """
    out = z.copy()
    T = layout.horizon
    for i in range(layout.n_players):
        for t in range(T - 1):
            out[layout.state_index(i, t)] = z[layout.state_index(i, t + 1)]
            out[layout.control_index(i, t)] = z[layout.control_index(i, t + 1)]
    return out
