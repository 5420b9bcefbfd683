"""Forward-mode automatic differentiation on small dense problems.

Jets carry a value vector together with a matrix of directional
derivatives (one column per seed direction), so a single evaluation of a
function written in terms of :class:`Jet` arithmetic yields the value and
the full Jacobian.  Problem sizes in this package are a few hundred
variables at most, which keeps forward mode cheaper and simpler than
taping.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class NumericalBreakdown(RuntimeError):
    """Raised when an evaluation produces non-finite values."""


def _as_jet(other, ndir: int) -> "Jet":
    if isinstance(other, Jet):
        return other
    val = np.asarray(other, dtype=float)
    return Jet(val, np.zeros(val.shape + (ndir,)))


class Jet:
    """Value array plus tangents stacked along the trailing axis."""

    __slots__ = ("val", "tan")

    def __init__(self, val: np.ndarray, tan: np.ndarray):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)

    @property
    def ndir(self) -> int:
        return self.tan.shape[-1]

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        o = _as_jet(other, self.ndir)
        return Jet(self.val + o.val, self.tan + o.tan)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.val, -self.tan)

    def __sub__(self, other):
        o = _as_jet(other, self.ndir)
        return Jet(self.val - o.val, self.tan - o.tan)

    def __rsub__(self, other):
        o = _as_jet(other, self.ndir)
        return Jet(o.val - self.val, o.tan - self.tan)

    def __mul__(self, other):
        o = _as_jet(other, self.ndir)
        return Jet(
            self.val * o.val,
            self.tan * o.val[..., None] + o.tan * self.val[..., None],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _as_jet(other, self.ndir)
        inv = 1.0 / o.val
        val = self.val * inv
        tan = (self.tan - o.tan * val[..., None]) * inv[..., None]
        return Jet(val, tan)

    def __rtruediv__(self, other):
        return _as_jet(other, self.ndir) / self

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 1:
            raise ValueError("only positive integer powers are supported")
        val = self.val**k
        tan = k * self.val ** (k - 1)
        return Jet(val, self.tan * tan[..., None])

    # -- structure --------------------------------------------------------

    def __getitem__(self, key):
        return Jet(self.val[key], self.tan[key])

    def sum(self):
        return Jet(np.sum(self.val, keepdims=False), np.sum(self.tan, axis=tuple(range(self.tan.ndim - 1))))

    def dot(self, other: "Jet"):
        return (self * other).sum()


def jet_sqrt(x: Jet) -> Jet:
    root = np.sqrt(x.val)
    return Jet(root, x.tan * (0.5 / root)[..., None])


def jet_tanh(x: Jet) -> Jet:
    th = np.tanh(x.val)
    return Jet(th, x.tan * (1.0 - th * th)[..., None])


def jet_relu(x: Jet) -> Jet:
    """max(0, x) with the subgradient 0 chosen at the kink."""
    mask = x.val > 0.0
    return Jet(np.where(mask, x.val, 0.0), x.tan * mask[..., None])


def jet_concat(parts) -> Jet:
    vals = [np.atleast_1d(p.val) for p in parts]
    tans = [p.tan.reshape(v.shape[0], -1) for p, v in zip(parts, vals)]
    return Jet(np.concatenate(vals), np.concatenate(tans, axis=0))


def jet_norm(x: Jet) -> Jet:
    return jet_sqrt(x.dot(x))


class DifferentiableMap:
    """A vector map F(z, theta) that can report exact Jacobians.

    Two backends exist: forward-mode evaluation of a generic callable
    written in Jet arithmetic, or hand-coded analytic Jacobians.  Tests
    require both to agree where both are supplied.
    """

    def __init__(self, dim_z: int, dim_theta: int, evaluator: Callable):
        self.dim_z = dim_z
        self.dim_theta = dim_theta
        self._evaluator = evaluator

    @classmethod
    def from_callable(cls, f: Callable, dim_z: int, dim_theta: int) -> "DifferentiableMap":
        """Wrap a Jet-generic callable f(z, theta) -> vector."""

        def evaluator(z, theta):
            ndir = dim_z + dim_theta
            tz = np.zeros((dim_z, ndir))
            tz[:, :dim_z] = np.eye(dim_z)
            tt = np.zeros((dim_theta, ndir))
            tt[:, dim_z:] = np.eye(dim_theta)
            out = f(Jet(np.asarray(z, dtype=float), tz), Jet(np.asarray(theta, dtype=float), tt))
            val = np.atleast_1d(out.val)
            tan = out.tan.reshape(val.shape[0], ndir)
            return val, tan[:, :dim_z], tan[:, dim_z:]

        return cls(dim_z, dim_theta, evaluator)

    @classmethod
    def from_analytic(cls, f: Callable, jac_z: Callable, jac_theta: Callable, dim_z: int, dim_theta: int) -> "DifferentiableMap":
        def evaluator(z, theta):
            return (
                np.atleast_1d(np.asarray(f(z, theta), dtype=float)),
                np.atleast_2d(np.asarray(jac_z(z, theta), dtype=float)),
                np.atleast_2d(np.asarray(jac_theta(z, theta), dtype=float)),
            )

        return cls(dim_z, dim_theta, evaluator)


def eval_with_jacobians(dmap: DifferentiableMap, z, theta):
    """Evaluate a map and its exact Jacobians at (z, theta)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float)) if dmap.dim_theta else np.zeros(0)
    value, jz, jt = dmap._evaluator(z, theta)
    if not (np.all(np.isfinite(value)) and np.all(np.isfinite(jz)) and np.all(np.isfinite(jt))):
        raise NumericalBreakdown("non-finite value or Jacobian")
    return value, jz, jt


def fd_jacobian(dmap: DifferentiableMap, z, theta, h: float = 1e-6):
    """Central-difference Jacobians; the test oracle for exact derivatives."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float)) if dmap.dim_theta else np.zeros(0)

    def value(zz, tt):
        v, _, _ = dmap._evaluator(zz, tt)
        return v

    f0 = value(z, theta)
    jz = np.zeros((f0.shape[0], dmap.dim_z))
    for k in range(dmap.dim_z):
        e = np.zeros_like(z)
        e[k] = h
        jz[:, k] = (value(z + e, theta) - value(z - e, theta)) / (2 * h)
    jt = np.zeros((f0.shape[0], dmap.dim_theta))
    for k in range(dmap.dim_theta):
        e = np.zeros_like(theta)
        e[k] = h
        jt[:, k] = (value(z, theta + e) - value(z, theta - e)) / (2 * h)
    return jz, jt
