import numpy as np
import pytest

from trajgames.autodiff import (
    DifferentiableMap,
    Jet,
    NumericalBreakdown,
    eval_with_jacobians,
    fd_jacobian,
    jet_concat,
    jet_norm,
    jet_relu,
    jet_sqrt,
)


def test_linear_map_jacobians():
    m = DifferentiableMap.from_callable(lambda z, th: z - th, 1, 1)
    value, jz, jt = eval_with_jacobians(m, [1.0], [1.0])
    assert value == pytest.approx([0.0])
    np.testing.assert_allclose(jz, [[1.0]])
    np.testing.assert_allclose(jt, [[-1.0]])


def test_square_map():
    m = DifferentiableMap.from_callable(lambda z, th: z * z, 1, 0)
    value, jz, _ = eval_with_jacobians(m, [3.0], [])
    assert value == pytest.approx([9.0])
    np.testing.assert_allclose(jz, [[6.0]])


def test_constant_map_zero_jacobians():
    m = DifferentiableMap.from_callable(lambda z, th: z * 0.0 + 7.0, 3, 2)
    _, jz, jt = eval_with_jacobians(m, [1.0, 2.0, 3.0], [0.5, 0.5])
    assert np.allclose(jz, 0.0)
    assert np.allclose(jt, 0.0)


def test_fd_matches_exact_for_cubic():
    m = DifferentiableMap.from_callable(lambda z, th: z**3, 1, 0)
    jz, _ = fd_jacobian(m, [2.0], [])
    np.testing.assert_allclose(jz, [[12.0]], rtol=1e-5)


def test_fd_exact_for_linear():
    m = DifferentiableMap.from_callable(lambda z, th: 3.0 * z - th, 2, 2)
    jz, jt = fd_jacobian(m, [0.3, -0.4], [1.0, 2.0])
    assert np.allclose(jz, 3.0 * np.eye(2), atol=1e-10)
    assert np.allclose(jt, -np.eye(2), atol=1e-10)


def test_fd_constant_near_zero():
    m = DifferentiableMap.from_callable(lambda z, th: z * 0.0 + 1.0, 2, 0)
    jz, _ = fd_jacobian(m, [0.1, 0.2], [])
    assert np.allclose(jz, 0.0, atol=1e-12)


def test_analytic_and_forward_agree():
    def f(z, th):
        gap = z[0:2] - z[2:4]
        return jet_concat([jet_norm(gap) * 1.0, (z * z).sum() * 1.0]) if isinstance(z, Jet) else None

    fwd = DifferentiableMap.from_callable(f, 4, 0)

    def value(z, th):
        gap = z[0:2] - z[2:4]
        return np.array([np.linalg.norm(gap), z @ z])

    def jac_z(z, th):
        gap = z[0:2] - z[2:4]
        n = gap / np.linalg.norm(gap)
        row0 = np.concatenate([n, -n])
        return np.vstack([row0, 2.0 * z])

    ana = DifferentiableMap.from_analytic(value, jac_z, lambda z, th: np.zeros((2, 0)), 4, 0)
    z = np.array([1.0, 2.0, -0.5, 0.3])
    v1, j1, _ = eval_with_jacobians(fwd, z, [])
    v2, j2, _ = eval_with_jacobians(ana, z, [])
    np.testing.assert_allclose(v1, v2, atol=1e-12)
    np.testing.assert_allclose(j1, j2, atol=1e-12)


def test_relu_and_sqrt_jets():
    t = np.eye(1)
    x = Jet(np.array([4.0]), t)
    root = jet_sqrt(x)
    assert root.val == pytest.approx([2.0])
    np.testing.assert_allclose(root.tan, [[0.25]])
    neg = Jet(np.array([-1.0]), t)
    r = jet_relu(neg)
    assert r.val == pytest.approx([0.0])
    np.testing.assert_allclose(r.tan, [[0.0]])


def test_nonfinite_raises_breakdown():
    m = DifferentiableMap.from_callable(lambda z, th: 1.0 / z, 1, 0)
    with pytest.raises(NumericalBreakdown):
        eval_with_jacobians(m, [0.0], [])
