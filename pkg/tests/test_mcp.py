import numpy as np
import pytest

from trajgames.mcp import (
    BoxBounds,
    MCPProblem,
    SolveStatus,
    SolverConfig,
    complementarity_cases,
    fischer_burmeister,
    mcp_residual,
    solve_mcp,
)


def linear_problem(mat, vec, bounds):
    mat = np.asarray(mat, dtype=float)
    vec = np.asarray(vec, dtype=float)
    d = vec.shape[0]
    return MCPProblem(
        dim=d,
        f=lambda z, th: mat @ z + vec,
        jac_z=lambda z, th: mat,
        jac_theta=lambda z, th: np.zeros((d, 0)),
        bounds=bounds,
        param_dim=0,
    )


def test_fischer_burmeister_values():
    assert fischer_burmeister(0.0, 0.0) == 0.0
    assert fischer_burmeister(1.0, 0.0) == pytest.approx(0.0)
    assert fischer_burmeister(2.0, 3.0) == pytest.approx(5.0 - np.sqrt(13.0))


def test_fischer_burmeister_sign_equivalence():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = rng.uniform(-2, 2, size=2)
        phi = fischer_burmeister(a, b)
        complementary = a >= 0 and b >= 0 and abs(a * b) < 1e-12
        assert (abs(phi) < 1e-12) == complementary


def test_residual_free_root():
    p = linear_problem([[1.0]], [-1.0], BoxBounds.free(1))
    assert mcp_residual(p, np.array([1.0]), np.zeros(0)) == pytest.approx([0.0])


def test_residual_active_lower_bound():
    p = linear_problem([[1.0]], [1.0], BoxBounds(np.array([0.0]), np.array([np.inf])))
    # z = 0 at bound with F = 1 >= 0 is a solution.
    assert mcp_residual(p, np.array([0.0]), np.zeros(0)) == pytest.approx([0.0])
    # z = 0.5 interior with F = 1.5 != 0 is not.
    expected = fischer_burmeister(0.5, 1.5)
    assert mcp_residual(p, np.array([0.5]), np.zeros(0)) == pytest.approx([expected])
    assert abs(expected) > 1e-3


def test_residual_dimension_mismatch():
    p = linear_problem([[1.0]], [1.0], BoxBounds.free(1))
    with pytest.raises(ValueError):
        mcp_residual(p, np.zeros(2), np.zeros(0))


def test_residual_two_sided_cases():
    bounds = BoxBounds(np.array([-1.0]), np.array([1.0]))

    def make(fval):
        return linear_problem([[0.0]], [fval], bounds)

    # interior root, at-lower with F > 0, at-upper with F < 0: all roots
    assert mcp_residual(make(0.0), np.array([0.3]), np.zeros(0)) == pytest.approx([0.0])
    assert mcp_residual(make(2.0), np.array([-1.0]), np.zeros(0)) == pytest.approx([0.0])
    assert mcp_residual(make(-2.0), np.array([1.0]), np.zeros(0)) == pytest.approx([0.0])
    # sign violations are not roots
    assert abs(mcp_residual(make(-2.0), np.array([-1.0]), np.zeros(0))[0]) > 1e-6
    assert abs(mcp_residual(make(2.0), np.array([1.0]), np.zeros(0))[0]) > 1e-6
    assert abs(mcp_residual(make(2.0), np.array([0.3]), np.zeros(0))[0]) > 1e-6


def test_solve_linear_root():
    p = linear_problem([[1.0]], [-1.0], BoxBounds.free(1))
    sol = solve_mcp(p, initial_guess=np.array([0.0]))
    assert sol.solved
    assert sol.z_star == pytest.approx([1.0])


def test_solve_active_bound():
    p = linear_problem([[1.0]], [1.0], BoxBounds(np.array([0.0]), np.array([np.inf])))
    sol = solve_mcp(p, initial_guess=np.array([5.0]))
    assert sol.solved
    assert sol.z_star == pytest.approx([0.0], abs=1e-7)


def test_solve_scalar_qp_kkt():
    # min (z-2)^2 s.t. z <= 1, encoded over (z, lambda):
    #   F_z = 2(z-2) + lam (free), F_lam = 1 - z (lam >= 0)
    def f(z, th):
        return np.array([2.0 * (z[0] - 2.0) + z[1], 1.0 - z[0]])

    def jac(z, th):
        return np.array([[2.0, 1.0], [-1.0, 0.0]])

    p = MCPProblem(
        dim=2,
        f=f,
        jac_z=jac,
        jac_theta=lambda z, th: np.zeros((2, 0)),
        bounds=BoxBounds(np.array([-np.inf, 0.0]), np.array([np.inf, np.inf])),
    )
    sol = solve_mcp(p, initial_guess=np.zeros(2))
    assert sol.solved
    assert sol.z_star == pytest.approx([1.0, 2.0], abs=1e-7)


def test_initial_guess_clamped():
    p = linear_problem([[1.0]], [1.0], BoxBounds(np.array([0.0]), np.array([np.inf])))
    sol = solve_mcp(p, initial_guess=np.array([-50.0]))
    assert sol.solved


def lcp_enumeration_oracle(mat, vec):
    """Solve z >= 0 complementary to M z + q >= 0 by active-set enumeration."""
    d = vec.shape[0]
    for mask in range(2**d):
        active = np.array([(mask >> j) & 1 == 1 for j in range(d)])
        z = np.zeros(d)
        if np.any(active):
            try:
                z[active] = np.linalg.solve(mat[np.ix_(active, active)], -vec[active])
            except np.linalg.LinAlgError:
                continue
        w = mat @ z + vec
        if np.all(z >= -1e-10) and np.all(w >= -1e-10):
            return z
    return None


@pytest.mark.parametrize("dim", [1, 2, 3, 4])
def test_random_lcp_against_enumeration(dim):
    rng = np.random.default_rng(42 + dim)
    bounds = BoxBounds(np.zeros(dim), np.full(dim, np.inf))
    for _ in range(30):
        a = rng.standard_normal((dim, dim))
        mat = a @ a.T + dim * np.eye(dim)
        vec = rng.uniform(-3, 3, size=dim)
        p = linear_problem(mat, vec, bounds)
        sol = solve_mcp(p, initial_guess=rng.uniform(0, 1, size=dim))
        oracle = lcp_enumeration_oracle(mat, vec)
        assert sol.solved
        assert oracle is not None
        np.testing.assert_allclose(sol.z_star, oracle, atol=1e-6)
        cases = complementarity_cases(p, sol.z_star, np.zeros(0), tol=1e-6)
        counts = sum(c.astype(int) for c in cases)
        assert np.all(counts == 1)


def test_idempotent_resolve():
    p = linear_problem([[2.0, 0.5], [0.5, 1.0]], [-1.0, 2.0], BoxBounds(np.zeros(2), np.full(2, np.inf)))
    first = solve_mcp(p, initial_guess=np.array([3.0, 3.0]))
    assert first.solved
    again = solve_mcp(p, initial_guess=first.z_star)
    assert again.solved
    assert again.iterations <= 1


def test_failure_reported_not_raised():
    # F(z) = exp overflow region: drive the solver into non-finite values.
    def f(z, th):
        return np.array([np.exp(z[0]) - np.inf])

    p = MCPProblem(1, f, lambda z, th: np.array([[np.inf]]), lambda z, th: np.zeros((1, 0)), BoxBounds.free(1))
    sol = solve_mcp(p, initial_guess=np.array([1.0]))
    assert sol.status is SolveStatus.NUMERICAL_BREAKDOWN


def test_max_iterations_status():
    p = linear_problem([[1.0]], [-1.0], BoxBounds.free(1))
    sol = solve_mcp(p, initial_guess=np.array([100.0]), config=SolverConfig(max_iterations=1, tolerance=1e-14))
    assert sol.status in (SolveStatus.MAX_ITERATIONS, SolveStatus.SOLVED)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(backtrack_ratio=1.5)
    with pytest.raises(ValueError):
        SolverConfig(tolerance=-1.0)


def test_bounds_validation():
    with pytest.raises(ValueError):
        BoxBounds(np.array([1.0]), np.array([0.0]))
