import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adapttikh.benchmark import data_function
from adapttikh.errors import InvalidArgument, NumericalFailure
from adapttikh.fem import FeFunction, P1Space
from adapttikh.mesh import SubdomainMask, make_disk_mesh
from adapttikh.tikhonov import (DiscreteMeasure, Kind, ReducedProblem, Regularizer,
                                active_set_lasso, box_qp, dense_lasso, soft_threshold, solve,
                                solve_hilbert, solve_ivanov, solve_sparse)

from oracles import (box_qp_bruteforce, coordinate_descent_lasso, dense_p1,
                     dense_solution_operator, hilbert_kkt)


def zero_data(mesh):
    return FeFunction(mesh, np.zeros(mesh.n_vertices))


def random_data(mesh, seed=0):
    return FeFunction(mesh, np.random.default_rng(seed).standard_normal(mesh.n_vertices))


def check_consistency(sol):
    """State and adjoint are the Galerkin solves their definitions ask for."""
    mesh = sol.mesh
    space = P1Space(mesh)
    prob = ReducedProblem(mesh, sol.g_delta, sol.kind)
    load = prob.load(sol.control)
    y = sol.y.coefficients
    w = sol.w.coefficients
    r_state = space.stiffness @ y[space.free] - load[space.free]
    r_adj = space.stiffness @ w[space.free] + (space.obs_mass @ (y - sol.g_delta.coefficients))[space.free]
    assert np.linalg.norm(r_state) <= 1e-10 * max(1.0, np.linalg.norm(load))
    assert np.linalg.norm(r_adj) <= 1e-10 * max(1.0, np.linalg.norm(y))


def test_regularizer_alpha_positive():
    with pytest.raises(InvalidArgument):
        Regularizer("l2", 0.0)
    with pytest.raises(InvalidArgument):
        Regularizer("measure", -1.0)


def test_discrete_measure_invariants():
    with pytest.raises(InvalidArgument):
        DiscreteMeasure([1, 1], [1.0, 2.0])
    u = DiscreteMeasure([1, 4], [2.0, -0.5])
    assert u.norm() == 2.5 and u.count == 2


@pytest.mark.parametrize("kind", ["l2", "ivanov", "measure"])
def test_zero_data(kind, disk):
    sol = solve(kind, disk, zero_data(disk), 1e-2)
    assert sol.J_value == 0.0
    for f in (sol.y, sol.w):
        assert not np.any(f.coefficients)
    assert not np.any(sol.control)


# -- quadratic penalty ---------------------------------------------------------


def test_hilbert_matches_dense_kkt():
    mesh = make_disk_mesh(6, 1.0, 1)
    assert mesh.n_vertices <= 20
    g = random_data(mesh, 4)
    alpha = 1e-2
    sol = solve_hilbert(mesh, g, alpha)
    u, y, w = hilbert_kkt(mesh, g.coefficients, alpha)
    np.testing.assert_allclose(sol.u.coefficients, u, atol=1e-8 * np.abs(u).max())
    np.testing.assert_allclose(sol.y.coefficients, y, atol=1e-8 * np.abs(y).max())
    np.testing.assert_allclose(sol.w.coefficients, w, atol=1e-8 * np.abs(w).max())
    assert sol.optimality_residual <= 1e-9


def test_hilbert_value_monotone_in_alpha(disk, ring_data):
    values = [solve_hilbert(disk, ring_data, a).J_value for a in (1e-4, 1e-3, 1e-2, 1e-1)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_hilbert_consistency(disk, ring_data):
    check_consistency(solve_hilbert(disk, ring_data, 1e-3))


# -- Ivanov ----------------------------------------------------------------------


def _ivanov_setup():
    mesh = make_disk_mesh(4, 1.0, 2)
    # control on the star of the centre, so every control node is free
    inner = (mesh.triangles == 0).any(axis=1)
    mesh = mesh.with_mask(SubdomainMask(inner, np.ones(mesh.n_triangles, dtype=bool)))
    space = P1Space(mesh)
    nodes = space.control_vertices
    _, M = dense_p1(mesh)
    _, Mc = dense_p1(mesh, inner)
    S = dense_solution_operator(mesh)
    KL = S @ Mc[:, nodes]
    H = KL.T @ M @ KL
    return mesh, nodes, KL, H, M


@pytest.mark.parametrize("method", ["active_set", "spg"])
def test_ivanov_inactive_matches_least_squares(method):
    mesh, nodes, KL, H, M = _ivanov_setup()
    assert len(nodes) <= 20
    g = random_data(mesh, 5)
    x_ls = np.linalg.solve(H, KL.T @ M @ g.coefficients)
    alpha = 0.5 / np.abs(x_ls).max()
    sol = solve_ivanov(mesh, g, alpha, tol=1e-12, method=method)
    r = KL @ x_ls - g.coefficients
    assert sol.discrepancy == pytest.approx(np.sqrt(r @ M @ r), abs=1e-6)


@pytest.mark.parametrize("method", ["active_set", "spg"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ivanov_active_matches_bruteforce(seed, method):
    mesh, nodes, KL, H, M = _ivanov_setup()
    g = random_data(mesh, seed)
    c = KL.T @ M @ g.coefficients
    x_ls = np.linalg.solve(H, c)
    alpha = 3.0 / np.abs(x_ls).max()  # bound well inside the unconstrained optimum
    x_ref = box_qp_bruteforce(H, c, 1.0 / alpha)
    sol = solve_ivanov(mesh, g, alpha, tol=1e-12, method=method)
    assert np.any(np.isclose(np.abs(x_ref), 1.0 / alpha))
    np.testing.assert_allclose(sol.control, x_ref, atol=1e-6 / alpha)
    assert np.abs(sol.control).max() <= 1.0 / alpha * (1 + 1e-12)
    assert sol.info["vi_residual"] <= 1e-6


def test_ivanov_methods_agree_loose_bound():
    # bound far from active: the regime where projected gradient stalls
    mesh = make_disk_mesh(16, 1.0, 2)
    g = random_data(mesh, 7)
    a = solve_ivanov(mesh, g, 1e-3, method="active_set")
    b = solve_ivanov(mesh, g, 1e-3, method="auto", maxiter=50)
    assert b.discrepancy == pytest.approx(a.discrepancy, rel=1e-6)
    with pytest.raises(NumericalFailure):
        solve_ivanov(mesh, g, 1e-3, method="spg", maxiter=50)
    with pytest.raises(InvalidArgument):
        solve_ivanov(mesh, g, 1.0, method="newton")


def test_ivanov_consistency(disk, ring_data):
    check_consistency(solve_ivanov(disk, ring_data, 1.0))


# -- measure norm ------------------------------------------------------------------


def _sparse_dense(mesh, g):
    space = P1Space(mesh)
    nodes = space.atom_vertices
    _, M = dense_p1(mesh)
    S = dense_solution_operator(mesh)[:, nodes]
    return S.T @ M @ S, S.T @ M @ g.coefficients, nodes


def test_sparse_large_alpha_is_zero(disk, ring_data):
    space = P1Space(disk)
    w0 = space.solve_full(space.obs_mass @ ring_data.coefficients)
    alpha = np.abs(w0[space.atom_vertices]).max()
    sol = solve_sparse(disk, ring_data, alpha * (1 + 1e-9))
    assert not np.any(sol.control)


def test_sparse_matches_coordinate_descent():
    mesh = make_disk_mesh(8, 1.0, 2)
    g = data_function(mesh, 0.5, 1e-2)
    G, b, nodes = _sparse_dense(mesh, g)
    assert len(nodes) <= 50
    alpha = 1e-3
    ref = coordinate_descent_lasso(G, b, alpha)
    sol = solve_sparse(mesh, g, alpha, tol=1e-12)
    np.testing.assert_allclose(sol.control, ref, atol=1e-6)
    assert sol.info["gap"] <= 1e-9 * (1 + sol.J_value)
    assert np.count_nonzero(ref) > 0


def test_sparse_full_fista_path():
    mesh = make_disk_mesh(8, 1.0, 1)
    g = data_function(mesh, 0.5, 1e-2)
    G, b, _ = _sparse_dense(mesh, g)
    alpha = 1e-3
    ref = coordinate_descent_lasso(G, b, alpha)
    sol = solve_sparse(mesh, g, alpha, tol=1e-12, working_set=False)
    np.testing.assert_allclose(sol.control, ref, atol=1e-6)
    gaps = sol.info["gap_history"]
    assert min(gaps) >= -1e-12
    assert gaps[-1] <= gaps[0]


def test_sparse_dual_certificate(disk, ring_data):
    sol = solve_sparse(disk, ring_data, 1e-2)
    w = sol.w.coefficients[P1Space(disk).atom_vertices]
    assert np.abs(w).max() <= 1e-2 * (1 + 1e-6)
    # on the support w_j = alpha sign(u_j)
    u = sol.u
    on = u.coefficients != 0
    np.testing.assert_allclose(sol.w.coefficients[u.vertices[on]],
                               1e-2 * np.sign(u.coefficients[on]), rtol=1e-5)


def test_sparse_penalty_below_zero_competitor(disk, ring_data):
    sol = solve_sparse(disk, ring_data, 1e-3)
    half_data = 0.5 * P1Space(disk).obs_norm(ring_data.coefficients) ** 2
    assert 1e-3 * sol.u.norm() <= half_data


def test_sparse_consistency(disk, ring_data):
    check_consistency(solve_sparse(disk, ring_data, 1e-3))


def test_soft_threshold_tie():
    np.testing.assert_array_equal(soft_threshold(np.array([1.0, -1.0, 2.0]), 1.0),
                                  [0.0, 0.0, 1.0])


@pytest.mark.parametrize("kind", ["l2", "ivanov", "measure"])
def test_discrete_optimality_against_competitors(kind, disk, ring_data):
    alpha = {"l2": 1e-3, "ivanov": 1.0, "measure": 1e-3}[kind]
    sol = solve(kind, disk, ring_data, alpha)
    prob = ReducedProblem(disk, ring_data, kind)
    rng = np.random.default_rng(7)
    for _ in range(20):
        v = sol.control + 0.1 * rng.standard_normal(prob.size) * (np.abs(sol.control).max() + 1e-3)
        if kind == "ivanov":
            v = np.clip(v, -1.0 / alpha, 1.0 / alpha)
        assert sol.J_value <= prob.objective(v, alpha) + 1e-9 * (1 + sol.J_value)


# -- dense subproblem solvers ----------------------------------------------------------


def _random_lasso(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n + 3, n))
    G = A.T @ A + 1e-3 * np.eye(n)
    b = A.T @ rng.standard_normal(n + 3)
    alpha = 0.3 * np.abs(b).max()
    return G, b, alpha


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_active_set_matches_coordinate_descent(seed, n):
    G, b, alpha = _random_lasso(seed, n)
    u, _ = active_set_lasso(G, b, alpha)
    ref = coordinate_descent_lasso(G, b, alpha)
    obj = lambda v: 0.5 * v @ G @ v - b @ v + alpha * np.abs(v).sum()
    assert obj(u) <= obj(ref) + 1e-10 * (1 + abs(obj(ref)))
    grad = G @ u - b
    assert np.all(np.abs(grad) <= alpha * (1 + 1e-8))


def test_dense_lasso_gap():
    G, b, alpha = _random_lasso(3, 10)
    c0 = float(b @ np.linalg.solve(G, b)) + 1.0
    u, gap, _ = dense_lasso(G, b, alpha, c0, tol=1e-12)
    assert gap >= -1e-12
    ref = coordinate_descent_lasso(G, b, alpha)
    np.testing.assert_allclose(u, ref, atol=1e-6)


@given(st.integers(1, 7), st.integers(0, 3), st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_box_qp_matches_bruteforce(n, rank_drop, seed, bound):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((max(n - rank_drop, 1), n))
    G = B.T @ B  # possibly singular, as the reduced Hessians are
    c = B.T @ rng.standard_normal(B.shape[0]) * 3.0
    x, _ = box_qp(G, c, bound)
    x_ref = box_qp_bruteforce(G, c, bound)

    def f(v):
        return 0.5 * v @ G @ v - c @ v

    assert np.all(np.abs(x) <= bound)
    assert f(x) <= f(x_ref) + 1e-9 * (1 + abs(f(x_ref)))
