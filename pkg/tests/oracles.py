"""Independent reference computations used by the tests.

Everything here is written from scratch with dense linear algebra so it shares
no code path with the package solvers.
"""

import itertools

import numpy as np


def dense_p1(mesh, weights=None):
    """Dense stiffness and mass matrices over all vertices by a per-element loop.

    ``weights`` (per element) scales the mass contributions, e.g. a region mask.
    """
    n = mesh.n_vertices
    K = np.zeros((n, n))
    M = np.zeros((n, n))
    weights = np.ones(mesh.n_triangles) if weights is None else np.asarray(weights, float)
    for tri, wt in zip(mesh.triangles, weights):
        p = mesh.vertices[tri]
        B = np.array([p[1] - p[0], p[2] - p[0]]).T
        area = 0.5 * abs(np.linalg.det(B))
        # gradients of barycentric coordinates
        ginv = np.linalg.inv(B).T
        grads = np.vstack([-ginv.sum(axis=1), ginv[:, 0], ginv[:, 1]])
        K[np.ix_(tri, tri)] += area * grads @ grads.T
        M[np.ix_(tri, tri)] += wt * area / 12.0 * (np.ones((3, 3)) + np.eye(3))
    return K, M


def dense_solution_operator(mesh):
    """``S`` with ``y = S f`` for a full load vector ``f`` (zero on the boundary)."""
    K, _ = dense_p1(mesh)
    free = np.flatnonzero(~mesh.boundary)
    S = np.zeros((mesh.n_vertices, mesh.n_vertices))
    S[np.ix_(free, free)] = np.linalg.inv(K[np.ix_(free, free)])
    return S


def hilbert_kkt(mesh, g, alpha):
    """Full (state, adjoint, control) KKT block system solved densely.

    Unknowns ``y`` (free), ``w`` (free), ``u`` (all vertices):

        K y - M u_free       = 0
        K w + M (y - g)_free = 0
        alpha M u - M w      = 0
    """
    K, M = dense_p1(mesh)
    n = mesh.n_vertices
    f = np.flatnonzero(~mesh.boundary)
    nf = len(f)
    Kff, Mff = K[np.ix_(f, f)], M[np.ix_(f, f)]
    A = np.zeros((2 * nf + n, 2 * nf + n))
    rhs = np.zeros(2 * nf + n)
    A[:nf, :nf] = Kff
    A[:nf, 2 * nf:] = -M[f, :]
    A[nf:2 * nf, :nf] = Mff
    A[nf:2 * nf, nf:2 * nf] = Kff
    rhs[nf:2 * nf] = M[f, :] @ g
    A[2 * nf:, 2 * nf:] = alpha * M
    A[2 * nf:, nf:2 * nf] = -M[:, f]
    sol = np.linalg.solve(A, rhs)
    y = np.zeros(n)
    w = np.zeros(n)
    y[f], w[f] = sol[:nf], sol[nf:2 * nf]
    return sol[2 * nf:], y, w


def coordinate_descent_lasso(G, b, alpha, iters=200000, tol=1e-15):
    """Cyclic coordinate descent for ``1/2 u'Gu - b'u + alpha |u|_1``."""
    u = np.zeros(len(b))
    for _ in range(iters):
        change = 0.0
        for j in range(len(b)):
            r = b[j] - G[j] @ u + G[j, j] * u[j]
            new = np.sign(r) * max(abs(r) - alpha, 0.0) / G[j, j]
            change = max(change, abs(new - u[j]))
            u[j] = new
        if change < tol:
            break
    return u


def box_qp_bruteforce(H, c, bound):
    """Minimize ``1/2 x'Hx - c'x`` over ``|x_i| <= bound`` by enumerating active sets."""
    n = len(c)
    best, best_val = None, np.inf
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        pattern = np.array(pattern)
        x = pattern * bound
        free = pattern == 0
        if free.any():
            fixed = ~free
            rhs = c[free] - H[np.ix_(free, fixed)] @ x[fixed]
            x[free] = np.linalg.lstsq(H[np.ix_(free, free)], rhs, rcond=None)[0]
            if np.any(np.abs(x[free]) > bound * (1 + 1e-12)):
                continue
        grad = H @ x - c
        # KKT: free coordinates stationary, active ones pushing outward
        tol = 1e-9 * (1 + np.abs(c).max())
        if np.any(pattern * grad > tol) or np.any(np.abs(grad[free]) > tol):
            continue
        val = 0.5 * x @ H @ x - c @ x
        if val < best_val:
            best, best_val = x, val
    return best
