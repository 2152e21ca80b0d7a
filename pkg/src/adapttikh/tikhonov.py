"""Discrete Tikhonov problems for the Poisson source problem.

The three regularizers share one reduced formulation: a control vector ``x``
induces a load ``L x`` on the free vertices, the state is ``y = A^{-1} L x``
and the data term is ``1/2 |y - g|^2`` in the observation-mass norm.  The
adjoint ``w`` solves ``A w = -M_o (y - g)``, so the gradient of the data term
with respect to ``x`` is ``-L^T w``.

Control vectors live on

* the vertices of the control region (P1 nodal values) for ``l2`` and
  ``ivanov``, with ``L = M_c``;
* the interior vertices of the control region (Dirac weights) for
  ``measure``, with ``L`` the injection.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import InvalidArgument, NumericalFailure
from .fem import FeFunction, P1Space

__all__ = [
    "Kind",
    "Regularizer",
    "DiscreteMeasure",
    "TikhonovSolution",
    "ReducedProblem",
    "solve_hilbert",
    "solve_ivanov",
    "solve_sparse",
    "solve",
    "soft_threshold",
    "dense_lasso",
    "active_set_lasso",
    "face_polish",
    "box_qp",
    "sparse_gap",
]

log = logging.getLogger(__name__)


class Kind(str, enum.Enum):
    HILBERT = "l2"
    IVANOV = "ivanov"
    MEASURE = "measure"


@dataclass(frozen=True)
class Regularizer:
    kind: Kind
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise InvalidArgument(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """``sum_j u_j delta_{x_j}`` with atoms at interior mesh vertices."""

    vertices: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.int64)
        c = np.asarray(self.coefficients, dtype=float)
        if v.shape != c.shape or v.ndim != 1:
            raise InvalidArgument("vertices and coefficients must be 1-D of equal length")
        if len(np.unique(v)) != len(v):
            raise InvalidArgument("atom locations must be distinct")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "coefficients", c)

    @property
    def count(self):
        return len(self.vertices)

    def norm(self):
        """Total variation ``sum_j |u_j|``."""
        return float(np.abs(self.coefficients).sum())

    def support(self, tol=0.0):
        keep = np.abs(self.coefficients) > tol
        return DiscreteMeasure(self.vertices[keep], self.coefficients[keep])


@dataclass(frozen=True, eq=False)
class TikhonovSolution:
    regularizer: Regularizer
    u: object  # FeFunction for l2 / ivanov, DiscreteMeasure for measure
    y: FeFunction
    w: FeFunction
    J_value: float
    discrepancy: float
    optimality_residual: float
    iterations: int
    g_delta: FeFunction
    control: np.ndarray = field(repr=False)  # reduced control vector x
    info: dict = field(default_factory=dict)

    @property
    def kind(self):
        return self.regularizer.kind

    @property
    def alpha(self):
        return self.regularizer.alpha

    @property
    def mesh(self):
        return self.y.mesh


class ReducedProblem:
    """Discrete operators ``L``, ``A^{-1}``, ``M_o`` for one mesh and data set."""

    def __init__(self, mesh, g_delta, kind, space=None):
        self.mesh = mesh
        self.kind = Kind(kind)
        self.space = space if space is not None else P1Space(mesh)
        g = g_delta.coefficients if isinstance(g_delta, FeFunction) else g_delta
        self.g = np.asarray(g, dtype=float)
        if self.g.shape != (mesh.n_vertices,):
            raise InvalidArgument("data must be given by nodal values on the mesh")
        sp_ = self.space
        if self.kind is Kind.MEASURE:
            self.nodes = sp_.atom_vertices
        else:
            self.nodes = sp_.control_vertices
            self._Lc = sp_.ctrl_mass[self.nodes].tocsr()  # (nc, nv)
            self.control_mass = self._Lc[:, self.nodes].tocsc()
        self.Mo_g = sp_.obs_mass @ self.g
        self.data_norm2 = float(self.g @ self.Mo_g)
        self.n_solves = 0

    @property
    def size(self):
        return len(self.nodes)

    # -- operators -----------------------------------------------------------

    def load(self, x):
        """Full load vector of the control ``x``."""
        if self.kind is Kind.MEASURE:
            full = np.zeros(self.mesh.n_vertices)
            full[self.nodes] = x
            return full
        return self._Lc.T @ x

    def load_T(self, v_full):
        """Transpose of :meth:`load` applied to a full vertex vector."""
        if self.kind is Kind.MEASURE:
            return v_full[self.nodes]
        return self._Lc @ v_full

    def forward(self, x):
        self.n_solves += 1
        return self.space.solve_full(self.load(x))

    def adjoint(self, y):
        self.n_solves += 1
        return self.space.solve_full(-(self.space.obs_mass @ (y - self.g)))

    def gram(self, x):
        """``L^T A^{-1} M_o A^{-1} L x`` (Hessian of the data term)."""
        y = self.forward(x)
        self.n_solves += 1
        return self.load_T(self.space.solve_full(self.space.obs_mass @ y))

    def data_term(self, y):
        r = y - self.g
        return 0.5 * float(r @ (self.space.obs_mass @ r))

    def discrepancy(self, y):
        return float(np.sqrt(2.0 * self.data_term(y)))

    def penalty(self, x, alpha):
        if self.kind is Kind.HILBERT:
            return 0.5 * alpha * float(x @ (self.control_mass @ x))
        if self.kind is Kind.IVANOV:
            return 0.0 if np.max(np.abs(x), initial=0.0) <= (1 + 1e-12) / alpha else np.inf
        return alpha * float(np.abs(x).sum())

    def objective(self, x, alpha):
        return self.data_term(self.forward(x)) + self.penalty(x, alpha)

    def to_control(self, x):
        if self.kind is Kind.MEASURE:
            return DiscreteMeasure(self.nodes, x)
        full = np.zeros(self.mesh.n_vertices)
        full[self.nodes] = x
        return FeFunction(self.mesh, full)

    def from_control(self, u):
        """Reduced vector of a control on this mesh (zero where undefined)."""
        if u is None:
            return np.zeros(self.size)
        if isinstance(u, DiscreteMeasure):
            full = np.zeros(self.mesh.n_vertices)
            full[u.vertices] = u.coefficients
            return full[self.nodes]
        c = u.coefficients if isinstance(u, FeFunction) else np.asarray(u, dtype=float)
        if c.shape == (self.size,):
            return c.copy()
        return np.asarray(c, dtype=float)[self.nodes]

    def lipschitz(self, iterations=20, safety=1.05, seed=0):
        """Power-iteration estimate of the largest eigenvalue of :meth:`gram`."""
        v = np.random.default_rng(seed).standard_normal(self.size)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iterations):
            gv = self.gram(v)
            lam = float(np.linalg.norm(gv))
            if lam == 0.0:
                break
            v = gv / lam
        return safety * lam

    def package(self, regularizer, x, iterations, residual, info=None):
        y = self.forward(x)
        w = self.adjoint(y)
        J = self.data_term(y) + self.penalty(x, regularizer.alpha)
        return TikhonovSolution(
            regularizer=regularizer,
            u=self.to_control(x),
            y=FeFunction(self.mesh, y),
            w=FeFunction(self.mesh, w),
            J_value=float(J),
            discrepancy=self.discrepancy(y),
            optimality_residual=float(residual),
            iterations=int(iterations),
            g_delta=FeFunction(self.mesh, self.g),
            control=np.asarray(x, dtype=float),
            info=dict(info or {}, poisson_solves=self.n_solves),
        )


def _prepare(mesh, g_delta, alpha, kind, mask, space):
    if mask is not None:
        mesh = mesh.with_mask(mask)
        space = None
    reg = Regularizer(kind, alpha)
    return reg, ReducedProblem(mesh, g_delta, kind, space)


# -- quadratic Hilbert penalty -------------------------------------------------


def solve_hilbert(mesh, g_delta, alpha, mask=None, *, tol=1e-12, maxiter=2000,
                  x0=None, space=None):
    """Minimize ``1/2 |y - g|^2 + alpha/2 |u|^2`` over P1 controls.

    The reduced normal equations ``(alpha M_c + L^T A^{-1} M_o A^{-1} L) x =
    L^T A^{-1} M_o g`` are solved by conjugate gradients preconditioned with
    ``(alpha M_c)^{-1}``; each operator application costs two Poisson solves.
    """
    reg, prob = _prepare(mesh, g_delta, alpha, Kind.HILBERT, mask, space)
    n = prob.size
    rhs = prob.load_T(prob.space.solve_full(prob.Mo_g))
    if n == 0 or not np.any(rhs):
        x = np.zeros(n)
        return prob.package(reg, x, 0, 0.0)
    Mc_lu = spla.splu(prob.control_mass)
    op = spla.LinearOperator((n, n), matvec=lambda v: alpha * (prob.control_mass @ v)
                             + prob.gram(v), dtype=float)
    pre = spla.LinearOperator((n, n), matvec=lambda v: Mc_lu.solve(v) / alpha, dtype=float)
    counter = {"it": 0}

    def count(_):
        counter["it"] += 1

    x0 = prob.from_control(x0) if x0 is not None else None
    x, status = spla.cg(op, rhs, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=pre,
                        callback=count)
    if status != 0:
        raise NumericalFailure("CG for the Hilbert normal equations stagnated",
                               iterations=counter["it"], last_iterate=x)
    sol = prob.package(reg, x, counter["it"], 0.0)
    grad_u = alpha * (prob.control_mass @ x)
    BtW = prob.load_T(sol.w.coefficients)
    kkt = np.linalg.norm(grad_u - BtW) / max(np.linalg.norm(grad_u) + np.linalg.norm(BtW),
                                             np.finfo(float).tiny)
    return _replace(sol, optimality_residual=float(kkt))


def _replace(sol, **changes):
    from dataclasses import replace
    return replace(sol, **changes)


# -- Ivanov (L-infinity ball) ---------------------------------------------------


# control sizes for the dense active-set path: always below the
# first, as a fallback for a stalled projected gradient below the second
DENSE_IVANOV_DIRECT = 150
DENSE_IVANOV_LIMIT = 600


def solve_ivanov(mesh, g_delta, alpha, mask=None, *, tol=1e-8, maxiter=20000,
                 x0=None, space=None, subspace_steps=True, method="auto"):
    """Minimize ``1/2 |y - g|^2`` subject to ``|u| <= 1/alpha`` nodally.

    ``method="active_set"`` forms the dense reduced Hessian and runs an exact
    primal active-set method (see :func:`box_qp`).
    ``method="spg"`` is a spectral projected gradient with alternating
    Barzilai-Borwein steps and a nonmonotone Armijo test.  Once the active
    set settles, a conjugate-gradient step on the free variables is tried
    (kept only if it lowers the objective), which removes the slow tail that
    plain gradient steps show on these badly conditioned problems.  ``auto``
    uses the active-set solver up to ``DENSE_IVANOV_DIRECT`` control nodes and
    falls back to it up to ``DENSE_IVANOV_LIMIT`` nodes when the projected
    gradient hits ``maxiter``.
    """
    reg, prob = _prepare(mesh, g_delta, alpha, Kind.IVANOV, mask, space)
    bound = 1.0 / alpha
    n = prob.size
    if method not in ("auto", "active_set", "spg"):
        raise InvalidArgument(f"unknown Ivanov method {method!r}")
    if method == "active_set" or (method == "auto" and n <= DENSE_IVANOV_DIRECT):
        return _ivanov_dense(reg, prob, bound, x0)
    try:
        return _ivanov_spg(reg, prob, bound, tol, maxiter, x0, subspace_steps)
    except NumericalFailure:
        if method == "spg" or n > DENSE_IVANOV_LIMIT:
            raise
        log.info("projected gradient stalled on %d nodes, switching to active set", n)
        return _ivanov_dense(reg, prob, bound, x0)


def _ivanov_spg(reg, prob, bound, tol, maxiter, x0, subspace_steps):
    n = prob.size

    def clamp(v):
        return np.clip(v, -bound, bound)

    def evaluate(x):
        y = prob.forward(x)
        w = prob.adjoint(y)
        return prob.data_term(y), -prob.load_T(w)

    x = clamp(prob.from_control(x0)) if x0 is not None else np.zeros(n)
    f, grad = evaluate(x)
    pg0 = np.linalg.norm(grad)
    stop = tol * (1.0 + pg0)
    history = [f]
    step = 1.0 / max(prob.lipschitz(), np.finfo(float).tiny)
    it = 0
    prev_active = None
    pg = np.linalg.norm(x - clamp(x - grad))
    while pg > stop:
        if it >= maxiter:
            raise NumericalFailure("projected gradient hit the iteration cap",
                                   iterations=it, last_iterate=x, residual=pg)
        it += 1
        active = ((x <= -bound) & (grad > 0)) | ((x >= bound) & (grad < 0))
        moved = False
        if subspace_steps and prev_active is not None and np.array_equal(active, prev_active):
            x_new = _subspace_step(prob, x, grad, ~active, clamp)
            if x_new is not None:
                f_new, g_new = evaluate(x_new)
                if f_new < f:
                    s, yk = x_new - x, g_new - grad
                    x, f, grad, moved = x_new, f_new, g_new, True
                    sy = float(s @ yk)
                    if sy > 0:
                        step = float(s @ s) / sy
        prev_active = active
        if not moved:
            d = clamp(x - step * grad) - x
            ref = max(history[-10:])
            slope = float(grad @ d)
            t = 1.0
            while True:
                x_new = x + t * d
                f_new, g_new = evaluate(x_new)
                if f_new <= ref + 1e-4 * t * slope or t < 1e-12:
                    break
                t *= 0.5
            s, yk = x_new - x, g_new - grad
            x, f, grad = x_new, f_new, g_new
            sy = float(s @ yk)
            if sy > 0:
                bb1 = float(s @ s) / sy
                bb2 = sy / max(float(yk @ yk), np.finfo(float).tiny)
                step = bb1 if it % 2 else bb2
        history.append(f)
        pg = np.linalg.norm(x - clamp(x - grad))
    z = -grad  # = L^T w
    vi = float(np.max(np.abs(z) * bound - x * z, initial=0.0))
    return prob.package(reg, x, it, pg, info={"vi_residual": vi, "pg_start": pg0})


def _ivanov_dense(reg, prob, bound, x0):
    n = prob.size
    if n == 0:
        return prob.package(reg, np.zeros(0), 0, 0.0, info={"vi_residual": 0.0})
    sp_ = prob.space
    L = prob._Lc.T.tocsr()[sp_.free].toarray()
    Y = np.zeros((sp_.n, n))
    if sp_._lu is not None:
        Y[sp_.free] = sp_._lu.solve(L)
    prob.n_solves += n
    MY = sp_.obs_mass @ Y
    G = Y.T @ MY
    G = 0.5 * (G + G.T)
    c = MY.T @ prob.g
    x0 = None if x0 is None else np.clip(prob.from_control(x0), -bound, bound)
    x, steps = box_qp(G, c, bound, x0)
    grad = G @ x - c
    pg = float(np.linalg.norm(x - np.clip(x - grad, -bound, bound)))
    z = -grad
    vi = float(np.max(np.abs(z) * bound - x * z, initial=0.0))
    return prob.package(reg, x, steps, pg, info={"vi_residual": vi, "method": "active_set"})


def box_qp(G, c, bound, x0=None, maxiter=None):
    """Primal active-set method for ``min 1/2 x'Gx - c'x`` over ``|x_i| <= bound``.

    ``G`` only needs to be positive semidefinite: face problems take the
    minimum-norm least-squares step, which is a descent direction because the
    reduced gradient lies in the range of the face block.  Variables released
    from a bound whose face step points outwards are kept fixed and the face
    is re-solved.  Returns ``(x, steps)``.
    """
    n = len(c)
    x = np.zeros(n) if x0 is None else np.clip(np.asarray(x0, dtype=float), -bound, bound)
    scale = max(float(np.max(np.abs(c), initial=0.0)), np.finfo(float).tiny)
    eps = 1e-13 * scale
    maxiter = maxiter or 4 * n + 50
    for step in range(maxiter):
        grad = G @ x - c
        lo, hi = x <= -bound, x >= bound
        fixed = (lo & (grad >= -eps)) | (hi & (grad <= eps))
        free = np.flatnonzero(~fixed)
        if free.size == 0 or np.max(np.abs(grad[free])) <= eps:
            return x, step
        while True:
            d = sla.lstsq(G[np.ix_(free, free)], -grad[free], cond=1e-14,
                          check_finite=False, lapack_driver="gelsy")[0]
            outward = (lo[free] & (d < 0)) | (hi[free] & (d > 0))
            if not outward.any() or outward.all():
                break
            free = free[~outward]
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(d > 0, (bound - x[free]) / d,
                            np.where(d < 0, (-bound - x[free]) / d, np.inf))
        t = float(min(1.0, room.min(initial=np.inf)))
        if t <= 0.0:
            return x, step
        x[free] += t * d
        # coordinates reaching the box are put on it exactly
        hit = np.isclose(room, t, rtol=1e-12, atol=0.0)
        x[free[hit]] = np.sign(d[hit]) * bound
        np.clip(x, -bound, bound, out=x)
    return x, maxiter


def _subspace_step(prob, x, grad, free, clamp, maxiter=50):
    """CG on the free variables for the quadratic model, then project."""
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return None
    n = prob.size

    def hess_free(v):
        full = np.zeros(n)
        full[idx] = v
        return prob.gram(full)[idx]

    op = spla.LinearOperator((idx.size, idx.size), matvec=hess_free, dtype=float)
    d, _ = spla.cg(op, -grad[idx], rtol=1e-10, atol=0.0, maxiter=maxiter)
    out = x.copy()
    out[idx] += d
    return clamp(out)


# -- measure norm (sparsity) -----------------------------------------------------


def soft_threshold(v, t):
    """Prox of ``t |.|_1``; exact ties ``|v| = t`` map to 0."""
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _gap_terms(alpha, c0, bu, uGu, l1, wmax):
    """Primal minus dual value for the candidate ``kappa (g - y)``."""
    rr = c0 - 2.0 * bu + uGu
    rg = c0 - bu
    kappa = 1.0 if wmax <= alpha else alpha / wmax
    primal = 0.5 * rr + alpha * l1
    dual = kappa * rg - 0.5 * kappa**2 * rr
    return primal - dual, kappa


def sparse_gap(prob, x, y, w, alpha):
    """Primal-dual gap with the dual candidate ``kappa (g - y)`` made feasible.

    Returns ``(gap, kappa)``; ``K^*(g - y)`` is the adjoint at the atoms.
    """
    r = prob.g - y
    Mr = prob.space.obs_mass @ r
    rr = float(r @ Mr)
    rg = float(prob.g @ Mr)
    wmax = float(np.max(np.abs(w[prob.nodes]), initial=0.0))
    kappa = 1.0 if wmax <= alpha else alpha / wmax
    primal = 0.5 * rr + alpha * float(np.abs(x).sum())
    dual = kappa * rg - 0.5 * kappa**2 * rr
    return primal - dual, kappa


def solve_sparse(mesh, g_delta, alpha, mask=None, *, tol=1e-9, maxiter=200000,
                 x0=None, space=None, check_every=10, working_set=True, batch=None):
    """Minimize ``1/2 |y - g|^2 + alpha sum_j |u_j|`` over Dirac weights.

    FISTA with gradient-based adaptive restart and exact face polishing,
    terminated on the duality gap ``gap <= tol (1 + J)`` of the full problem.

    With ``working_set`` (default) FISTA runs on the dense subproblem over a
    small set of candidate atoms; after each subproblem solve the full adjoint
    is computed and atoms violating ``|w_j| <= alpha`` are added, largest
    first (at most ``batch`` per round, default 12).  The
    Gram entries of a new atom cost two Poisson solves.  Without it, FISTA runs
    on all atoms with a step ``1/L`` from power iteration.
    """
    reg, prob = _prepare(mesh, g_delta, alpha, Kind.MEASURE, mask, space)
    n = prob.size
    x = prob.from_control(x0) if x0 is not None else np.zeros(n)
    if n == 0 or prob.data_norm2 == 0.0 and not np.any(x):
        return prob.package(reg, np.zeros(n), 0, 0.0,
                            info={"gap": 0.0, "gap_history": [0.0], "kappa": 1.0})
    if working_set:
        return _solve_working_set(reg, prob, x, alpha, tol, maxiter, check_every, batch)
    return _solve_full_fista(reg, prob, x, alpha, tol, maxiter, check_every)


def _solve_full_fista(reg, prob, x, alpha, tol, maxiter, check_every):
    L = prob.lipschitz()
    if L == 0.0:
        return prob.package(reg, np.zeros_like(x), 0, 0.0,
                            info={"gap": 0.0, "gap_history": [0.0], "kappa": 1.0})
    columns = {}
    z = x.copy()
    t = 1.0
    gaps = []
    it = 0
    polishes = 0
    last_support = None
    while True:
        if it % check_every == 0:
            y = prob.forward(x)
            w = prob.adjoint(y)
            gap, kappa = sparse_gap(prob, x, y, w, alpha)
            support = np.flatnonzero(x)
            settled = last_support is not None and np.array_equal(support, last_support)
            last_support = support
            if settled and support.size:
                xp, yp = _polish_from_columns(prob, x, alpha, columns)
                wp = prob.adjoint(yp)
                gap_p, kappa_p = sparse_gap(prob, xp, yp, wp, alpha)
                if gap_p < gap:
                    polishes += 1
                    x, y, w, gap, kappa = xp, yp, wp, gap_p, kappa_p
                    z = x.copy()
                    t = 1.0
            J = prob.data_term(y) + alpha * float(np.abs(x).sum())
            gaps.append(gap)
            if gap <= tol * (1.0 + J):
                break
            if it >= maxiter:
                raise NumericalFailure("FISTA hit the iteration cap", iterations=it,
                                       last_iterate=x, gap=gap)
        it += 1
        wz = prob.adjoint(prob.forward(z))
        grad = -wz[prob.nodes]
        x_new = soft_threshold(z - grad / L, alpha / L)
        if float((z - x_new) @ (x_new - x)) > 0:
            t = 1.0  # restart: momentum points uphill
            z = x_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            z = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
    return prob.package(reg, x, it, gaps[-1],
                        info={"gap": gaps[-1], "gap_history": gaps, "kappa": kappa,
                              "lipschitz": L, "polishes": polishes})


def _polish_from_columns(prob, x, alpha, columns):
    S = np.flatnonzero(x)
    for j in S:
        if j not in columns:
            e = np.zeros(prob.size)
            e[j] = 1.0
            columns[j] = prob.forward(e)
    Y = np.column_stack([columns[j] for j in S])
    MY = prob.space.obs_mass @ Y
    u = face_polish(Y.T @ MY, MY.T @ prob.g, alpha, x[S])
    out = np.zeros_like(x)
    out[S] = u
    return out, Y @ u


class _WorkingSet:
    """Dense Gram matrix ``G`` and ``b = K^* g`` over a growing atom set."""

    def __init__(self, prob):
        self.prob = prob
        self.atoms = np.zeros(0, dtype=np.int64)
        self.G = np.zeros((0, 0))
        # K^* g at every atom: one solve
        self.b_all = prob.load_T(prob.space.solve_full(prob.Mo_g))

    def add(self, new):
        prob = self.prob
        new = np.asarray(new, dtype=np.int64)
        atoms = np.concatenate([self.atoms, new])
        k, m = len(self.atoms), len(new)
        G = np.zeros((k + m, k + m))
        G[:k, :k] = self.G
        for i, j in enumerate(new):
            e = np.zeros(prob.size)
            e[j] = 1.0
            col = prob.gram(e)
            G[:, k + i] = col[atoms]
        # symmetrize the new block against roundoff of the two solve orders
        G[k:, :k] = G[:k, k:].T
        G[k:, k:] = 0.5 * (G[k:, k:] + G[k:, k:].T)
        self.atoms, self.G = atoms, G

    @property
    def b(self):
        return self.b_all[self.atoms]


def _power_max(G, iterations=20, safety=1.05, seed=0):
    v = np.random.default_rng(seed).standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        gv = G @ v
        lam = float(np.linalg.norm(gv))
        if lam == 0.0:
            break
        v = gv / lam
    return safety * lam


def dense_lasso(G, b, alpha, c0, u0=None, *, tol=1e-12, maxiter=100000, check_every=10,
                use_active_set=True):
    """Solve ``1/2 u'Gu - b'u + alpha |u|_1`` on a dense Gram matrix.

    The exact active-set method runs first.  Its result is returned when the
    gap meets ``tol`` or when it stopped because no descent step is left at
    working precision; only if it exhausts its step budget does FISTA with
    restart and face polishing take over.

    ``c0`` is the squared data norm, so that ``1/2 u'Gu - b'u + c0/2`` is the
    data term; the gap uses the same scaled dual candidate as the full
    problem.  Returns ``(u, gap, iterations)``.
    """
    n = len(b)
    u = np.zeros(n) if u0 is None else np.asarray(u0, dtype=float).copy()

    def gap_of(v):
        Gv = G @ v
        bu = float(b @ v)
        gap, _ = _gap_terms(alpha, c0, bu, float(v @ Gv), float(np.abs(v).sum()),
                            float(np.max(np.abs(b - Gv), initial=0.0)))
        J = 0.5 * (c0 - 2.0 * bu + float(v @ Gv)) + alpha * float(np.abs(v).sum())
        return gap, J

    if n and use_active_set:
        cap = 4 * n + 50
        ua, steps = active_set_lasso(G, b, alpha, u, maxiter=cap)
        gap_a, J_a = gap_of(ua)
        # stopping before the cap means no descent step is left at working precision
        if gap_a <= tol * (1.0 + J_a) or steps < cap:
            return ua, gap_a, steps
        if gap_a < gap_of(u)[0]:
            u = ua
    L = _power_max(G)
    if L == 0.0:
        return np.zeros(n), 0.0, 0

    z = u.copy()
    t = 1.0
    last_support = None
    it = 0
    while True:
        if it % check_every == 0:
            gap, J = gap_of(u)
            support = np.flatnonzero(u)
            if last_support is not None and np.array_equal(support, last_support) \
                    and support.size:
                up = np.zeros(n)
                up[support] = face_polish(G[np.ix_(support, support)], b[support],
                                          alpha, u[support])
                gap_p, J_p = gap_of(up)
                if gap_p < gap:
                    u, gap, J = up, gap_p, J_p
                    z, t = u.copy(), 1.0
            last_support = support
            if gap <= tol * (1.0 + J) or it >= maxiter:
                return u, gap, it
        it += 1
        u_new = soft_threshold(z - (G @ z - b) / L, alpha / L)
        if float((z - u_new) @ (u_new - u)) > 0:
            t, z = 1.0, u_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            z = u_new + ((t - 1.0) / t_new) * (u_new - u)
            t = t_new
        u = u_new


def _solve_working_set(reg, prob, x, alpha, tol, maxiter, check_every, batch):
    ws = _WorkingSet(prob)
    gaps = []
    inner_total = 0
    sub_tol = 1e-3 * tol
    rounds = 0
    while True:
        y = prob.forward(x)
        w = prob.adjoint(y)
        gap, kappa = sparse_gap(prob, x, y, w, alpha)
        J = prob.data_term(y) + alpha * float(np.abs(x).sum())
        gaps.append(gap)
        if gap <= tol * (1.0 + J):
            break
        if inner_total >= maxiter:
            raise NumericalFailure("working-set FISTA hit the iteration cap",
                                   iterations=inner_total, last_iterate=x, gap=gap)
        member = np.zeros(prob.size, dtype=bool)
        member[ws.atoms] = True
        wn = np.abs(w[prob.nodes])
        new = np.flatnonzero((wn > alpha) & ~member)
        new = np.union1d(new, np.flatnonzero((x != 0) & ~member))
        if new.size:
            cap = batch or 12
            new = new[np.argsort(-wn[new], kind="stable")][:cap]
            ws.add(np.sort(new))
        else:
            # no violators left: the subproblem was not solved accurately enough
            sub_tol *= 1e-2
            if sub_tol < 1e-20:
                raise NumericalFailure("working-set refinement stalled", gap=gap,
                                       last_iterate=x)
        u, _, inner = dense_lasso(ws.G, ws.b, alpha, prob.data_norm2, x[ws.atoms],
                                  tol=sub_tol, maxiter=maxiter, check_every=check_every)
        inner_total += inner
        rounds += 1
        x = np.zeros(prob.size)
        x[ws.atoms] = u
    return prob.package(reg, x, inner_total, gaps[-1],
                        info={"gap": gaps[-1], "gap_history": gaps, "kappa": kappa,
                              "rounds": rounds, "working_set": int(len(ws.atoms))})


def _face_solve(H, r):
    try:
        return sla.solve(H, r, assume_a="pos", check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(H, r, rcond=None)[0]


def _line_min(u, d, Gu, Gd, b, alpha):
    """Exact minimizer over ``t in [0, 1]`` of the objective along ``u + t d``.

    The objective is convex and piecewise quadratic with kinks where a
    coefficient crosses zero; we walk the kinks in order and stop at the first
    segment where the derivative changes sign.
    """
    nz = d != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tk = np.where(nz, -u / d, np.inf)
    kinks = np.unique(tk[(tk > 0) & (tk < 1)])
    dGd = float(d @ Gd)
    slope0 = float(d @ Gu) - float(b @ d)
    edges = np.concatenate([[0.0], kinks, [1.0]])
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (lo + hi)
        sgn = np.sign(u + mid * d)
        lin = slope0 + alpha * float(sgn @ d)
        # derivative on (lo, hi) is lin + t dGd
        if lin + hi * dGd >= 0:
            return max(lo, -lin / dGd) if dGd > 0 else lo
    return 1.0


def active_set_lasso(G, b, alpha, u0=None, maxiter=None):
    """Feature-sign active-set method for ``1/2 u'Gu - b'u + alpha |u|_1``.

    Each step activates the zero coefficients whose gradient exceeds
    ``alpha`` (with the sign that decreases the objective), moves towards
    the minimizer of the quadratic on the resulting sign face and takes the
    exact minimizer of the objective along that segment.  Newly activated
    coefficients whose face minimizer has the wrong sign are frozen at zero
    and the face is re-solved.  Returns ``(u, steps)``.
    """
    n = len(b)
    u = np.zeros(n) if u0 is None else np.asarray(u0, dtype=float).copy()
    scale = max(alpha, float(np.max(np.abs(b), initial=0.0)))
    eps = 1e-13 * scale
    maxiter = maxiter or 4 * n + 50
    for step in range(maxiter):
        Gu = G @ u
        grad = Gu - b
        s = np.sign(u)
        on = s != 0
        off_viol = ~on & (np.abs(grad) > alpha + eps)
        on_viol = on & (np.abs(grad + alpha * s) > 1e3 * eps)
        if not off_viol.any() and not on_viol.any():
            return u, step
        s[off_viol] = -np.sign(grad[off_viol])
        idx = np.flatnonzero(s)
        while True:
            target = _face_solve(G[np.ix_(idx, idx)], b[idx] - alpha * s[idx])
            bad = (u[idx] == 0) & (np.sign(target) != s[idx])
            if not bad.any() or bad.all():
                break
            idx = idx[~bad]
        d = np.zeros(n)
        d[idx] = target - u[idx]
        Gd = G @ d
        t = _line_min(u, d, Gu, Gd, b, alpha)
        if t <= 0.0:
            return u, step
        new = u + t * d
        # coefficients sitting on a kink are set to zero exactly
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = np.isclose(-u / d, t, rtol=1e-12, atol=0.0) & (d != 0)
        new[hit] = 0.0
        u = new
    return u, maxiter


def face_polish(G, b, alpha, u0, refresh=32):
    """Exact minimizer of ``1/2 u'Gu - b'u + alpha |u|_1`` on the sign face of ``u0``.

    On the face ``{u : sign(u) = s}`` the objective is the quadratic
    ``1/2 u'Gu - (b - alpha s)'u``.  Starting from ``u0`` (which lies on the
    face) we move towards the unconstrained face minimizer, stopping at the
    first coefficient that would change sign, drop it, and repeat, so every
    move lowers the objective.  The inverse of the shrinking Gram block is
    downdated by rank-one updates and recomputed every ``refresh`` drops.
    """
    u = np.asarray(u0, dtype=float).copy()
    s = np.sign(u)
    rhs = b - alpha * s
    idx = np.flatnonzero(s)
    H = np.linalg.pinv(G[np.ix_(idx, idx)])
    drops = 0
    while idx.size:
        target = H @ rhs[idx]
        cur = u[idx]
        wrong = np.sign(target) != s[idx]
        if not wrong.any():
            u[idx] = target
            break
        d = target - cur
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = np.where(wrong, -cur / d, np.inf)
        k = int(np.argmin(hit))
        u[idx] = cur + float(np.clip(hit[k], 0.0, 1.0)) * d
        u[idx[k]] = 0.0
        rest = np.delete(np.arange(idx.size), k)
        drops += 1
        if drops % refresh == 0 or H[k, k] <= 0:
            H = np.linalg.pinv(G[np.ix_(idx[rest], idx[rest])])
        else:
            H = H[np.ix_(rest, rest)] - np.outer(H[rest, k], H[k, rest]) / H[k, k]
        idx = idx[rest]
    out = np.zeros_like(u)
    out[idx] = u[idx]
    return out


def solve(kind, mesh, g_delta, alpha, **kwargs):
    """Dispatch to the solver for ``kind``."""
    kind = Kind(kind)
    if kind is Kind.HILBERT:
        return solve_hilbert(mesh, g_delta, alpha, **kwargs)
    if kind is Kind.IVANOV:
        return solve_ivanov(mesh, g_delta, alpha, **kwargs)
    return solve_sparse(mesh, g_delta, alpha, **kwargs)
