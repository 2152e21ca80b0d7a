"""Functional a posteriori error estimators for the three regularizers.

Every report combines residual-based bounds for the Poisson solves behind the
state and adjoint with the duality-gap estimate of the Tikhonov functional.
Unknown analytic constants are collected in :class:`EstimatorConstants`; they
default to 1 and can be fitted by :func:`calibrate` against a fine-mesh
proxy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InfeasibleCertificate, InvalidArgument
from .fem import P1Space, local_mass
from .mesh import edge_jumps, prolong
from .tikhonov import DiscreteMeasure, Kind, ReducedProblem

__all__ = [
    "EstimatorConstants",
    "EstimatorReport",
    "sigma_gamma_check",
    "implication_test",
    "find_counterexample",
    "duality_gap_bound",
    "hilbert_report",
    "ivanov_report",
    "sparse_report",
    "report",
    "discrepancy_gap",
    "calibrate",
]


# -- the (sigma, gamma) lemma ----------------------------------------------------


def _gamma_minus(sigma):
    return 2.0 * sigma / (sigma + math.sqrt(sigma * sigma - 4.0 * sigma))


def sigma_gamma_check(sigma, gamma):
    """True iff ``a + b^2 <= c + d^2`` implies ``a + (b+d)^2 <= gamma c + sigma d^2``.

    The condition is ``sigma >= 4`` and ``gamma >= 2 sigma / (sigma +
    sqrt(sigma^2 - 4 sigma))``; at ``sigma = 4`` the bound is ``gamma >= 2``.
    On the curve ``gamma = 2 sigma / (...)`` with ``sigma > 4`` the governing
    quadratic in ``z`` has a double root, so the implication still holds there.
    """
    sigma = float(sigma)
    gamma = float(gamma)
    if not (math.isfinite(sigma) and math.isfinite(gamma)) or sigma < 4.0:
        return False
    return gamma >= _gamma_minus(sigma)


def _margin(sigma, gamma, z):
    """``(gamma-1) z^2 - 2(2-gamma) z + sigma - 4``; negative means a violation."""
    return (gamma - 1.0) * z * z - 2.0 * (2.0 - gamma) * z + sigma - 4.0


def _violated(a, b, c, d, sigma, gamma, rtol=1e-12):
    lhs = a + (b + d) ** 2
    rhs = gamma * c + sigma * d * d
    return lhs > rhs + rtol * np.maximum(np.abs(lhs), np.abs(rhs))


def implication_test(sigma, gamma, samples=100_000, seed=0):
    """Randomized search for violations of the implication.

    Samples ``c, d`` log-uniformly, ``b`` uniformly in ``[0, sqrt(c + d^2)]``
    and ``a`` uniformly in the remaining slack, so the premise always holds.
    A quarter of the samples are pushed onto the extremal face ``a = 0``,
    ``b^2 = c + d^2`` where violations live.  Returns ``(count, example)``
    with ``example`` the first violating ``(a, b, c, d)`` or ``None``.
    """
    rng = np.random.default_rng(seed)
    n = int(samples)
    c = 10.0 ** rng.uniform(-4, 4, n)
    d = 10.0 ** rng.uniform(-4, 4, n)
    c[rng.random(n) < 0.05] = 0.0
    top = np.sqrt(c + d * d)
    b = top * rng.random(n)
    slack = np.maximum(c + d * d - b * b, 0.0)
    a = slack * rng.random(n)
    edge = rng.random(n) < 0.25
    a[edge] = 0.0
    # shrink b by a few ulps so the premise survives rounding
    b[edge] = top[edge] * (1.0 - 1e-13)
    bad = _violated(a, b, c, d, sigma, gamma)
    count = int(bad.sum())
    if count == 0:
        return 0, None
    i = int(np.flatnonzero(bad)[0])
    return count, (float(a[i]), float(b[i]), float(c[i]), float(d[i]))


def find_counterexample(sigma, gamma):
    """Deterministic search on the extremal face for ``(a, b, c, d)`` violating the implication.

    With ``d = 1``, ``a = 0``, ``b = z + 1`` and ``c = (z+1)^2 - 1`` the
    implication reduces to ``_margin(z) >= 0``; we minimize the margin over
    ``z >= 0`` (vertex of the parabola plus a geometric grid) and return the
    worst point if it is a genuine violation, else ``None``.
    """
    sigma, gamma = float(sigma), float(gamma)
    zs = [0.0, *np.geomspace(1e-6, 1e8, 400)]
    if gamma > 1.0:
        zs.append(max(0.0, (2.0 - gamma) / (gamma - 1.0)))
    zs = np.asarray(zs)
    m = _margin(sigma, gamma, zs)
    order = np.argsort(m)
    for z in zs[order[:20]]:
        a, b, c, d = 0.0, (z + 1.0) * (1.0 - 1e-13), (z + 1.0) ** 2 - 1.0, 1.0
        if a + b * b <= c + d * d and _violated(a, b, c, d, sigma, gamma):
            return (a, float(b), float(c), d)
    return None


# -- constants and reports -----------------------------------------------------------


@dataclass(frozen=True)
class EstimatorConstants:
    """Interpolation, stability, Dirac and L-infinity constants plus ``(sigma, gamma)``."""

    c_I: float = 1.0
    c_S: float = 1.0
    c_dirac: float = 1.0
    c_inf: float = 1.0
    sigma: float = 4.0
    gamma: float = 2.0
    calibration: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("c_I", "c_S", "c_dirac", "c_inf", "sigma", "gamma"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidArgument(f"{name} must be a positive finite number, got {v!r}")
        if not sigma_gamma_check(self.sigma, self.gamma):
            raise InvalidArgument(
                f"(sigma, gamma) = ({self.sigma}, {self.gamma}) violates the admissibility condition")

    @property
    def c_T(self):
        return self.c_I * self.c_S

    @property
    def c_3(self):
        return self.c_dirac * self.c_I * self.c_S

    def to_dict(self):
        d = asdict(self)
        d["c_T"] = self.c_T
        d["c_3"] = self.c_3
        return d

    @classmethod
    def from_dict(cls, data):
        data = {k: v for k, v in dict(data).items() if k not in ("c_T", "c_3")}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown estimator constant(s): {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class EstimatorReport:
    """Totals, per-element families and assembled bounds for one solution.

    ``families`` maps a family name to its per-element array and
    ``family_norms`` says how the array reduces to the matching total:
    ``"l2"`` (root of the sum of squares), ``"sum"`` or ``"max"``.
    """

    kind: str
    indicators: np.ndarray
    eta_w: float
    eta_y: float
    residual_bound: float
    functional_bound: float
    discrepancy_gap_bound: float
    constants: EstimatorConstants
    eta_w_inf: float | None = None
    eta_kappa: float | None = None
    kappa_lower: float | None = None
    rho_u_term: float | None = None
    bregman_term: float | None = None
    families: dict = field(default_factory=dict)
    family_norms: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)

    def family_total(self, name):
        v = self.families[name]
        how = self.family_norms[name]
        if v.size == 0:
            return 0.0
        if how == "l2":
            return float(np.sqrt(np.sum(v**2)))
        if how == "sum":
            return float(np.sum(v))
        return float(np.max(v))

    def to_dict(self, arrays=True):
        out = {
            "kind": self.kind,
            "eta_w": self.eta_w,
            "eta_y": self.eta_y,
            "eta_w_inf": self.eta_w_inf,
            "eta_kappa": self.eta_kappa,
            "kappa_lower": self.kappa_lower,
            "rho_u_term": self.rho_u_term,
            "bregman_term": self.bregman_term,
            "residual_bound": self.residual_bound,
            "functional_bound": self.functional_bound,
            "discrepancy_gap_bound": self.discrepancy_gap_bound,
            "terms": dict(self.terms),
            "constants": self.constants.to_dict(),
        }
        if arrays:
            out["indicators"] = self.indicators.tolist()
            out["families"] = {k: v.tolist() for k, v in self.families.items()}
            out["family_norms"] = dict(self.family_norms)
        return out

    def to_json(self, arrays=True, **kwargs):
        return json.dumps(self.to_dict(arrays=arrays), **kwargs)


# -- elementwise building blocks -----------------------------------------------------


def _element_l2sq(mesh, values):
    """Squared L2 norm of a P1 function on every element (exact)."""
    c = np.asarray(values, dtype=float)[mesh.triangles]
    return np.einsum("tk,tkl,tl->t", c, local_mass(mesh), c)


def _element_l1(mesh, values):
    """L1 norm of a P1 function on every element (exact).

    If the nodal values change sign, the minority vertex cuts off a corner
    triangle on which the function has the opposite sign; its integral is
    ``|K| |v_i|^3 / (3 |v_i - v_j| |v_i - v_k|)``.
    """
    v = np.asarray(values, dtype=float)[mesh.triangles]
    area = mesh.area
    mean = v.mean(axis=1)
    pos = (v > 0).sum(axis=1)
    neg = (v < 0).sum(axis=1)
    out = area * np.abs(mean)
    mixed = (pos > 0) & (neg > 0)
    if mixed.any():
        vm = v[mixed]
        # majority sign: the sign shared by two vertices (zeros join the majority)
        s = np.where((vm > 0).sum(axis=1) >= 2, 1.0, -1.0)
        s = np.where(((vm >= 0).sum(axis=1) >= 2) & ((vm < 0).sum(axis=1) == 1), 1.0, s)
        s = np.where(((vm <= 0).sum(axis=1) >= 2) & ((vm > 0).sum(axis=1) == 1), -1.0, s)
        lone = np.argmax(s[:, None] * vm < 0, axis=1)
        r = np.arange(len(vm))
        vi = vm[r, lone]
        vj = vm[r, (lone + 1) % 3]
        vk = vm[r, (lone + 2) % 3]
        corner = area[mixed] * np.abs(vi) ** 3 / (3.0 * np.abs(vi - vj) * np.abs(vi - vk))
        out[mixed] = s * area[mixed] * mean[mixed] + 2.0 * corner
    return out


def _element_linf(mesh, values):
    """Max of ``|f|`` on every element; for P1 the vertex values attain it."""
    return np.max(np.abs(np.asarray(values, dtype=float)[mesh.triangles]), axis=1)


def _jump_families(mesh, values):
    """Per-element ``||[[grad f . nu]]||`` on ``dK`` in L2^2, L1 and Linf."""
    jump = edge_jumps(mesh, values)
    le = mesh.edge_lengths
    te = mesh.triangle_edges
    l2sq = np.sum(jump[te] ** 2 * le[te], axis=1)
    l1 = np.sum(np.abs(jump[te]) * le[te], axis=1)
    linf = np.max(np.abs(jump[te]), axis=1)
    return l2sq, l1, linf


def _problem(solution):
    return ReducedProblem(solution.mesh, solution.g_delta, solution.kind)


def _safe_log(h):
    return np.abs(np.log(h))


def _l1_sign_residual(mesh, u, w, alpha, in_c, m=8):
    """L1 norm on each element of ``alpha u - sign(w)`` by composite quadrature.

    ``sign`` jumps across the zero line of ``w``, so each element is split
    into ``m^2`` congruent subtriangles, each integrated with the 3-point
    degree-2 rule.
    """
    nt = mesh.n_triangles
    out = np.zeros(nt)
    idx = np.flatnonzero(in_c)
    if idx.size == 0:
        return out
    # barycentric coordinates of the sub-triangle quadrature points
    pts = []
    rule = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    for i in range(m):
        for j in range(m - i):
            up = np.array([[i, j], [i + 1, j], [i, j + 1]], dtype=float) / m
            tris = [up]
            if i + j < m - 1:
                tris.append(np.array([[i + 1, j], [i + 1, j + 1], [i, j + 1]], dtype=float) / m)
            for tri in tris:
                for q in rule:
                    xy = q @ tri
                    pts.append([1.0 - xy.sum(), xy[0], xy[1]])
    bary = np.asarray(pts)
    weight = 1.0 / len(bary)  # all sub-triangles have equal area
    t = mesh.triangles[idx]
    uq = bary @ np.asarray(u, dtype=float)[t].T
    wq = bary @ np.asarray(w, dtype=float)[t].T
    vals = np.abs(alpha * uq - np.sign(wq))
    out[idx] = mesh.area[idx] * weight * vals.sum(axis=0)
    return out


def _control_sup(mesh, w, in_c):
    verts = np.unique(mesh.triangles[in_c])
    return float(np.max(np.abs(np.asarray(w)[verts]), initial=0.0))


def _eta_w_inf(mesh, residual, w, in_o):
    """``|log h_min|^2 max_K (h_K^2 |rho_w|_inf,K + h_K |[[grad w . nu]]|_inf,dK)`` and its elements."""
    h = mesh.h
    data_inf = np.where(in_o, _element_linf(mesh, residual), 0.0)
    _, _, jump_inf = _jump_families(mesh, w)
    per = _safe_log(h.min()) ** 2 * (h**2 * data_inf + h * jump_inf)
    return float(per.max(initial=0.0)), per


def _hilbert_eta_y(mesh, y, u_values, in_c):
    """``eta_y`` with ``rho_y|_K = -u`` on the control region (P1 has no Laplacian)."""
    h = mesh.h
    rho_y = np.where(in_c, _element_l2sq(mesh, u_values), 0.0)
    jump_y, _, _ = _jump_families(mesh, y)
    return h**4 * rho_y + 0.5 * h**3 * jump_y


def _check_kind(solution, kind):
    if solution.kind is not kind:
        raise InvalidArgument(f"expected a {kind.value} solution, got {solution.kind.value}")


# -- reports ------------------------------------------------------------------------


def hilbert_report(solution, constants=None):
    """Estimator report for the quadratic ``L2`` penalty."""
    _check_kind(solution, Kind.HILBERT)
    k = constants or EstimatorConstants()
    mesh = solution.mesh
    alpha = solution.alpha
    in_c, in_o = mesh.mask.in_omega_c, mesh.mask.in_omega_o
    y, w, g = solution.y.coefficients, solution.w.coefficients, solution.g_delta.coefficients
    u = solution.u.coefficients
    h = mesh.h
    rho_w = np.where(in_o, _element_l2sq(mesh, y - g), 0.0)
    jump_w, _, _ = _jump_families(mesh, w)
    eta_w_sq = h**4 * rho_w + 0.5 * h**3 * jump_w
    eta_y_sq = _hilbert_eta_y(mesh, y, u, in_c)
    rho_u_sq = np.where(in_c, _element_l2sq(mesh, alpha * u - w), 0.0)
    eta_w = float(np.sqrt(eta_w_sq.sum()))
    eta_y = float(np.sqrt(eta_y_sq.sum()))
    rho_u = float(np.sqrt(rho_u_sq.sum()))
    space = P1Space(mesh)
    data_norm = space.obs_norm(y - g)
    cT = k.c_T
    residual = k.gamma / alpha * (cT * eta_w + rho_u) ** 2 + k.sigma * (cT * eta_y) ** 2
    functional = (cT * eta_w + rho_u) ** 2 / (2.0 * alpha) + cT * eta_y * data_norm
    ind = np.sqrt(k.gamma / alpha * (cT**2 * eta_w_sq + rho_u_sq) + k.sigma * cT**2 * eta_y_sq)
    gap = cT * eta_y + math.sqrt(residual)
    return EstimatorReport(
        kind=Kind.HILBERT.value, indicators=ind, eta_w=eta_w, eta_y=eta_y,
        residual_bound=float(residual), functional_bound=float(functional),
        discrepancy_gap_bound=float(gap), constants=k, rho_u_term=rho_u,
        families={"eta_w": np.sqrt(eta_w_sq), "eta_y": np.sqrt(eta_y_sq),
                  "rho_u": np.sqrt(rho_u_sq)},
        family_norms={"eta_w": "l2", "eta_y": "l2", "rho_u": "l2"},
        terms={"data_norm": data_norm},
    )


def ivanov_report(solution, constants=None):
    """Estimator report for the pointwise bound ``|u| <= 1/alpha``."""
    _check_kind(solution, Kind.IVANOV)
    k = constants or EstimatorConstants()
    mesh = solution.mesh
    alpha = solution.alpha
    in_c, in_o = mesh.mask.in_omega_c, mesh.mask.in_omega_o
    y, w, g = solution.y.coefficients, solution.w.coefficients, solution.g_delta.coefficients
    u = solution.u.coefficients
    h = mesh.h
    rho_w_l1 = np.where(in_o, _element_l1(mesh, y - g), 0.0)
    _, jump_w_l1, _ = _jump_families(mesh, w)
    eta_w_el = _safe_log(h) * h**2 * (rho_w_l1 + jump_w_l1)
    eta_w = float(eta_w_el.sum())
    eta_y_sq = _hilbert_eta_y(mesh, y, u, in_c)
    eta_y = float(np.sqrt(eta_y_sq.sum()))
    eta_inf, eta_inf_el = _eta_w_inf(mesh, y - g, w, in_o)
    rho_u_l1 = _l1_sign_residual(mesh, u, w, alpha, in_c)
    w_sup = _control_sup(mesh, w, in_c)
    sup_w_hat = w_sup + k.c_inf * eta_inf
    rho_u_term = float(rho_u_l1.sum()) * sup_w_hat
    bregman = 2.0 * k.c_T * eta_w
    space = P1Space(mesh)
    data_norm = space.obs_norm(y - g)
    cT = k.c_T
    scale = k.gamma * 2.0 / alpha  # = 4 / alpha for gamma = 2
    residual = scale * (rho_u_term + bregman) + k.sigma * (cT * eta_y) ** 2
    functional = (rho_u_term + bregman) / alpha + cT * eta_y * data_norm
    ind = np.sqrt(scale * (rho_u_l1 * sup_w_hat + 2.0 * cT * eta_w_el)
                  + k.sigma * cT**2 * eta_y_sq)
    gap = cT * eta_y + math.sqrt(residual)
    return EstimatorReport(
        kind=Kind.IVANOV.value, indicators=ind, eta_w=eta_w, eta_y=eta_y,
        residual_bound=float(residual), functional_bound=float(functional),
        discrepancy_gap_bound=float(gap), constants=k, eta_w_inf=eta_inf,
        rho_u_term=rho_u_term, bregman_term=bregman,
        families={"eta_w": eta_w_el, "eta_y": np.sqrt(eta_y_sq), "eta_w_inf": eta_inf_el,
                  "rho_u_l1": rho_u_l1},
        family_norms={"eta_w": "sum", "eta_y": "l2", "eta_w_inf": "max", "rho_u_l1": "sum"},
        terms={"data_norm": data_norm, "w_sup": w_sup, "rho_u_l1": float(rho_u_l1.sum())},
    )


def sparse_report(solution, constants=None):
    """Estimator report for the measure-norm penalty."""
    _check_kind(solution, Kind.MEASURE)
    k = constants or EstimatorConstants()
    mesh = solution.mesh
    alpha = solution.alpha
    in_c, in_o = mesh.mask.in_omega_c, mesh.mask.in_omega_o
    y, w, g = solution.y.coefficients, solution.w.coefficients, solution.g_delta.coefficients
    u = solution.u
    h = mesh.h
    space = P1Space(mesh)
    data_norm = space.obs_norm(y - g)
    jump_y, _, _ = _jump_families(mesh, y)
    eta_y_el = np.sqrt(h**3 * jump_y)
    eta_y = float(np.sqrt(np.sum(eta_y_el**2)))
    eta_w_el = eta_y_el * data_norm
    eta_w = eta_y * data_norm
    eta_inf, eta_inf_el = _eta_w_inf(mesh, y - g, w, in_o)
    w_sup = _control_sup(mesh, w, in_c)
    num = w_sup - alpha + k.c_inf * eta_inf
    den = w_sup + k.c_inf * eta_inf
    eta_kappa = float(min(max(num / den, 0.0), 1.0)) if den > 0 else 0.0
    pairing = float(np.dot(u.coefficients, w[u.vertices]))
    first = max(alpha * u.norm() - pairing, 0.0)
    inner = k.c_dirac * eta_y + eta_kappa * data_norm
    residual = 2.0 * k.gamma * (first + k.c_3 * eta_w + eta_kappa * pairing) + k.sigma * inner**2
    functional = first + k.c_3 * eta_w + eta_kappa * pairing + 4.0 * inner * data_norm

    def normalized(v, total):
        return v / total if total > 0 else np.zeros_like(v)

    ind = np.sqrt(normalized(eta_y_el, eta_y) ** 2 + normalized(eta_w_el, eta_w) ** 2
                  + normalized(eta_inf_el, eta_inf) ** 2)
    gap = k.c_dirac * eta_y + math.sqrt(residual)
    return EstimatorReport(
        kind=Kind.MEASURE.value, indicators=ind, eta_w=float(eta_w), eta_y=eta_y,
        residual_bound=float(residual), functional_bound=float(functional),
        discrepancy_gap_bound=float(gap), constants=k, eta_w_inf=eta_inf,
        eta_kappa=eta_kappa, kappa_lower=1.0 - eta_kappa,
        families={"eta_y": eta_y_el, "eta_w": eta_w_el, "eta_w_inf": eta_inf_el},
        family_norms={"eta_y": "l2", "eta_w": "l2", "eta_w_inf": "max"},
        terms={"data_norm": data_norm, "w_sup": w_sup, "pairing": pairing,
               "first_term": first},
    )


def report(solution, constants=None):
    """Dispatch on ``solution.kind``."""
    fn = {Kind.HILBERT: hilbert_report, Kind.IVANOV: ivanov_report,
          Kind.MEASURE: sparse_report}[solution.kind]
    return fn(solution, constants)


def discrepancy_gap(rep, solution=None):
    """Bound on ``| |C y_h - g| - |C y - g| |`` from a report.

    ``c eta_y`` covers ``|y_h - y_hat|`` and ``sqrt(residual_bound)`` the
    distance from ``y_hat`` (or ``y_h``) to the exact state.
    """
    if solution is not None and rep.kind != solution.kind.value:
        raise InvalidArgument("report and solution belong to different regularizers")
    c = rep.constants.c_dirac if rep.kind == Kind.MEASURE.value else rep.constants.c_T
    return c * rep.eta_y + math.sqrt(max(rep.residual_bound, 0.0))


# -- weak duality ------------------------------------------------------------------


def duality_gap_bound(solution, v, g_star, *, feasibility_tol=1e-12):
    """Twice the functional estimate ``R(v) + R*(K* g*) + G(Kv) + G*(-g*)``.

    The factor two makes the value an upper bound of ``2 (J(v) - J_min)``
    and therefore of ``|K(u_min - v)|^2`` (plus ``alpha |u_min - v|^2`` for
    the quadratic penalty).  ``v`` is a control on the solution's mesh (same
    type as ``solution.u`` or a reduced vector), ``g_star`` nodal values of an
    observation-space element.
    """
    prob = _problem(solution)
    alpha = solution.alpha
    space = prob.space
    x = prob.from_control(v)
    gs = np.asarray(getattr(g_star, "coefficients", g_star), dtype=float)
    if gs.shape != (mesh_nv := solution.mesh.n_vertices,):
        raise InvalidArgument(f"g_star must have {mesh_nv} nodal values")
    y = prob.forward(x)
    G_val = prob.data_term(y)
    # G*(-g*) = 1/2 |g*|^2 - (g*, g)
    G_conj = 0.5 * space.obs_inner(gs, gs) - space.obs_inner(gs, prob.g)
    f = prob.load_T(space.solve_full(space.obs_mass @ gs))  # K* g* as a load
    kind = solution.kind
    if kind is Kind.HILBERT:
        from scipy.sparse.linalg import splu
        Mc = prob.control_mass
        R = 0.5 * alpha * float(x @ (Mc @ x))
        R_conj = 0.5 / alpha * float(f @ splu(Mc.tocsc()).solve(f))
    elif kind is Kind.IVANOV:
        if np.max(np.abs(x), initial=0.0) > (1.0 + 1e-12) / alpha:
            return math.inf
        R = 0.0
        R_conj = float(np.abs(f).sum()) / alpha
    else:
        R = alpha * float(np.abs(x).sum())
        fmax = float(np.max(np.abs(f), initial=0.0))
        if fmax > alpha * (1.0 + feasibility_tol):
            raise InfeasibleCertificate(
                f"|K* g*|_inf = {fmax:.6e} exceeds alpha = {alpha:.6e}; rescale g* by kappa")
        R_conj = 0.0
    return 2.0 * (R + R_conj + G_val + G_conj)


# -- calibration ----------------------------------------------------------------------


def _lift(fine_chain, values):
    out = np.asarray(values, dtype=float)
    for m in fine_chain:
        out = prolong(m, out)
    return out


def _floor(x):
    return max(float(x), 1e-12)


def calibrate(solution, fine_chain, base=None):
    """Fit one multiplicative constant per estimator family against a finer mesh.

    ``fine_chain`` lists the meshes obtained by successive refinement of
    ``solution.mesh`` (each the child of the previous); the last one is the
    proxy for the continuous problem.  On it we solve for ``y_hat = S u_h``
    and ``w_hat`` (adjoint with the discrete residual as data) and divide the
    actual errors by the estimator totals:

    * measure: ``c_dirac = |y_h - y_hat| / eta_y``,
      ``c_3 = |<u_h, w_h - w_hat>| / eta_w``,
      ``c_inf = |w_h - w_hat|_inf / eta_w_inf``;
    * l2 / ivanov: ``c_T`` is the larger of the ratios for ``w`` and ``y``,
      ``c_inf`` as above (ivanov only).

    Returns a new :class:`EstimatorConstants` with ``calibration`` metadata.
    """
    base = base or EstimatorConstants()
    unit = EstimatorConstants(sigma=base.sigma, gamma=base.gamma)
    rep = report(solution, unit)
    fine = fine_chain[-1]
    fspace = P1Space(fine)
    y_h = _lift(fine_chain, solution.y.coefficients)
    w_h = _lift(fine_chain, solution.w.coefficients)
    g = _lift(fine_chain, solution.g_delta.coefficients)
    kind = solution.kind
    if kind is Kind.MEASURE:
        u = solution.u
        load = np.zeros(fine.n_vertices)
        np.add.at(load, u.vertices, u.coefficients)
    else:
        u_f = _lift(fine_chain, solution.u.coefficients)
        load = fspace.ctrl_mass @ u_f
    y_hat = fspace.solve_full(load)
    w_hat = fspace.solve_full(-(fspace.obs_mass @ (y_h - g)))
    in_c = fine.mask.in_omega_c
    ctrl = np.unique(fine.triangles[in_c])
    err_y = fspace.obs_norm(y_h - y_hat)
    err_w_inf = float(np.max(np.abs(w_h - w_hat)[ctrl], initial=0.0))
    meta = {"kind": kind.value, "coarse_elements": solution.mesh.n_triangles,
            "fine_elements": fine.n_triangles, "err_y": err_y, "err_w_inf": err_w_inf}
    if kind is Kind.MEASURE:
        dw = (w_h - w_hat)[solution.u.vertices]
        err_pair = abs(float(np.dot(solution.u.coefficients, dw)))
        c_dirac = _floor(err_y / rep.eta_y) if rep.eta_y > 0 else base.c_dirac
        c3 = _floor(err_pair / rep.eta_w) if rep.eta_w > 0 else base.c_3
        c_inf = _floor(err_w_inf / rep.eta_w_inf) if rep.eta_w_inf > 0 else base.c_inf
        meta.update(err_pairing=err_pair, c_3=c3)
        return EstimatorConstants(c_I=c3 / c_dirac, c_S=1.0, c_dirac=c_dirac, c_inf=c_inf,
                                  sigma=base.sigma, gamma=base.gamma, calibration=meta)
    dw = w_h - w_hat
    cmask = fine.mask.in_omega_c
    if kind is Kind.HILBERT:
        err_w = float(np.sqrt(np.where(cmask, _element_l2sq(fine, dw), 0.0).sum()))
    else:
        err_w = float(np.where(cmask, _element_l1(fine, dw), 0.0).sum())
    ratios = [err_w / rep.eta_w if rep.eta_w > 0 else 0.0,
              err_y / rep.eta_y if rep.eta_y > 0 else 0.0]
    cT = _floor(max(ratios)) if max(ratios) > 0 else base.c_T
    c_inf = base.c_inf
    if kind is Kind.IVANOV and rep.eta_w_inf:
        c_inf = _floor(err_w_inf / rep.eta_w_inf)
    meta.update(err_w=err_w, ratio_w=ratios[0], ratio_y=ratios[1])
    return EstimatorConstants(c_I=cT, c_S=1.0, c_dirac=base.c_dirac, c_inf=c_inf,
                              sigma=base.sigma, gamma=base.gamma, calibration=meta)
