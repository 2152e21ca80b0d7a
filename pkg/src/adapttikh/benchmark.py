"""Ring-source benchmark with a known sparse minimizer, plus rate studies.

On the unit disk the ring measure of total mass 1 on ``|x| = rho`` generates
the state ``-(1/2pi) ln max(rho, |x|)``; adding ``alpha * phi(|x|)``
to that state gives data for which the ring measure is the exact minimizer of
the measure-norm Tikhonov functional.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidArgument
from .fem import FeFunction, P1Space
from .mesh import make_disk_mesh, prolong, refine, uniform_refine

__all__ = [
    "RingBenchmark",
    "exact_state",
    "exact_source_mass",
    "source_density",
    "phi",
    "exact_data",
    "add_noise",
    "fit_slope",
    "data_function",
    "state_function",
    "benchmark_mesh",
    "StudyTable",
    "rate_study",
    "delta_study",
    "RATE_COLUMNS",
    "DELTA_COLUMNS",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RingBenchmark:
    rho: float = 0.5
    alpha: float = 1e-2
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise InvalidArgument(f"rho must lie in (0, 1), got {self.rho}")
        if self.alpha <= 0:
            raise InvalidArgument("alpha must be positive")
        if self.delta < 0:
            raise InvalidArgument("delta must be nonnegative")

    def to_dict(self):
        return asdict(self)


def _radius(point):
    p = np.asarray(point, dtype=float)
    return np.hypot(p[..., 0], p[..., 1])


def exact_state(rho, point):
    """``-(1/2pi) ln max(rho, |x|)``; vectorized over the last axis of ``point``."""
    return -np.log(np.maximum(rho, _radius(point))) / (2.0 * np.pi)


def source_density(rho):
    """Line density of the exact source on the circle ``|x| = rho``.

    The radial derivative of the exact state jumps by ``-1/(2 pi rho)`` across
    the ring, so ``-Laplace y`` is the ring measure with the positive density
    ``1/(2 pi rho)``.
    """
    return 1.0 / (2.0 * np.pi * rho)


def exact_source_mass(rho):
    """Total variation of the ring source: density times circumference = 1."""
    if not 0.0 < rho < 1.0:
        raise InvalidArgument("rho must lie in (0, 1)")
    # |density| * 2 pi rho cancels exactly
    return 1.0


def phi(rho, r):
    """Radial correction that makes the ring measure optimal."""
    r = np.asarray(r, dtype=float)
    inner = 6.0 * (3.0 * r - 2.0 * rho) / rho**3
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = 6.0 * (3.0 * r**2 - 2.0 * r * rho - 2.0 * r + rho) / ((rho - 1.0) ** 3 * r)
    return np.where(r < rho, inner, outer)


def exact_data(rho, alpha, point):
    """Noise-free data ``y(x) + alpha phi(|x|)``."""
    return exact_state(rho, point) + alpha * phi(rho, _radius(point))


def data_function(mesh, rho, alpha):
    """Nodal interpolant of :func:`exact_data` on ``mesh``."""
    return FeFunction(mesh, exact_data(rho, alpha, mesh.vertices))


def state_function(mesh, rho):
    return FeFunction(mesh, exact_state(rho, mesh.vertices))


def add_noise(g, delta, seed=0, space=None):
    """Add nodal Gaussian noise rescaled to observation-norm exactly ``delta``."""
    if delta < 0:
        raise InvalidArgument("delta must be nonnegative")
    mesh = g.mesh
    space = space or P1Space(mesh)
    if delta == 0:
        return FeFunction(mesh, g.coefficients.copy())
    observed = np.zeros(mesh.n_vertices, dtype=bool)
    observed[mesh.triangles[mesh.mask.in_omega_o].ravel()] = True
    if not observed.any():
        raise InvalidArgument("observation region is empty")
    n = np.zeros(mesh.n_vertices)
    n[observed] = np.random.default_rng(seed).standard_normal(observed.sum())
    norm = space.obs_norm(n)
    if norm == 0.0:
        raise InvalidArgument("observation space has zero dimension")
    return FeFunction(mesh, g.coefficients + (delta / norm) * n)


def fit_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x`` (nan if < 2 points)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


# -- studies ---------------------------------------------------------------------------

RATE_COLUMNS = (
    "level", "n_elements", "ndof", "h_max", "h_min", "true_residual", "true_residual_sq",
    "functional_error", "residual_bound", "sqrt_residual_bound", "functional_bound",
    "discrepancy_gap", "eta_y", "eta_w", "eta_w_inf", "eta_kappa", "effectivity",
    "atoms", "seconds",
)

DELTA_COLUMNS = (
    "delta", "status", "alpha", "discrepancy", "J_value", "ndof", "n_elements", "outer_steps",
    "inner_steps", "seconds",
)


@dataclass
class StudyTable:
    """Rows of a study plus fitted log-log slopes and run metadata."""

    columns: tuple
    rows: list
    slopes: dict
    meta: dict
    flag: str = ""

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, fh=None):
        buf = fh if fh is not None else io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r[c] for c in self.columns])
        return buf.getvalue() if fh is None else None

    def to_dict(self):
        return {"columns": list(self.columns), "rows": self.rows, "slopes": self.slopes,
                "meta": self.meta, "flag": self.flag}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def benchmark_mesh(n_boundary=48, levels=1):
    """Fan mesh of the inscribed ``n_boundary``-gon; the default has 192 elements."""
    return make_disk_mesh(n_boundary, 1.0, levels)


def _lift_through(chain, values):
    out = np.asarray(values, dtype=float)
    for m in chain:
        out = prolong(m, out)
    return out


def rate_study(refinement="uniform", levels=4, benchmark=None, *, mesh0=None, constants=None,
               calibrate_constants=True, tol=1e-9, theta_mark=0.5, reference_levels=2,
               max_elements=2_000_000):
    """Errors and estimators of the measure-norm problem on a mesh sequence.

    Each level solves the benchmark with its closed-form data.  The "true"
    errors are measured against a reference solution on ``reference_levels``
    uniform refinements of the finest mesh (solver tolerance ``tol / 10``).
    With ``calibrate_constants`` the estimator constants are fitted on the
    coarsest level (see :func:`adapttikh.estimators.calibrate`).

    For ``refinement="adaptive"`` each level is obtained by Dorfler marking of
    the previous report's indicators; slopes are then fitted against
    ``ndof^{-1/2}`` instead of ``h_max``.
    """
    from .estimators import calibrate, sparse_report
    from .tikhonov import solve_sparse

    if refinement not in ("uniform", "adaptive"):
        raise InvalidArgument(f"refinement must be 'uniform' or 'adaptive', got {refinement!r}")
    if int(levels) < 3:
        raise InvalidArgument("a rate study needs at least 3 levels")
    bench = benchmark or RingBenchmark()
    mesh = mesh0 if mesh0 is not None else benchmark_mesh()
    rho, alpha = bench.rho, bench.alpha
    meshes, sols, times = [], [], []
    flag = ""
    k = constants
    for level in range(int(levels)):
        if mesh.n_triangles > max_elements:
            flag = f"stopped at level {level}: mesh exceeds {max_elements} elements"
            break
        t0 = time.perf_counter()
        try:
            sol = solve_sparse(mesh, data_function(mesh, rho, alpha), alpha, tol=tol)
        except MemoryError:
            flag = f"stopped at level {level}: out of memory"
            break
        meshes.append(mesh)
        sols.append(sol)
        if level == 0 and k is None and calibrate_constants:
            chain = [uniform_refine(mesh)]
            chain.append(uniform_refine(chain[-1]))
            k = calibrate(sol, chain)
        times.append(time.perf_counter() - t0)
        log.info("level %d: %d elements, %.2fs", level, mesh.n_triangles, times[-1])
        if level + 1 < levels:
            if refinement == "uniform":
                mesh = uniform_refine(mesh)
            else:
                from .adaptive import dorfler_mark
                rep = sparse_report(sol, k)
                mesh = refine(mesh, dorfler_mark(rep.indicators, theta_mark))
    chain = []
    ref_mesh = meshes[-1]
    for _ in range(reference_levels):
        ref_mesh = uniform_refine(ref_mesh)
        chain.append(ref_mesh)
    t0 = time.perf_counter()
    ref = solve_sparse(ref_mesh, data_function(ref_mesh, rho, alpha), alpha, tol=tol / 10)
    ref_seconds = time.perf_counter() - t0
    space = P1Space(ref_mesh)
    rows = []
    for i, (m, sol) in enumerate(zip(meshes, sols)):
        y = _lift_through(meshes[i + 1:] + chain, sol.y.coefficients)
        err = space.obs_norm(y - ref.y.coefficients)
        rep = sparse_report(sol, k)
        rows.append({
            "level": i, "n_elements": m.n_triangles, "ndof": len(m.free_vertices),
            "h_max": float(m.h.max()), "h_min": float(m.h.min()),
            "true_residual": err, "true_residual_sq": err**2,
            "functional_error": sol.J_value - ref.J_value,
            "residual_bound": rep.residual_bound,
            "sqrt_residual_bound": math.sqrt(rep.residual_bound),
            "functional_bound": rep.functional_bound,
            "discrepancy_gap": rep.discrepancy_gap_bound,
            "eta_y": rep.eta_y, "eta_w": rep.eta_w, "eta_w_inf": rep.eta_w_inf,
            "eta_kappa": rep.eta_kappa,
            "effectivity": rep.residual_bound / err**2 if err > 0 else math.inf,
            "atoms": int(np.count_nonzero(sol.u.coefficients)), "seconds": times[i],
        })
    x = [r["h_max"] for r in rows] if refinement == "uniform" else \
        [r["ndof"] ** -0.5 for r in rows]
    series = ("true_residual", "true_residual_sq", "sqrt_residual_bound", "residual_bound",
              "functional_bound", "eta_y", "eta_w", "eta_w_inf")
    slopes = {name: fit_slope(x, [r[name] for r in rows]) for name in series}
    slopes["functional_error"] = fit_slope(x, [abs(r["functional_error"]) for r in rows])
    meta = {"refinement": refinement, "benchmark": bench.to_dict(),
            "reference_elements": ref_mesh.n_triangles, "reference_J": ref.J_value,
            "reference_seconds": ref_seconds, "slope_against": "h_max" if refinement == "uniform"
            else "ndof^-1/2", "constants": None if k is None else k.to_dict()}
    return StudyTable(RATE_COLUMNS, rows, slopes, meta, flag)


def y_dagger_data(mesh, rho=0.5):
    """Exact data ``g = y_dagger`` (nodal interpolant) for the noise study."""
    return state_function(mesh, rho)


def delta_study(deltas=(4e-2, 2e-2, 1e-2, 5e-3), config=None, *, rho=0.5, seed=0, mesh0=None,
                constants=None, calibrate_constants=True, solver_options=None):
    """Adaptive discrepancy-principle runs for a sequence of noise levels.

    For each ``delta`` the data is the nodal interpolant of ``y_dagger`` on
    ``mesh0`` plus Gaussian noise of observation norm ``delta``; the noise is
    carried to refined meshes by prolongation so its norm stays ``delta``.
    ``config`` is an :class:`~adapttikh.adaptive.AdaptiveConfig` whose
    ``delta`` is replaced per row.  Failed runs are flagged and the study
    continues.
    """
    from dataclasses import replace

    from .adaptive import AdaptiveConfig, run_adaptive
    from .estimators import calibrate
    from .tikhonov import solve_sparse

    deltas = [float(d) for d in deltas]
    if not deltas or any(d <= 0 for d in deltas):
        raise InvalidArgument("noise levels must be positive")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise InvalidArgument("noise levels must be strictly decreasing")
    config = config or AdaptiveConfig()
    mesh0 = mesh0 if mesh0 is not None else benchmark_mesh()
    g = y_dagger_data(mesh0, rho)
    k = constants
    if k is None and calibrate_constants:
        sol = solve_sparse(mesh0, data_function(mesh0, rho, config.alpha0), config.alpha0)
        chain = [uniform_refine(mesh0)]
        chain.append(uniform_refine(chain[-1]))
        k = calibrate(sol, chain)
    space = P1Space(mesh0)
    rows, traces = [], []
    for i, delta in enumerate(deltas):
        noisy = add_noise(g, delta, seed=seed + i, space=space)
        noise = FeFunction(mesh0, noisy.coefficients - g.coefficients)
        cfg = replace(config, delta=delta)
        t0 = time.perf_counter()
        trace = run_adaptive(cfg, mesh0, "measure", g, k, noise=noise,
                             solver_options=solver_options)
        final = trace.final
        rows.append({
            "delta": delta, "status": trace.status,
            "alpha": final.alpha if final else math.nan,
            "discrepancy": final.discrepancy if final else math.nan,
            "J_value": final.J_value if final else math.nan,
            "ndof": final.ndof if final else 0,
            "n_elements": final.n_elements if final else 0,
            "outer_steps": len(trace.alphas), "inner_steps": len(trace.records),
            "seconds": time.perf_counter() - t0,
        })
        traces.append(trace)
        log.info("delta=%.3e status=%s alpha=%.3e disc=%.4e", delta, trace.status,
                 rows[-1]["alpha"], rows[-1]["discrepancy"])
    ok = [r for r in rows if r["status"] == "accepted"]
    slopes = {}
    if len(ok) >= 2:
        slopes["discrepancy"] = fit_slope([r["delta"] for r in ok], [r["discrepancy"] for r in ok])
        slopes["alpha"] = fit_slope([r["delta"] for r in ok], [r["alpha"] for r in ok])
        slopes["J_value"] = fit_slope([r["delta"] for r in ok], [r["J_value"] for r in ok])
    else:
        log.warning("fewer than two accepted runs: no slope fitted")
    flag = "" if len(ok) == len(rows) else f"{len(rows) - len(ok)} run(s) not accepted"
    meta = {"config": config.to_dict(), "rho": rho, "seed": seed,
            "constants": None if k is None else k.to_dict(), "traces": traces}
    return StudyTable(DELTA_COLUMNS, rows, slopes, meta, flag)
