"""Discrepancy-principle loop over alpha with estimator-driven mesh refinement.

The outer loop runs through ``alpha_k = alpha0 * theta**k``.  For each
``alpha_k`` the inner loop solves, estimates and refines (Dorfler marking)
until the computable surrogates of the accuracy conditions hold:

* ``discrepancy_gap <= c1 * delta``,
* ``functional_bound <= c2 * delta**2``.

The outer loop stops as soon as ``tau_lower delta <= |y_h - g| <= tau_upper
delta``; a discrepancy below ``tau_lower delta`` ends the run with the
``overshoot`` status since the relaxed principle has no rule for increasing
alpha again.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalFailure
from .estimators import EstimatorConstants, discrepancy_gap, report
from .fem import FeFunction
from .mesh import prolong, refine
from .tikhonov import DiscreteMeasure, Kind, solve

__all__ = [
    "AdaptiveConfig",
    "AdaptiveRecord",
    "AdaptiveTrace",
    "dorfler_mark",
    "run_adaptive",
    "TRACE_COLUMNS",
]

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "k", "alpha", "inner", "ndof", "h_min", "h_max", "discrepancy", "residual_bound",
    "functional_bound", "discrepancy_gap", "eta_w", "eta_y", "eta_kappa", "accepted",
)


@dataclass(frozen=True)
class AdaptiveConfig:
    """Constants of the relaxed discrepancy principle and the refinement loop.

    ``max_elements`` caps the mesh size; exceeding it ends the run like
    ``max_inner`` does.
    """

    delta: float = 1e-2
    tau_lower: float = 1.5
    tau_upper: float = 2.0
    c1: float = 0.4
    c2: float = 0.5
    alpha0: float = 1e-2
    theta: float = 0.6
    theta_mark: float = 0.5
    max_outer: int = 30
    max_inner: int = 12
    max_elements: int = 400_000

    def __post_init__(self):
        for name in ("delta", "tau_lower", "tau_upper", "c1", "c2", "alpha0"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidArgument(f"{name} must be a positive finite number, got {v!r}")
        floor = max(math.sqrt(1.0 + 2.0 * self.c2), 1.0 + self.c1)
        if not self.tau_upper > self.tau_lower >= floor:
            raise InvalidArgument(
                f"need tau_upper > tau_lower >= max(sqrt(1 + 2 c2), 1 + c1) = {floor:.6g}, "
                f"got tau_lower={self.tau_lower}, tau_upper={self.tau_upper}")
        if not 0.0 < self.theta < 1.0:
            raise InvalidArgument(f"theta must lie in (0, 1), got {self.theta}")
        if not 0.0 < self.theta_mark <= 1.0:
            raise InvalidArgument(f"theta_mark must lie in (0, 1], got {self.theta_mark}")
        for name in ("max_outer", "max_inner", "max_elements"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgument(f"{name} must be at least 1")

    def alpha(self, k):
        return self.alpha0 * self.theta**k

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AdaptiveRecord:
    """One inner step: solve, estimate and (possibly) accept."""

    k: int
    alpha: float
    inner: int
    ndof: int
    h_min: float
    h_max: float
    discrepancy: float
    residual_bound: float
    functional_bound: float
    discrepancy_gap: float
    eta_w: float
    eta_y: float
    eta_kappa: float
    accepted: bool
    J_value: float = math.nan
    n_elements: int = 0

    def row(self):
        d = asdict(self)
        return [d[c] for c in TRACE_COLUMNS]


@dataclass
class AdaptiveTrace:
    config: AdaptiveConfig
    kind: str
    records: list = field(default_factory=list)
    status: str = "running"
    solution: object = field(default=None, repr=False)
    message: str = ""

    @property
    def final(self):
        return self.records[-1] if self.records else None

    @property
    def alphas(self):
        out = []
        for r in self.records:
            if not out or out[-1] != r.alpha:
                out.append(r.alpha)
        return out

    @property
    def succeeded(self):
        return self.status == "accepted"

    def to_csv(self, fh=None):
        buf = fh if fh is not None else io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue() if fh is None else None

    def to_dict(self):
        outer = []
        for r in self.records:
            if not outer or outer[-1]["k"] != r.k:
                outer.append({"k": r.k, "alpha": r.alpha, "inner": []})
            outer[-1]["inner"].append(asdict(r))
        return {"kind": self.kind, "status": self.status, "message": self.message,
                "config": self.config.to_dict(), "outer": outer}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def dorfler_mark(indicators, theta_mark):
    """Smallest greedy set with ``sum_M ind^2 >= theta_mark^2 sum ind^2``.

    Elements are taken in order of decreasing indicator, ties by lower id.
    """
    ind = np.asarray(indicators, dtype=float)
    if ind.ndim != 1:
        raise InvalidArgument("indicators must be a vector")
    if np.any(ind < 0) or not np.all(np.isfinite(ind)):
        raise InvalidArgument("indicators must be finite and nonnegative")
    if not 0.0 < theta_mark <= 1.0:
        raise InvalidArgument(f"theta_mark must lie in (0, 1], got {theta_mark}")
    sq = ind**2
    total = sq.sum()
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(ind)), -ind))
    csum = np.cumsum(sq[order])
    target = theta_mark**2 * total
    # tolerate rounding in the running sum so theta_mark = 1 marks exactly the nonzeros
    n = int(np.searchsorted(csum, target * (1.0 - 1e-14), side="left")) + 1
    n = min(n, int(np.count_nonzero(ind)))
    return np.sort(order[:n])


def _data_on(mesh, data, chain_values):
    if callable(data):
        return FeFunction(mesh, np.asarray(data(mesh.vertices), dtype=float))
    return FeFunction(mesh, chain_values)


def _warm_start(sol, fine):
    """Transfer the control of ``sol`` to the refined mesh ``fine``."""
    u = sol.u
    if isinstance(u, DiscreteMeasure):
        return u  # vertex ids survive refinement
    return FeFunction(fine, prolong(fine, u.coefficients))


def run_adaptive(config, mesh0, kind, data, constants=None, *, noise=None,
                 solver_options=None):
    """Run the adaptive discrepancy-principle loop.

    Parameters
    ----------
    config : AdaptiveConfig
    mesh0 : Mesh
        Initial mesh; refined meshes are nested in it.
    kind : Kind or str
    data : FeFunction on ``mesh0`` or callable
        Data ``g``; an FeFunction is transferred by prolongation, a callable
        is interpolated on every mesh.
    constants : EstimatorConstants, optional
    noise : FeFunction on ``mesh0``, optional
        Perturbation added to the data on every mesh (prolonged, so its
        observation norm does not change under refinement).
    solver_options : dict, optional
        Keyword arguments for the Tikhonov solver.

    Returns
    -------
    AdaptiveTrace
        ``status`` is ``accepted``, ``overshoot``, ``max_outer``,
        ``max_inner``, ``max_elements`` or ``solver_failure``.
    """
    kind = Kind(kind)
    constants = constants or EstimatorConstants()
    opts = dict(solver_options or {})
    delta = config.delta
    trace = AdaptiveTrace(config, kind.value)
    mesh = mesh0
    data_vals = None if callable(data) else np.asarray(data.coefficients, dtype=float)
    noise_vals = None if noise is None else np.asarray(noise.coefficients, dtype=float)
    warm = None
    for k in range(config.max_outer):
        alpha = config.alpha(k)
        accepted = False
        for m in range(config.max_inner):
            g = _data_on(mesh, data, data_vals)
            if noise_vals is not None:
                g = FeFunction(mesh, g.coefficients + noise_vals)
            try:
                sol = solve(kind, mesh, g, alpha, x0=warm, **opts)
            except NumericalFailure as exc:
                trace.status, trace.message = "solver_failure", str(exc)
                return trace
            rep = report(sol, constants)
            gap = discrepancy_gap(rep, sol)
            accepted = gap <= config.c1 * delta and rep.functional_bound <= config.c2 * delta**2
            trace.records.append(AdaptiveRecord(
                k=k, alpha=alpha, inner=m, ndof=len(mesh.free_vertices),
                h_min=float(mesh.h.min()), h_max=float(mesh.h.max()),
                discrepancy=sol.discrepancy, residual_bound=rep.residual_bound,
                functional_bound=rep.functional_bound, discrepancy_gap=gap,
                eta_w=rep.eta_w, eta_y=rep.eta_y,
                eta_kappa=math.nan if rep.eta_kappa is None else rep.eta_kappa,
                accepted=bool(accepted), J_value=sol.J_value, n_elements=mesh.n_triangles))
            log.info("k=%d alpha=%.3e inner=%d nt=%d disc=%.4e gap=%.3e fb=%.3e",
                     k, alpha, m, mesh.n_triangles, sol.discrepancy, gap,
                     rep.functional_bound)
            trace.solution = sol
            if accepted:
                break
            marked = dorfler_mark(rep.indicators, config.theta_mark)
            if marked.size == 0:
                marked = np.arange(mesh.n_triangles)
            fine = refine(mesh, marked)
            if fine.n_triangles > config.max_elements:
                trace.status = "max_elements"
                trace.message = f"refinement would exceed {config.max_elements} elements"
                return trace
            if data_vals is not None:
                data_vals = prolong(fine, data_vals)
            if noise_vals is not None:
                noise_vals = prolong(fine, noise_vals)
            warm = _warm_start(sol, fine)
            mesh = fine
        if not accepted:
            trace.status = "max_inner"
            trace.message = f"accuracy conditions not met within {config.max_inner} steps"
            return trace
        warm = sol.u
        disc = sol.discrepancy
        if disc > config.tau_upper * delta:
            continue
        if disc < config.tau_lower * delta:
            trace.status = "overshoot"
            trace.message = f"discrepancy {disc:.4e} below tau_lower * delta"
            return trace
        trace.status = "accepted"
        return trace
    trace.status = "max_outer"
    trace.message = f"discrepancy still above tau_upper * delta after {config.max_outer} steps"
    return trace
