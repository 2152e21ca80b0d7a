"""Command-line front end: ``adapttikh {solve,rate-study,delta-study,check-lemma}``.

Exit codes: 0 on success, 1 on bad input, 2 on numerical failure.  Heavy
modules are imported inside the commands so that ``--threads`` (or
``ADAPTTIKH_THREADS``) can set the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

__all__ = ["RunConfig", "ConfigError", "main", "build_parser"]

log = logging.getLogger("adapttikh")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class ConfigError(ValueError):
    """Malformed run configuration; the message names the offending key."""


@dataclass
class MeshSection:
    n_boundary: int = 48
    levels: int = 1


@dataclass
class BenchmarkSection:
    rho: float = 0.5
    alpha: float = 1e-2
    delta: float = 0.0
    seed: int = 0


@dataclass
class AdaptiveSection:
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


@dataclass
class ConstantsSection:
    c_I: float = 1.0
    c_S: float = 1.0
    c_dirac: float = 1.0
    c_inf: float = 1.0
    sigma: float = 4.0
    gamma: float = 2.0
    calibrate: bool = True


@dataclass
class SolverSection:
    tol: float = 1e-9


@dataclass
class OutputSection:
    out: str | None = None


_SECTIONS = {
    "mesh": MeshSection,
    "benchmark": BenchmarkSection,
    "adaptive": AdaptiveSection,
    "constants": ConstantsSection,
    "solver": SolverSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    """All run parameters, grouped as in the JSON file.

    Every section is optional in the file; missing keys take their defaults
    and unknown keys are rejected.
    """

    mesh: MeshSection = field(default_factory=MeshSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    adaptive: AdaptiveSection = field(default_factory=AdaptiveSection)
    constants: ConstantsSection = field(default_factory=ConstantsSection)
    solver: SolverSection = field(default_factory=SolverSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown configuration key: {unknown[0]!r}")
        parts = {}
        for name, section in _SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name: f for f in fields(section)}
            bad = sorted(set(raw) - set(known))
            if bad:
                raise ConfigError(f"unknown configuration key: '{name}.{bad[0]}'")
            values = {}
            for key, value in raw.items():
                values[key] = _coerce(f"{name}.{key}", known[key], value)
            parts[name] = section(**values)
        return cls(**parts)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def validate(self):
        """Check every component invariant, naming the offending key on failure."""
        from .adaptive import AdaptiveConfig
        from .benchmark import RingBenchmark
        from .errors import InvalidArgument

        checks = (
            ("adaptive", lambda: AdaptiveConfig(**asdict(self.adaptive))),
            ("benchmark", lambda: RingBenchmark(**asdict(self.benchmark))),
            ("constants", lambda: self.estimator_constants()),
        )
        for name, build in checks:
            try:
                build()
            except InvalidArgument as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        if self.mesh.n_boundary < 3:
            raise ConfigError("mesh.n_boundary: must be at least 3")
        if self.mesh.levels < 0:
            raise ConfigError("mesh.levels: must be nonnegative")
        if not self.solver.tol > 0:
            raise ConfigError("solver.tol: must be positive")

    def adaptive_config(self):
        from .adaptive import AdaptiveConfig
        return AdaptiveConfig(**asdict(self.adaptive))

    def ring(self):
        from .benchmark import RingBenchmark
        return RingBenchmark(**asdict(self.benchmark))

    def estimator_constants(self):
        from .estimators import EstimatorConstants
        c = asdict(self.constants)
        c.pop("calibrate")
        return EstimatorConstants(**c)


def _coerce(key, f, value):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if kind.startswith("str"):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string or null")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if kind == "int":
        if float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


# -- helpers ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _apply_threads(args):
    threads = os.environ.get("ADAPTTIKH_THREADS") or (
        str(args.threads) if args.threads else None)
    if threads is None:
        return
    if not threads.isdigit() or int(threads) < 1:
        raise ConfigError(f"thread count must be a positive integer, got {threads!r}")
    for var in _THREAD_VARS:
        os.environ[var] = threads


def _write(text, out):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg


def _constants(cfg, calibrate_with=None):
    k = cfg.estimator_constants()
    if cfg.constants.calibrate and calibrate_with is not None:
        from .estimators import calibrate
        from .mesh import uniform_refine
        sol = calibrate_with
        chain = [uniform_refine(sol.mesh)]
        chain.append(uniform_refine(chain[-1]))
        k = calibrate(sol, chain, base=k)
    return k


# -- commands ---------------------------------------------------------------------


def cmd_solve(args):
    import numpy as np

    from .benchmark import data_function
    from .estimators import report
    from .mesh import make_disk_mesh
    from .tikhonov import Kind, solve

    cfg = _load_config(args)
    alpha = args.alpha if args.alpha is not None else cfg.benchmark.alpha
    if not alpha > 0:
        raise ConfigError(f"--alpha must be positive, got {alpha}")
    levels = args.mesh_levels if args.mesh_levels is not None else cfg.mesh.levels
    if levels < 0:
        raise ConfigError("--mesh-levels must be nonnegative")
    kind = Kind(args.regularizer)
    mesh = make_disk_mesh(cfg.mesh.n_boundary, 1.0, levels)
    ring = cfg.ring()
    g = data_function(mesh, ring.rho, ring.alpha)
    if ring.delta > 0:
        from .benchmark import add_noise
        g = add_noise(g, ring.delta, ring.seed)
    opts = {"tol": cfg.solver.tol} if kind is not Kind.HILBERT else {}
    sol = solve(kind, mesh, g, alpha, **opts)
    k = _constants(cfg, sol if args.calibrate else None)
    rep = report(sol, k)
    summary = {
        "regularizer": kind.value, "alpha": alpha, "n_elements": mesh.n_triangles,
        "ndof": int(len(mesh.free_vertices)), "J_value": sol.J_value,
        "discrepancy": sol.discrepancy, "optimality_residual": sol.optimality_residual,
        "iterations": sol.iterations,
    }
    if kind is Kind.MEASURE:
        summary["atoms"] = int(np.count_nonzero(sol.u.coefficients))
        summary["measure_norm"] = sol.u.norm()
    else:
        summary["control_max"] = float(np.max(np.abs(sol.u.coefficients), initial=0.0))
    out = {"solution": summary, "report": rep.to_dict(arrays=args.full),
           "config": cfg.to_dict()}
    _write(json.dumps(out, indent=2), args.out or cfg.output.out)
    return EXIT_OK


def _print_slopes(slopes):
    for name, value in slopes.items():
        print(f"slope {name}: {value:.4f}")


def cmd_rate_study(args):
    from .benchmark import rate_study
    from .mesh import make_disk_mesh

    cfg = _load_config(args)
    mesh0 = make_disk_mesh(cfg.mesh.n_boundary, 1.0, cfg.mesh.levels)
    k = None if cfg.constants.calibrate else cfg.estimator_constants()
    table = rate_study(args.refinement, args.levels, cfg.ring(), mesh0=mesh0, constants=k,
                       calibrate_constants=cfg.constants.calibrate, tol=cfg.solver.tol)
    _write(table.to_csv(), args.out or cfg.output.out)
    _print_slopes(table.slopes)
    if table.flag:
        print(f"warning: {table.flag}", file=sys.stderr)
    return EXIT_OK


def cmd_delta_study(args):
    from .benchmark import delta_study
    from .mesh import make_disk_mesh

    cfg = _load_config(args)
    mesh0 = make_disk_mesh(cfg.mesh.n_boundary, 1.0, cfg.mesh.levels)
    k = None if cfg.constants.calibrate else cfg.estimator_constants()
    table = delta_study(args.deltas, cfg.adaptive_config(), rho=cfg.benchmark.rho,
                        seed=cfg.benchmark.seed, mesh0=mesh0, constants=k,
                        calibrate_constants=cfg.constants.calibrate,
                        solver_options={"tol": cfg.solver.tol})
    _write(table.to_csv(), args.out or cfg.output.out)
    if len(args.deltas) < 2:
        print("warning: a slope needs at least two noise levels", file=sys.stderr)
    _print_slopes(table.slopes)
    if table.flag:
        print(f"warning: {table.flag}", file=sys.stderr)
    return EXIT_OK


def cmd_check_lemma(args):
    from .estimators import find_counterexample, implication_test, sigma_gamma_check

    ok = sigma_gamma_check(args.sigma, args.gamma)
    count, example = implication_test(args.sigma, args.gamma, args.samples, args.seed)
    if example is None and not ok:
        example = find_counterexample(args.sigma, args.gamma)
    print(f"sigma={args.sigma} gamma={args.gamma} condition={'holds' if ok else 'fails'} "
          f"violations={count}/{args.samples}")
    if example is not None:
        a, b, c, d = example
        print(f"counterexample: a={a!r} b={b!r} c={c!r} d={d!r}")
    consistent = (ok and count == 0) or (not ok and example is not None)
    print("consistent" if consistent else "INCONSISTENT")
    return EXIT_OK if consistent else EXIT_NUMERICAL


def build_parser():
    p = _Parser(prog="adapttikh", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (ADAPTTIKH_THREADS overrides)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", help="output file (default: standard output)")

    s = sub.add_parser("solve", help="solve one Tikhonov problem and estimate its error")
    s.add_argument("--regularizer", choices=("l2", "ivanov", "measure"), default="measure")
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--mesh-levels", type=int, default=None)
    s.add_argument("--calibrate", action="store_true",
                   help="fit estimator constants against two extra uniform levels")
    s.add_argument("--full", action="store_true", help="include per-element arrays")
    common(s)
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("rate-study", help="errors and estimators under refinement (CSV)")
    r.add_argument("--refinement", choices=("uniform", "adaptive"), default="uniform")
    r.add_argument("--levels", type=int, default=4)
    common(r)
    r.set_defaults(func=cmd_rate_study)

    d = sub.add_parser("delta-study", help="adaptive runs for several noise levels (CSV)")
    d.add_argument("--deltas", type=float, nargs="+", default=[4e-2, 2e-2, 1e-2, 5e-3])
    common(d)
    d.set_defaults(func=cmd_delta_study)

    c = sub.add_parser("check-lemma", help="test the (sigma, gamma) implication")
    c.add_argument("--sigma", type=float, default=4.0)
    c.add_argument("--gamma", type=float, default=2.0)
    c.add_argument("--samples", type=int, default=100_000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check_lemma)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads(args)
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - map library errors onto exit codes
        from .errors import InfeasibleCertificate, InvalidArgument, NumericalFailure
        if isinstance(exc, (InvalidArgument, InfeasibleCertificate)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if isinstance(exc, NumericalFailure):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        raise


if __name__ == "__main__":
    sys.exit(main())
