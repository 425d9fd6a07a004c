"""Experiment driver and command line front end.

A run builds the strip grid and its tree, assembles the chosen PDE, sets up
the RSD preconditioner, manufactures a random exact solution and solves with
flexible GMRES to a relative residual of ``tol``. Results are reported as a
:class:`SolveReport` and serialized to CSV or JSON.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg

from .fem_assembly import PdeKind, assemble, manufactured_problem
from .grid_tree import ConfigurationError, build_grid, build_tree, compute_index_sets, is_power_of_two
from .linalg_core import gmres_flexible
from .rsd_solver import RsdCounters, RsdPreconditioner, rsd_setup

__all__ = [
    "ProblemConfig",
    "SolveReport",
    "StageError",
    "VerifyVerdict",
    "CSV_FIELDS",
    "VERIFY_MAX_DOFS",
    "VERIFY_TOL",
    "run_experiment",
    "count_applications",
    "verify_small",
    "sweep",
    "SweepResult",
    "load_sweep_file",
    "main",
]

logger = logging.getLogger(__name__)

CSV_FIELDS = ["pde", "N", "P", "gamma", "beta", "setup_s", "solve_s",
              "final_rel_res", "solution_err", "leaf_solves", "status"]
VERIFY_MAX_DOFS = 20_000
VERIFY_TOL = 1e-9
MODES = ("solve", "verify", "count")


class StageError(RuntimeError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ProblemConfig:
    pde: PdeKind = PdeKind.POISSON
    N: int = 17
    P: int = 8
    gamma: int = 2
    tol: float = 1e-12
    max_outer: int = 2000
    seed: int = 0
    literal_eq4_sign: bool = False
    mode: str = "solve"
    restart: Optional[int] = None
    hx: Optional[float] = None
    hy: Optional[float] = None
    zero_solution: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pde", PdeKind.parse(self.pde))
        self.validate()

    def validate(self) -> None:
        for name in ("N", "P", "gamma", "max_outer", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigurationError(f"{name} must be an integer, got {value!r}")
        if self.P < 2 or not is_power_of_two(self.P):
            raise ConfigurationError(f"P must be a power of two >= 2, got {self.P}")
        if self.N < 3:
            raise ConfigurationError(f"N must be >= 3, got {self.N}")
        if self.gamma < 1:
            raise ConfigurationError(f"gamma must be >= 1, got {self.gamma}")
        if not (self.tol > 0):
            raise ConfigurationError(f"tol must be positive, got {self.tol}")
        if self.max_outer < 1:
            raise ConfigurationError(f"max_outer must be >= 1, got {self.max_outer}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.restart is not None and self.restart < 1:
            raise ConfigurationError(f"restart must be >= 1, got {self.restart}")
        for h in (self.hx, self.hy):
            if h is not None and not h > 0:
                raise ConfigurationError(f"mesh spacing must be positive, got {h}")

    @property
    def n_dofs(self) -> int:
        return (self.P * (self.N - 1) - 1) * (self.N - 2) * self.pde.components

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pde"] = self.pde.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SolveReport:
    config: ProblemConfig
    beta: int
    residual_history: list[float]
    setup_seconds: float
    solve_seconds: float
    final_relative_residual: float
    solution_error: float
    termination: str
    counters: RsdCounters = field(default_factory=RsdCounters)
    per_application: RsdCounters = field(default_factory=RsdCounters)
    preconditioner_applications: int = 0

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "beta": self.beta,
            "termination": self.termination,
            "residual_history": list(self.residual_history),
            "setup_seconds": self.setup_seconds,
            "solve_seconds": self.solve_seconds,
            "final_relative_residual": self.final_relative_residual,
            "solution_error": self.solution_error,
            "preconditioner_applications": self.preconditioner_applications,
            "counters": self.counters.to_dict(),
            "counters_per_application": self.per_application.to_dict(),
        }

    def csv_row(self) -> dict:
        c = self.config
        return {
            "pde": c.pde.value, "N": c.N, "P": c.P, "gamma": c.gamma, "beta": self.beta,
            "setup_s": f"{self.setup_seconds:.6f}", "solve_s": f"{self.solve_seconds:.6f}",
            "final_rel_res": f"{self.final_relative_residual:.6e}",
            "solution_err": f"{self.solution_error:.6e}",
            "leaf_solves": self.counters.leaf_solve_count,
            "status": self.termination,
        }


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigurationError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _build_problem(config: ProblemConfig):
    grid = _stage("grid", build_grid, config)
    tree = _stage("tree", lambda: compute_index_sets(build_tree(config.P), grid))
    K = _stage("assemble", assemble, grid, config.pde, config.literal_eq4_sign)
    return grid, tree, K


def run_experiment(config: ProblemConfig) -> SolveReport:
    """Full pipeline for one configuration. Deterministic apart from timers."""
    return _run(config)[0]


def _run(config: ProblemConfig):
    t0 = time.perf_counter()
    grid, tree, K = _build_problem(config)
    store = _stage("rsd_setup", rsd_setup, K, tree, grid, config.pde, config.gamma,
                   config.literal_eq4_sign)
    precond = RsdPreconditioner(store)
    setup_seconds = time.perf_counter() - t0

    u_star, f = _stage("manufacture", manufactured_problem, K, config.seed,
                       zero=config.zero_solution)
    t1 = time.perf_counter()
    u, stats = _stage("solve", gmres_flexible, lambda v: K @ v, precond, f,
                      config.tol, config.max_outer, restart=config.restart)
    solve_seconds = time.perf_counter() - t1

    fnorm = float(np.linalg.norm(f))
    res = float(np.linalg.norm(f - K @ u))
    unorm = float(np.linalg.norm(u_star))
    err = float(np.linalg.norm(u - u_star))
    report = SolveReport(
        config=config,
        beta=stats.iterations,
        residual_history=[float(r) for r in stats.residual_history],
        setup_seconds=setup_seconds,
        solve_seconds=solve_seconds,
        final_relative_residual=res / fnorm if fnorm > 0 else res,
        solution_error=err / unorm if unorm > 0 else err,
        termination=stats.reason,
        counters=precond.totals,
        per_application=precond.counters,
        preconditioner_applications=precond.applications,
    )
    logger.info("%s N=%d P=%d gamma=%d: beta=%d (%s), rel.res=%.2e",
                config.pde.value, config.N, config.P, config.gamma, report.beta,
                report.termination, report.final_relative_residual)
    return report, u, K, f


def count_applications(config: ProblemConfig) -> dict:
    """Apply the preconditioner once and compare counters with the work laws."""
    grid, tree, K = _build_problem(config)
    store = _stage("rsd_setup", rsd_setup, K, tree, grid, config.pde, config.gamma,
                   config.literal_eq4_sign)
    precond = RsdPreconditioner(store)
    _, f = manufactured_problem(K, config.seed, zero=config.zero_solution)
    precond(f)
    c = precond.counters
    P, g = config.P, config.gamma
    height = P.bit_length() - 1
    expected_solves = P + (P - 1) * (2 * g + 2)
    per_leaf_bound = 1 + height * (g + 1)
    expected_messages = (P - 1) * (2 * g + 2)
    return {
        "config": config.to_dict(),
        "counters": c.to_dict(),
        "expected_leaf_solves": expected_solves,
        "per_leaf_bound": per_leaf_bound,
        "expected_messages": expected_messages,
        "leaf_solve_law_holds": c.leaf_solve_count == expected_solves,
        "per_leaf_bound_holds": c.max_leaf_solves_per_leaf <= per_leaf_bound,
        "message_law_holds": c.point_to_point_message_count == expected_messages,
    }


@dataclass
class VerifyVerdict:
    passed: bool
    relative_difference: float
    rsd_report: SolveReport
    u_dense: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "relative_difference": self.relative_difference,
            "threshold": VERIFY_TOL,
            "report": self.rsd_report.to_dict(),
        }


def verify_small(config: ProblemConfig) -> VerifyVerdict:
    """Compare the RSD-GMRES solution with a dense LU solve of the same system."""
    if config.n_dofs > VERIFY_MAX_DOFS:
        raise ConfigurationError(
            f"verify mode is capped at {VERIFY_MAX_DOFS} DOFs, config has {config.n_dofs}")
    report, u_rsd, K, f = _run(config)
    u_dense = _stage("dense_oracle", lambda: scipy.linalg.lu_solve(
        scipy.linalg.lu_factor(K.toarray()), f))
    dnorm = float(np.linalg.norm(u_dense))
    diff = float(np.linalg.norm(u_rsd - u_dense))
    rel = diff / dnorm if dnorm > 0 else diff
    return VerifyVerdict(passed=bool(rel <= VERIFY_TOL), relative_difference=rel,
                         rsd_report=report, u_dense=u_dense)


@dataclass
class SweepResult:
    configs: list[ProblemConfig]
    reports: list[Optional[SolveReport]]
    errors: list[Optional[str]]

    def rows(self) -> list[dict]:
        out = []
        for cfg, rep, err in zip(self.configs, self.reports, self.errors):
            if rep is not None:
                out.append(rep.csv_row())
            else:
                row = {k: "" for k in CSV_FIELDS}
                row.update(pde=cfg.pde.value, N=cfg.N, P=cfg.P, gamma=cfg.gamma,
                           status=f"error: {err}")
                out.append(row)
        return out

    def to_csv(self) -> str:
        return _rows_to_csv(self.rows())

    def to_json(self) -> str:
        docs = []
        for cfg, rep, err in zip(self.configs, self.reports, self.errors):
            docs.append(rep.to_dict() if rep is not None else {"config": cfg.to_dict(), "error": err})
        return json.dumps({"reports": docs}, indent=2)

    @property
    def all_converged(self) -> bool:
        return all(r is not None and r.converged for r in self.reports)


def _run_safely(config: ProblemConfig):
    try:
        return run_experiment(config), None
    except Exception as exc:  # recorded per row; the sweep continues
        logger.warning("sweep entry failed: %s", exc)
        return None, str(exc)


def sweep(configs: Sequence[ProblemConfig], workers: int = 1) -> SweepResult:
    """Run every config; failures are recorded per entry instead of raised."""
    configs = list(configs)
    if not configs:
        raise ConfigurationError("sweep needs at least one configuration")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_safely, configs))
    else:
        results = [_run_safely(c) for c in configs]
    return SweepResult(configs=configs, reports=[r for r, _ in results],
                       errors=[e for _, e in results])


def load_sweep_file(path) -> list[ProblemConfig]:
    """One JSON object per line; blank lines and ``#`` comments are skipped."""
    configs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}:{lineno}: expected a JSON object")
        configs.append(ProblemConfig.from_dict(d))
    return configs


def _write_out(path: Optional[str], csv_text: str, json_text: str) -> None:
    if path is None:
        return
    p = Path(path)
    if p.suffix.lower() == ".json":
        p.write_text(json_text + "\n")
    elif p.suffix.lower() == ".csv":
        p.write_text(csv_text)
    else:
        raise ConfigurationError(f"--out must end in .csv or .json, got {path}")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rsd-bench",
        description="Solve FEM benchmark problems with RSD-preconditioned flexible GMRES.")
    ap.add_argument("--pde", choices=[k.value for k in PdeKind], default="poisson")
    ap.add_argument("--n", type=int, default=17, help="nodes per dimension per sub-domain")
    ap.add_argument("--p", type=int, default=8, help="number of sub-domains (power of two)")
    ap.add_argument("--gamma", type=int, default=2, help="S-MatVecs per interface solve")
    ap.add_argument("--tol", type=float, default=1e-12)
    ap.add_argument("--max-outer", type=int, default=2000)
    ap.add_argument("--restart", type=int, default=None,
                    help="outer GMRES restart length (default: no restart)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=MODES, default="solve")
    ap.add_argument("--literal-eq4-sign", action="store_true",
                    help="assemble the Navier-Lame grad-div term with the negative sign")
    ap.add_argument("--out", default=None, help="write report to path.csv or path.json")
    ap.add_argument("--sweep", default=None, help="JSON-lines file of configurations")
    ap.add_argument("--workers", type=int, default=1, help="parallel sweep entries")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.sweep:
            result = sweep(load_sweep_file(args.sweep), workers=args.workers)
            csv_text = result.to_csv()
            _write_out(args.out, csv_text, result.to_json())
            sys.stdout.write(csv_text)
            return 0 if result.all_converged else 2

        config = ProblemConfig(
            pde=args.pde, N=args.n, P=args.p, gamma=args.gamma, tol=args.tol,
            max_outer=args.max_outer, seed=args.seed, literal_eq4_sign=args.literal_eq4_sign,
            mode=args.mode, restart=args.restart)
        if args.out is not None and Path(args.out).suffix.lower() not in (".csv", ".json"):
            raise ConfigurationError(f"--out must end in .csv or .json, got {args.out}")

        if config.mode == "count":
            doc = count_applications(config)
            text = json.dumps(doc, indent=2)
            row = {k: "" for k in CSV_FIELDS}
            row.update(pde=config.pde.value, N=config.N, P=config.P, gamma=config.gamma,
                       leaf_solves=doc["counters"]["leaf_solve_count"], status="count")
            _write_out(args.out, _rows_to_csv([row]), text)
            print(text)
            ok = doc["leaf_solve_law_holds"] and doc["per_leaf_bound_holds"]
            return 0 if ok else 2

        if config.mode == "verify":
            verdict = verify_small(config)
            report = verdict.rsd_report
            _write_out(args.out, _rows_to_csv([report.csv_row()]), json.dumps(verdict.to_dict(), indent=2))
            print(f"verify {'PASS' if verdict.passed else 'FAIL'}: "
                  f"||u_rsd - u_dense|| / ||u_dense|| = {verdict.relative_difference:.3e} "
                  f"(beta={report.beta})")
            return 0 if verdict.passed else 2

        report = run_experiment(config)
        _write_out(args.out, _rows_to_csv([report.csv_row()]), json.dumps(report.to_dict(), indent=2))
        print(f"{config.pde.value} N={config.N} P={config.P} gamma={config.gamma}: "
              f"beta={report.beta} ({report.termination}), "
              f"rel.res={report.final_relative_residual:.3e}, err={report.solution_error:.3e}, "
              f"setup={report.setup_seconds:.3f}s solve={report.solve_seconds:.3f}s")
        return 0 if report.converged else 2
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
