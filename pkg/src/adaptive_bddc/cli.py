"""Experiment driver: constraint-mode sweeps on a problem file, tabulated.

The problem file is the INI format read by :func:`adaptive_bddc.fem.parse_problem`,
optionally with an ``[experiment]`` section::

    [experiment]
    modes = c c+e c+e+f adaptive
    tau = inf 100 10
    tol = 1e-8
    max_iterations = 1000
    max_vectors = 15
    keep_edge_constraints = no

Command line flags override the file.
"""

import argparse
import configparser
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem
from .adaptive import adaptive_enrich
from .constraints import ConstraintSet, arithmetic_constraints, assemble_stabilized
from .linalg import export_matrix_market
from .solver import MaxIterationsExceeded, PcgConfig, solve
from .substructuring import substructure

log = logging.getLogger(__name__)

MODES = ("c", "c+e", "c+e+f", "c+e+f-3eigv", "adaptive")
PHASES = ("analysis", "factorization", "iterations", "total")
COLUMNS = ("mode", "omega", "Nc", "kappa", "it") + PHASES


class PhaseError(RuntimeError):
    def __init__(self, phase, label, exc):
        super().__init__(f"{label}: {phase} failed: {exc}")
        self.phase = phase
        self.__cause__ = exc


@dataclass
class ExperimentSpec:
    problem: fem.Problem
    modes: tuple = ("c", "c+e", "c+e+f")
    taus: tuple = ()
    pcg: PcgConfig = field(default_factory=PcgConfig)
    max_vectors: int | None = 15
    keep_edges: bool = False
    averaging: str = "stiffness"
    seed: int = 0
    export_dir: Path | None = None

    def __post_init__(self):
        unknown = [m for m in self.modes if m not in MODES]
        if unknown:
            raise ValueError(f"unknown modes {unknown}; choose from {', '.join(MODES)}")
        if "adaptive" in self.modes and not self.taus:
            raise ValueError("adaptive mode needs at least one tau")

    def runs(self):
        """(label, mode, tau) in execution order."""
        out = []
        for m in self.modes:
            if m == "adaptive":
                out += [(f"tau={format_tau(t)}", m, t) for t in self.taus]
            else:
                out.append((m, m, None))
        return out


@dataclass
class ResultRow:
    mode: str
    omega: float | None
    nc: int
    kappa: float | None
    iterations: int
    times: dict
    converged: bool = True

    def cells(self, with_times=True):
        out = [self.mode,
               "" if self.omega is None else f"{self.omega:.4g}",
               str(self.nc),
               "" if self.kappa is None else f"{self.kappa:.4g}",
               str(self.iterations)]
        if with_times:
            out += [f"{self.times[p]:.3f}" for p in PHASES]
        return out


def format_tau(t):
    return "inf" if math.isinf(t) else f"{t:g}"


def parse_taus(text):
    if text is None:
        return ()
    if isinstance(text, str):
        text = text.replace(",", " ").split()
    return tuple(float(t) for t in text)


def base_constraints(ss, mode):
    if mode == "c":
        return ConstraintSet()
    if mode == "c+e+f":
        return arithmetic_constraints(ss, "edges+faces")
    return arithmetic_constraints(ss, "edges")


def _phase(name, label, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except MaxIterationsExceeded:
        raise
    except Exception as exc:
        raise PhaseError(name, label, exc) from exc


def _compatibility_check(ss, constraints, rng, samples=5):
    """Largest |D R u| over random continuous vectors (should be round-off)."""
    d = constraints.matrix(ss, "w")
    if d.shape[0] == 0:
        return 0.0
    u = rng.standard_normal((ss.maps.n_u, samples))
    return float(np.abs(d @ (ss.maps.R @ u)).max() / np.abs(u).max())


def run_experiment(spec, iteration_log=None):
    """One :class:`ResultRow` per mode (one per tau for adaptive mode).

    The shared setup (assembly, globs, interior factorizations) is timed once
    and counted in the analysis phase of every row, so each row's total is what
    a standalone run of that mode would cost.
    """
    rng = np.random.default_rng(spec.seed)
    t0 = time.perf_counter()
    ss = _phase("analysis", "setup", substructure, spec.problem, averaging=spec.averaging)
    setup = time.perf_counter() - t0
    if spec.export_dir is not None:
        spec.export_dir.mkdir(parents=True, exist_ok=True)
        export_matrix_market(spec.export_dir / "Ac.mtx", ss.corner_operator(), "corner-assembled A")
    rows = []
    for label, mode, tau in spec.runs():
        t0 = time.perf_counter()
        base = base_constraints(ss, mode)
        omega = None
        if mode == "adaptive":
            en = _phase("analysis", label, adaptive_enrich, ss, base, tau,
                        spec.max_vectors, spec.keep_edges)
            constraints, omega = en.constraints, en.indicator
            log.info("pairs for %s\n%s", label, en.report_csv().rstrip())
        elif mode == "c+e+f-3eigv":
            en = _phase("analysis", label, adaptive_enrich, ss, base, math.inf,
                        spec.max_vectors, spec.keep_edges, fixed_k=3)
            constraints, omega = en.constraints, en.indicator
        else:
            constraints = base.filtered()
        t1 = time.perf_counter()
        op = _phase("factorization", label, assemble_stabilized, ss, constraints)
        t2 = time.perf_counter()
        log.debug(json.dumps({"mode": label,
                              "compatibility": _compatibility_check(ss, op.constraints, rng)}))
        callback = None
        if iteration_log is not None:
            def callback(it, res, _label=label):
                iteration_log.write(json.dumps({"mode": _label, "iteration": it,
                                                "residual": res}) + "\n")
        converged = True
        try:
            _, report = _phase("iterations", label, solve, ss, op, spec.pcg, callback)
        except MaxIterationsExceeded as exc:
            report, converged = exc.report, False
        t3 = time.perf_counter()
        if spec.export_dir is not None:
            tag = label.replace("=", "_").replace("+", "")
            export_matrix_market(spec.export_dir / f"Atilde_{tag}.mtx", op.A_tilde,
                                 f"stabilized coarse operator, {label}")
            export_matrix_market(spec.export_dir / f"Dbar_{tag}.mtx", op.tc.matrix,
                                 f"transformed constraints, {label}")
        times = {"analysis": setup + t1 - t0,
                 "factorization": t2 - t1, "iterations": t3 - t2}
        times["total"] = sum(times.values())
        rows.append(ResultRow(label, omega, op.n_constraints, report.kappa, report.iterations,
                              times, converged))
    return rows


def emit_table(rows, fmt="csv", with_times=True):
    """Render rows as CSV or a Markdown table (same cells, same column order)."""
    if not rows:
        raise ValueError("no rows to emit")
    header = list(COLUMNS if with_times else COLUMNS[:5])
    body = [r.cells(with_times) for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |",
                 "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(c for c in cells) + " |" for cells in body]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def read_markdown_table(text):
    """Parse a table written by :func:`emit_table` in Markdown format."""
    out = []
    for row in csv.reader(io.StringIO(text), delimiter="|"):
        cells = [c.strip() for c in row[1:-1]]
        if cells and not set("".join(cells)) <= set("-"):
            out.append(cells)
    return out


def spec_from_args(args):
    config = configparser.ConfigParser()
    with open(args.spec) as fh:
        config.read_file(fh)
    problem = fem.parse_problem(config)
    exp = config["experiment"] if config.has_section("experiment") else {}
    modes = args.mode or exp.get("modes", "c c+e c+e+f").split()
    taus = parse_taus(args.tau) or parse_taus(exp.get("tau"))
    tol = args.tol if args.tol is not None else float(exp.get("tol", 1e-8))
    max_it = args.max_iterations or int(exp.get("max_iterations", 1000))
    criterion = args.criterion or exp.get("criterion", "residual")
    mv = args.max_vectors if args.max_vectors is not None else exp.get("max_vectors", "15")
    mv = None if str(mv).lower() in ("none", "0", "inf") else int(mv)
    keep = args.keep_edge_constraints or str(exp.get("keep_edge_constraints", "no")).lower() in (
        "1", "yes", "true", "on")
    export = Path(args.export_matrices) if args.export_matrices else None
    return ExperimentSpec(problem, tuple(modes), taus,
                          PcgConfig(tol=tol, max_iterations=max_it, criterion=criterion),
                          mv, keep, exp.get("averaging", "stiffness"), args.seed, export)


def build_parser():
    p = argparse.ArgumentParser(
        prog="adaptive-bddc",
        description="Run BDDC constraint-mode sweeps on a structured problem and tabulate "
                    "Nc, condition estimate and iteration counts.")
    p.add_argument("--spec", required=True, help="problem file (INI)")
    p.add_argument("--mode", nargs="+", choices=MODES, help="constraint modes to run")
    p.add_argument("--tau", nargs="+", help="thresholds for adaptive mode (inf allowed)")
    p.add_argument("--tol", type=float, help="relative residual tolerance (default 1e-8)")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--criterion", choices=("residual", "preconditioned"),
                   help="PCG stopping test (default: true residual)")
    p.add_argument("--max-vectors", help="cap on constraints per face pair ('none' for no cap)")
    p.add_argument("--keep-edge-constraints", action="store_true",
                   help="keep the edge parts of adaptive constraints")
    p.add_argument("--out", help="write the table here instead of stdout")
    p.add_argument("--format", choices=("csv", "markdown"), default="csv")
    p.add_argument("--no-times", action="store_true",
                   help="omit wall-time columns (tables become reproducible bit for bit)")
    p.add_argument("--export-matrices", nargs="?", const="matrices", metavar="DIR",
                   help="write Ac, Ã and D̄c in Matrix Market format (default dir: matrices)")
    p.add_argument("--iteration-log", metavar="PATH",
                   help="append one JSON line per PCG iteration")
    p.add_argument("--seed", type=int, default=0, help="seed for the random self-checks")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        spec = spec_from_args(args)
    except (OSError, ValueError, KeyError, configparser.Error) as exc:
        print(f"error: bad experiment spec: {exc}", file=sys.stderr)
        return 1
    logf = open(args.iteration_log, "a") if args.iteration_log else None
    try:
        rows = run_experiment(spec, logf)
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if logf:
            logf.close()
    table = emit_table(rows, args.format, with_times=not args.no_times)
    if args.out:
        Path(args.out).write_text(table)
    else:
        sys.stdout.write(table)
    return 0 if all(r.converged for r in rows) else 2


if __name__ == "__main__":
    sys.exit(main())
