"""Command-line front end: ``mgdispatch run|verify|plotdata``.

Exit codes: 0 success, 1 failure to run (I/O, malformed input, solver),
2 run completed but constraint or containment violations were found.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import sim
from .profiles import ProfileError
from .scenarios import ScenarioError, load_scenario, parse_mode

OUT_ENV = "MGDISPATCH_OUT"
FIGURES = ("soc", "power", "ellipse", "grid")
EXIT_OK, EXIT_FAIL, EXIT_VIOLATIONS = 0, 1, 2


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for violations here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAIL, f"{self.prog}: error: {message}\n")


def _out_path(out: str | None, default_name: str) -> Path:
    base = out or os.environ.get(OUT_ENV) or "."
    p = Path(base)
    if p.suffix == ".csv":
        p.parent.mkdir(parents=True, exist_ok=True)
        return p
    p.mkdir(parents=True, exist_ok=True)
    return p / default_name


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.mode:
        sc.mode = parse_mode(args.mode)
    if args.seed is not None:
        sc.seed = args.seed
    if args.no_compensation:
        sc.compensation_enabled = False
    if args.networked:
        from .netharness import run_networked
        net = getattr(sc, "network", {}) or {}
        endpoints = None
        if "base_port" in net:
            host = net.get("host", "127.0.0.1")
            endpoints = [(host, net["base_port"] + i) for i in range(1 + sc.n_hubs)]
        trace = run_networked(sc, endpoints, jitter=float(net.get("jitter_s", 0.0)),
                              transport=args.transport or net.get("transport", "binary"),
                              tick_timeout=float(net.get("tick_timeout_s", 60.0)))
    else:
        trace = sim.run(sc)
    path = _out_path(args.out, f"{sc.name}-seed{sc.seed}.csv")
    sim.write_trace_csv(trace, path, sc)
    report = sim.verify_trace(trace, sc.config)
    report_path = path.with_suffix(".report.json")
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(f"trace   {path}\nreport  {report_path}")
    print(report.summary())
    return EXIT_VIOLATIONS if report.violations else EXIT_OK


def cmd_verify(args) -> int:
    trace, meta = sim.read_trace_csv(args.trace)
    limits = meta.get("limits") if meta else None
    report = sim.verify_trace(trace, limits, contain_tol=args.contain_tol)
    print(report.summary())
    if report.violation_steps:
        print("violating steps: " + " ".join(str(k) for k in report.violation_steps[:50]))
    return EXIT_VIOLATIONS if report.violations else EXIT_OK


def _pair(text: str, n_b: int) -> tuple[int, int]:
    try:
        i, j = (int(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"--pair: expected 'i,j', got {text!r}") from None
    if not (1 <= i <= n_b and 1 <= j <= n_b) or i == j:
        raise CliError(f"--pair: batteries must be distinct and within 1..{n_b}")
    return i, j


def plot_rows(trace, figure: str, pair=(1, 2), points: int = 64) -> tuple[list[str], list[list]]:
    """Tidy (long-format) rows for one figure."""
    rows = []
    if figure == "soc":
        header = ["k", "t_h", "battery", "x", "x_hat", "x_hat_lo", "x_hat_hi"]
        for r in trace:
            half = np.sqrt(np.diag(r.P))
            for i in range(r.x.size):
                rows.append([r.k, r.t, i + 1, r.x[i], r.x_hat[i], r.x_hat[i] - half[i], r.x_hat[i] + half[i]])
    elif figure == "power":
        header = ["k", "t_h", "kind", "unit", "setpoint", "power"]
        for r in trace:
            rows += [[r.k, r.t, "pv", j + 1, r.u_s[j], r.P_s[j]] for j in range(r.u_s.size)]
            rows += [[r.k, r.t, "battery", i + 1, r.u_b[i], r.P_b[i]] for i in range(r.u_b.size)]
            rows += [[r.k, r.t, "load", m + 1, "", r.P_l[m]] for m in range(r.P_l.size)]
            rows.append([r.k, r.t, "grid", 0, r.P_g_sched, r.P_g])
    elif figure == "ellipse":
        i, j = pair[0] - 1, pair[1] - 1
        header = ["k", "t_h", "point", f"e_{i + 1}", f"e_{j + 1}", f"x_{i + 1}", f"x_{j + 1}"]
        th = np.linspace(0, 2 * np.pi, points, endpoint=False)
        circle = np.vstack([np.cos(th), np.sin(th)])
        for r in trace:
            # projection of an ellipsoid onto a coordinate plane: shape is the 2x2 block of P
            S = r.P[np.ix_([i, j], [i, j])]
            w, V = np.linalg.eigh(S)
            pts = (V * np.sqrt(np.clip(w, 0, None))) @ circle + r.x_hat[[i, j]][:, None]
            rows += [[r.k, r.t, p, pts[0, p], pts[1, p], r.x[i], r.x[j]] for p in range(points)]
    elif figure == "grid":
        header = ["k", "t_h", "Pg_sched", "Pg", "deviation"]
        rows = [[r.k, r.t, r.P_g_sched, r.P_g, r.P_g - r.P_g_sched] for r in trace]
    else:
        raise CliError(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
    return header, rows


def cmd_plotdata(args) -> int:
    if args.figure not in FIGURES:
        raise CliError(f"unknown figure {args.figure!r}; choose from {', '.join(FIGURES)}")
    trace, _ = sim.read_trace_csv(args.trace)
    pair = _pair(args.pair, trace[0].x.size) if args.figure == "ellipse" else (1, 2)
    header, rows = plot_rows(trace, args.figure, pair, args.points)
    if args.columns:
        want = [c.strip() for c in args.columns.split(",")]
        missing = [c for c in want if c not in header]
        if missing:
            raise CliError(f"unknown column(s) {', '.join(missing)}; available: {', '.join(header)}")
        idx = [header.index(c) for c in want]
        header, rows = want, [[row[i] for i in idx] for row in rows]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.9g}" if isinstance(v, (float, np.floating)) else v for v in row])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgdispatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log solver fallbacks and faults")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate a scenario file and write its trace")
    r.add_argument("scenario")
    r.add_argument("--mode", help="islanded | grid-variable | grid-fixed:<pu>")
    r.add_argument("--seed", type=int)
    r.add_argument("--no-compensation", action="store_true")
    r.add_argument("--networked", action="store_true", help="run over local sockets")
    r.add_argument("--transport", choices=("binary", "jsonl"))
    r.add_argument("--out", help=f"output directory or .csv path (default ${OUT_ENV} or .)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="recompute invariants from a trace file")
    v.add_argument("trace")
    v.add_argument("--contain-tol", type=float, default=1e-6,
                   help="slack on the ellipsoid test (values are logged with 9 digits)")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("plotdata", help="tidy CSV for plotting")
    d.add_argument("trace")
    d.add_argument("--figure", required=True, help="|".join(FIGURES))
    d.add_argument("--pair", default="1,2", help="battery pair for --figure ellipse")
    d.add_argument("--points", type=int, default=64)
    d.add_argument("--columns", help="comma-separated subset of output columns")
    d.add_argument("--out", help="output file (default stdout)")
    d.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:  # output piped into a pager/head that exited early
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except (CliError, ScenarioError, ProfileError, sim.TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except Exception as exc:  # solver or harness failure
        print(f"error: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
