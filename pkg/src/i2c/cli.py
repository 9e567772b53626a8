"""Command-line front end.

Every subcommand reads one or more scenario files and writes flat tables to the
output directory, named ``<scenario>.<kind>.<csv|json>``. A JSON run report per
scenario goes to stdout (it holds wall time, so it is not written to disk and the
output files stay byte-identical across runs).

Exit codes: 0 success, 1 numerical or solver failure, 2 configuration or I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import aipolicy, approx, oracle
from .gauss import GaussianError
from .model import ScenarioError, Scenario, cost_to_likelihood, load_scenario
from .solver import SolverError, em_solve
from .unified import solve_unified

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2
SOLVER_ERRORS = (SolverError, GaussianError, oracle.OracleError, approx.DivergenceError,
                 np.linalg.LinAlgError, FloatingPointError)


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------- tables


def _num(v):
    if v is None:
        return None
    v = float(v) + 0.0  # folds -0.0 into 0.0
    return v if math.isfinite(v) else None


def state_columns(dx: int, du: int) -> list[str]:
    cols = ["t", "segment"]
    cols += [f"mean_x_{i}" for i in range(dx)]
    cols += [f"cov_x_{i}{j}" for i in range(dx) for j in range(i, dx)]
    cols += [f"mean_u_{i}" for i in range(du)]
    cols += [f"K_{i}{j}" for i in range(du) for j in range(dx)]
    cols += [f"k_{i}" for i in range(du)]
    cols.append("elbo")
    return cols


def gain_columns(dx: int, du: int) -> list[str]:
    return ["t"] + [f"K_{i}{j}" for i in range(du) for j in range(dx)] + [f"k_{i}" for i in range(du)]


def state_row(t, segment, mean_x, cov_x, mean_u=None, K=None, k=None, elbo=None, du: int = 0) -> list:
    dx = len(mean_x)
    row = [t, segment]
    row += [_num(v) for v in mean_x]
    row += [_num(cov_x[i, j]) for i in range(dx) for j in range(i, dx)]
    row += [_num(v) for v in mean_u] if mean_u is not None else [None] * du
    row += [_num(v) for v in np.ravel(K)] if K is not None else [None] * (du * dx)
    row += [_num(v) for v in k] if k is not None else [None] * du
    row.append(_num(elbo))
    return row


def gain_rows(gains, t0: int = 0) -> list:
    return [[t0 + i] + [_num(v) for v in np.ravel(K)] + [_num(v) for v in np.ravel(k)] for i, (K, k) in enumerate(gains)]


def encode(columns: list, rows: list, fmt: str) -> str:
    if fmt == "json":
        return json.dumps([dict(zip(columns, r)) for r in rows], indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


def read_table(path) -> tuple[list, list]:
    """Inverse of :func:`encode` (numbers as floats, blanks as None)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        records = json.loads(text)
        cols = list(records[0]) if records else []
        return cols, [[rec[c] for c in cols] for rec in records]
    reader = csv.reader(io.StringIO(text))
    cols = next(reader)
    rows = []
    for r in reader:
        out = []
        for v in r:
            if v == "":
                out.append(None)
            else:
                try:
                    out.append(float(v))
                except ValueError:
                    out.append(v)
        rows.append(out)
    return cols, rows


# --------------------------------------------------------------------------- subcommands


def _timeline(post, policy, tau: int) -> list:
    """Smoothed state/action rows for ``t = 0..T-1`` plus the terminal state; gains from ``tau``."""
    dx, du, T = post.problem.dx, post.problem.du, post.problem.T
    gains = {g.t: g for g in policy if g.t >= tau}
    elbo_steps = post.step_loglik
    rows = []
    for b in post.beliefs:
        s, g = b.smoothed, gains.get(b.t)
        rows.append(state_row(
            b.t, "control" if b.t >= tau else "estimation", s.mean[:dx], s.cov[:dx, :dx], s.mean[dx:],
            None if g is None else g.K, None if g is None else g.k, elbo_steps[b.t], du,
        ))
    rows.append(state_row(T, "terminal", post.terminal.mean, post.terminal.cov, elbo=elbo_steps[T], du=du))
    return rows


def _trace_rows(traces) -> list:
    rows = []
    n = 0
    for outer, tr in enumerate(traces):
        for a, e in zip(tr.alphas, tr.elbos):
            rows.append([n, outer, _num(a), _num(e)])
            n += 1
    return rows


TRACE_COLUMNS = ["iteration", "outer", "alpha", "elbo"]


def _em_args(args):
    return dict(alpha0=args.alpha0, max_iters=args.max_em_iters, tol=args.tol)


def run_control(scen: Scenario, args) -> dict:
    if scen.tau > 0 and not args.ignore_measurements:
        raise ConfigError(f"scenario {scen.name} has tau={scen.tau}; control needs tau=0 or --ignore-measurements")
    dx, du = scen.dx, scen.du
    if scen.nonlinear is not None:
        system = approx.system_from_block(scen.nonlinear)
        res = approx.nonlinear_i2c(system, scen, iters=args.outer_iters, alpha0=args.alpha0,
                                   em_iters=args.max_em_iters, tol=args.tol)
        post, policy, traces = res.beliefs, res.policy, res.em_traces
        summary = {"outer_iterations": res.iterations, "converged": res.converged,
                   "nominal_costs": res.nominal_costs, "cost_increase_flags": res.cost_increase_flags}
    else:
        post, policy, trace = em_solve(scen, use_measurements=False, **_em_args(args))
        traces = [trace]
        summary = {}
    tau = scen.tau
    rows = _timeline(post, policy, tau)
    ctrl = [g for g in policy if g.t >= tau]
    tables = {
        "trajectory": (state_columns(dx, du), rows),
        "gains": (gain_columns(dx, du), gain_rows([(g.K, g.k) for g in ctrl], tau)),
        "elbo": (TRACE_COLUMNS, _trace_rows(traces)),
    }
    last = traces[-1]
    summary.update(iterations=sum(t.iterations for t in traces), converged=last.converged,
                   alpha=last.alphas[-1], elbo=last.elbos[-1])
    return {"tables": tables, "summary": summary, "warnings": [w for t in traces for w in t.warnings]}


def _estimate_tables(scen: Scenario):
    dx, du = scen.dx, scen.du
    controls = np.array([g.mean for g in scen.u_prior])
    meas = list(scen.measurements)
    filt = oracle.kalman_filter(scen.dynamics, scen.measure_model, scen.x0_prior, meas, controls)
    sm = oracle.rts_smooth(filt, scen.dynamics)
    T, tau = scen.T, scen.tau

    def seg(t):
        return "terminal" if t == T else ("estimation" if t < tau else "prediction")

    def rows(beliefs):
        return [
            state_row(t, seg(t), g.mean, g.cov, controls[t] if t < T else None, elbo=filt.step_loglik[t], du=du)
            for t, g in enumerate(beliefs)
        ]

    cols = state_columns(dx, du)
    return {"filtered": (cols, rows(filt.filtered)), "smoothed": (cols, rows(sm.smoothed))}, filt.loglik


def run_estimate(scen: Scenario, args) -> dict:
    tables, loglik = _estimate_tables(scen)
    return {"tables": tables, "summary": {"loglik": loglik}, "warnings": []}


def run_unified(scen: Scenario, args) -> dict:
    sol = solve_unified(scen, **_em_args(args))
    post, tau = sol.beliefs, scen.tau
    rows = _timeline(post, sol.policy, tau)
    tr = sol.trace
    summary = {"iterations": tr.iterations, "converged": tr.converged, "alpha": tr.alphas[-1],
               "elbo": tr.elbos[-1], "estimation_loglik": sol.estimation_loglik, "tau": tau}
    tables = {
        "timeline": (state_columns(scen.dx, scen.du), rows),
        "elbo": (TRACE_COLUMNS, _trace_rows([tr])),
    }
    return {"tables": tables, "summary": summary, "warnings": list(tr.warnings)}


def run_oracle(scen: Scenario, args) -> dict:
    if scen.nonlinear is not None:
        raise ConfigError(f"scenario {scen.name}: the oracle handles linear scenarios only")
    sol = oracle.lqr_for_scenario(scen)
    tables = {"lqr_gains": (gain_columns(scen.dx, scen.du), gain_rows(zip(sol.K, sol.k), scen.tau))}
    summary = {"horizon": sol.T}
    if scen.tau > 0:
        est, loglik = _estimate_tables(scen)
        tables["kalman_filtered"] = est["filtered"]
        tables["kalman_smoothed"] = est["smoothed"]
        summary["loglik"] = loglik
    return {"tables": tables, "summary": summary, "warnings": []}


def run_score_ensemble(scen: Scenario, args) -> dict:
    if scen.ensemble is None:
        raise ConfigError(f"scenario {scen.name} has no ensemble block")
    ens = aipolicy.ensemble_from_dict(scen.ensemble, scen.du, scen.n_controlled)
    lik = cost_to_likelihood(scen.cost, args.alpha0)
    score = aipolicy.score_ensemble(ens, scen, lik)
    rows = [[n, _num(f), _num(lp), _num(p)]
            for n, f, lp, p in zip(score.names, score.free_energies, ens.log_prior, score.posterior)]
    tables = {"ensemble": (["policy", "free_energy", "log_prior", "posterior"], rows)}
    best = score.names[int(np.argmax(score.posterior))]
    return {"tables": tables, "summary": {"gamma": ens.gamma, "alpha": args.alpha0, "map_policy": best},
            "warnings": []}


COMMANDS = {
    "control": run_control,
    "estimate": run_estimate,
    "unified": run_unified,
    "oracle": run_oracle,
    "score-ensemble": run_score_ensemble,
}


# --------------------------------------------------------------------------- driver


def run_one(command: str, path: str, args) -> tuple[int, dict]:
    """Run one subcommand on one scenario file. Returns ``(exit_code, report)``."""
    start = time.perf_counter()
    report = {"scenario": path, "subcommand": command}
    try:
        try:
            digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario file {path}: {exc.strerror}") from None
        scen = load_scenario(path, seed=args.seed)
        report.update(name=scen.name, sha256=digest)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = COMMANDS[command](scen, args)
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = []
        for kind, (cols, rows) in result["tables"].items():
            target = out_dir / f"{Path(path).stem}.{kind}.{args.format}"
            target.write_text(encode(cols, rows, args.format))
            files.append(str(target))
        report.update(
            status="ok", outputs=files, summary=result["summary"],
            warnings=result["warnings"] + [str(w.message) for w in caught],
        )
        code = EXIT_OK
    except (ScenarioError, ConfigError, OSError, ValueError) as exc:
        # ValueError covers bad flag values and malformed ensemble/config entries
        report.update(status="config-error", error=str(exc))
        code = EXIT_CONFIG
    except SOLVER_ERRORS as exc:
        report.update(status="solver-error", error=f"{type(exc).__name__}: {exc}")
        code = EXIT_SOLVER
    report["wall_time_s"] = time.perf_counter() - start
    return code, report


def _worker(payload):
    command, path, ns = payload
    return run_one(command, path, argparse.Namespace(**ns))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", action="append", required=True, metavar="PATH",
                        help="scenario JSON file (repeatable)")
    common.add_argument("--output", default="out", metavar="DIR")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--seed", type=int, default=0, help="seed for simulated measurements")
    common.add_argument("--max-em-iters", type=int, default=100)
    common.add_argument("--tol", type=float, default=1e-8)
    common.add_argument("--alpha0", type=float, default=1.0)
    common.add_argument("--jobs", type=int, default=1, help="scenario files solved in parallel")
    common.add_argument("--ignore-measurements", action="store_true",
                        help="control: drop measurements before tau instead of refusing")
    common.add_argument("--outer-iters", type=int, default=20,
                        help="relinearization passes for nonlinear scenarios")

    parser = argparse.ArgumentParser(prog="i2c", description="Input inference for control.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _check_flags(args) -> Optional[str]:
    if not 0 <= args.seed < 2**64:
        return "--seed must fit in an unsigned 64-bit integer"
    if args.max_em_iters < 1:
        return "--max-em-iters must be at least 1"
    if not (args.tol >= 0 and math.isfinite(args.tol)):
        return "--tol must be a finite non-negative number"
    if not (args.alpha0 > 0 and math.isfinite(args.alpha0)):
        return "--alpha0 must be positive"
    if args.jobs < 1 or args.outer_iters < 1:
        return "--jobs and --outer-iters must be at least 1"
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    problem = _check_flags(args)
    if problem:
        print(f"i2c: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    paths = args.scenario
    if args.jobs > 1 and len(paths) > 1:
        ns = {k: v for k, v in vars(args).items()}
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_worker, [(args.command, p, ns) for p in paths]))
    else:
        results = [run_one(args.command, p, args) for p in paths]
    worst = EXIT_OK
    for code, report in results:
        print(json.dumps(report, default=_num))
        if code != EXIT_OK:
            print(f"i2c {args.command}: {report['scenario']}: {report['error']}", file=sys.stderr)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
