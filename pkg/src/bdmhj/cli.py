"""Command-line entry point: ``bdmhj {simulate,solve,compare,check}``.

Exit codes: 0 success, 1 internal error, 2 configuration error, 3 numerical
failure, 4 I/O failure. The output directory is ``--out`` if given, else the
``BDMHJ_OUT`` environment variable, else ``output.dir`` from the config file;
nothing is written anywhere else. Every invocation leaves a ``manifest.json``
there recording the config digest, seed, package versions and wall time.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
import warnings
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_and_validate
from .errors import AssumptionWarning, ConfigError, InvariantViolation, NumericalError
from .harness import _write_csv, check_assumptions, emit_outputs, riemann_report, run_experiment
from .hjsolver import make_params, solve, default_L_grad
from .process import init_state, make_rng, simulate_tau_leap, simulate_until
from .rescale import LedgerObserver

log = logging.getLogger("bdmhj")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4
ENV_OUT = "BDMHJ_OUT"


def _times(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bdmhj", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        p.add_argument("--out", type=Path, help=f"output directory (overrides ${ENV_OUT} and output.dir)")
        p.add_argument("--log-level", choices=["debug", "info", "warning", "error"],
                       help="overrides the config's verbosity")

    p = sub.add_parser("simulate", help="run the stochastic process")
    common(p)
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--replicates", type=_positive_int)
    p.add_argument("--snapshot-times", type=_times, help="comma-separated rescaled times")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--exact", dest="method", action="store_const", const="exact")
    g.add_argument("--tau-leap", dest="method", action="store_const", const="tau_leap")

    p = sub.add_parser("solve", help="solve the Hamilton-Jacobi limit")
    common(p)
    p.add_argument("--n", type=_positive_int, help="grid size")
    p.add_argument("--T", type=float, help="final time")
    p.add_argument("--snapshots", type=_times, help="comma-separated output times")
    p.add_argument("--dt", type=float, help="manual time step (must satisfy the CFL bound)")

    p = sub.add_parser("compare", help="convergence experiment across the K ladder")
    common(p)
    p.add_argument("--jobs", type=_positive_int)
    p.add_argument("--plots", nargs="?", const="error,profile", default=None,
                   help="comma-separated subset of error,profile (bare flag: both)")

    p = sub.add_parser("check", help="report modelling assumptions and Riemann-sum defects")
    common(p)
    return ap


# --------------------------------------------------------------------------


def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    env = os.environ.get(ENV_OUT)
    if env:
        return Path(env)
    d = Path(cfg.data["output"]["dir"])
    return d if d.is_absolute() else cfg.base_dir / d


def _versions() -> dict:
    out = {"bdmhj": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "mpmath", "jsonschema", "PyYAML"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def cmd_simulate(args, cfg: RunConfig, out: Path) -> list[Path]:
    proc = cfg.data["process"]
    method = args.method or proc["method"]
    seed = cfg.seed if args.seed is None else args.seed
    reps = args.replicates or proc["replicates"]
    T = float(proc["T"])
    times = args.snapshot_times if args.snapshot_times is not None else proc["snapshot_times"]
    bad = [t for t in times if not 0 <= t <= T]
    if bad:
        raise ConfigError("", [("process.snapshot_times", f"{bad} outside [0, T={T}]")])
    spec = cfg.model_spec()
    ledger_on = bool(proc["ledger"]) and method == "exact"
    init = cfg.init_rule()
    K = spec.scaling.K
    out.mkdir(parents=True, exist_ok=True)
    written, summary, stops = [], [], []
    for r in range(reps):
        state = init_state(spec, init, track_ledger=ledger_on)
        snaps = []
        obs = [snaps.append]
        led = LedgerObserver(spec) if ledger_on else None
        if led is not None:
            obs.append(led)
        if method == "exact":
            res = simulate_until(state, T, spec, make_rng(seed, "simulate", K, r), observers=obs,
                                 observe_at=[0.0, *times], max_events=proc["max_events"], keep_snapshots=False)
        else:
            res = simulate_tau_leap(state, T, spec, make_rng(seed, "tau_leap", K, r), cfg.leap_control(),
                                    observers=obs, observe_at=[0.0, *times], max_events=proc["max_events"])
        log.info("replicate %d: %d events in %.2fs%s", r, res.n_events, res.wall_time_s,
                 " (truncated)" if res.truncated else "")
        written.append(_write_csv(out / f"replicate_{r:04d}.csv", ["t_rescaled", "site", "count"],
                                  [(s.t_rescaled, i, c) for s in snaps for i, c in enumerate(s.counts)]))
        summary.append((r, res.n_events, round(res.wall_time_s, 6), res.truncated))
        stops.append((r, res.tau_prime, res.tau_L, float(np.fmin(res.tau_prime, res.tau_L))))
        if led is not None:
            rows = [(t, i, b[i], A[i], M[i], Q[i]) for t, b, A, M, Q in led.ledger.history for i in range(len(b))]
            written.append(_write_csv(out / f"ledger_{r:04d}.csv",
                                      ["t_rescaled", "site", "beta", "A", "M", "QV"], rows))
    written.append(_write_csv(out / "events_summary.csv", ["replicate", "n_events", "wall_time_s", "truncated"],
                              summary))
    written.append(_write_csv(out / "stopping_times.csv", ["replicate", "tau_prime", "tau_L", "theta"], stops))
    return written


def cmd_solve(args, cfg: RunConfig, out: Path) -> list[Path]:
    hj = cfg.data["hjsolver"]
    n = args.n or hj["n"]
    T = float(hj["T"] if args.T is None else args.T)
    snaps = args.snapshots if args.snapshots is not None else hj["snapshots"]
    bad = [t for t in snaps if not 0 <= t <= T]
    if bad:
        raise ConfigError("", [("hjsolver.snapshots", f"{bad} outside [0, T={T}]")])
    problem = cfg.hj_problem()
    beta0 = cfg.beta0()
    dt = args.dt if args.dt is not None else hj["dt"]
    params = None
    if dt is not None or hj["theta"] is not None:
        L = hj["L_grad"] or default_L_grad(beta0)
        params = make_params(problem, L, hj["cfl"], dt)
        if hj["theta"] is not None:
            params = replace(params, theta=float(hj["theta"]))
    sol = solve(beta0, T, params, problem, n=n, snapshots=snaps, L_grad=hj["L_grad"], cfl=hj["cfl"])
    log.info("HJ solve: n=%d, %d steps, theta=%.4g, max slope %.4g, %d restart(s)",
             n, sol.n_steps, sol.params.theta, sol.max_gradient, sol.restarts)
    out.mkdir(parents=True, exist_ok=True)
    return [_write_csv(out / "hj_solution.csv", ["t", "x", "beta"],
                       [(t, x, v) for t, vals in zip(sol.times, sol.values) for x, v in zip(sol.x, vals)])]


def cmd_compare(args, cfg: RunConfig, out: Path) -> list[Path]:
    exp = cfg.experiment()
    if args.jobs:
        exp = replace(exp, jobs=args.jobs)
    plots = cfg.data["harness"]["plots"]
    if args.plots is not None:
        plots = [p.strip() for p in args.plots.split(",") if p.strip()]
        unknown = set(plots) - {"error", "profile"}
        if unknown:
            raise ConfigError("", [("--plots", f"unknown plot kind(s) {sorted(unknown)}")])
    res = run_experiment(exp, keep_ledger_rows=exp.track_ledger)
    for s in res.summary:
        log.info("K=%g t=%g median=%.4g p90=%.4g theta_hit=%.3g n=%d", s.K, s.t, s.median_sup_error,
                 s.p90_sup_error, s.theta_hit_fraction, s.n_valid_replicates)
    return emit_outputs(res, out, plots=plots, ledger=exp.track_ledger)


def cmd_check(args, cfg: RunConfig, out: Path) -> list[Path]:
    exp = cfg.experiment()
    report = check_assumptions(exp)
    lines = [f"{'K':>10}  {'status':6}  check"]
    for K, c in report:
        lines.append(f"{K:>10g}  {c.status:6}  {c.name}: {c.detail}")
    # exponential moment at alpha = 1; at alpha = L the continuum value is dominated by
    # displacements far beyond the torus and the comparison says nothing
    rows = riemann_report(exp.kernel, [(_h(K, m), m) for K, m in exp.grids], 1.0)
    lines.append("")
    lines.append(f"{'K':>10}  {'h':>10}  {'|sum hG - 1|':>12}  {'|gbar(1) defect|':>16}")
    for (K, _m), r in zip(exp.grids, rows):
        lines.append(f"{K:>10g}  {r.h:>10.4g}  {abs(r.defect):>12.3e}  {r.gbar_defect:>16.3e}")
    print("\n".join(lines))
    out.mkdir(parents=True, exist_ok=True)
    return [
        _write_csv(out / "assumptions.csv", ["K", "check", "status", "detail"],
                   [(K, c.name, c.status, c.detail) for K, c in report]),
        _write_csv(out / "riemann.csv", ["K", "h", "m", "defect", "gbar_discrete", "gbar_continuum", "gbar_defect"],
                   [(K, r.h, r.m, r.defect, r.gbar_discrete, r.gbar_continuum, r.gbar_defect)
                    for (K, _m), r in zip(exp.grids, rows)]),
    ]


def _h(K: float, m: int) -> float:
    # displacement step: one site is delta_K in trait space, delta_K log K before rescaling
    return math.log(K) / m


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "compare": cmd_compare, "check": cmd_check}


def dispatch(command: str, args, cfg: RunConfig) -> int:
    """Run one subcommand on a validated config and return its exit status."""
    t0 = time.perf_counter()
    out = _out_dir(args, cfg)
    status, outputs, err = EXIT_OK, [], None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default", AssumptionWarning)
            outputs = COMMANDS[command](args, cfg, out)
    except ConfigError as exc:
        status, err = EXIT_CONFIG, exc
        for k, m in exc.errors or [("", str(exc))]:
            log.error("config error %s: %s", k, m)
    except NumericalError as exc:
        status, err = EXIT_NUMERICAL, exc
        log.error("numerical failure: %s", exc)
    except OSError as exc:
        status, err = EXIT_IO, exc
        log.error("I/O failure: %s", exc)
    except InvariantViolation as exc:
        status, err = EXIT_INTERNAL, exc
        log.error("internal invariant violated: %s", exc)
    except Exception as exc:  # still leave a manifest behind
        status, err = EXIT_INTERNAL, exc
        log.exception("unexpected failure")
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_sha256": cfg.digest(),
        "seed": getattr(args, "seed", None) if getattr(args, "seed", None) is not None else cfg.seed,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - t0,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "exit_status": status,
        "error": None if err is None else f"{type(err).__name__}: {err}",
        "outputs": sorted(str(p.relative_to(out)) if p.is_relative_to(out) else str(p) for p in outputs),
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        log.error("cannot write manifest: %s", exc)
        return status or EXIT_IO
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = parse_and_validate(args.config)
    except ConfigError as exc:
        logging.getLogger("bdmhj").error("invalid configuration %s", args.config)
        for k, m in exc.errors or [("", str(exc))]:
            print(f"  {k}: {m}", file=sys.stderr)
        return EXIT_CONFIG
    level = (args.log_level or cfg.verbosity).upper()
    logging.getLogger("bdmhj").setLevel(level)
    return dispatch(args.command, args, cfg)


if __name__ == "__main__":
    sys.exit(main())
