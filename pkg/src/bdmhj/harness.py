"""Convergence experiments: stochastic replicates across a K ladder against one HJ reference."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AssumptionWarning, ConfigError
from .hjsolver import HjProblem, HjSolution, solve
from .model import (AssumptionCheck, MutationKernel, ModelSpec, RateFunctions, ScalingParams,
                    TorusFunction, delta_rule, gbar, riemann_sum)
from .process import InitRule, init_state, make_rng, simulate_until, ceil_power
from .rescale import (LedgerObserver, beta_from_counts, check_martingale_bound, interpolate,
                      lipschitz_stat, ratio_bound_violation)

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "ConvergenceRow",
    "ReplicateResult",
    "SummaryRow",
    "ExperimentResult",
    "RiemannRow",
    "run_experiment",
    "run_replicate",
    "check_assumptions",
    "riemann_report",
    "emit_outputs",
    "sup_error",
    "loglog_slope",
    "format_float",
]


def format_float(v) -> str:
    """Shortest round-trip representation; stable across runs and platforms."""
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


@dataclass(frozen=True)
class ExperimentConfig:
    rates: RateFunctions
    kernel: MutationKernel
    beta0: TorusFunction
    K_ladder: tuple
    m_ladder: tuple
    a: float = 0.4
    a1: float = 0.5
    a2: float = 0.3
    L: float = 20.0
    replicates: int = 30
    first_replicate: int = 0  # replicate indices run from here, so a ladder can be extended later
    T: float = 0.5
    comparison_times: tuple = (0.5,)
    observe_points: int = 51
    hj_n: int = 512
    hj_L_grad: float | None = None
    hj_cfl: float = 0.45
    seed: int = 0
    strict: bool = False
    track_ledger: bool = True
    bound_constant: float | None = None
    lipschitz_A: float = 1.0
    max_events: int = 5_000_000_000
    jobs: int = 1

    def __post_init__(self):
        errs = []
        if len(self.K_ladder) == 0:
            errs.append(("harness.K_ladder", "must not be empty"))
        if len(self.m_ladder) != len(self.K_ladder):
            errs.append(("harness.m_ladder", "must have one entry per K"))
        for m in self.m_ladder:
            if not isinstance(m, (int, np.integer)) or m < 2:
                errs.append(("scaling.m", f"grid size {m!r} is not an integer >= 2"))
        if self.replicates < 0:
            errs.append(("harness.replicates", "must be nonnegative"))
        if self.first_replicate < 0:
            errs.append(("harness.first_replicate", "must be nonnegative"))
        if self.T < 0:
            errs.append(("harness.T", "must be nonnegative"))
        for t in self.comparison_times:
            if not 0 <= t <= self.T:
                errs.append(("harness.comparison_times", f"{t} outside [0, T]"))
        if errs:
            raise ConfigError("", errs)

    @classmethod
    def with_delta_rule(cls, K_ladder, c: float = 2.5, exponent: float = 1.5, **kw) -> "ExperimentConfig":
        return cls(K_ladder=tuple(K_ladder), m_ladder=tuple(delta_rule(K, c, exponent) for K in K_ladder), **kw)

    def scaling(self, K: float, m: int) -> ScalingParams:
        return ScalingParams(K=K, m=int(m), a1=self.a1, a=self.a, a2=self.a2, L=self.L)

    def spec(self, K: float, m: int) -> ModelSpec:
        with warnings.catch_warnings():
            if not self.strict:
                warnings.simplefilter("ignore", AssumptionWarning)
            return ModelSpec(self.kernel, self.rates, self.scaling(K, m), self.strict)

    @property
    def problem(self) -> HjProblem:
        return HjProblem(self.rates, self.kernel)

    @property
    def observe_times(self) -> list[float]:
        grid = np.linspace(0.0, self.T, max(2, self.observe_points)) if self.T > 0 else np.zeros(1)
        return sorted({float(t) for t in grid} | {float(t) for t in self.comparison_times})

    @property
    def grids(self) -> list[tuple[float, int]]:
        return list(zip(self.K_ladder, self.m_ladder))


@dataclass(frozen=True)
class ConvergenceRow:
    K: float
    m: int
    replicate: int
    t: float
    sup_error: float
    lipschitz_stat: float
    theta_hit: bool
    truncated: bool


@dataclass
class ReplicateResult:
    K: float
    m: int
    replicate: int
    n_events: int
    wall_time_s: float
    truncated: bool
    extinct: bool
    tau_prime: float
    tau_L: float
    sup_errors: dict
    lip_stats: dict
    final_counts: np.ndarray
    identity_error: float = math.nan
    bound_passed: bool | None = None
    bound_max_ratio: float = math.nan
    max_qv_rate: float = math.nan
    ratio_violation: float = math.nan
    ledger_rows: list | None = None

    @property
    def theta(self) -> float:
        return float(np.fmin(self.tau_prime, self.tau_L))

    def theta_exceeds(self, T: float) -> bool:
        th = self.theta
        return math.isnan(th) or th > T


@dataclass(frozen=True)
class SummaryRow:
    K: float
    t: float
    median_sup_error: float
    p90_sup_error: float
    theta_hit_fraction: float
    n_valid_replicates: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    summary: list
    replicates: list
    reference: HjSolution
    gbar_L: float
    n_truncated: int = 0

    def by_K(self, K) -> list:
        return [r for r in self.replicates if r.K == K]

    def summary_at(self, K, t) -> SummaryRow:
        for s in self.summary:
            if s.K == K and abs(s.t - t) < 1e-12:
                return s
        raise KeyError((K, t))


# --------------------------------------------------------------------------


def _hj_on(values: np.ndarray, x) -> np.ndarray:
    """Periodic linear interpolation of an HJ grid function."""
    return interpolate(values, x)


def sup_error(beta: np.ndarray, hj_values: np.ndarray, union: bool = False) -> float:
    """``max |beta_tilde(x) - beta(x)|`` over HJ nodes (and, with ``union``, also the process nodes)."""
    n = hj_values.size
    xs = np.arange(n) / n
    err = float(np.max(np.abs(interpolate(beta, xs) - hj_values)))
    if union:
        xm = np.arange(beta.size) / beta.size
        err = max(err, float(np.max(np.abs(beta - _hj_on(hj_values, xm)))))
    return err


def run_replicate(cfg: ExperimentConfig, K: float, m: int, replicate: int,
                  reference: dict, gbar_L: float, keep_ledger_rows: bool = False) -> ReplicateResult:
    """Simulate one replicate and score it against the HJ reference (``{t: values}``)."""
    spec = cfg.spec(K, m)
    with warnings.catch_warnings():
        if not cfg.strict:
            warnings.simplefilter("ignore", AssumptionWarning)
        state = init_state(spec, InitRule("profile", profile=cfg.beta0), track_ledger=cfg.track_ledger)
    rng = make_rng(cfg.seed, "compare", K, replicate)
    obs = []
    ledger_obs = LedgerObserver(spec, keep_history=True) if cfg.track_ledger else None
    if ledger_obs is not None:
        obs.append(ledger_obs)
    summ = simulate_until(state, cfg.T, spec, rng, observers=obs, observe_at=cfg.observe_times,
                          max_events=cfg.max_events)
    sup, lips = {}, {}
    snaps = {round(s.t_rescaled, 12): s for s in summ.snapshots}
    worst_ratio = -math.inf
    theta = float(np.fmin(summ.final.tau_prime, summ.final.tau_L))
    for s in summ.snapshots:
        if math.isnan(theta) or s.t_rescaled <= theta:
            worst_ratio = max(worst_ratio, ratio_bound_violation(s.counts, spec))
    for t in cfg.comparison_times:
        s = snaps.get(round(t, 12))
        if s is None:
            continue
        beta = beta_from_counts(s.counts, K, t).beta
        sup[t] = sup_error(beta, reference[t])
        lips[t] = lipschitz_stat(beta, 1.0 / m)
    res = ReplicateResult(K, m, replicate, summ.n_events, summ.wall_time_s, summ.truncated, summ.extinct,
                          summ.final.tau_prime, summ.final.tau_L, sup, lips, np.array(summ.final.counts),
                          ratio_violation=worst_ratio)
    if ledger_obs is not None:
        led = ledger_obs.ledger
        res.identity_error = led.max_identity_error
        bc = check_martingale_bound(led, spec, cfg.T, cfg.bound_constant, gbar_L)
        res.bound_passed = bc.passed
        res.bound_max_ratio = bc.max_ratio
        res.max_qv_rate = bc.max_qv_rate
        if keep_ledger_rows:
            res.ledger_rows = [(t, b.copy(), A.copy(), M.copy(), Q.copy()) for t, b, A, M, Q in led.history]
    return res


def _job(args):
    return run_replicate(*args)


def run_experiment(cfg: ExperimentConfig, keep_ledger_rows: bool = False) -> ExperimentResult:
    """Run every (K, replicate) cell against one shared HJ reference."""
    hj_times = sorted(set(cfg.comparison_times) | {cfg.T})
    ref = solve(cfg.beta0, cfg.T, None, cfg.problem, n=cfg.hj_n, snapshots=hj_times,
                L_grad=cfg.hj_L_grad, cfl=cfg.hj_cfl)
    reference = {t: ref.at(t) for t in cfg.comparison_times}
    gbar_L = gbar(cfg.L, cfg.kernel, cfg.grids).discrete_sup
    jobs = [(cfg, K, m, r, reference, gbar_L, keep_ledger_rows)
            for K, m in cfg.grids for r in range(cfg.first_replicate, cfg.first_replicate + cfg.replicates)]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = []
        for j in jobs:
            results.append(_job(j))
            r = results[-1]
            log.info("K=%g rep=%d events=%d wall=%.2fs", r.K, r.replicate, r.n_events, r.wall_time_s)
    results.sort(key=lambda r: (r.K, r.replicate))
    rows = []
    for r in results:
        for t in cfg.comparison_times:
            if t in r.sup_errors:
                th = r.theta
                rows.append(ConvergenceRow(r.K, r.m, r.replicate, t, r.sup_errors[t], r.lip_stats[t],
                                           bool(not math.isnan(th) and th <= t), r.truncated))
    summary = []
    for K, _m in cfg.grids:
        for t in cfg.comparison_times:
            cell = [row for row in rows if row.K == K and row.t == t]
            valid = [row.sup_error for row in cell if not row.truncated]
            hits = [row.theta_hit for row in cell if not row.truncated]
            med = float(np.median(valid)) if valid else math.nan
            p90 = float(np.percentile(valid, 90)) if valid else math.nan
            frac = float(np.mean(hits)) if hits else math.nan
            summary.append(SummaryRow(K, t, med, p90, frac, len(valid)))
    n_trunc = sum(r.truncated for r in results)
    if n_trunc:
        log.warning("%d replicate(s) truncated by the event budget and excluded from medians", n_trunc)
    return ExperimentResult(cfg, rows, summary, results, ref, gbar_L, n_trunc)


# --------------------------------------------------------------------------
# assumption and Riemann-sum reports


def check_assumptions(cfg: ExperimentConfig) -> list[tuple[float, AssumptionCheck]]:
    """Every checkable modelling assumption at each K; failures are 'warn' unless strict."""
    bad = "fail" if cfg.strict else "warn"
    out = []
    kchecks = cfg.kernel.check()
    for K, m in cfg.grids:
        spec_checks = list(cfg.rates.check(m)) + list(cfg.scaling(K, m).check()) + kchecks
        n0 = ceil_power(K, cfg.beta0.sample(m))
        floor = ceil_power(K, cfg.a1)
        spec_checks.append(AssumptionCheck("N_i(0) >= K^a1", "pass" if np.all(n0 >= floor) else "fail",
                                           f"min N_i(0) = {int(np.min(n0))}, ceil(K^a1) = {floor}"))
        lip0 = lipschitz_stat(beta_from_counts(n0, K).beta, 1.0 / m)
        spec_checks.append(AssumptionCheck("initial Lipschitz quotient <= A",
                                           "pass" if lip0 <= cfg.lipschitz_A else "fail",
                                           f"quotient = {lip0:.6g}, A = {cfg.lipschitz_A}"))
        for c in spec_checks:
            out.append((K, c if c.ok else AssumptionCheck(c.name, bad, c.detail)))
    return out


@dataclass(frozen=True)
class RiemannRow:
    h: float
    m: int
    defect: float  # sum_l h G(h l) - 1
    log10_abs_defect: float
    gbar_discrete: float
    gbar_continuum: float
    gbar_defect: float
    first_moment: float  # sum_l h G(h l) * l


def riemann_report(kernel: MutationKernel, grids: Sequence[tuple[float, int]], alpha: float = 1.0) -> list[RiemannRow]:
    """Riemann-sum defects at each ``(h, m)``; the defect is evaluated in extended precision."""
    import mpmath

    cont = kernel.exp_moment(alpha)
    rows = []
    for h, m in grids:
        dfc = kernel.riemann_defect(h, m)
        ell = np.arange(-(m // 2), m - m // 2)
        w = h * np.asarray(kernel.density(h * ell), dtype=float)
        disc = riemann_sum(kernel, h, m, alpha)
        l10 = float(mpmath.log10(abs(dfc))) if dfc != 0 else -math.inf
        rows.append(RiemannRow(float(h), int(m), float(dfc), l10, disc, cont, abs(disc - cont),
                               float(math.fsum(w * ell))))
    return rows


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    ok = np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(x[ok], y[ok], 1)[0])


# --------------------------------------------------------------------------
# output


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_float(v) for v in r])
    path.write_text(buf.getvalue())
    return path


def emit_outputs(result: ExperimentResult, out_dir, plots: Sequence[str] = (), ledger: bool = False) -> list[Path]:
    """Write CSV tables and, if requested, SVG plots (``"error"``, ``"profile"``).

    CSVs contain no wall-clock data, so fixed inputs give byte-identical files.
    """
    if not result.rows and not result.replicates:
        raise ValueError("nothing to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    written = []
    written.append(_write_csv(out / "convergence.csv",
                              ["K", "m", "replicate", "t", "sup_error", "lipschitz_stat", "theta_hit", "truncated"],
                              [(r.K, r.m, r.replicate, r.t, r.sup_error, r.lipschitz_stat, r.theta_hit, r.truncated)
                               for r in result.rows]))
    written.append(_write_csv(out / "summary.csv",
                              ["K", "t", "median_sup_error", "p90_sup_error", "theta_hit_fraction",
                               "n_valid_replicates"],
                              [(s.K, s.t, s.median_sup_error, s.p90_sup_error, s.theta_hit_fraction,
                                s.n_valid_replicates) for s in result.summary]))
    written.append(_write_csv(out / "stopping_times.csv", ["K", "replicate", "tau_prime", "tau_L", "theta"],
                              [(r.K, r.replicate, r.tau_prime, r.tau_L, r.theta) for r in result.replicates]))
    written.append(_write_csv(out / "replicates.csv",
                              ["K", "m", "replicate", "n_events", "truncated", "extinct", "identity_error",
                               "bound_passed", "bound_max_ratio", "max_qv_rate"],
                              [(r.K, r.m, r.replicate, r.n_events, r.truncated, r.extinct, r.identity_error,
                                r.bound_passed, r.bound_max_ratio, r.max_qv_rate) for r in result.replicates]))
    T = result.config.T
    final = [s for s in result.summary if s.t == T]
    slope = loglog_slope([s.K for s in final], [s.median_sup_error for s in final])
    written.append(_write_csv(out / "error_fit.csv", ["t", "loglog_slope", "n_points"], [(T, slope, len(final))]))
    ref = result.reference
    written.append(_write_csv(out / "hj_reference.csv", ["t", "x", "beta"],
                              [(t, x, v) for t, vals in zip(ref.times, ref.values) for x, v in zip(ref.x, vals)]))
    if ledger:
        for r in result.replicates:
            if r.ledger_rows:
                rows = [(t, i, b[i], A[i], M[i], Q[i]) for t, b, A, M, Q in r.ledger_rows for i in range(len(b))]
                written.append(_write_csv(out / f"ledger_K{format_float(r.K)}_r{r.replicate}.csv",
                                          ["t_rescaled", "site", "beta", "A", "M", "QV"], rows))
    if plots:
        written += _plots(result, out, plots, slope)
    return written


def _plots(result: ExperimentResult, out: Path, plots, slope) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    T = result.config.T
    if "error" in plots:
        final = [s for s in result.summary if s.t == T]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.loglog([s.K for s in final], [s.median_sup_error for s in final], "o-", label="median")
        ax.loglog([s.K for s in final], [s.p90_sup_error for s in final], "s--", label="90th percentile")
        ax.set_xlabel("K")
        ax.set_ylabel("sup error at T")
        ax.set_title(f"least-squares slope {slope:.3f}")
        ax.legend()
        p = out / "sup_error_vs_K.svg"
        fig.savefig(p, metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    if "profile" in plots:
        fig, ax = plt.subplots(figsize=(5, 4))
        ref = result.reference
        ax.plot(ref.x, ref.final, "k-", label="HJ")
        xs = np.linspace(0, 1, 400, endpoint=False)
        for K, m in result.config.grids:
            reps = [r for r in result.replicates if r.K == K]
            if reps:
                beta = beta_from_counts(reps[0].final_counts, K).beta
                ax.plot(xs, interpolate(beta, xs), label=f"K={K:g}")
        ax.set_xlabel("x")
        ax.set_ylabel("beta(T, x)")
        ax.legend()
        p = out / "profile_final.svg"
        fig.savefig(p, metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths
