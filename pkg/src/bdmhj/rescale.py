"""Log-rescaled fields, Lipschitz statistics, stopping times and the drift/martingale ledger."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, gbar, torus_distance
from .process import Snapshot

__all__ = [
    "RescaledField",
    "DiagnosticsLedger",
    "LedgerObserver",
    "StopFlags",
    "BoundCheck",
    "beta_from_counts",
    "interpolate",
    "lipschitz_stat",
    "lipschitz_all_pairs",
    "ledger_integrands",
    "update_ledger",
    "check_martingale_bound",
    "ratio_bound_violation",
    "stopping_monitor",
    "default_bound_constant",
]


@dataclass(frozen=True)
class RescaledField:
    beta: np.ndarray
    t_rescaled: float
    K: float

    @property
    def m(self) -> int:
        return self.beta.size


def beta_from_counts(counts, K: float, t_rescaled: float = 0.0) -> RescaledField:
    """``log N_i / log K``, with 0 for empty sites."""
    if not K > 1:
        raise ValueError("K must exceed 1")
    n = np.asarray(counts, dtype=float)
    with np.errstate(divide="ignore"):
        beta = np.where(n >= 1, np.log(np.maximum(n, 1.0)) / math.log(K), 0.0)
    return RescaledField(beta, float(t_rescaled), float(K))


def interpolate(fld: RescaledField | np.ndarray, x):
    """Periodic piecewise-linear interpolant through ``(i/m, beta_i)``."""
    beta = fld.beta if isinstance(fld, RescaledField) else np.asarray(fld, dtype=float)
    m = beta.size
    s = np.mod(np.asarray(x, dtype=float), 1.0) * m
    i = np.floor(s).astype(np.int64)
    frac = s - i
    i %= m
    out = beta[i] * (1.0 - frac) + beta[(i + 1) % m] * frac
    return float(out) if np.ndim(out) == 0 else out


def lipschitz_stat(fld: RescaledField | np.ndarray, delta_K: float | None = None) -> float:
    """Largest adjacent difference quotient ``|beta_{i+1} - beta_i| / delta_K`` with wraparound."""
    beta = fld.beta if isinstance(fld, RescaledField) else np.asarray(fld, dtype=float)
    m = beta.size
    if m < 2:
        raise ValueError("need at least two sites")
    delta = 1.0 / m if delta_K is None else float(delta_K)
    return float(np.max(np.abs(np.roll(beta, -1) - beta)) / delta)


def lipschitz_all_pairs(beta) -> float:
    """Brute-force ``max_{i != j} |beta_i - beta_j| / rho(x_i, x_j)``; O(m^2)."""
    beta = np.asarray(beta, dtype=float)
    m = beta.size
    x = np.arange(m) / m
    rho = torus_distance(x[:, None], x[None, :])
    diff = np.abs(beta[:, None] - beta[None, :])
    off = ~np.eye(m, dtype=bool)
    return float(np.max(diff[off] / rho[off]))


# --------------------------------------------------------------------------
# ledger


def ledger_integrands(counts, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Process-time integrands of the drift and of the predictable quadratic variation.

    Uses the exact jump sizes of ``log N``: ``log(1 + 1/N)`` on a birth and
    ``log(1 - 1/N)`` on a death, both taken as 0 when the jump leaves
    ``beta`` unchanged (a birth into an empty site, a death of the last
    individual).
    """
    n = np.asarray(counts, dtype=float)
    m = n.size
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(n >= 1, np.log1p(1.0 / np.maximum(n, 1.0)), 0.0)
        dn = np.where(n >= 2, np.log1p(-1.0 / np.maximum(n, 2.0)), 0.0)
    src = n * spec.p
    w = spec.offset_weights
    off = spec.offsets
    inflow = np.zeros(m)
    for ell, wl in zip(off, w):
        inflow += wl * np.roll(src, ell)  # parent at i - ell lands on i
    rb = spec.b * n + inflow
    rd = spec.d * n
    return rb * up + rd * dn, rb * up ** 2 + rd * dn ** 2


@dataclass
class DiagnosticsLedger:
    """Running drift ``A``, martingale ``M = beta - A`` and quadratic variation ``QV``.

    Times are rescaled. ``tau_prime``/``tau_L`` are NaN until first hit.
    """

    K: float
    t: float
    beta: np.ndarray
    A: np.ndarray
    M: np.ndarray
    QV: np.ndarray
    tau_prime: float = math.nan
    tau_L: float = math.nan
    history: list = field(default_factory=list)
    max_identity_error: float = 0.0

    @classmethod
    def start(cls, snap: Snapshot, spec: ModelSpec, keep_history: bool = True) -> "DiagnosticsLedger":
        beta = beta_from_counts(snap.counts, spec.scaling.K).beta
        led = cls(spec.scaling.K, snap.t_rescaled, beta, beta.copy(), np.zeros_like(beta),
                  np.zeros_like(beta), snap.tau_prime, snap.tau_L)
        led._keep = keep_history
        led._record()
        return led

    @property
    def theta(self) -> float:
        return float(np.fmin(self.tau_prime, self.tau_L))

    def identity_error(self) -> float:
        return float(np.max(np.abs(self.beta - (self.A + self.M))))

    def _record(self):
        self.max_identity_error = max(self.max_identity_error, self.identity_error())
        if getattr(self, "_keep", True):
            self.history.append((self.t, self.beta.copy(), self.A.copy(), self.M.copy(), self.QV.copy()))


def update_ledger(ledger: DiagnosticsLedger, prev: Snapshot, cur: Snapshot, spec: ModelSpec) -> DiagnosticsLedger:
    """Advance ``ledger`` over the window between consecutive snapshots.

    The snapshots carry the integrals of the piecewise-constant integrands over
    the exact event path, so the increments are exact up to rounding.
    """
    if cur.A_int is None or prev.A_int is None:
        raise ValueError("snapshots were taken without ledger tracking")
    if cur.t_process < prev.t_process:
        raise ValueError("snapshots out of order")
    lk = spec.log_k
    ledger.A = ledger.A + (cur.A_int - prev.A_int) / lk
    ledger.QV = ledger.QV + (cur.Q_int - prev.Q_int) / lk ** 2
    ledger.beta = beta_from_counts(cur.counts, spec.scaling.K).beta
    ledger.M = ledger.beta - ledger.A
    ledger.t = cur.t_rescaled
    ledger.tau_prime = cur.tau_prime
    ledger.tau_L = cur.tau_L
    ledger._record()
    return ledger


class LedgerObserver:
    """Observer that builds a :class:`DiagnosticsLedger` from consecutive snapshots."""

    def __init__(self, spec: ModelSpec, keep_history: bool = True):
        self.spec = spec
        self.keep_history = keep_history
        self.ledger: DiagnosticsLedger | None = None
        self._prev: Snapshot | None = None

    def __call__(self, snap: Snapshot):
        if self.ledger is None:
            self.ledger = DiagnosticsLedger.start(snap, self.spec, self.keep_history)
        else:
            update_ledger(self.ledger, self._prev, snap, self.spec)
        self._prev = snap


# --------------------------------------------------------------------------
# bounds and stopping times


def default_bound_constant(spec: ModelSpec) -> float:
    r = spec.rates
    return r.b_max + r.d_max + r.p_max


@dataclass(frozen=True)
class BoundCheck:
    passed: bool
    max_ratio: float  # max over i and checked times of QV_i(s) / (coef * s)
    coef: float  # C * Gbar(L) / (K^a log K)
    max_qv_rate: float  # max over i and checked times of QV_i(s) / s
    n_checked: int

    @property
    def margin(self) -> float:
        return 1.0 - self.max_ratio


def check_martingale_bound(ledger: DiagnosticsLedger, spec: ModelSpec, t: float,
                           C: float | None = None, gbar_L: float | None = None) -> BoundCheck:
    """Check ``QV_i(s) <= C Gbar(L) s / (K^a log K)`` at every recorded time ``s <= min(t, theta)``.

    ``gbar_L`` defaults to the discrete exponential-moment sum at this K; the
    harness passes the supremum over its K range.
    """
    sc = spec.scaling
    C = default_bound_constant(spec) if C is None else float(C)
    if gbar_L is None:
        gbar_L = gbar(sc.L, spec.kernel, [(sc.K, sc.m)]).discrete_sup
    coef = C * gbar_L / (sc.K ** sc.a * sc.log_k)
    stop = min(t, ledger.theta) if not math.isnan(ledger.theta) else t
    worst = 0.0
    rate = 0.0
    n = 0
    for s, _beta, _A, _M, qv in ledger.history:
        if s <= 0 or s > stop:
            continue
        q = float(np.max(qv))
        worst = max(worst, q / (coef * s))
        rate = max(rate, q / s)
        n += 1
    return BoundCheck(worst <= 1.0, worst, coef, rate, n)


def ratio_bound_violation(counts, spec: ModelSpec) -> float:
    """Largest ``log(N_j/N_i) - L rho(x_j, x_i) log K`` over site pairs; <= 0 means the bound holds."""
    sc = spec.scaling
    logn = np.log(np.maximum(np.asarray(counts, dtype=float), 1.0))
    x = np.arange(sc.m) / sc.m
    rho = torus_distance(x[:, None], x[None, :])
    return float(np.max(logn[:, None] - logn[None, :] - sc.L * rho * sc.log_k))


@dataclass(frozen=True)
class StopFlags:
    tau_prime_hit: bool
    tau_L_hit: bool


def stopping_monitor(counts, fld: RescaledField | None, spec: ModelSpec) -> StopFlags:
    sc = spec.scaling
    counts = np.asarray(counts)
    if fld is None:
        fld = beta_from_counts(counts, sc.K)
    return StopFlags(bool(np.any(counts < sc.K ** sc.a)),
                     bool(lipschitz_stat(fld, sc.delta) > sc.L))
