"""Exact event-driven simulation of the birth-death-mutation process.

Times inside a :class:`PopulationState` are process times. Everything a caller
passes in or reads out through :func:`simulate_until` is rescaled time
``t = process_time / log K``.
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _engine
from .errors import AssumptionWarning, ConfigError, InvariantViolation
from .model import ModelSpec, TorusFunction, offset_range, wrap_offset
from .sampling import AliasTable, tree_shape

log = logging.getLogger(__name__)

__all__ = [
    "EventRecord",
    "MutationSampler",
    "PopulationState",
    "Snapshot",
    "TrajectorySummary",
    "LeapControl",
    "InitRule",
    "make_rng",
    "ceil_power",
    "init_state",
    "next_event",
    "apply_event",
    "simulate_until",
    "simulate_tau_leap",
    "events_from_log",
]

KINDS = ("clonal_birth", "death", "mutant_birth")
DEFAULT_MAX_EVENTS = 5_000_000_000

STREAM_PURPOSE = {"test": 0, "simulate": 1, "compare": 2, "tau_leap": 3, "sweep": 4}


def make_rng(master_seed: int, purpose: str = "simulate", K: float = 0, replicate: int = 0) -> np.random.Generator:
    """Independent stream keyed by (master seed, purpose, K, replicate).

    Uses ``SeedSequence`` spawn keys, so streams do not depend on the order in
    which replicates are scheduled.
    """
    code = STREAM_PURPOSE.get(purpose)
    if code is None:
        raise ConfigError(f"unknown stream purpose {purpose!r}")
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(code, int(round(K)), int(replicate)))
    return np.random.Generator(np.random.PCG64(ss))


def ceil_power(K: float, beta, rtol: float = 1e-9):
    """``ceil(K**beta)``, treating values within ``rtol`` of an integer as that integer."""
    v = np.exp(np.asarray(beta, dtype=float) * math.log(K))
    if np.any(v >= 2.0 ** 62):
        raise ConfigError(f"population size K^beta = {float(np.max(v)):.3g} exceeds the 64-bit count range")
    r = np.round(v)
    out = np.where(np.abs(v - r) <= rtol * np.maximum(r, 1.0), r, np.ceil(v)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class EventRecord:
    kind: str
    site: int
    time: float
    target_site: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if (self.kind == "mutant_birth") != (self.target_site is not None):
            raise ValueError("target_site is required for mutant_birth and forbidden otherwise")

    @property
    def affected_site(self) -> int:
        return self.site if self.target_site is None else self.target_site


class MutationSampler:
    """Alias table over mutation offsets with weights ``h G(h l)``."""

    def __init__(self, spec: ModelSpec):
        self.m = spec.m
        self.offsets = offset_range(spec.m)
        self.weights = spec.offset_weights
        self.table = AliasTable(self.weights)

    def offset(self, u: float) -> int:
        return int(self.offsets[self.table.index(u)])

    def target(self, site: int, u: float) -> int:
        return (site + self.offset(u)) % self.m

    def sample_offsets(self, rng, size):
        return self.offsets[self.table.sample(rng, size)]


@dataclass(frozen=True)
class Snapshot:
    """Read-only view of a state at an observation time."""

    t_rescaled: float
    t_process: float
    counts: np.ndarray
    n_events: int
    A_int: np.ndarray | None = None
    Q_int: np.ndarray | None = None
    tau_prime: float = math.nan  # rescaled
    tau_L: float = math.nan  # rescaled


class PopulationState:
    """Counts per site plus the cached event-rate tree and optional ledger integrals."""

    def __init__(self, spec: ModelSpec, counts, time: float = 0.0, track_ledger: bool = False):
        counts = np.array(counts, dtype=np.int64)
        if counts.shape != (spec.m,):
            raise ConfigError(f"counts must have length m={spec.m}, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ConfigError("counts must be nonnegative")
        self.spec = spec
        self.counts = counts
        m = spec.m
        self.b = np.ascontiguousarray(spec.b)
        self.d = np.ascontiguousarray(spec.d)
        self.bd = self.b + self.d
        self.p = np.ascontiguousarray(spec.p)
        self.tot = self.b + self.d + self.p * spec.s_k
        self.sampler = _sampler_for(spec)
        # inflow weight by (target - parent) mod m
        self.wmod = spec.offset_weights[np.argsort(np.mod(spec.offsets, m))].copy()
        # wr2[m + k] = wr2[k] = w(-k mod m): the inflow row of site i over sources j is wr2[m - i + j]
        wr = self.wmod[(-np.arange(m)) % m]
        self.wr2 = np.concatenate([wr, wr])
        self.M, self.depth = tree_shape(m)
        self.tree = np.zeros(2 * self.M)
        self.clock = np.array([float(time), math.nan])
        self.counters = np.array([0, int(counts.sum()), 0, 0], dtype=np.int64)
        self.track_ledger = bool(track_ledger)
        # running integrals S_j(t) = N_j t + R_j and the last closing of each site
        self.R = np.zeros(m)
        self.G_last = np.zeros(m)
        self.t_last = np.zeros(m)
        self.bN = np.zeros(m)
        self.up = np.zeros(m)
        self.up2 = np.zeros(m)
        self.rdn = np.zeros(m)
        self.rdn2 = np.zeros(m)
        self.A_int = np.zeros(m)
        self.Q_int = np.zeros(m)
        sc = spec.scaling
        self.mon = np.array([sc.K ** sc.a, math.exp(sc.L * sc.delta * sc.log_k)])
        self.hits = np.array([math.nan, math.nan])
        self.rebuild()
        if self.track_ledger:
            _engine.ledger_reset(self.time, counts, self.b, self.d, self.R, self.p, self.wr2,
                                 self.G_last, self.t_last, self.bN, self.up, self.up2, self.rdn, self.rdn2)
        self._initial_monitor()

    # -- caches

    def rebuild(self):
        _engine.rebuild(self.counts, self.tot, self.tree, self.M)

    def _initial_monitor(self):
        c = self.counts
        if np.isnan(self.hits[0]) and np.any(c < self.mon[0]):
            self.hits[0] = self.time
        if np.isnan(self.hits[1]) and self.spec.m > 1:
            a = np.maximum(c, 1).astype(float)
            nb = np.roll(a, -1)
            if np.any((a > self.mon[1] * nb) | (nb > self.mon[1] * a)):
                self.hits[1] = self.time

    @property
    def time(self) -> float:
        return float(self.clock[0])

    @property
    def n_events(self) -> int:
        return int(self.counters[_engine.C_EVENTS])

    @property
    def total_rate(self) -> float:
        return float(self.tree[1])

    @property
    def site_rates(self) -> np.ndarray:
        """``(m, 3)`` array of clonal-birth, death and mutant-birth rates per site."""
        n = self.counts.astype(float)
        return np.column_stack([n * self.b, n * self.d, n * self.p * self.spec.s_k])

    def coherence_error(self) -> float:
        """Relative gap between the cached total rate and a from-scratch recomputation."""
        exact = math.fsum(self.site_rates.ravel())
        if exact == 0:
            return abs(self.total_rate)
        return abs(self.total_rate - exact) / exact

    def close_ledger(self):
        """Bring every site's ledger integrals up to the current time."""
        _engine.close_all(self.time, self.counts, self.R, self.p, self.wr2, self.G_last, self.t_last,
                          self.bN, self.up, self.up2, self.rdn, self.rdn2, self.A_int, self.Q_int)

    def snapshot(self) -> Snapshot:
        lk = self.spec.log_k
        c = self.counts.copy()
        c.flags.writeable = False
        A = Q = None
        if self.track_ledger:
            self.close_ledger()
            A = self.A_int.copy()
            Q = self.Q_int.copy()
            A.flags.writeable = False
            Q.flags.writeable = False
        return Snapshot(self.time / lk, self.time, c, self.n_events, A, Q,
                        float(self.hits[0]) / lk, float(self.hits[1]) / lk)

    def copy(self) -> "PopulationState":
        other = object.__new__(PopulationState)
        other.__dict__.update(self.__dict__)
        for name in ("counts", "tree", "clock", "counters", "R", "G_last", "t_last", "bN", "up", "up2",
                     "rdn", "rdn2", "A_int", "Q_int", "hits"):
            setattr(other, name, getattr(self, name).copy())
        return other


_SAMPLERS: dict[int, tuple[ModelSpec, MutationSampler]] = {}


def _sampler_for(spec: ModelSpec) -> MutationSampler:
    hit = _SAMPLERS.get(id(spec))
    if hit is not None and hit[0] is spec:
        return hit[1]
    s = MutationSampler(spec)
    _SAMPLERS[id(spec)] = (spec, s)
    return s


# --------------------------------------------------------------------------
# initialisation


@dataclass(frozen=True)
class InitRule:
    """How to set N_i(0).

    ``uniform``: every site gets ``count`` (default ``ceil(K^a1)``).
    ``profile``: ``N_i(0) = ceil(K^{beta0(i/m)})``.
    ``explicit``: counts given directly.
    """

    kind: str = "uniform"
    count: int | None = None
    profile: TorusFunction | None = None
    counts: tuple | None = None


def init_state(spec: ModelSpec, init: InitRule | None = None, track_ledger: bool = False) -> PopulationState:
    init = init or InitRule()
    sc = spec.scaling
    floor = ceil_power(sc.K, sc.a1)
    if init.kind == "uniform":
        n0 = floor if init.count is None else int(init.count)
        counts = np.full(spec.m, n0, dtype=np.int64)
    elif init.kind == "profile":
        if init.profile is None:
            raise ConfigError("profile init rule needs a profile")
        counts = ceil_power(sc.K, init.profile.sample(spec.m))
    elif init.kind == "explicit":
        counts = np.asarray(init.counts, dtype=np.int64)
    else:
        raise ConfigError(f"unknown init rule {init.kind!r}")
    counts = np.atleast_1d(counts)
    if np.any(counts < floor):
        msg = f"initial counts below ceil(K^a1) = {floor} at {int(np.sum(counts < floor))} site(s)"
        if spec.strict:
            raise ConfigError(msg, [("init", msg)])
        import warnings

        warnings.warn(msg, AssumptionWarning, stacklevel=2)
    return PopulationState(spec, counts, track_ledger=track_ledger)


# --------------------------------------------------------------------------
# Python reference stepper (same arithmetic as the compiled engine)


def next_event(state: PopulationState, rng: np.random.Generator) -> EventRecord | None:
    """Draw the next event without applying it. Returns ``None`` once extinct."""
    if state.counters[_engine.C_TOTAL] == 0:
        return None
    tree = state.tree
    tn = state.clock[1]
    if np.isnan(tn):
        tn = state.clock[0] + rng.standard_exponential() / tree[1]
    M, depth, N = state.M, state.depth, state.counts
    m = N.size
    while True:
        v = rng.random() * tree[1]
        k = 1
        for _ in range(depth):
            left = tree[2 * k]
            if v >= left:
                v -= left
                k = 2 * k + 1
            else:
                k = 2 * k
        i = k - M
        if i < m and N[i] > 0:
            break
    n = N[i]
    if v < n * state.b[i]:
        return EventRecord("clonal_birth", int(i), float(tn))
    if v < n * state.bd[i]:
        return EventRecord("death", int(i), float(tn))
    return EventRecord("mutant_birth", int(i), float(tn), state.sampler.target(int(i), rng.random()))


def apply_event(state: PopulationState, ev: EventRecord) -> PopulationState:
    """Apply ``ev`` in place: counts, rate tree, ledger integrals, monitors and time."""
    N = state.counts
    m = N.size
    dt = ev.time - state.clock[0]
    if dt < 0:
        raise InvariantViolation(f"event at t={ev.time} precedes state time {state.time}")
    tgt = ev.affected_site
    delta = -1 if ev.kind == "death" else 1
    if delta < 0 and N[tgt] <= 0:
        raise InvariantViolation(f"death at empty site {tgt}")
    state.clock[0] = ev.time
    state.clock[1] = math.nan
    if state.track_ledger:
        _engine.close_site(ev.time, tgt, m, N, state.R, state.p, state.wr2, state.G_last, state.t_last,
                           state.bN, state.up, state.up2, state.rdn, state.rdn2, state.A_int, state.Q_int)
        state.R[tgt] -= delta * ev.time
    N[tgt] += delta
    state.counters[_engine.C_TOTAL] += delta
    w = delta * state.tot[tgt]
    k = state.M + tgt
    for _ in range(state.depth + 1):
        state.tree[k] += w
        k >>= 1
    if state.track_ledger:
        _engine.site_terms(N, state.b, state.d, tgt, state.bN, state.up, state.up2, state.rdn, state.rdn2)
    hits, mon = state.hits, state.mon
    if delta < 0 and np.isnan(hits[0]) and N[tgt] < mon[0]:
        hits[0] = ev.time
    if np.isnan(hits[1]) and m > 1:
        c0 = max(N[tgt], 1)
        for nb in ((tgt - 1) % m, (tgt + 1) % m):
            c1 = max(N[nb], 1)
            if c0 > mon[1] * c1 or c1 > mon[1] * c0:
                hits[1] = ev.time
    state.counters[_engine.C_EVENTS] += 1
    state.counters[_engine.C_SINCE_REBUILD] += 1
    if state.counters[_engine.C_SINCE_REBUILD] >= _engine.REBUILD_EVERY:
        state.counters[_engine.C_SINCE_REBUILD] = 0
        state.rebuild()
    return state


# --------------------------------------------------------------------------
# driver


@dataclass
class TrajectorySummary:
    snapshots: list
    n_events: int
    truncated: bool
    extinct: bool
    wall_time_s: float
    final: Snapshot
    event_log: dict | None = None

    @property
    def tau_prime(self) -> float:
        return self.final.tau_prime

    @property
    def tau_L(self) -> float:
        return self.final.tau_L


def _run_engine(state: PopulationState, rng, t_end: float, max_events: int, log_arrays):
    log_on = log_arrays is not None
    if not log_on:
        empty_i = np.zeros(0, dtype=np.int64)
        log_arrays = (empty_i, empty_i, empty_i, np.zeros(0))
    return _engine.run_segment(
        rng, state.counts, state.tot, state.b, state.d, state.bd,
        state.sampler.table.prob, state.sampler.table.alias, state.sampler.offsets,
        state.tree, state.M, state.depth, state.track_ledger,
        state.R, state.p, state.wr2, state.G_last, state.t_last, state.bN, state.up, state.up2, state.rdn, state.rdn2, state.A_int, state.Q_int,
        state.mon, state.hits, state.clock,
        state.counters, float(t_end), int(max_events), log_on, *log_arrays)


def simulate_until(state: PopulationState, T_rescaled: float, spec: ModelSpec | None = None,
                   rng: np.random.Generator | None = None,
                   observers: Iterable[Callable[[Snapshot], None]] = (),
                   observe_at: Sequence[float] | None = None,
                   max_events: int = DEFAULT_MAX_EVENTS,
                   record_events: bool = False,
                   keep_snapshots: bool = True) -> TrajectorySummary:
    """Run the exact chain until rescaled time ``T_rescaled``.

    Observers fire at every time in ``observe_at`` (rescaled, clipped to the
    current time and ``T_rescaled``) and always at ``T_rescaled``; the run is
    paused exactly at each time, so snapshots are not interpolated.
    ``max_events`` bounds the total number of events on this state.
    """
    if T_rescaled < 0:
        raise ConfigError("T_rescaled must be nonnegative")
    spec = spec or state.spec
    if rng is None:
        raise ConfigError("an explicit random generator is required")
    lk = spec.log_k
    t_now = state.time / lk
    grid = sorted({float(t) for t in (() if observe_at is None else observe_at) if t_now <= t <= T_rescaled} | {float(T_rescaled)})
    observers = list(observers)
    logs = None
    if record_events:
        cap = 1 << 16
        logs = (np.zeros(cap, dtype=np.int64), np.zeros(cap, dtype=np.int64),
                np.zeros(cap, dtype=np.int64), np.zeros(cap))
        state.counters[_engine.C_LOGGED] = 0
    chunks = []
    snaps = []
    truncated = extinct = False
    start = _time.perf_counter()

    def fire():
        snap = state.snapshot()
        if keep_snapshots:
            snaps.append(snap)
        for ob in observers:
            ob(snap)
        return snap

    last = None
    for t_obs in grid:
        if t_obs <= t_now and t_obs < T_rescaled:
            last = fire()
            continue
        t_end = t_obs * lk
        while not truncated and state.time < t_end:
            status = _run_engine(state, rng, t_end, max_events, logs)
            if status == _engine.STATUS_LOG_FULL:
                chunks.append(tuple(a.copy() for a in logs))
                state.counters[_engine.C_LOGGED] = 0
                continue
            if status == _engine.STATUS_BUDGET:
                truncated = True
                log.warning("event budget %d exhausted at rescaled time %.6g", max_events, state.time / lk)
            elif status == _engine.STATUS_EXTINCT:
                extinct = True
        if truncated:
            last = fire()
            break
        last = fire()
    event_log = None
    if record_events:
        n = int(state.counters[_engine.C_LOGGED])
        chunks.append(tuple(a[:n].copy() for a in logs))
        kinds, sites, tgts, times = (np.concatenate(parts) for parts in zip(*chunks))
        event_log = {"kind": kinds, "site": sites, "target": tgts, "time": times}
    return TrajectorySummary(snaps, state.n_events, truncated, extinct,
                             _time.perf_counter() - start, last, event_log)


def events_from_log(event_log: dict) -> list[EventRecord]:
    out = []
    for k, s, g, t in zip(event_log["kind"], event_log["site"], event_log["target"], event_log["time"]):
        kind = KINDS[int(k)]
        out.append(EventRecord(kind, int(s), float(t), int(g) if kind == "mutant_birth" else None))
    return out


# --------------------------------------------------------------------------
# approximate accelerator


@dataclass(frozen=True)
class LeapControl:
    """Tau-leap settings: relative rate-change bound and exact-fallback count threshold."""

    epsilon: float = 0.03
    critical_count: int = 16
    max_halvings: int = 30
    exact_chunk_events: int = 256

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigError("leap epsilon must lie in (0, 1)")
        if self.critical_count < 0:
            raise ConfigError("critical_count must be nonnegative")


def _leap_size(counts, rates, eps):
    # E[change of N_i] per unit time is (b_i + I_i/N_i - d_i) N_i and variance (b_i + d_i) N_i + inflow;
    # choose tau so both stay below eps * N_i (standard Cao-Gillespie-Petzold bound).
    b, d, inflow = rates
    n = counts.astype(float)
    mu = b * n + inflow - d * n
    var = b * n + inflow + d * n
    bound = np.maximum(eps * n, 1.0)
    with np.errstate(divide="ignore"):
        t1 = np.where(mu != 0, bound / np.abs(mu), np.inf)
        t2 = np.where(var > 0, bound ** 2 / var, np.inf)
    return float(np.min(np.minimum(t1, t2)))


def simulate_tau_leap(state: PopulationState, T_rescaled: float, spec: ModelSpec | None = None,
                      rng: np.random.Generator | None = None, leap: LeapControl | None = None,
                      observers: Iterable[Callable[[Snapshot], None]] = (),
                      observe_at: Sequence[float] | None = None,
                      max_events: int = DEFAULT_MAX_EVENTS) -> TrajectorySummary:
    """Poisson tau-leaping with exact fallback.

    While any occupied site holds fewer than ``critical_count`` individuals, the
    exact engine advances the state in short chunks; otherwise one leap draws
    Poisson numbers of clonal births, deaths and mutant births per site, with
    mutant targets distributed multinomially over offsets. Leaps that would
    drive a count negative are rejected and retried with half the step.
    The ledger is not maintained on leaps.
    """
    spec = spec or state.spec
    leap = leap or LeapControl()
    if rng is None:
        raise ConfigError("an explicit random generator is required")
    lk = spec.log_k
    m = spec.m
    t_now = state.time / lk
    grid = sorted({float(t) for t in (() if observe_at is None else observe_at) if t_now <= t <= T_rescaled} | {float(T_rescaled)})
    observers = list(observers)
    snaps = []
    start = _time.perf_counter()
    sampler = state.sampler
    probs = sampler.table.probabilities
    n_leaps = 0
    truncated = extinct = False
    was_tracking = state.track_ledger
    state.track_ledger = False
    wmod = state.wmod

    def inflow(c):
        # I_i = sum_j N_j p_j w((i - j) mod m), a circular convolution
        src = c * state.p
        return np.real(np.fft.ifft(np.fft.fft(src) * np.fft.fft(wmod))) if m > 64 else \
            np.array([np.dot(src, wmod[(i - np.arange(m)) % m]) for i in range(m)])

    for t_obs in grid:
        t_end = t_obs * lk
        while state.time < t_end and not truncated:
            c = state.counts
            if c.sum() == 0:
                extinct = True
                state.clock[0] = t_end
                break
            if state.n_events >= max_events:
                truncated = True
                break
            occupied = c > 0
            if np.any(occupied & (c < leap.critical_count)):
                target = min(state.n_events + leap.exact_chunk_events, max_events)
                status = _run_engine(state, rng, t_end, target, None)
                if status == _engine.STATUS_EXTINCT:
                    extinct = True
                continue
            tau = _leap_size(c, (state.b, state.d, inflow(c)), leap.epsilon)
            tau = min(tau, t_end - state.time)
            for _ in range(leap.max_halvings):
                nb = rng.poisson(state.b * c * tau)
                nd = rng.poisson(state.d * c * tau)
                nm = rng.poisson(state.p * spec.s_k * c * tau)
                gain = np.zeros(m, dtype=np.int64)
                for i in np.flatnonzero(nm):
                    per = rng.multinomial(nm[i], probs)
                    gain += np.roll(per, i + int(sampler.offsets[0]))
                new = c + nb - nd + gain
                if np.all(new >= 0):
                    break
                tau *= 0.5
            else:
                raise InvariantViolation("tau-leap kept proposing negative counts")
            state.counts[:] = new
            state.counters[_engine.C_TOTAL] = int(new.sum())
            state.counters[_engine.C_EVENTS] += int(nb.sum() + nd.sum() + nm.sum())
            state.clock[0] += tau
            state.clock[1] = math.nan  # memoryless, pending exact draw is discarded
            state.rebuild()
            n_leaps += 1
        snap = state.snapshot()
        snaps.append(snap)
        for ob in observers:
            ob(snap)
        if truncated:
            break
    state.track_ledger = was_tracking
    if was_tracking:
        state.rebuild()
    return TrajectorySummary(snaps, state.n_events, truncated, extinct,
                             _time.perf_counter() - start, snaps[-1], {"n_leaps": n_leaps})
