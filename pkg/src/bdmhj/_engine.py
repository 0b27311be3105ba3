"""Compiled inner loop of the exact event-driven simulator.

All mutable state lives in numpy arrays owned by :class:`process.PopulationState`
so a run can be split into segments at observation times without losing the
pending event: the next event time is drawn once and kept in ``clock[1]`` until
it is reached. The Python reference stepper in ``process`` performs the same
floating-point operations in the same order, which makes both paths produce
identical event sequences for a given generator.

Random draws per event, in order: one standard exponential for the waiting
time, one uniform to pick site and kind through the sum tree, and, for mutant
births only, one uniform for the alias-table offset.
"""

from __future__ import annotations

import numpy as np
from numba import njit

CLONAL_BIRTH = 0
DEATH = 1
MUTANT_BIRTH = 2

STATUS_DONE = 0
STATUS_EXTINCT = 1
STATUS_BUDGET = 2
STATUS_LOG_FULL = 3

REBUILD_EVERY = 1 << 20

# counters layout
C_EVENTS, C_TOTAL, C_SINCE_REBUILD, C_LOGGED = 0, 1, 2, 3


SERIES_FROM = 4096


@njit(cache=True, inline="always")
def jump_up(n):
    """``log(1 + 1/n)``, 0 for an empty site; a 5-term series once ``1/n`` is tiny (error < 1e-18 relative)."""
    if n >= SERIES_FROM:
        x = 1.0 / n
        return x * (1.0 - x * (0.5 - x * (1.0 / 3.0 - x * (0.25 - x * 0.2))))
    return np.log1p(1.0 / n) if n >= 1 else 0.0


@njit(cache=True, inline="always")
def jump_down(n):
    """``log(1 - 1/n)``, 0 when the death empties the site."""
    if n >= SERIES_FROM:
        x = 1.0 / n
        return -x * (1.0 + x * (0.5 + x * (1.0 / 3.0 + x * (0.25 + x * 0.2))))
    return np.log1p(-1.0 / n) if n >= 2 else 0.0


@njit(cache=True, inline="always")
def site_terms(N, b, d, i, bN, up, up2, rdn, rdn2):
    """Refresh the per-site ledger factors that depend only on N_i."""
    n = N[i]
    u = jump_up(n)
    w = jump_down(n)
    bN[i] = b[i] * n
    up[i] = u
    up2[i] = u * u
    rdn[i] = d[i] * n * w
    rdn2[i] = d[i] * n * w * w


@njit(cache=True, fastmath={"reassoc", "contract"})
def inflow_integral(t, i, m, N, R, pw, wr2):
    """``G_i(t) = sum_j p_j w(i - j) S_j(t)`` with ``S_j(t) = N_j t + R_j`` the running integral of N_j."""
    w = wr2[m - i:2 * m - i]  # a slice, not offset indexing, lets the loop vectorise
    s = 0.0
    for j in range(m):
        s += pw[j] * w[j] * (N[j] * t + R[j])
    return s


@njit(cache=True, inline="always")
def close_site(t, i, m, N, R, pw, wr2, G_last, t_last, bN, up, up2, rdn, rdn2, A_int, Q_int):
    """Integrate site ``i``'s ledger integrands from its last event up to ``t``.

    Between two events at ``i`` the jump factors of ``i`` are frozen and only the
    inflow varies, so its integral is a difference of ``inflow_integral`` values.
    """
    G = inflow_integral(t, i, m, N, R, pw, wr2)
    dG = G - G_last[i]
    dt = t - t_last[i]
    rb = dG + bN[i] * dt
    A_int[i] += up[i] * rb + rdn[i] * dt
    Q_int[i] += up2[i] * rb + rdn2[i] * dt
    G_last[i] = G
    t_last[i] = t


@njit(cache=True)
def close_all(t, N, R, pw, wr2, G_last, t_last, bN, up, up2, rdn, rdn2, A_int, Q_int):
    m = N.shape[0]
    for i in range(m):
        close_site(t, i, m, N, R, pw, wr2, G_last, t_last, bN, up, up2, rdn, rdn2, A_int, Q_int)


@njit(cache=True)
def ledger_reset(t, N, b, d, R, pw, wr2, G_last, t_last, bN, up, up2, rdn, rdn2):
    """Start the running integrals at time ``t`` (``S_j(t) = 0``)."""
    m = N.shape[0]
    for j in range(m):
        R[j] = -N[j] * t
    for i in range(m):
        site_terms(N, b, d, i, bN, up, up2, rdn, rdn2)
        G_last[i] = inflow_integral(t, i, m, N, R, pw, wr2)
        t_last[i] = t


@njit(cache=True)
def rebuild(N, tot, tree, M):
    m = N.shape[0]
    tree[:] = 0.0
    for i in range(m):
        tree[M + i] = N[i] * tot[i]
    for k in range(M - 1, 0, -1):
        tree[k] = tree[2 * k] + tree[2 * k + 1]


@njit(cache=True)
def run_segment(rng, N, tot, b, d, bd, alias_prob, alias_idx, offs,
                tree, M, depth, ledger_on, R, pw, wr2, G_last, t_last,
                bN, up, up2, rdn, rdn2, A_int, Q_int,
                mon, hits, clock, counters, t_end, max_events,
                log_on, log_kind, log_site, log_tgt, log_time):
    m = N.shape[0]
    nl = alias_prob.shape[0]
    thr_prime = mon[0]
    ratio_L = mon[1]
    t = clock[0]
    n_events = counters[C_EVENTS]
    n_total = counters[C_TOTAL]
    since = counters[C_SINCE_REBUILD]
    n_log = counters[C_LOGGED]
    cap = log_kind.shape[0]
    pending = clock[1]
    status = STATUS_DONE
    while True:
        if n_total == 0:
            t = t_end
            status = STATUS_EXTINCT
            break
        if n_events >= max_events:
            status = STATUS_BUDGET
            break
        if log_on and n_log >= cap:
            status = STATUS_LOG_FULL
            break

        if np.isnan(pending):
            pending = t + rng.standard_exponential() / tree[1]
        if pending > t_end:
            t = t_end
            break
        t = pending
        pending = np.nan

        # site and kind from one uniform; resample on the (rounding-only) empty-leaf case
        while True:
            v = rng.random() * tree[1]
            k = 1
            for _ in range(depth):
                # branch-free: subtracting left * 0.0 leaves v bit-identical
                left = tree[2 * k]
                go = v >= left
                v -= left * go
                k = 2 * k + go
            i = k - M
            if i < m and N[i] > 0:
                break
        n = N[i]
        if v < n * b[i]:
            kind = CLONAL_BIRTH
            tgt = i
            delta = 1
        elif v < n * bd[i]:
            kind = DEATH
            tgt = i
            delta = -1
        else:
            kind = MUTANT_BIRTH
            x = rng.random() * nl
            j = int(x)
            if j >= nl:
                j = nl - 1
            if x - j >= alias_prob[j]:
                j = alias_idx[j]
            tgt = i + offs[j]
            if tgt >= m:
                tgt -= m
            elif tgt < 0:
                tgt += m
            delta = 1

        if ledger_on:
            close_site(t, tgt, m, N, R, pw, wr2, G_last, t_last, bN, up, up2, rdn, rdn2, A_int, Q_int)
            R[tgt] -= delta * t
        N[tgt] += delta
        n_total += delta
        w = delta * tot[tgt]
        k = M + tgt
        for _ in range(depth + 1):
            tree[k] += w
            k >>= 1

        if ledger_on:
            site_terms(N, b, d, tgt, bN, up, up2, rdn, rdn2)

        if delta < 0 and N[tgt] < thr_prime and np.isnan(hits[0]):
            hits[0] = t
        if m > 1 and np.isnan(hits[1]):
            lo = tgt - 1 if tgt > 0 else m - 1
            hi = tgt + 1 if tgt < m - 1 else 0
            c0 = max(N[tgt], 1)
            c1 = max(N[lo], 1)
            c2 = max(N[hi], 1)
            if c0 > ratio_L * c1 or c1 > ratio_L * c0 or c0 > ratio_L * c2 or c2 > ratio_L * c0:
                hits[1] = t

        if log_on:
            log_kind[n_log] = kind
            log_site[n_log] = i
            log_tgt[n_log] = tgt
            log_time[n_log] = t
            n_log += 1

        n_events += 1
        since += 1
        if since >= REBUILD_EVERY:
            since = 0
            rebuild(N, tot, tree, M)

    if ledger_on:
        close_all(t, N, R, pw, wr2, G_last, t_last, bN, up, up2, rdn, rdn2, A_int, Q_int)
    clock[0] = t
    clock[1] = pending
    counters[C_EVENTS] = n_events
    counters[C_TOTAL] = n_total
    counters[C_SINCE_REBUILD] = since
    counters[C_LOGGED] = n_log
    return status
