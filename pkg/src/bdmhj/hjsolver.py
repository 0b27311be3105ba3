"""Monotone Lax-Friedrichs solver for ``beta_t = b(x) - d(x) + p(x) * mgf(beta_x)`` on the torus.

The numerical Hamiltonian is

    Hhat(q-, q+) = H(x, (q- + q+)/2) + theta/2 * (q+ - q-),

which is nondecreasing in ``q+`` and nonincreasing in ``q-`` whenever
``theta >= |dH/dq|``. With forward Euler and ``dt <= dx/theta`` the update
``beta_j += dt * Hhat`` is then a monotone (order-preserving) map, hence it
converges to the viscosity solution.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .errors import CFLViolationError, ConfigError, NumericalError
from .model import GaussianKernel, MutationKernel, RateFunctions, TorusFunction

log = logging.getLogger(__name__)

__all__ = [
    "HjProblem",
    "SchemeParams",
    "HjState",
    "HjSolution",
    "hamiltonian",
    "numerical_hamiltonian",
    "gradient_bound",
    "make_params",
    "default_L_grad",
    "step",
    "solve",
]

THETA_MARGIN = 1.1
DEFAULT_CFL = 0.45
MAX_RESTARTS = 2


@dataclass(frozen=True)
class HjProblem:
    """Coefficients of the equation: rates and the mutation kernel."""

    rates: RateFunctions
    kernel: MutationKernel


@dataclass(frozen=True)
class SchemeParams:
    theta: float
    cfl: float = DEFAULT_CFL
    L_grad: float = math.inf
    dt: float | None = None  # manual step; must satisfy the CFL bound

    def __post_init__(self):
        if not self.theta >= 0:
            raise ConfigError("theta must be nonnegative")
        if not 0 < self.cfl <= 1:
            raise ConfigError("cfl must lie in (0, 1]")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be positive")

    def max_dt(self, dx: float) -> float:
        # theta = 0 only arises when H does not depend on the slope; Euler is then exact
        return self.cfl * dx / self.theta if self.theta > 0 else math.inf


@dataclass
class HjState:
    values: np.ndarray
    t: float = 0.0

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return 1.0 / self.n

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 2:
            raise ConfigError("HJ grid needs at least two points")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("non-finite values in HJ state")


@dataclass
class HjSolution:
    times: list
    values: list
    n: int
    params: SchemeParams
    max_gradient: float
    n_steps: int
    restarts: int = 0

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def at(self, t: float) -> np.ndarray:
        for s, v in zip(self.times, self.values):
            if abs(s - t) <= 1e-12 * max(1.0, abs(t)):
                return v
        raise KeyError(f"no snapshot at t={t}")


def _coeffs(problem):
    return problem.rates, problem.kernel


def hamiltonian(x, q, problem) -> float:
    """``b(x) - d(x) + p(x) * mgf(q)``."""
    rates, kernel = _coeffs(problem)
    pv = rates.p(x)
    if np.ndim(x) == 0 and np.ndim(q) == 0:
        base = float(rates.b(x) - rates.d(x))
        return base if pv == 0 else base + float(pv) * kernel.mgf(q)
    return rates.b(x) - rates.d(x) + pv * kernel.mgf_vec(q)


def numerical_hamiltonian(x, q_minus, q_plus, params: SchemeParams, problem):
    return hamiltonian(x, 0.5 * (q_minus + q_plus), problem) + 0.5 * params.theta * (q_plus - q_minus)


def _lip(f) -> float:
    return float(getattr(f, "lip", 0.0))


def gradient_bound(beta0: TorusFunction | np.ndarray, T: float, problem) -> float:
    """A priori bound on ``|beta_x|`` over ``[0, T]``.

    Differentiating the equation in x, the slope along characteristics obeys
    ``dq/dt = (b - d)'(x) + p'(x) mgf(q)``, so ``Q' = lip(b) + lip(d) + lip(p) * max mgf(+-Q)``
    with ``Q(0) = lip(beta0)`` dominates ``|beta_x|``.
    """
    rates, kernel = _coeffs(problem)
    if isinstance(beta0, TorusFunction):
        q = beta0.lip
    else:
        v = np.asarray(beta0, dtype=float)
        q = float(np.max(np.abs(np.roll(v, -1) - v)) * v.size)
    lb = _lip(rates.b) + _lip(rates.d)
    lp = _lip(rates.p)
    if lp == 0:
        return q + lb * T
    steps = 2000
    h = T / steps
    f = lambda Q: lb + lp * max(kernel.mgf(Q), kernel.mgf(-Q))
    for _ in range(steps):
        k1 = f(q)
        k2 = f(q + 0.5 * h * k1)
        k3 = f(q + 0.5 * h * k2)
        k4 = f(q + h * k3)
        q += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        if not math.isfinite(q) or q > 1e3:
            raise NumericalError("a priori gradient bound blows up; supply L_grad explicitly")
    return q


def default_L_grad(beta0) -> float:
    """``max(1, 1.2 * lip(beta0))``; validated a posteriori by :func:`solve`."""
    if isinstance(beta0, TorusFunction):
        lip = beta0.lip
    else:
        v = np.asarray(beta0, dtype=float)
        lip = float(np.max(np.abs(np.roll(v, -1) - v)) * v.size)
    return max(1.0, 1.2 * lip)


def make_params(problem, L_grad: float, cfl: float = DEFAULT_CFL, dt: float | None = None) -> SchemeParams:
    """Dissipation ``theta = 1.1 * p_max * max_{|q| <= L_grad} |mgf'(q)|``."""
    rates, kernel = _coeffs(problem)
    slope = rates.p_max * kernel.mgf_slope_bound(L_grad)
    theta = THETA_MARGIN * slope
    return SchemeParams(theta=theta, cfl=cfl, L_grad=float(L_grad), dt=dt)


# --------------------------------------------------------------------------
# kernels of the update; the exponential runs through numpy's vectorised exp


@njit(cache=True)
def _slopes(beta, inv_dx, qp, mid):
    n = beta.shape[0]
    for j in range(n - 1):
        qp[j] = (beta[j + 1] - beta[j]) * inv_dx
    qp[n - 1] = (beta[0] - beta[n - 1]) * inv_dx
    qm = qp[n - 1]
    g = 0.0
    for j in range(n):
        mid[j] = 0.5 * (qm + qp[j])
        a = abs(qp[j])
        if a > g:
            g = a
        qm = qp[j]
    return g


@njit(cache=True)
def _square_scale(mid, c, out):
    for j in range(mid.shape[0]):
        out[j] = c * mid[j] * mid[j]


@njit(cache=True)
def _update(beta, qp, mgf, base, p, dt, half_theta):
    n = beta.shape[0]
    qm = qp[n - 1]
    for j in range(n):
        beta[j] += dt * (base[j] + p[j] * mgf[j] + half_theta * (qp[j] - qm))
        qm = qp[j]


class _Stepper:
    def __init__(self, problem, n: int):
        rates, kernel = _coeffs(problem)
        x = np.arange(n) / n
        self.n = n
        self.base = np.ascontiguousarray(rates.b.sample(n) - rates.d.sample(n))
        self.p = np.ascontiguousarray(rates.p.sample(n))
        self.kernel = kernel
        self.gauss = isinstance(kernel, GaussianKernel)
        self.c = 0.5 * kernel.sigma ** 2 if self.gauss else 0.0
        self.qp = np.empty(n)
        self.mid = np.empty(n)
        self.buf = np.empty(n)
        self.x = x

    def advance(self, beta: np.ndarray, dt: float, theta: float, nsteps: int, L_grad: float) -> tuple[float, int]:
        """Apply ``nsteps`` updates in place; stop early once a slope exceeds ``L_grad``."""
        inv_dx = float(self.n)
        gmax = 0.0
        for k in range(nsteps):
            g = _slopes(beta, inv_dx, self.qp, self.mid)
            gmax = max(gmax, g)
            if g > L_grad * (1 + 1e-9):
                return gmax, k
            if self.gauss:
                _square_scale(self.mid, self.c, self.buf)
                np.exp(self.buf, out=self.buf)
            else:
                self.buf[:] = self.kernel.mgf_vec(self.mid)
            _update(beta, self.qp, self.buf, self.base, self.p, dt, 0.5 * theta)
        return gmax, nsteps


def step(state: HjState, params: SchemeParams, problem, dt: float | None = None) -> HjState:
    """One forward-Euler step; raises :class:`CFLViolationError` if ``dt`` exceeds ``cfl*dx/theta``."""
    dt = params.dt if dt is None else dt
    limit = params.max_dt(state.dx)
    if dt is None:
        dt = limit
    if not math.isfinite(dt):
        raise ConfigError("no step limit applies (theta = 0); pass dt explicitly")
    if dt > limit * (1 + 1e-12):
        raise CFLViolationError(f"dt={dt:.6g} exceeds cfl*dx/theta={limit:.6g}")
    st = _Stepper(problem, state.n)
    beta = state.values.copy()
    st.advance(beta, dt, params.theta, 1, math.inf)
    if not np.all(np.isfinite(beta)):
        raise NumericalError("non-finite values after HJ step")
    return HjState(beta, state.t + dt)


def _sample(beta0, n: int) -> np.ndarray:
    if isinstance(beta0, TorusFunction):
        return beta0.sample(n)
    v = np.asarray(beta0, dtype=float)
    if v.shape != (n,):
        raise ConfigError(f"initial data has shape {v.shape}, expected ({n},)")
    return v.copy()


def solve(beta0, T: float, params: SchemeParams | None, problem, n: int = 512,
          snapshots: Sequence[float] | None = None, L_grad: float | None = None,
          cfl: float = DEFAULT_CFL) -> HjSolution:
    """March from ``beta0`` to time ``T`` on an ``n``-point grid.

    Without ``params`` the dissipation is sized from ``L_grad``, defaulting to
    :func:`default_L_grad`; :func:`gradient_bound` gives a rigorous but usually
    far larger value, and since theta grows like ``q exp(q^2/2)`` for a Gaussian
    kernel an oversized bound costs both accuracy and run time. Within each snapshot interval the step is uniform,
    ``dt = interval / ceil(interval / dt_max)``. If a slope exceeds ``L_grad`` the
    run restarts with ``L_grad`` raised to 1.5 times the observed slope (at most
    twice, with a warning each time).
    """
    if T < 0:
        raise ConfigError("T must be nonnegative")
    if n < 2:
        raise ConfigError("n must be at least 2")
    v0 = _sample(beta0, n)
    if not np.all(np.isfinite(v0)):
        raise ConfigError("initial data must be finite")
    times = sorted({0.0, float(T)} | {float(s) for s in (snapshots or ()) if 0 <= s <= T})
    if params is None:
        L = default_L_grad(beta0 if isinstance(beta0, TorusFunction) else v0) if L_grad is None else L_grad
        L = max(L, 1e-6)
        params = make_params(problem, L, cfl)
    dx = 1.0 / n
    if params.dt is not None and params.dt > params.max_dt(dx) * (1 + 1e-12):
        raise CFLViolationError(f"dt={params.dt:.6g} exceeds cfl*dx/theta={params.max_dt(dx):.6g}")
    st = _Stepper(problem, n)
    restarts = 0
    while True:
        beta = v0.copy()
        out_t, out_v = [0.0], [v0.copy()]
        dt_max = params.dt or params.max_dt(dx)
        gmax = float(np.max(np.abs(np.roll(v0, -1) - v0)) * n)
        total = 0
        ok = gmax <= params.L_grad * (1 + 1e-9)
        for a, b in zip(times[:-1], times[1:]):
            if not ok:
                break
            k = max(1, math.ceil((b - a) / dt_max * (1 - 1e-14)))
            dt = (b - a) / k
            g, done = st.advance(beta, dt, params.theta, k, params.L_grad)
            gmax = max(gmax, g)
            total += done
            if done < k:
                ok = False
                break
            if not np.all(np.isfinite(beta)):
                raise NumericalError("non-finite values in HJ solution")
            out_t.append(b)
            out_v.append(beta.copy())
        if ok:
            final_g = float(np.max(np.abs(np.roll(beta, -1) - beta)) * n)
            gmax = max(gmax, final_g)
            if gmax <= params.L_grad * (1 + 1e-9):
                return HjSolution(out_t, out_v, n, params, gmax, total, restarts)
        if restarts >= MAX_RESTARTS or params.dt is not None:
            raise NumericalError(f"gradient {gmax:.6g} exceeded L_grad={params.L_grad:.6g} "
                                 f"after {restarts} restart(s)")
        restarts += 1
        newL = 1.5 * gmax
        warnings.warn(f"HJ gradient {gmax:.4g} exceeded L_grad {params.L_grad:.4g}; "
                      f"restarting with L_grad={newL:.4g}", RuntimeWarning, stacklevel=2)
        params = replace(make_params(problem, newL, params.cfl), cfl=params.cfl)
