"""Trait space, rate functions, mutation kernels and scaling arithmetic.

Traits live on the one-dimensional torus, represented by ``[0, 1)``, and are
discretised on the grid ``{i/m : 0 <= i < m}``. A mutant born to a parent at
site ``i`` lands at ``(i + l) mod m``. The offset ``l`` ranges over
``[-(m//2), m - 1 - m//2]`` with weights ``h * G(h * l)``, where
``h = log(K) / m`` is the mutation step measured in units of ``1/log K``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import mpmath
import numpy as np
from scipy import integrate, special

from .errors import AssumptionWarning, ConfigError, NumericalError

__all__ = [
    "torus_distance",
    "wrap_half",
    "wrap_offset",
    "offset_range",
    "TorusFunction",
    "ConstantFunction",
    "CosineFunction",
    "TentFunction",
    "TabulatedFunction",
    "RateFunctions",
    "MutationKernel",
    "GaussianKernel",
    "BumpKernel",
    "TabulatedKernel",
    "CallableKernel",
    "ScalingParams",
    "ModelSpec",
    "AssumptionCheck",
    "GbarResult",
    "delta_rule",
    "mutation_rate",
    "kernel_mgf",
    "riemann_sum",
    "gbar",
]

TAIL_REL_TOL = 1e-14
OVERFLOW_GUARD = 1e300


# --------------------------------------------------------------------------
# torus geometry


def torus_distance(x, y):
    """Wrap-around distance on [0, 1); accepts scalars or arrays."""
    diff = np.abs(np.mod(x, 1.0) - np.mod(y, 1.0))
    out = np.minimum(diff, 1.0 - diff)
    return float(out) if np.ndim(out) == 0 else out


def wrap_half(z):
    """Representative of ``z`` modulo 1 in ``[-1/2, 1/2)``."""
    out = z - np.floor(np.asarray(z, dtype=float) + 0.5)
    return float(out) if np.ndim(out) == 0 else out


def wrap_offset(k, m: int):
    """Integer analogue of :func:`wrap_half`: ``k mod m`` shifted into the offset range."""
    half = m // 2
    return (np.asarray(k) + half) % m - half if np.ndim(k) else (int(k) + half) % m - half


def offset_range(m: int) -> np.ndarray:
    """Mutation offsets ``-(m//2), ..., m-1-m//2``."""
    lo = -(m // 2)
    return np.arange(lo, lo + m, dtype=np.int64)


# --------------------------------------------------------------------------
# periodic functions on the torus (rates and initial profiles)


class TorusFunction:
    """A 1-periodic real function with known Lipschitz constant and bounds."""

    lip: float
    upper: float
    lower: float

    def __call__(self, x):
        raise NotImplementedError

    def sample(self, m: int) -> np.ndarray:
        return np.asarray(self(np.arange(m) / m), dtype=float) * np.ones(m)

    def observed_lipschitz(self, m: int) -> float:
        """Largest adjacent difference quotient on the m-point grid (with wraparound)."""
        v = self.sample(m)
        return float(np.max(np.abs(np.roll(v, -1) - v)) * m) if m > 1 else 0.0

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantFunction(TorusFunction):
    value: float

    def __call__(self, x):
        return np.full(np.shape(x), float(self.value)) if np.ndim(x) else float(self.value)

    @property
    def lip(self):
        return 0.0

    @property
    def upper(self):
        return float(self.value)

    @property
    def lower(self):
        return float(self.value)

    def describe(self):
        return {"preset": "constant", "value": self.value}


@dataclass(frozen=True)
class CosineFunction(TorusFunction):
    """``mean + amplitude * cos(2*pi*frequency*(x - phase))``."""

    mean: float
    amplitude: float
    phase: float = 0.0
    frequency: int = 1

    def __call__(self, x):
        return self.mean + self.amplitude * np.cos(2 * np.pi * self.frequency * (np.asarray(x) - self.phase))

    @property
    def lip(self):
        return 2 * np.pi * abs(self.frequency) * abs(self.amplitude)

    @property
    def upper(self):
        return self.mean + abs(self.amplitude)

    @property
    def lower(self):
        return self.mean - abs(self.amplitude)

    def describe(self):
        return {"preset": "cosine", "mean": self.mean, "amplitude": self.amplitude,
                "phase": self.phase, "frequency": self.frequency}


@dataclass(frozen=True)
class TentFunction(TorusFunction):
    """Piecewise-linear bump: ``base + height * max(0, 1 - rho(x, center)/half_width)``."""

    base: float
    height: float
    center: float = 0.5
    half_width: float = 0.25

    def __post_init__(self):
        if not 0 < self.half_width <= 0.5:
            raise ConfigError("tent half_width must lie in (0, 0.5]")

    def __call__(self, x):
        r = torus_distance(np.asarray(x, dtype=float), self.center)
        return self.base + self.height * np.maximum(0.0, 1.0 - np.asarray(r) / self.half_width)

    @property
    def lip(self):
        return abs(self.height) / self.half_width

    @property
    def upper(self):
        return self.base + max(self.height, 0.0)

    @property
    def lower(self):
        return self.base + min(self.height, 0.0)

    def describe(self):
        return {"preset": "tent", "base": self.base, "height": self.height,
                "center": self.center, "half_width": self.half_width}


class TabulatedFunction(TorusFunction):
    """Values on a uniform periodic grid, linearly interpolated.

    ``lip`` defaults to the exact Lipschitz constant of the interpolant; a
    declared value is checked against it.
    """

    def __init__(self, values: Sequence[float], lip: float | None = None, source: str | None = None):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 2:
            raise ConfigError("tabulated function needs at least two values")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("tabulated function has non-finite values")
        n = self.values.size
        exact = float(np.max(np.abs(np.roll(self.values, -1) - self.values)) * n)
        if lip is not None and lip < exact * (1 - 1e-9):
            raise ConfigError(f"declared Lipschitz constant {lip} below observed {exact}")
        self.lip = exact if lip is None else float(lip)
        self.upper = float(self.values.max())
        self.lower = float(self.values.min())
        self.source = source

    def __call__(self, x):
        n = self.values.size
        s = np.mod(np.asarray(x, dtype=float), 1.0) * n
        i = np.floor(s).astype(np.int64) % n
        frac = s - np.floor(s)
        out = self.values[i] * (1 - frac) + self.values[(i + 1) % n] * frac
        return float(out) if np.ndim(out) == 0 else out

    @classmethod
    def from_file(cls, path, lip=None):
        return cls(np.loadtxt(path, dtype=float, ndmin=1), lip=lip, source=str(path))

    def describe(self):
        if self.source:
            return {"table": self.source}
        return {"values": self.values.tolist()}


@dataclass(frozen=True)
class RateFunctions:
    """Per-capita clonal birth ``b``, death ``d`` and mutant-birth ``p`` rates."""

    b: TorusFunction
    d: TorusFunction
    p: TorusFunction

    @property
    def b_max(self):
        return self.b.upper

    @property
    def d_max(self):
        return self.d.upper

    @property
    def p_max(self):
        return self.p.upper

    @property
    def p_min(self):
        return self.p.lower

    def check(self, m: int) -> list["AssumptionCheck"]:
        x = np.arange(m) / m
        b, d, p = self.b.sample(m), self.d.sample(m), self.p.sample(m)
        checks = []
        ok = bool(np.all(b > d)) and bool(np.all(d >= 0))
        worst = float(np.min(b - d))
        checks.append(AssumptionCheck(
            "supercritical", "pass" if ok else "fail",
            f"min_i b-d = {worst:.6g} at x = {x[int(np.argmin(b - d))]:.4g}"))
        ok = bool(np.all(p > 0)) and self.p_min > 0
        checks.append(AssumptionCheck("mutation_positive", "pass" if ok else "fail",
                                      f"min_i p = {p.min():.6g}, declared p_min = {self.p_min:.6g}"))
        for name, f, v in (("b", self.b, b), ("d", self.d, d), ("p", self.p, p)):
            ok = v.max() <= f.upper * (1 + 1e-12) + 1e-300 and v.min() >= f.lower - 1e-12 * abs(f.lower)
            checks.append(AssumptionCheck(f"{name}_bounds", "pass" if ok else "fail",
                                          f"sampled [{v.min():.6g}, {v.max():.6g}] vs declared "
                                          f"[{f.lower:.6g}, {f.upper:.6g}]"))
            obs = f.observed_lipschitz(m)
            ok = obs <= f.lip * (1 + 1e-9) + 1e-12
            checks.append(AssumptionCheck(f"{name}_lipschitz", "pass" if ok else "fail",
                                          f"observed {obs:.6g} vs declared {f.lip:.6g}"))
        return checks


# --------------------------------------------------------------------------
# mutation kernels


class MutationKernel:
    """Probability density of the (rescaled) mutation displacement.

    Subclasses provide ``density``; the base class supplies quadrature-backed
    moment generating functions. Integrals are truncated at ``|h| <= H`` where
    ``G(H) e^{|q| H}`` falls below ``1e-14`` of the running estimate, which is
    sound because the density is monotone beyond ``tail_radius``.
    """

    tail_radius: float = 0.0
    symmetric: bool = False
    support: tuple[float, float] | None = None

    def density(self, h):
        raise NotImplementedError

    def __call__(self, h):
        return self.density(h)

    # -- quadrature helpers

    def _truncation(self, rate: float) -> tuple[float, float]:
        """Integration window for an integrand bounded by ``G(h) e^{rate |h|}``."""
        if self.support is not None:
            return self.support
        H = max(self.tail_radius, 1.0)
        for _ in range(80):
            tails = [float(self.density(s * H)) * math.exp(min(rate * H, 700.0)) for s in (-1.0, 1.0)]
            est, _err = integrate.quad(lambda y: self.density(y) * math.exp(rate * abs(y)), -H, H,
                                       limit=200, epsabs=0.0, epsrel=1e-12)
            if max(tails) < TAIL_REL_TOL * max(est, 1e-300):
                return -H, H
            H *= 1.5
        raise NumericalError(f"could not bound kernel tail for exponential rate {rate}")

    def _quad(self, func, rate: float) -> float:
        lo, hi = self._truncation(rate)
        pts = [0.0] if lo < 0 < hi else None
        val, err, info = integrate.quad(func, lo, hi, limit=400, epsabs=0.0, epsrel=1e-13,
                                        points=pts, full_output=True)[:3]
        if not np.isfinite(val) or err > 1e-8 * max(abs(val), 1e-300):
            raise NumericalError(f"kernel quadrature did not converge: value={val}, "
                                 f"abserr={err}, neval={info.get('neval')}, window=[{lo}, {hi}]")
        return float(val)

    # -- public moments

    def normalization(self) -> float:
        return self._quad(lambda y: float(self.density(y)), 0.0)

    def mgf(self, q: float) -> float:
        """``int G(h) e^{q h} dh``."""
        q = float(q)
        return self._quad(lambda y: float(self.density(y)) * math.exp(q * y), abs(q))

    def mgf_prime(self, q: float) -> float:
        q = float(q)
        return self._quad(lambda y: y * float(self.density(y)) * math.exp(q * y), abs(q) + 1.0)

    def exp_moment(self, alpha: float) -> float:
        """``int e^{alpha |y|} G(y) dy``."""
        alpha = float(alpha)
        return self._quad(lambda y: float(self.density(y)) * math.exp(alpha * abs(y)), abs(alpha))

    def mgf_vec(self, q) -> np.ndarray:
        """Vectorised mgf on a fixed composite Gauss-Legendre rule."""
        q = np.asarray(q, dtype=float)
        qmax = float(np.max(np.abs(q))) if q.size else 0.0
        nodes, weights = self._nodes(qmax)
        gw = weights * np.asarray(self.density(nodes), dtype=float)
        return np.exp(np.multiply.outer(q, nodes)) @ gw

    def mgf_slope_bound(self, qmax: float) -> float:
        """``max_{|q| <= qmax} |mgf'(q)|``; mgf' is increasing so the endpoints suffice."""
        return max(abs(self.mgf_prime(qmax)), abs(self.mgf_prime(-qmax)))

    def _nodes(self, qmax: float):
        key = round(qmax, 6)
        cache = self.__dict__.setdefault("_node_cache", {})
        if key not in cache:
            lo, hi = self._truncation(qmax + 1.0)
            edges = np.linspace(lo, hi, 129)
            x, w = np.polynomial.legendre.leggauss(16)
            half = 0.5 * np.diff(edges)
            mid = 0.5 * (edges[1:] + edges[:-1])
            nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
            weights = (half[:, None] * w[None, :]).ravel()
            cache[key] = (nodes, weights)
        return cache[key]

    def riemann_defect(self, h: float, m: int):
        """``sum_l h G(h l) - 1`` over the offset range of an m-site grid, as an mpmath number."""
        return mpmath.mpf(riemann_sum(self, h, m)) - 1

    def check(self) -> list["AssumptionCheck"]:
        checks = []
        norm = self.normalization()
        checks.append(AssumptionCheck("kernel_normalized", "pass" if abs(norm - 1) < 1e-8 else "fail",
                                      f"int G = {norm:.15g}"))
        R = self.tail_radius
        span = max(R, 1.0) * 8
        hs = np.linspace(R, R + span, 2001)
        right = np.asarray(self.density(hs), dtype=float)
        left = np.asarray(self.density(-hs), dtype=float)
        mono = bool(np.all(np.diff(right) <= 1e-15) and np.all(np.diff(left) <= 1e-15))
        checks.append(AssumptionCheck("kernel_monotone_tails", "pass" if mono else "fail",
                                      f"sampled on [{R}, {R + span}] and mirror"))
        nonneg = bool(np.all(right >= 0) and np.all(left >= 0)
                      and np.all(np.asarray(self.density(np.linspace(-R, R, 2001))) >= 0))
        checks.append(AssumptionCheck("kernel_nonnegative", "pass" if nonneg else "fail", ""))
        return checks

    def describe(self) -> dict:
        raise NotImplementedError


class GaussianKernel(MutationKernel):
    """Centered normal density with standard deviation ``sigma``; moments in closed form."""

    symmetric = True

    def __init__(self, sigma: float = 1.0):
        if not sigma > 0:
            raise ConfigError("kernel.sigma must be positive")
        self.sigma = float(sigma)
        self.tail_radius = 0.0
        self._c = 1.0 / (math.sqrt(2 * math.pi) * self.sigma)

    def density(self, h):
        h = np.asarray(h, dtype=float)
        out = self._c * np.exp(-0.5 * (h / self.sigma) ** 2)
        return float(out) if out.ndim == 0 else out

    def mgf(self, q):
        v = 0.5 * (self.sigma * float(q)) ** 2
        if v > 709:
            raise NumericalError(f"mgf overflows at q={q}")
        return math.exp(v)

    def mgf_prime(self, q):
        return self.sigma ** 2 * float(q) * self.mgf(q)

    def mgf_vec(self, q):
        return np.exp(0.5 * (self.sigma * np.asarray(q, dtype=float)) ** 2)

    def mgf_slope_bound(self, qmax):
        return abs(self.mgf_prime(abs(qmax)))

    def exp_moment(self, alpha):
        a = float(alpha) * self.sigma
        if 0.5 * a * a > 709:
            raise NumericalError(f"exponential moment overflows at alpha={alpha}")
        return 2.0 * math.exp(0.5 * a * a) * float(special.ndtr(a))

    def normalization(self):
        return 1.0

    def riemann_defect(self, h, m):
        # Poisson summation: sum over all of Z equals 1 + 2 sum_k exp(-2 pi^2 k^2 sigma^2 / h^2);
        # the defect over the finite range subtracts the two excluded tails.
        with mpmath.workdps(40):
            h = mpmath.mpf(h)
            s = mpmath.mpf(self.sigma)
            c = 1 / (mpmath.sqrt(2 * mpmath.pi) * s)
            aliasing = mpmath.mpf(0)
            k = 1
            while True:
                t = 2 * mpmath.exp(-2 * mpmath.pi ** 2 * k ** 2 * s ** 2 / h ** 2)
                aliasing += t
                if t < aliasing * mpmath.mpf(10) ** -35:
                    break
                k += 1
            lo = -(m // 2)
            hi = lo + m - 1
            tails = mpmath.mpf(0)
            for start, step in ((hi + 1, 1), (lo - 1, -1)):
                ell = start
                while True:
                    t = h * c * mpmath.exp(-(h * ell) ** 2 / (2 * s ** 2))
                    tails += t
                    if t < tails * mpmath.mpf(10) ** -35:
                        break
                    ell += step
            return +(aliasing - tails)

    def describe(self):
        return {"type": "gaussian", "sigma": self.sigma}


class BumpKernel(MutationKernel):
    """Smooth compactly supported density ``C exp(-1/(1 - (h/r)^2))`` on ``(-r, r)``."""

    symmetric = True

    def __init__(self, radius: float = 1.0):
        if not radius > 0:
            raise ConfigError("kernel.radius must be positive")
        self.radius = float(radius)
        self.tail_radius = self.radius
        self.support = (-self.radius, self.radius)
        self._c = 1.0
        z, _ = integrate.quad(self._raw, -self.radius, self.radius, epsabs=0.0, epsrel=1e-13, limit=200)
        self._c = 1.0 / z

    def _raw(self, h):
        u = h / self.radius
        return math.exp(-1.0 / (1.0 - u * u)) if abs(u) < 1 else 0.0

    def density(self, h):
        h = np.asarray(h, dtype=float)
        u = h / self.radius
        inside = np.abs(u) < 1
        out = np.zeros_like(u)
        out[inside] = self._c * np.exp(-1.0 / (1.0 - u[inside] ** 2))
        return float(out) if out.ndim == 0 else out

    def normalization(self):
        z, _ = integrate.quad(lambda y: float(self.density(y)), -self.radius, self.radius,
                              epsabs=0.0, epsrel=1e-13, limit=200)
        return z

    def describe(self):
        return {"type": "bump", "radius": self.radius}


class TabulatedKernel(MutationKernel):
    """Density given on a grid of displacements, linearly interpolated, zero outside.

    ``tail_radius`` is user supplied and used only for the monotone-tail check.
    """

    def __init__(self, h_grid, values, tail_radius: float, normalize: bool = False, source=None):
        h_grid = np.asarray(h_grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if h_grid.ndim != 1 or h_grid.shape != values.shape or h_grid.size < 3:
            raise ConfigError("tabulated kernel needs matching 1-d grid and values (>= 3 points)")
        if np.any(np.diff(h_grid) <= 0):
            raise ConfigError("tabulated kernel grid must be strictly increasing")
        if np.any(values < 0):
            raise ConfigError("tabulated kernel has negative density values")
        trapezoid = getattr(np, "trapezoid", None) or np.trapz
        total = float(trapezoid(values, h_grid))
        if normalize:
            values = values / total
        elif abs(total - 1) > 1e-6:
            raise ConfigError(f"tabulated kernel integrates to {total}, not 1")
        self.h_grid, self.values = h_grid, values
        self.tail_radius = float(tail_radius)
        self.support = (float(h_grid[0]), float(h_grid[-1]))
        self.source = source

    def density(self, h):
        out = np.interp(h, self.h_grid, self.values, left=0.0, right=0.0)
        return float(out) if np.ndim(out) == 0 else out

    def _quad(self, func, rate):
        # break points at the table nodes keep quad exact-ish on the piecewise-linear density
        total = 0.0
        for a, b in zip(self.h_grid[:-1], self.h_grid[1:]):
            v, err = integrate.quad(func, a, b, epsabs=0.0, epsrel=1e-13)
            total += v
        if not np.isfinite(total):
            raise NumericalError("tabulated kernel quadrature overflow")
        return total

    def describe(self):
        if self.source:
            return {"type": "table", "path": self.source, "tail_radius": self.tail_radius}
        return {"type": "table", "h": self.h_grid.tolist(), "values": self.values.tolist(),
                "tail_radius": self.tail_radius}


class CallableKernel(MutationKernel):
    """Wrap an arbitrary vectorised density with a declared monotone-tail radius."""

    def __init__(self, density: Callable, tail_radius: float, symmetric: bool = False):
        self._f = density
        self.tail_radius = float(tail_radius)
        self.symmetric = symmetric

    def density(self, h):
        out = np.asarray(self._f(np.asarray(h, dtype=float)), dtype=float)
        return float(out) if out.ndim == 0 else out

    def describe(self):
        return {"type": "callable", "tail_radius": self.tail_radius}


# --------------------------------------------------------------------------
# scaling parameters


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    status: str  # "pass" | "warn" | "fail"
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "pass"


def delta_rule(K: float, c: float = 1.0, exponent: float = 1.5) -> int:
    """Number of grid sites ``m = round((log K)^exponent / c)``, i.e. delta_K = c/(log K)^exponent."""
    if K <= 1:
        raise ConfigError("K must exceed 1")
    return max(2, int(round(math.log(K) ** exponent / c)))


@dataclass(frozen=True)
class ScalingParams:
    """Scaling parameters; the grid is given by its integer size ``m = 1/delta_K``."""

    K: float
    m: int
    a1: float = 0.5
    a: float = 0.4
    a2: float = 0.3
    L: float = 20.0

    def __post_init__(self):
        errors = []
        if not (isinstance(self.m, (int, np.integer)) and self.m >= 2):
            errors.append(("scaling.m", f"must be an integer >= 2, got {self.m!r}"))
        if not self.K > 1:
            errors.append(("scaling.K", f"must exceed 1, got {self.K!r}"))
        if not self.a1 > 0:
            errors.append(("scaling.a1", "must be positive"))
        if not self.L > 0:
            errors.append(("scaling.L", "must be positive"))
        if errors:
            raise ConfigError("", errors)

    @property
    def delta(self) -> float:
        return 1.0 / self.m

    @property
    def log_k(self) -> float:
        return math.log(self.K)

    @property
    def h(self) -> float:
        return self.log_k / self.m

    def check(self) -> list[AssumptionCheck]:
        lk = self.log_k
        out = [
            AssumptionCheck("a2 < a < a1", "pass" if self.a2 < self.a < self.a1 else "fail",
                            f"a2={self.a2}, a={self.a}, a1={self.a1}"),
            AssumptionCheck("h_K < 1", "pass" if self.h < 1 else "fail", f"h_K = {self.h:.6g}"),
            AssumptionCheck("delta_K < 1/log K", "pass" if self.delta < 1 / lk else "fail",
                            f"delta_K = {self.delta:.6g}, 1/log K = {1 / lk:.6g}"),
            AssumptionCheck("K^(-a2/4) < delta_K",
                            "pass" if self.K ** (-self.a2 / 4) < self.delta else "fail",
                            f"K^(-a2/4) = {self.K ** (-self.a2 / 4):.6g}, delta_K = {self.delta:.6g}"),
        ]
        return out

    def with_K(self, K: float, m: int) -> "ScalingParams":
        return ScalingParams(K=K, m=m, a1=self.a1, a=self.a, a2=self.a2, L=self.L)


# --------------------------------------------------------------------------
# full model specification


@dataclass(frozen=True)
class ModelSpec:
    """Kernel, rates and scaling, plus cached grid quantities used by the simulators."""

    kernel: MutationKernel
    rates: RateFunctions
    scaling: ScalingParams
    strict: bool = False
    checks: tuple = field(default=(), compare=False)

    def __post_init__(self):
        found = tuple(self.rates.check(self.scaling.m)) + tuple(self.scaling.check())
        object.__setattr__(self, "checks", found)
        bad = [c for c in found if not c.ok]
        if bad:
            msg = "; ".join(f"{c.name} ({c.detail})" for c in bad)
            if self.strict:
                raise ConfigError("assumption check failed: " + msg,
                                  [(f"assumption.{c.name}", c.detail) for c in bad])
            warnings.warn("assumption check failed: " + msg, AssumptionWarning, stacklevel=3)

    @property
    def m(self) -> int:
        return self.scaling.m

    @property
    def log_k(self) -> float:
        return self.scaling.log_k

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.m) / self.m

    @cached_property
    def b(self) -> np.ndarray:
        return self.rates.b.sample(self.m)

    @cached_property
    def d(self) -> np.ndarray:
        return self.rates.d.sample(self.m)

    @cached_property
    def p(self) -> np.ndarray:
        return self.rates.p.sample(self.m)

    @cached_property
    def offsets(self) -> np.ndarray:
        return offset_range(self.m)

    @cached_property
    def offset_weights(self) -> np.ndarray:
        """``h G(h l)`` for each offset ``l``."""
        h = self.scaling.h
        return h * np.asarray(self.kernel.density(h * self.offsets), dtype=float)

    @cached_property
    def s_k(self) -> float:
        """Total mutation mass per unit ``p``: ``sum_l h G(h l)``."""
        return math.fsum(self.offset_weights)

    def with_scaling(self, scaling: ScalingParams) -> "ModelSpec":
        return ModelSpec(self.kernel, self.rates, scaling, self.strict)


def mutation_rate(i: int, j: int, spec: ModelSpec) -> float:
    """Rate at which one individual at site ``i`` gives birth to a mutant at site ``j``."""
    m = spec.m
    if not (0 <= i < m and 0 <= j < m):
        raise ConfigError(f"site index out of range [0, {m}): i={i}, j={j}")
    ell = wrap_offset(j - i, m)
    h = spec.scaling.h
    return float(spec.p[i]) * h * float(spec.kernel.density(h * ell))


def kernel_mgf(q: float, kernel: MutationKernel) -> float:
    return kernel.mgf(q)


def riemann_sum(kernel: MutationKernel, h: float, m: int, alpha: float = 0.0) -> float:
    """``sum_l h G(h l) e^{alpha h |l|}`` over the offset range of an m-site grid."""
    ell = offset_range(m)
    g = np.asarray(kernel.density(h * ell), dtype=float)
    with np.errstate(over="ignore"):
        terms = h * g * np.exp(alpha * h * np.abs(ell))
    total = math.fsum(terms) if np.all(np.isfinite(terms)) else math.inf
    if not np.isfinite(total) or total > OVERFLOW_GUARD:
        raise NumericalError(f"discrete exponential-moment sum diverges (alpha={alpha}, h={h}, m={m})")
    return total


@dataclass(frozen=True)
class GbarResult:
    alpha: float
    discrete_sup: float
    continuum: float
    per_k: tuple  # ((K, m, value), ...)


def gbar(alpha: float, kernel: MutationKernel, grids: Sequence[tuple[float, int]]) -> GbarResult:
    """Supremum over ``(K, m)`` grids of the discrete exponential-moment sum, and its continuum limit."""
    if alpha < 0:
        raise ConfigError("alpha must be nonnegative")
    per_k = []
    for K, m in grids:
        h = math.log(K) / m
        per_k.append((float(K), int(m), riemann_sum(kernel, h, m, alpha)))
    cont = kernel.exp_moment(alpha)
    if not np.isfinite(cont) or cont > OVERFLOW_GUARD:
        raise NumericalError(f"continuum exponential moment diverges at alpha={alpha}")
    sup = max((v for _, _, v in per_k), default=float("nan"))
    return GbarResult(float(alpha), sup, cont, tuple(per_k))
