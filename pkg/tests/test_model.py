import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bdmhj.errors import AssumptionWarning, ConfigError
from bdmhj.model import (BumpKernel, CallableKernel, ConstantFunction, CosineFunction, GaussianKernel,
                         ModelSpec, RateFunctions, ScalingParams, TabulatedFunction, TabulatedKernel,
                         TentFunction, delta_rule, gbar, kernel_mgf, mutation_rate, offset_range,
                         riemann_sum, torus_distance, wrap_half, wrap_offset)

from conftest import constant_rates, make_spec

unit = st.floats(0.0, 1.0, exclude_max=True, allow_nan=False)


# -- torus geometry


@pytest.mark.parametrize("x,y,expected", [(0.1, 0.9, 0.2), (0.3, 0.3, 0.0), (0.0, 0.5, 0.5)])
def test_torus_distance_examples(x, y, expected):
    assert torus_distance(x, y) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("z,expected", [(0.7, -0.3), (0.0, 0.0), (1.0, 0.0), (0.5, -0.5), (-0.5, -0.5)])
def test_wrap_half_examples(z, expected):
    assert wrap_half(z) == pytest.approx(expected, abs=1e-15)


@given(unit, unit, unit)
def test_torus_distance_is_a_metric(x, y, z):
    assert torus_distance(x, y) == torus_distance(y, x)
    assert 0 <= torus_distance(x, y) <= 0.5
    assert torus_distance(x, z) <= torus_distance(x, y) + torus_distance(y, z) + 1e-15


@given(st.integers(2, 200), st.data())
def test_wrap_half_matches_distance_on_grid(m, data):
    i = data.draw(st.integers(0, m - 1))
    j = data.draw(st.integers(0, m - 1))
    x, y = i / m, j / m
    assert abs(wrap_half(x - y)) == pytest.approx(torus_distance(x, y), abs=1e-12)
    # integer version agrees with the real one on grid points
    assert wrap_offset(i - j, m) / m == pytest.approx(wrap_half((i - j) / m), abs=1e-12) or \
        abs(wrap_offset(i - j, m) / m) == 0.5


def test_offset_range_shape():
    assert offset_range(4).tolist() == [-2, -1, 0, 1]
    assert offset_range(5).tolist() == [-2, -1, 0, 1, 2]


# -- rate functions


def test_presets_and_bounds():
    c = CosineFunction(2.0, 0.5)
    assert c(0.0) == pytest.approx(2.5)
    assert c(0.5) == pytest.approx(1.5)
    assert c.lip == pytest.approx(math.pi)
    assert c.observed_lipschitz(1000) <= c.lip + 1e-9
    t = TentFunction(1.0, 0.5, center=0.5, half_width=0.25)
    assert t(0.5) == pytest.approx(1.5)
    assert t(0.0) == pytest.approx(1.0)
    assert t.lip == pytest.approx(2.0)


def test_tabulated_function_interpolates_periodically(tmp_path):
    f = TabulatedFunction([0.0, 1.0, 0.0, -1.0])
    assert f(0.125) == pytest.approx(0.5)
    assert f(0.875) == pytest.approx(-0.5)
    assert f(1.0) == pytest.approx(0.0)
    p = tmp_path / "vals.txt"
    p.write_text("1\n2\n3\n")
    g = TabulatedFunction.from_file(p)
    assert g.sample(3).tolist() == [1.0, 2.0, 3.0]


def test_supercriticality_failure_reported():
    rates = RateFunctions(ConstantFunction(1.0), ConstantFunction(1.0), ConstantFunction(1.0))
    checks = {c.name: c for c in rates.check(8)}
    assert checks["supercritical"].status == "fail"
    with pytest.raises(ConfigError):
        ModelSpec(GaussianKernel(), rates, ScalingParams(K=1e3, m=7), strict=True)
    with pytest.warns(AssumptionWarning):
        ModelSpec(GaussianKernel(), rates, ScalingParams(K=1e3, m=7))


def test_declared_lipschitz_checked_against_samples():
    with pytest.raises(ConfigError, match="Lipschitz"):
        TabulatedFunction([2.0, 3.0, 2.0, 3.0], lip=0.1)
    rates = RateFunctions(CosineFunction(2.0, 0.5), ConstantFunction(1.0), ConstantFunction(1.0))
    checks = {c.name: c for c in rates.check(64)}
    assert checks["b_lipschitz"].ok and checks["b_bounds"].ok


# -- scaling


def test_scaling_example_upper_bound_passes():
    K = math.exp(10.0)
    sc = ScalingParams(K=K, m=20)  # delta = 1/(2 log K) = 0.05
    assert sc.delta == pytest.approx(0.05)
    checks = {c.name: c for c in sc.check()}
    assert checks["delta_K < 1/log K"].ok
    assert sc.h == pytest.approx(0.5)


def test_scaling_rejects_non_integer_m():
    with pytest.raises(ConfigError) as ei:
        ScalingParams(K=1e3, m=7.5)
    assert ei.value.errors[0][0] == "scaling.m"


@pytest.mark.parametrize("K,m", [(1e3, 7), (1e4, 11), (1e5, 16)])
def test_delta_rule_ladder(K, m):
    got = delta_rule(K, c=2.5, exponent=1.5)
    assert got == m
    assert 1.0 / got < 1.0 / math.log(K)


# -- mutation rates


def test_mutation_rate_example():
    K = math.exp(10.0)
    spec = make_spec(K=K, m=100)
    for i in (0, 37, 99):
        assert mutation_rate(i, i, spec) == pytest.approx(0.1 / math.sqrt(2 * math.pi), rel=1e-12)
    assert mutation_rate(3, 5, spec) == pytest.approx(0.1 * stats.norm.pdf(0.02 * 10), rel=1e-12)


def test_mutation_rate_zero_when_p_zero():
    spec = make_spec(rates=constant_rates(p=0.0))
    assert mutation_rate(1, 2, spec) == 0.0


def test_mutation_rate_out_of_range():
    spec = make_spec()
    with pytest.raises(ConfigError):
        mutation_rate(0, spec.m, spec)


def test_total_mutation_mass_is_riemann_sum():
    spec = make_spec(K=1e4, m=11, rates=RateFunctions(ConstantFunction(2.0), ConstantFunction(1.0),
                                                       CosineFunction(1.0, 0.5)))
    h = spec.scaling.h
    brute = math.fsum(h * stats.norm.pdf(h * l) for l in offset_range(spec.m))
    for i in range(spec.m):
        tot = math.fsum(mutation_rate(i, j, spec) for j in range(spec.m))
        assert tot == pytest.approx(spec.p[i] * brute, rel=1e-12)
    assert spec.s_k == pytest.approx(brute, rel=1e-12)


# -- kernels


@pytest.mark.parametrize("q,expected", [(0.0, 1.0), (1.0, math.exp(0.5)), (-2.0, math.exp(2.0))])
def test_gaussian_mgf_examples(q, expected):
    assert kernel_mgf(q, GaussianKernel(1.0)) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("q", [1.0, -2.0, 3.5])
def test_gaussian_mgf_against_quadrature(q):
    val, _ = integrate.quad(lambda y: stats.norm.pdf(y) * math.exp(q * y), -40.0, 40.0, epsabs=0, epsrel=1e-12)
    assert GaussianKernel(1.0).mgf(q) == pytest.approx(val, rel=1e-9)


def test_quadrature_path_matches_closed_form():
    sig = 0.7
    k = CallableKernel(lambda h: stats.norm.pdf(h, scale=sig), tail_radius=0.0, symmetric=True)
    for q in (-6.0, -1.0, 0.0, 2.5, 8.0):
        assert k.mgf(q) == pytest.approx(math.exp(0.5 * (sig * q) ** 2), rel=1e-10)
    assert k.exp_moment(1.0) == pytest.approx(GaussianKernel(sig).exp_moment(1.0), rel=1e-10)


@pytest.mark.parametrize("kernel", [GaussianKernel(0.5), BumpKernel(1.0), BumpKernel(0.3)])
def test_mgf_zero_is_one(kernel):
    assert kernel.mgf(0.0) == pytest.approx(1.0, abs=1e-12)
    assert all(c.ok for c in kernel.check())


@settings(max_examples=60, deadline=None)
@given(st.floats(-6, 6), st.floats(-6, 6), st.floats(0, 1))
def test_mgf_convex(q1, q2, lam):
    for k in (GaussianKernel(1.0), BumpKernel(1.0)):
        lhs = k.mgf(lam * q1 + (1 - lam) * q2)
        rhs = lam * k.mgf(q1) + (1 - lam) * k.mgf(q2)
        assert lhs <= rhs * (1 + 1e-9) + 1e-9


@pytest.mark.parametrize("kernel", [GaussianKernel(1.0), BumpKernel(1.0)])
@pytest.mark.parametrize("q", [-3.0, -0.5, 0.7, 2.0])
def test_mgf_derivative_matches_finite_difference(kernel, q):
    eps = 1e-4
    fd = (kernel.mgf(q + eps) - kernel.mgf(q - eps)) / (2 * eps)
    lo, hi = (-1.0, 1.0) if isinstance(kernel, BumpKernel) else (-40.0, 40.0)
    quad, _ = integrate.quad(lambda y: y * kernel.density(y) * math.exp(q * y), lo, hi, epsabs=0, epsrel=1e-12)
    assert fd == pytest.approx(quad, rel=1e-6)
    assert kernel.mgf_prime(q) == pytest.approx(quad, rel=1e-8)


def test_mgf_vec_agrees_with_scalar():
    k = BumpKernel(0.8)
    qs = np.linspace(-4, 4, 9)
    assert np.allclose(k.mgf_vec(qs), [k.mgf(q) for q in qs], rtol=1e-10)


def test_tabulated_kernel():
    h = np.linspace(-2, 2, 401)
    g = np.maximum(0.0, 1 - np.abs(h))  # triangle, integral 1
    k = TabulatedKernel(h, g, tail_radius=0.0)
    assert k.mgf(0.0) == pytest.approx(1.0, abs=1e-12)
    # mgf of the triangle density: (e^q + e^-q - 2)/q^2
    q = 1.3
    assert k.mgf(q) == pytest.approx((math.exp(q) + math.exp(-q) - 2) / q ** 2, rel=1e-10)
    with pytest.raises(ConfigError):
        TabulatedKernel(h, 2 * g, tail_radius=0.0)


def test_nonmonotone_tail_detected():
    k = CallableKernel(lambda h: stats.norm.pdf(h) * (1 + 0.9 * np.cos(3 * h)) / 1.0, tail_radius=0.5)
    checks = {c.name: c for c in k.check()}
    assert checks["kernel_monotone_tails"].status == "fail"


# -- exponential moments and Riemann sums


def test_gbar_continuum_values():
    k = GaussianKernel(1.0)
    assert gbar(0.0, k, [(1e3, 7)]).continuum == pytest.approx(1.0, abs=1e-14)
    closed = 2 * math.exp(0.5) * stats.norm.cdf(1.0)
    quad, _ = integrate.quad(lambda y: math.exp(abs(y)) * stats.norm.pdf(y), -40.0, 40.0, epsrel=1e-12)
    res = gbar(1.0, k, [(1e3, 7)])
    assert res.continuum == pytest.approx(closed, rel=1e-12)
    assert res.continuum == pytest.approx(quad, rel=1e-10)
    assert res.continuum == pytest.approx(2.774286, abs=1e-6)


def test_gbar_discrete_close_at_fine_h():
    k = GaussianKernel(1.0)
    K = math.exp(10.0)
    res = gbar(1.0, k, [(K, 200)])  # h = 0.05
    assert abs(res.discrete_sup / res.continuum - 1) < 0.02
    brute = math.fsum(0.05 * stats.norm.pdf(0.05 * l) * math.exp(abs(0.05 * l)) for l in offset_range(200))
    assert res.discrete_sup == pytest.approx(brute, rel=1e-12)


def test_riemann_defect_against_direct_sum():
    k = GaussianKernel(1.0)
    for h, m in [(0.5, 8), (0.2, 125), (0.1, 1000)]:
        with mpmath.workdps(50):
            hh = mpmath.mpf(h)
            direct = mpmath.fsum(hh * mpmath.npdf(hh * l) for l in range(-(m // 2), m - m // 2)) - 1
        assert float(k.riemann_defect(h, m)) == pytest.approx(float(direct), rel=1e-20, abs=1e-30)


def test_riemann_sum_symmetric_first_moment():
    k = GaussianKernel(1.0)
    h, m = 0.3, 41
    ell = offset_range(m)
    w = h * k.density(h * ell)
    assert abs(math.fsum(w * ell)) < 1e-12
    assert riemann_sum(k, h, m) == pytest.approx(math.fsum(w), rel=1e-14)
