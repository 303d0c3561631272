import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.integrate import quad

from coopperc import core
from coopperc.core import LN3
from coopperc.exceptions import DomainError


def test_feasibility_ratio_values():
    assert core.feasibility_ratio(math.log(3)) == pytest.approx(1.0, abs=1e-15)
    assert core.feasibility_ratio(math.log(2)) == pytest.approx(2.0, rel=1e-15)
    assert core.feasibility_ratio(2 * math.log(3)) == pytest.approx(0.25, rel=1e-14)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
def test_feasibility_ratio_domain(bad):
    with pytest.raises(DomainError):
        core.feasibility_ratio(bad)


@given(st.floats(1e-6, 30), st.floats(1e-6, 30))
def test_feasibility_ratio_strictly_decreasing(a, b):
    assume(a < b and b - a > 1e-9 * b)
    assert core.feasibility_ratio(a) > core.feasibility_ratio(b)


def test_solve_fixed_point():
    assert abs(core.solve_fixed_point(1e-10) - 1.0986122886681098) <= 1e-10
    assert abs(core.solve_fixed_point(1e-3) - LN3) <= 1e-3
    assert abs(core.solve_fixed_point(1e-12) - math.log(3.0)) <= 1e-12


@given(st.floats(-12, -2))
def test_solve_fixed_point_tolerance_property(log_tol):
    tol = 10.0**log_tol
    assert abs(core.solve_fixed_point(tol) - LN3) <= tol


def test_solve_fixed_point_bad_bracket():
    from coopperc.exceptions import NumericError

    with pytest.raises(NumericError) as info:
        core.solve_fixed_point(1e-8, bracket=(2.0, 5.0))
    assert info.value.trace


def test_expected_cluster_size():
    assert core.expected_cluster_size(LN3) == pytest.approx(3.0, rel=1e-15)
    assert core.expected_cluster_size(1e-12) == pytest.approx(1.0)
    assert core.expected_cluster_size(1.0) == pytest.approx(2.718281828459045)
    with pytest.raises(OverflowError):
        core.expected_cluster_size(800.0)


def test_cluster_pmf():
    assert core.cluster_pmf(1, LN3) == pytest.approx(1 / 3, rel=1e-14)
    assert core.cluster_pmf(2, LN3) == pytest.approx(2 / 9, rel=1e-14)
    assert core.cluster_pmf(1, 800.0) == 0.0
    for bad in (0, -3, 1.5):
        with pytest.raises(DomainError):
            core.cluster_pmf(bad, 1.0)


@given(st.floats(0.01, 8.0), st.integers(1, 200))
def test_cluster_pmf_tail_identity(x, k):
    partial = sum(core.cluster_pmf(n, x) for n in range(1, k + 1))
    assert partial >= 1 - (1 - math.exp(-x)) ** k - 1e-12


def test_cluster_pmf_normalised():
    x = 1.5
    total = sum(core.cluster_pmf(n, x) for n in range(1, 2000))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_cluster_pgf():
    for x in (0.3, LN3, 4.0):
        assert core.cluster_pgf(1.0, x) == pytest.approx(1.0, abs=1e-15)
        assert core.cluster_pgf(0.0, x) == 0.0
    h = 1e-6
    deriv = (core.cluster_pgf(1.0, LN3) - core.cluster_pgf(1 - h, LN3)) / h
    assert deriv == pytest.approx(3.0, abs=1e-4)
    with pytest.raises(DomainError):
        core.cluster_pgf(1.2, 1.0)


@pytest.mark.parametrize("x", [0.2, 0.7, 1.0, LN3])
@pytest.mark.parametrize("h", [1e-3, 1e-4, 1e-5])
def test_pgf_derivative_matches_mean(x, h):
    # one-sided error is h*(1-p)/p**2, below 10h for x <= ln 3
    deriv = (core.cluster_pgf(1.0, x) - core.cluster_pgf(1 - h, x)) / h
    assert abs(deriv - core.expected_cluster_size(x)) <= 10 * h


def test_cluster_law_object():
    law = core.ClusterLaw.from_x(LN3)
    assert law.mean == pytest.approx(1 / law.p)
    assert law.pmf(1) == pytest.approx(1 / 3)


def test_shannon_entropy():
    assert abs(core.shannon_entropy([1 / 3] * 3) - math.log(3)) <= 1e-12
    assert core.shannon_entropy([1, 0, 0]) == 0.0
    assert core.shannon_entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(DomainError):
        core.shannon_entropy([0.6, 0.6])
    with pytest.raises(DomainError):
        core.shannon_entropy([1.2, -0.2])


@pytest.mark.parametrize("k", [2, 3, 5, 7])
def test_uniform_entropy_is_log_k(k):
    assert abs(core.shannon_entropy([1 / k] * k) - math.log(k)) <= 1e-12


def _gap_mean_quadrature(lam, ell):
    prob = -math.expm1(-lam * ell)
    num, _ = quad(lambda t: t * lam * math.exp(-lam * t), 0, ell, epsabs=0, epsrel=1e-13)
    return num / prob


def test_conditional_gap_mean_frozen():
    # frozen from scipy.integrate.quad of t*lam*exp(-lam*t)/P(d<=ell) on [0, ell]
    assert core.conditional_gap_mean(1 / 300, 300) == pytest.approx(125.4069879392021, abs=1e-8)
    assert core.conditional_gap_mean(1e-4 / 300, 300) == pytest.approx(149.9975000000004, abs=1e-8)


@pytest.mark.parametrize("lam,ell", [(1 / 300, 300), (0.02, 100), (0.5, 0.1), (1e-4 / 300, 300), (3.0, 2.0)])
def test_conditional_gap_mean_quadrature(lam, ell):
    assert core.conditional_gap_mean(lam, ell) == pytest.approx(_gap_mean_quadrature(lam, ell), rel=1e-10)


def test_conditional_gap_mean_limits():
    assert core.conditional_gap_mean(1.0, 60.0) == pytest.approx(1.0, rel=1e-12)
    assert core.conditional_gap_mean(1e-10, 1.0) == pytest.approx(0.5, rel=1e-9)


def test_wavelength_band_examples():
    band = core.wavelength_band(LN3 / 300, 300)
    assert band.feasible
    assert band.ratio == pytest.approx(1.0, abs=1e-12)
    assert not core.wavelength_band(0.5 / 300, 300).feasible
    a = core.wavelength_band(2 / 100, 100)
    b = core.wavelength_band(2 / 300, 300)
    assert a.ratio == pytest.approx(b.ratio, rel=1e-14)
    assert b.span == pytest.approx(3 * a.span, rel=1e-12)
    assert a.lambda_min == 200 and a.span_ell == pytest.approx(math.expm1(2) * 100)
    assert a.lambda_min / a.span_ell == pytest.approx(a.ratio, rel=1e-14)


@given(st.floats(1e-3, 10.0), st.floats(0.5, 1000.0))
def test_wavelength_ratio_cancellation(x, ell):
    lam = x / ell
    band = core.wavelength_band(lam, ell)
    assert band.ratio == pytest.approx(core.feasibility_ratio(lam * ell), rel=1e-12)


@given(st.floats(1e-6, 10.0, exclude_min=True))
def test_feasible_iff_above_ln3(x):
    # inside the rounding band around ln 3 the verdict is a tie
    assume(abs(x - LN3) > 1e-9)
    assert core.wavelength_band(x / 300.0, 300.0).feasible == (x >= LN3)


def test_threshold_context():
    ctx = core.ThresholdContext(0.004, 300)
    assert ctx.x == 0.004 * 300
    assert ctx.feasible
    assert ctx.cluster_law().mean == pytest.approx(math.exp(1.2))
    with pytest.raises(DomainError):
        core.ThresholdContext(-1, 3)


def test_critical_penetration():
    assert core.critical_penetration(0.030, 300) == pytest.approx(0.1221, abs=1e-4)
    assert core.critical_penetration(0.030, 36.62040962227033) == pytest.approx(1.0, rel=1e-12)
    assert core.critical_penetration(0.03, 600) == pytest.approx(core.critical_penetration(0.03, 300) / 2)
    assert core.penetration_achievable(0.03, 300)
    assert not core.penetration_achievable(0.03, 30)


def test_critical_disruption_fraction():
    assert core.critical_disruption_fraction(LN3) == (0.0, False)
    assert core.critical_disruption_fraction(5).fraction == pytest.approx(0.7803, abs=1e-4)
    assert core.critical_disruption_fraction(2).fraction == pytest.approx(0.4507, abs=1e-4)
    low = core.critical_disruption_fraction(1.0)
    assert low.fraction == 0.0 and low.blocked


def test_lwr_speed():
    p = core.LWRParams(v_f=100, rho_j=80, theta=LN3)
    assert core.lwr_speed(0, p) == 100
    assert core.lwr_speed(80, p) == 0
    assert core.lwr_speed(40, core.LWRParams(100, 80, 1)) == 50.0
    v = p.speed(np.linspace(0, 80, 50))
    assert np.all(np.diff(v) < 0)
    with pytest.raises(DomainError):
        core.lwr_speed(81, p)


def test_lwr_critical_density_ratio_values():
    assert core.lwr_critical_density_ratio(LN3) == pytest.approx(0.509, abs=1e-3)
    assert core.lwr_critical_density_ratio(1.0) == 0.5


@pytest.mark.parametrize("theta", [0.5, 1.0, LN3, 2.0, 3.0])
def test_lwr_critical_density_ratio_brute_force(theta):
    r = np.linspace(0.0, 1.0, 10**6 + 1)
    flow = r * core.lwr_speed(r * 80.0, core.LWRParams(1.0, 80.0, theta))
    assert abs(r[np.argmax(flow)] - core.lwr_critical_density_ratio(theta)) <= 1e-5
