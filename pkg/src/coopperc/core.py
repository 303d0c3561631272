"""Closed-form results for the 1D Poisson proximity graph.

Agents sit on a line as a homogeneous Poisson process of intensity ``lam``
(agents per metre) and link to every neighbour within ``ell`` metres.  Every
dimensionless quantity depends on the pair only through ``x = lam * ell``, so
the dimensionless functions take ``x`` directly.

The cooperative threshold is ``x = ln 3``: the mean cluster size ``e**x``
reaches three (initiator plus one upstream and one downstream neighbour).
"""
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._validation import check_positive, check_positive_int
from .exceptions import DomainError, NumericError

LN3 = math.log(3.0)

#: Relative slack used when a computed ratio should equal 1 at the threshold.
#: Values inside this band are ties and resolve toward feasibility.
TIE_RTOL = 1e-12

#: Commonly quoted critical disruption fraction at SF = 5. The formula gives
#: 0.7803 there; both are surfaced and neither is silently corrected.
REPORTED_DISRUPTION_AT_SF5 = 0.390


@dataclass(frozen=True)
class ThresholdContext:
    """Intensity ``lam`` [1/m] and interaction range ``ell`` [m]."""

    lam: float
    ell: float
    x: float = field(init=False)

    def __post_init__(self):
        lam = check_positive(self.lam, "lam")
        ell = check_positive(self.ell, "ell")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "ell", ell)
        object.__setattr__(self, "x", lam * ell)

    @property
    def feasible(self):
        return wavelength_band(self.lam, self.ell).feasible

    def cluster_law(self):
        return ClusterLaw.from_x(self.x)

    def wavelength_band(self):
        return wavelength_band(self.lam, self.ell)


@dataclass(frozen=True)
class ClusterLaw:
    """Geometric law of the cluster size, ``P(N=n) = p (1-p)**(n-1)``."""

    p: float
    mean: float

    @classmethod
    def from_x(cls, x):
        x = check_positive(x, "x")
        return cls(p=math.exp(-x), mean=expected_cluster_size(x))

    @property
    def x(self):
        return -math.log(self.p)

    def pmf(self, n):
        return cluster_pmf(n, self.x)

    def pgf(self, z):
        return cluster_pgf(z, self.x)


@dataclass(frozen=True)
class WavelengthBand:
    """Cooperative wavelength window for a given ``(lam, ell)``.

    ``lambda_a`` and ``span`` follow the conditional-gap convention
    (``2 E[d|d<=ell]`` against ``(e**x - 1) E[d|d<=ell]``); ``lambda_min``
    and ``span_ell`` are the range-based variants ``2 ell`` and
    ``(e**x - 1) ell``.  The ratio is the same under both.
    """

    lambda_a: float
    span: float
    ratio: float
    feasible: bool
    lambda_min: float
    span_ell: float


class DisruptionFraction(NamedTuple):
    fraction: float
    blocked: bool


@dataclass(frozen=True)
class LWRParams:
    """Power-law speed-density relation ``v = v_f (1 - (rho/rho_j)**theta)``."""

    v_f: float
    rho_j: float
    theta: float

    def __post_init__(self):
        for name in ("v_f", "rho_j", "theta"):
            object.__setattr__(self, name, check_positive(getattr(self, name), name))

    def speed(self, rho):
        return lwr_speed(rho, self)

    @property
    def critical_density(self):
        return self.rho_j * lwr_critical_density_ratio(self.theta)


def feasibility_ratio(x):
    """Return ``2 / (e**x - 1)``, the minimum wavelength over the mean span."""
    x = check_positive(x, "x")
    return 2.0 / math.expm1(x)


def solve_fixed_point(tol=1e-12, *, bracket=(1e-9, 50.0), maxiter=200):
    """Find the positive root of ``feasibility_ratio(x) = 1``.

    Bisection shrinks the bracket to a width of 1e-2, then a safeguarded
    secant iteration polishes the root while keeping it bracketed.  Returns
    a root within ``tol`` of the true fixed point.

    Raises
    ------
    NumericError
        If the bracket does not straddle the root or iteration stalls.
    """
    tol = check_positive(tol, "tol")

    def g(x):
        return 2.0 / math.expm1(x) - 1.0

    lo, hi = bracket
    glo, ghi = g(lo), g(hi)
    trace = [(lo, glo), (hi, ghi)]
    if glo == 0.0:
        return lo
    if ghi == 0.0:
        return hi
    if (glo > 0) == (ghi > 0):
        raise NumericError(f"bracket {bracket} does not contain a sign change", trace)

    it = 0
    while hi - lo > 1e-2:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        trace.append((mid, gm))
        if gm == 0.0:
            return mid
        if (gm > 0) == (glo > 0):
            lo, glo = mid, gm
        else:
            hi, ghi = mid, gm
        it += 1

    a, ga, b, gb = lo, glo, hi, ghi
    while it < maxiter:
        it += 1
        c = b - gb * (b - a) / (gb - ga) if gb != ga else 0.5 * (lo + hi)
        if not lo < c < hi:
            c = 0.5 * (lo + hi)
        gc = g(c)
        trace.append((c, gc))
        if gc == 0.0:
            return c
        if (gc > 0) == (glo > 0):
            lo, glo = c, gc
        else:
            hi, ghi = c, gc
        step = abs(c - b)
        a, ga, b, gb = b, gb, c, gc
        # secant converges superlinearly: a step below tol/10 puts the
        # iterate well inside tol of the root
        if step < 0.1 * tol or hi - lo <= tol:
            return c
    raise NumericError("fixed-point iteration did not converge", trace)


def expected_cluster_size(x):
    """Mean cluster size ``e**x``; raises OverflowError past the float range."""
    x = check_positive(x, "x")
    if x > 709.0:
        raise OverflowError(f"e**{x} overflows a double")
    return math.exp(x)


def cluster_pmf(n, x):
    """``P(N = n)`` for the geometric cluster-size law at ``x = lam*ell``."""
    n = check_positive_int(n, "n")
    x = check_positive(x, "x")
    p = math.exp(-x)
    return p * (-math.expm1(-x)) ** (n - 1)


def cluster_pgf(z, x):
    """Probability generating function ``p z / (1 - (1 - p) z)``."""
    z = float(z)
    if not 0.0 <= z <= 1.0:
        raise DomainError(f"z must lie in [0, 1], got {z}")
    x = check_positive(x, "x")
    p = math.exp(-x)
    # (1 - z) + p z is 1 - (1 - p) z written to be exact at z = 1
    return p * z / ((1.0 - z) + p * z)


def shannon_entropy(probs):
    """Entropy in nats with ``0 ln 0 = 0``."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise DomainError("probs must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DomainError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def conditional_gap_mean(lam, ell):
    """``E[d | d <= ell]`` for an exponential gap ``d`` of rate ``lam``.

    Equals ``1/lam - ell/(e**x - 1)``; for small ``x`` the difference is
    evaluated from its series to avoid cancellation.
    """
    lam = check_positive(lam, "lam")
    ell = check_positive(ell, "ell")
    x = lam * ell
    if x < 1e-3:
        return ell * (0.5 - x / 12.0 + x**3 / 720.0)
    return 1.0 / lam - ell / math.expm1(x)


def wavelength_band(lam, ell):
    lam = check_positive(lam, "lam")
    ell = check_positive(ell, "ell")
    growth = math.expm1(lam * ell)
    gap = conditional_gap_mean(lam, ell)
    lambda_a = 2.0 * gap
    span = growth * gap
    ratio = lambda_a / span
    return WavelengthBand(
        lambda_a=lambda_a,
        span=span,
        ratio=ratio,
        feasible=ratio <= 1.0 + TIE_RTOL,
        lambda_min=2.0 * ell,
        span_ell=growth * ell,
    )


def critical_penetration(rho0, ell):
    """Minimum connected-vehicle share ``ln 3 / (rho0 * ell)``.

    Values above 1 mean no penetration rate reaches the threshold at this
    density and range; see :func:`penetration_achievable`.
    """
    rho0 = check_positive(rho0, "rho0")
    ell = check_positive(ell, "ell")
    return LN3 / (rho0 * ell)


def penetration_achievable(rho0, ell):
    return critical_penetration(rho0, ell) <= 1.0


def critical_disruption_fraction(sf):
    """Node-disruption fraction ``1 - ln 3 / sf`` that removes all margin.

    Clamped at 0 with ``blocked=True`` when ``sf < ln 3`` (conduction is
    already below threshold).  At ``sf = 5`` this returns 0.7803, whereas
    the published figure is 39.0% (:data:`REPORTED_DISRUPTION_AT_SF5`).
    """
    sf = check_positive(sf, "sf")
    f = 1.0 - LN3 / sf
    if f < 0.0:
        return DisruptionFraction(0.0, True)
    return DisruptionFraction(f, False)


def lwr_speed(rho, params):
    """Speed [km/h] at density ``rho`` [veh/km]; scalar or array."""
    arr = np.asarray(rho, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError("rho must be finite and >= 0")
    if np.any(arr > params.rho_j):
        raise DomainError(f"rho exceeds jam density {params.rho_j}")
    v = params.v_f * (1.0 - (arr / params.rho_j) ** params.theta)
    return float(v) if v.ndim == 0 else v


def lwr_critical_density_ratio(theta):
    """Flow-maximising density ratio ``(1/(1+theta))**(1/theta)``."""
    theta = check_positive(theta, "theta")
    return (1.0 / (1.0 + theta)) ** (1.0 / theta)
