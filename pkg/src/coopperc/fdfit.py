"""Fitting the LWR power-law exponent to fundamental-diagram observations.

The model ``v = v_f (1 - (rho/rho_j)**theta)`` is linear in ``v_f``.  When
``v_f`` is not supplied it is profiled out in closed form, leaving a smooth
one-dimensional objective in ``theta``:

    v_f(theta) = sum(w v g) / sum(w g**2),   g = 1 - (rho/rho_j)**theta

The minimiser is located by a log-spaced scan followed by bounded Brent
search (golden section with parabolic steps) inside the best bracket.
Standard errors come from the Gauss-Newton covariance at the optimum.
"""
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_1d_float, check_positive
from .core import LN3
from .exceptions import DomainError, NumericError, SampleSizeError

DEFAULT_RHO_CAP = 200.0
DEFAULT_RHO_J_GRID = (70.0, 80.0, 90.0, 100.0)
THETA_BOUNDS = (0.05, 10.0)
MIN_OBS = 10
Z95 = 1.96


@dataclass(frozen=True)
class FDObservation:
    rho: float
    v: float
    weight: float = 1.0


@dataclass
class FDObservations:
    """Column-oriented set of fundamental-diagram points.

    ``rho`` in veh/km, ``v`` in km/h.  ``n_rejected`` counts source rows
    dropped during ingestion; ``warnings`` carries non-fatal notes.
    """

    rho: np.ndarray
    v: np.ndarray
    weight: np.ndarray
    n_rejected: int = 0
    warnings: list = field(default_factory=list)
    report: object = None

    @classmethod
    def from_arrays(cls, rho, v, weight=None, *, rho_cap=DEFAULT_RHO_CAP):
        rho = as_1d_float(rho, "rho")
        v = as_1d_float(v, "v")
        weight = np.ones_like(rho) if weight is None else as_1d_float(weight, "weight")
        if not len(rho) == len(v) == len(weight):
            raise DomainError("rho, v and weight must have equal length")
        if np.any(rho <= 0) or np.any(rho > rho_cap):
            raise DomainError(f"rho must lie in (0, {rho_cap}]")
        if np.any(v < 0):
            raise DomainError("v must be >= 0")
        if np.any(weight <= 0):
            raise DomainError("weights must be positive")
        return cls(rho, v, weight)

    @classmethod
    def from_records(cls, records, **kwargs):
        records = list(records)
        return cls.from_arrays(
            [r.rho for r in records], [r.v for r in records], [r.weight for r in records], **kwargs
        )

    def __len__(self):
        return len(self.rho)

    def __iter__(self):
        for r, v, w in zip(self.rho.tolist(), self.v.tolist(), self.weight.tolist()):
            yield FDObservation(r, v, w)


@dataclass
class ThetaFit:
    theta_hat: float
    sigma: float
    ci95: tuple
    r2: float
    rmse: float
    v_f_used: float
    rho_j_used: float
    n_obs: int
    n_excluded: int
    v_f_mode: str
    rss: float


class FitMetrics(NamedTuple):
    r2: float
    rmse: float


@dataclass
class ModelMetrics:
    theta: float
    r2: float
    rmse: float
    v_f: float


@dataclass
class ModelComparison:
    best: ModelMetrics
    ln3: ModelMetrics
    greenshields: ModelMetrics
    sigma: float

    @property
    def delta_r2_ln3(self):
        return self.best.r2 - self.ln3.r2

    @property
    def delta_rmse_ln3(self):
        return self.ln3.rmse - self.best.rmse

    @property
    def delta_r2_greenshields(self):
        return self.best.r2 - self.greenshields.r2

    @property
    def delta_rmse_greenshields(self):
        return self.greenshields.rmse - self.best.rmse

    def as_dict(self):
        out = {name: getattr(self, name).__dict__.copy() for name in ("best", "ln3", "greenshields")}
        out["sigma"] = self.sigma
        for name in ("delta_r2_ln3", "delta_rmse_ln3", "delta_r2_greenshields", "delta_rmse_greenshields"):
            out[name] = getattr(self, name)
        return out


@dataclass
class SensitivityRow:
    rho_j: float
    theta_hat: float
    sigma: float
    r2_hat: float
    r2_ln3: float
    r2_gs: float
    deviation_in_sigmas: float
    n_obs: int


def _coerce(obs):
    if isinstance(obs, FDObservations):
        return obs
    return FDObservations.from_records(obs)


def _parse_v_f(v_f):
    if v_f is None or (isinstance(v_f, str) and v_f == "profile"):
        return None
    return check_positive(v_f, "v_f")


class LWRObjective:
    """Weighted residual sum of squares as a function of ``theta``.

    Points with ``rho >= rho_j`` are excluded at construction and counted in
    ``n_excluded``.
    """

    def __init__(self, obs, rho_j, v_f="profile", min_obs=MIN_OBS):
        obs = _coerce(obs)
        self.rho_j = check_positive(rho_j, "rho_j")
        self.v_f_given = _parse_v_f(v_f)
        keep = obs.rho < self.rho_j
        self.n_excluded = int(np.count_nonzero(~keep))
        self.rho = obs.rho[keep]
        self.v = obs.v[keep]
        self.w = obs.weight[keep]
        if len(self.rho) < min_obs:
            raise SampleSizeError(f"need at least {min_obs} observations below rho_j, got {len(self.rho)}")
        if np.ptp(self.rho) == 0:
            raise NumericError("all observations share one density; theta is not identifiable")
        self.log_r = np.log(self.rho / self.rho_j)

    @property
    def n_params(self):
        return 1 if self.v_f_given is not None else 2

    def _powers(self, theta):
        r_t = np.exp(theta * self.log_r)
        return 1.0 - r_t, r_t

    def v_f_at(self, theta):
        if self.v_f_given is not None:
            return self.v_f_given
        g, _ = self._powers(theta)
        wg = self.w * g
        return float(np.dot(wg, self.v) / np.dot(wg, g))

    def residuals(self, theta):
        g, _ = self._powers(theta)
        return self.v - self.v_f_at(theta) * g

    def __call__(self, theta):
        res = self.residuals(theta)
        return float(np.dot(self.w * res, res))

    def gradient(self, theta):
        # envelope theorem: the profiled v_f contributes no extra term
        g, r_t = self._powers(theta)
        vf = self.v_f_at(theta)
        res = self.v - vf * g
        return float(2.0 * np.sum(self.w * res * vf * r_t * self.log_r))

    def jacobian(self, theta):
        g, r_t = self._powers(theta)
        d_theta = -self.v_f_at(theta) * r_t * self.log_r
        if self.v_f_given is not None:
            return d_theta[:, None]
        return np.column_stack([d_theta, g])

    def metrics(self, theta):
        rss = self(theta)
        wsum = self.w.sum()
        vbar = np.dot(self.w, self.v) / wsum
        tss = float(np.dot(self.w, (self.v - vbar) ** 2))
        if tss == 0.0:
            raise DomainError("speeds have zero variance; R^2 is undefined")
        return FitMetrics(1.0 - rss / tss, math.sqrt(rss / wsum))


def minimize_theta(objective, bounds=THETA_BOUNDS, n_scan=60, xatol=1e-11):
    """Global scan then bounded Brent refinement; returns ``theta_hat``."""
    lo, hi = bounds
    grid = np.geomspace(lo, hi, n_scan)
    values = np.array([objective(t) for t in grid])
    if not np.all(np.isfinite(values)):
        raise NumericError("objective is not finite on the scan grid", list(zip(grid, values)))
    i = int(np.argmin(values))
    bracket = (grid[max(i - 1, 0)], grid[min(i + 1, n_scan - 1)])
    res = minimize_scalar(objective, bounds=bracket, method="bounded", options={"xatol": xatol, "maxiter": 500})
    if not res.success:
        raise NumericError(f"theta search did not converge: {res.message}", list(zip(grid, values)))
    theta = float(res.x)
    # a scan grid point may still beat the refined value at the bracket ends
    if values[i] < res.fun:
        theta = float(grid[i])
    return theta


def fit_theta(obs, rho_j=80.0, v_f="profile", *, bounds=THETA_BOUNDS):
    """Least-squares fit of the LWR exponent.

    Parameters
    ----------
    obs : FDObservations or iterable of FDObservation
    rho_j : float
        Jam density [veh/km]; points at or above it are excluded.
    v_f : float or "profile"
        Free-flow speed [km/h], or "profile" to estimate it jointly.

    Returns
    -------
    ThetaFit
        ``sigma`` is the Gauss-Newton standard error with ``n - k`` degrees
        of freedom (``k = 2`` when profiling, 1 otherwise).
    """
    objective = LWRObjective(obs, rho_j, v_f)
    theta = minimize_theta(objective, bounds)
    rss = objective(theta)
    n, k = len(objective.rho), objective.n_params
    J = objective.jacobian(theta)
    JtWJ = J.T @ (objective.w[:, None] * J)
    try:
        cov = rss / (n - k) * np.linalg.inv(JtWJ)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular Jacobian at the optimum") from exc
    sigma = float(math.sqrt(max(cov[0, 0], 0.0)))
    r2, rmse = objective.metrics(theta)
    return ThetaFit(
        theta_hat=theta,
        sigma=sigma,
        ci95=(theta - Z95 * sigma, theta + Z95 * sigma),
        r2=r2,
        rmse=rmse,
        v_f_used=objective.v_f_at(theta),
        rho_j_used=objective.rho_j,
        n_obs=n,
        n_excluded=objective.n_excluded,
        v_f_mode="given" if objective.v_f_given is not None else "profile",
        rss=rss,
    )


def metrics_at(obs, theta, rho_j=80.0, v_f="profile"):
    """``(r2, rmse)`` of the model at a fixed ``theta``."""
    theta = check_positive(theta, "theta")
    return LWRObjective(obs, rho_j, v_f).metrics(theta)


def profile_v_f(obs, theta, rho_j=80.0):
    return LWRObjective(obs, rho_j, "profile").v_f_at(check_positive(theta, "theta"))


def _model_metrics(objective, theta):
    r2, rmse = objective.metrics(theta)
    return ModelMetrics(theta=theta, r2=r2, rmse=rmse, v_f=objective.v_f_at(theta))


def compare_models(obs, rho_j=80.0, v_f="profile"):
    """Best-fit exponent against fixed ``theta = ln 3`` and Greenshields."""
    fit = fit_theta(obs, rho_j, v_f)
    objective = LWRObjective(obs, rho_j, v_f)
    return ModelComparison(
        best=_model_metrics(objective, fit.theta_hat),
        ln3=_model_metrics(objective, LN3),
        greenshields=_model_metrics(objective, 1.0),
        sigma=fit.sigma,
    )


def sensitivity_table(obs, rho_j_grid=DEFAULT_RHO_J_GRID, v_f="profile"):
    """One fit per jam density, rows ordered as the grid."""
    grid = list(rho_j_grid)
    if not grid:
        raise DomainError("rho_j_grid is empty")
    obs = _coerce(obs)
    rows = []
    for rho_j in grid:
        fit = fit_theta(obs, rho_j, v_f)
        objective = LWRObjective(obs, rho_j, v_f)
        dev = abs(fit.theta_hat - LN3) / fit.sigma if fit.sigma > 0 else math.inf
        rows.append(SensitivityRow(
            rho_j=float(rho_j),
            theta_hat=fit.theta_hat,
            sigma=fit.sigma,
            r2_hat=fit.r2,
            r2_ln3=objective.metrics(LN3).r2,
            r2_gs=objective.metrics(1.0).r2,
            deviation_in_sigmas=dev,
            n_obs=fit.n_obs,
        ))
    return rows


def bootstrap_sigma(obs, rho_j=80.0, v_f="profile", n_boot=200, seed=0):
    """Resampling standard error of ``theta_hat`` (cross-check only)."""
    obs = _coerce(obs)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    n = len(obs)
    thetas = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        sub = FDObservations(obs.rho[idx], obs.v[idx], obs.weight[idx])
        thetas.append(fit_theta(sub, rho_j, v_f).theta_hat)
    return float(np.std(thetas, ddof=1))


class LWRPowerLawRegressor(RegressorMixin, BaseEstimator):
    """Speed-density regressor ``v = v_f (1 - (rho/rho_j)**theta)``.

    ``X`` holds densities (one column, veh/km) and ``y`` speeds (km/h).
    Predictions at or beyond ``rho_j`` are 0.

    Attributes
    ----------
    theta_, theta_sigma_, theta_ci95_ : fitted exponent and uncertainty
    v_f_ : free-flow speed used (fitted when ``v_f="profile"``)
    r2_, rmse_ : in-sample metrics
    n_excluded_ : observations dropped for ``rho >= rho_j``
    """

    def __init__(self, rho_j=80.0, v_f="profile", theta_bounds=THETA_BOUNDS):
        self.rho_j = rho_j
        self.v_f = v_f
        self.theta_bounds = theta_bounds

    def fit(self, X, y, sample_weight=None):
        rho = as_1d_float(X, "X")
        obs = FDObservations.from_arrays(rho, y, sample_weight, rho_cap=np.inf)
        fit = fit_theta(obs, self.rho_j, self.v_f, bounds=self.theta_bounds)
        self.fit_result_ = fit
        self.theta_ = fit.theta_hat
        self.theta_sigma_ = fit.sigma
        self.theta_ci95_ = fit.ci95
        self.v_f_ = fit.v_f_used
        self.r2_ = fit.r2
        self.rmse_ = fit.rmse
        self.n_excluded_ = fit.n_excluded
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "theta_")
        rho = np.clip(as_1d_float(X, "X"), 0.0, float(self.rho_j))
        return self.v_f_ * (1.0 - (rho / self.rho_j) ** self.theta_)
