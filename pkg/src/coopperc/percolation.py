"""Monte Carlo sampling and cluster decomposition of 1D Poisson proximity graphs.

Points are generated from cumulative exponential gaps, so the sampler never
holds more than one chunk of pending draws.  Each replicate has its own
Philox stream keyed by ``(seed, *keys, replicate)``; results therefore do not
depend on execution order or on the number of worker threads.
"""
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.isotonic import IsotonicRegression

from ._validation import as_1d_float, check_positive, check_positive_int
from .core import cluster_pmf
from .exceptions import ConfigError, ContractError, DomainError, EmptySampleError, SampleSizeError

EDGE_POLICIES = ("discard", "keep")
MAX_EXPECTED_POINTS = 2e8


def make_rng(seed, *keys):
    """Counter-based generator for the stream identified by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class SimConfig:
    """One Poisson configuration on ``[origin, origin + window]``.

    ``window`` defaults to ``1e4 / lam`` (about 10^4 points).  Windows shorter
    than ``100 / lam`` are rejected unless ``allow_small_window`` is set, in
    which case a warning is emitted instead.
    """

    lam: float
    ell: float
    window: float = None
    replicates: int = 1
    seed: int = 0
    origin: float = 0.0
    allow_small_window: bool = field(default=False, compare=False)

    def __post_init__(self):
        lam = check_positive(self.lam, "lam")
        ell = check_positive(self.ell, "ell")
        window = 1e4 / lam if self.window is None else check_positive(self.window, "window")
        check_positive_int(self.replicates, "replicates")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not math.isfinite(self.origin):
            raise ConfigError("origin must be finite")
        expected = lam * window
        if not math.isfinite(expected) or expected > MAX_EXPECTED_POINTS:
            raise ConfigError(f"lam * window = {expected:.3g} points is too large to simulate")
        if expected < 100:
            msg = f"window holds only {expected:.3g} expected points (< 100)"
            if not self.allow_small_window:
                raise ConfigError(msg + "; pass allow_small_window=True to proceed")
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "ell", ell)
        object.__setattr__(self, "window", window)

    @property
    def x(self):
        return self.lam * self.ell

    @property
    def bounds(self):
        return (self.origin, self.origin + self.window)


@dataclass
class ClusterSet:
    """Maximal runs of sorted points whose consecutive gaps are ``<= ell``."""

    starts: np.ndarray
    sizes: np.ndarray
    left: np.ndarray
    right: np.ndarray
    edge_touching: np.ndarray
    n_points: int
    ell: float

    def __len__(self):
        return len(self.sizes)

    def __iter__(self):
        return zip(self.starts.tolist(), self.sizes.tolist(), self.left.tolist(), self.right.tolist())

    def labels(self):
        """Cluster index of every point, in sorted-point order."""
        return np.repeat(np.arange(len(self.sizes)), self.sizes)


@dataclass
class ClusterStats:
    mean_size: float
    pmf_hat: np.ndarray = field(repr=False)
    frac_ge3: float
    frac_agents_ge3: float
    n_clusters: int
    stderr_mean: float
    agent_weighted_mean: float
    sizes: np.ndarray = field(repr=False)

    def pmf(self, n):
        return float(self.pmf_hat[n]) if n < len(self.pmf_hat) else 0.0


@dataclass
class SweepRow:
    x: float
    mean_size: float
    frac_agents_ge3: float
    stderr: float
    n_clusters: int
    frac_ge3: float


@dataclass
class SweepResult:
    rows: list
    crossing: float = None
    crossing_ci: tuple = None
    n_boot: int = 0

    def as_records(self):
        return [r.__dict__.copy() for r in self.rows]


def sample_points(config, replicate=0, *, keys=()):
    """Sorted Poisson positions on ``config.bounds`` for one replicate."""
    rng = make_rng(config.seed, *keys, replicate)
    scale = 1.0 / config.lam
    expected = config.lam * config.window
    chunk = int(expected + 5.0 * math.sqrt(expected) + 16)
    pieces = []
    last = 0.0
    while True:
        pos = last + np.cumsum(rng.exponential(scale, chunk))
        if pos[-1] > config.window:
            pieces.append(pos[pos <= config.window])
            break
        pieces.append(pos)
        last = pos[-1]
    out = np.concatenate(pieces)
    if config.origin:
        out += config.origin
    return out


def decompose(positions, ell, bounds=None):
    """Split sorted ``positions`` into proximity clusters.

    A cluster is flagged ``edge_touching`` when its first point lies within
    ``ell`` of ``bounds[0]`` or its last within ``ell`` of ``bounds[1]``.
    Without ``bounds`` the first and last clusters are the edge clusters.
    """
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 1:
        raise ContractError("positions must be one-dimensional")
    ell = check_positive(ell, "ell")
    n = len(pos)
    if n == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0)
        return ClusterSet(empty_i, empty_i.copy(), empty_f, empty_f.copy(), np.zeros(0, bool), 0, ell)
    if not np.all(np.isfinite(pos)):
        raise ContractError("positions must be finite")
    gaps = np.diff(pos)
    if np.any(gaps < 0):
        raise ContractError("positions must be sorted ascending")
    breaks = np.flatnonzero(gaps > ell) + 1
    starts = np.concatenate(([0], breaks)).astype(np.int64)
    ends = np.concatenate((breaks, [n]))
    sizes = ends - starts
    left = pos[starts]
    right = pos[ends - 1]
    if bounds is None:
        edge = np.zeros(len(sizes), dtype=bool)
        edge[0] = edge[-1] = True
    else:
        lo, hi = bounds
        edge = (left - lo <= ell) | (hi - right <= ell)
    return ClusterSet(starts, sizes, left, right, edge, n, ell)


def _filtered_sizes(cluster_sets, edge_policy):
    if edge_policy not in EDGE_POLICIES:
        raise DomainError(f"edge_policy must be one of {EDGE_POLICIES}, got {edge_policy!r}")
    if isinstance(cluster_sets, ClusterSet):
        cluster_sets = [cluster_sets]
    parts = []
    for cs in cluster_sets:
        parts.append(cs.sizes[~cs.edge_touching] if edge_policy == "discard" else cs.sizes)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def cluster_stats(cluster_sets, edge_policy="discard"):
    """Summarise one ClusterSet, or several merged in the given order."""
    sizes = _filtered_sizes(cluster_sets, edge_policy)
    return stats_from_sizes(sizes)


def stats_from_sizes(sizes):
    sizes = np.asarray(sizes, dtype=np.int64)
    n = len(sizes)
    if n == 0:
        raise EmptySampleError("no clusters left after edge filtering")
    mean = float(sizes.mean())
    stderr = float(sizes.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    big = sizes >= 3
    total_agents = int(sizes.sum())
    return ClusterStats(
        mean_size=mean,
        pmf_hat=np.bincount(sizes) / n,
        frac_ge3=float(big.mean()),
        frac_agents_ge3=float(sizes[big].sum() / total_agents),
        n_clusters=n,
        stderr_mean=stderr,
        agent_weighted_mean=float(np.sum(sizes.astype(float) ** 2) / total_agents),
        sizes=sizes,
    )


def simulate(config, *, min_clusters=None, edge_policy="discard", keys=(), max_replicates=100_000):
    """Run ``config.replicates`` replicates and pool their clusters.

    With ``min_clusters`` further replicates are drawn, in index order, until
    at least that many clusters survive the edge policy.
    """
    collected = []
    count = 0
    rep = 0
    while rep < config.replicates or (min_clusters is not None and count < min_clusters):
        if rep >= max_replicates:
            raise ConfigError(f"{min_clusters} clusters not reached in {max_replicates} replicates")
        cs = decompose(sample_points(config, rep, keys=keys), config.ell, config.bounds)
        sizes = _filtered_sizes(cs, edge_policy)
        collected.append(sizes)
        count += len(sizes)
        rep += 1
    return stats_from_sizes(np.concatenate(collected))


def geometric_gof(cluster_stats_, x, min_expected=5.0):
    """Chi-square test of observed cluster sizes against ``Geom(e**-x)``.

    Sizes are binned 1, 2, ... while the expected count stays ``>= min_expected``;
    everything beyond is pooled into one tail bin.  Returns
    ``(statistic, pvalue, n_bins)``.
    """
    sizes = cluster_stats_.sizes
    n = len(sizes)
    obs, exp = [], []
    tail_prob = 1.0
    k = 1
    while True:
        e = n * cluster_pmf(k, x)
        if e < min_expected or n * (tail_prob - cluster_pmf(k, x)) < min_expected:
            break
        obs.append(int(np.count_nonzero(sizes == k)))
        exp.append(e)
        tail_prob -= cluster_pmf(k, x)
        k += 1
    obs.append(int(np.count_nonzero(sizes >= k)))
    exp.append(n - sum(exp))
    if len(obs) < 2:
        raise SampleSizeError("too few clusters for a chi-square test")
    res = stats.chisquare(obs, exp)
    return float(res.statistic), float(res.pvalue), len(obs)


def estimate_crossing(x, mean_size, target=3.0, weights=None):
    """Abscissa where a monotone fit of ``mean_size`` first reaches ``target``.

    Isotonic regression enforces monotonicity; the crossing is found by
    linear interpolation on the fitted values.  Returns None when the
    fitted curve does not cross ``target`` inside the grid.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(mean_size, dtype=float)
    if len(x) < 2:
        return None
    fitted = IsotonicRegression(increasing=True).fit_transform(x, y, sample_weight=weights)
    above = np.flatnonzero(fitted >= target)
    if len(above) == 0 or above[0] == 0:
        return None
    j = above[0]
    x0, x1, f0, f1 = x[j - 1], x[j], fitted[j - 1], fitted[j]
    return float(x0 + (target - f0) * (x1 - x0) / (f1 - f0))


def _sweep_point(i, xval, template, clusters_per_point, edge_policy):
    lam = xval / template.ell
    cfg = replace(template, lam=lam, window=template.lam * template.window / lam, replicates=1)
    return simulate(cfg, min_clusters=clusters_per_point, edge_policy=edge_policy, keys=(i,))


def sweep(x_grid, template, clusters_per_point=10_000, *, n_boot=200, edge_policy="discard", n_jobs=None):
    """Cluster statistics over a grid of ``x = lam * ell`` values.

    Every grid point reuses ``template.ell`` and ``template.seed`` and keeps
    the template's expected number of points per window.  With two or more
    grid points the crossing of ``mean_size = 3`` is estimated, together
    with a percentile bootstrap interval obtained by resampling clusters
    within each grid point.
    """
    xs = [check_positive(v, "x_grid value") for v in x_grid]
    if not xs:
        raise DomainError("x_grid is empty")
    clusters_per_point = check_positive_int(clusters_per_point, "clusters_per_point")
    args = [(i, xv, template, clusters_per_point, edge_policy) for i, xv in enumerate(xs)]
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda a: _sweep_point(*a), args))
    else:
        results = [_sweep_point(*a) for a in args]

    rows = [
        SweepRow(x=xv, mean_size=s.mean_size, frac_agents_ge3=s.frac_agents_ge3,
                 stderr=s.stderr_mean, n_clusters=s.n_clusters, frac_ge3=s.frac_ge3)
        for xv, s in zip(xs, results)
    ]
    out = SweepResult(rows=rows)
    if len(xs) < 2:
        return out

    means = np.array([s.mean_size for s in results])
    err = np.array([s.stderr_mean for s in results])
    w = 1.0 / np.where(np.isfinite(err) & (err > 0), err, np.nanmax(err[np.isfinite(err)], initial=1.0)) ** 2
    out.crossing = estimate_crossing(xs, means, weights=w)
    if out.crossing is None or n_boot <= 0:
        return out

    rng = make_rng(template.seed, 2**32 - 1)
    boot_means = np.empty((n_boot, len(xs)))
    for j, s in enumerate(results):
        support = np.flatnonzero(s.pmf_hat)
        counts = rng.multinomial(s.n_clusters, s.pmf_hat[support], size=n_boot)
        boot_means[:, j] = counts @ support / s.n_clusters
    crossings = [estimate_crossing(xs, boot_means[b], weights=w) for b in range(n_boot)]
    crossings = np.array([c for c in crossings if c is not None])
    if len(crossings):
        lo, hi = np.percentile(crossings, [2.5, 97.5])
        out.crossing_ci = (float(lo), float(hi))
    out.n_boot = n_boot
    return out


def gap_cv(positions):
    """Coefficient of variation of consecutive gaps (sample std, n-1)."""
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 1 or len(pos) < 3:
        raise SampleSizeError("gap_cv needs at least 3 points")
    gaps = np.diff(pos)
    if np.any(gaps < 0):
        raise ContractError("positions must be sorted ascending")
    mean = gaps.mean()
    if mean == 0:
        raise SampleSizeError("all points coincide")
    return float(gaps.std(ddof=1) / mean)


class ProximityClusterer(ClusterMixin, BaseEstimator):
    """Cluster 1D positions by the proximity rule ``d <= ell``.

    Parameters
    ----------
    ell : float
        Interaction range.
    bounds : tuple of float, optional
        Observation window used to flag edge clusters.
    edge_policy : {"discard", "keep"}
        Which clusters enter ``stats_``.

    Attributes
    ----------
    labels_ : ndarray of int
        Cluster index of each input point, in input order.
    clusters_ : ClusterSet
    stats_ : ClusterStats or None
        None when the policy leaves no clusters.
    """

    def __init__(self, ell=1.0, bounds=None, edge_policy="discard"):
        self.ell = ell
        self.bounds = bounds
        self.edge_policy = edge_policy

    def fit(self, X, y=None):
        pos = as_1d_float(X, "X")
        order = np.argsort(pos, kind="stable")
        self.clusters_ = decompose(pos[order], self.ell, self.bounds)
        labels = np.empty(len(pos), dtype=np.int64)
        labels[order] = self.clusters_.labels()
        self.labels_ = labels
        self.n_clusters_ = len(self.clusters_)
        try:
            self.stats_ = cluster_stats(self.clusters_, self.edge_policy)
        except EmptySampleError:
            self.stats_ = None
        return self
