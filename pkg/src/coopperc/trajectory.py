"""Trajectory analytics: FD aggregation, gap statistics, variance binning, jam detection.

All functions take a :class:`TrajectorySet` (or any iterable of
:class:`Trajectory`).  Positions ``s`` are metres along a linear reference,
times ``t`` are seconds and speeds are km/h.
"""
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_positive
from .core import LN3
from .exceptions import ContractError, SampleSizeError
from .fdfit import DEFAULT_RHO_CAP, FDObservations
from .ingest import IngestReport
from .percolation import gap_cv

DEFAULT_ELL = 300.0
DEFAULT_SEGMENT_LENGTH = 500.0
DEFAULT_SNAPSHOT_PERIOD = 60.0
DEFAULT_JUMP_THRESHOLD = 200.0


class TrajRecord(NamedTuple):
    vehicle_id: str
    t: float
    s: float
    speed: float
    segment_id: str = None
    lane_or_direction: str = None


@dataclass
class Trajectory:
    """Time-sorted records of one vehicle (strictly increasing ``t``)."""

    vehicle_id: str
    t: np.ndarray
    s: np.ndarray
    speed: np.ndarray
    segment_id: np.ndarray = None
    direction: str = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        self.speed = np.asarray(self.speed, dtype=float)
        if not len(self.t) == len(self.s) == len(self.speed):
            raise ContractError("t, s and speed must have equal length")
        if len(self.t) and np.any(np.diff(self.t) <= 0):
            raise ContractError(f"timestamps of vehicle {self.vehicle_id!r} are not strictly increasing")

    def __len__(self):
        return len(self.t)

    def records(self):
        for i in range(len(self.t)):
            seg = None if self.segment_id is None else self.segment_id[i]
            yield TrajRecord(self.vehicle_id, float(self.t[i]), float(self.s[i]), float(self.speed[i]), seg,
                             self.direction)


@dataclass
class TrajectorySet:
    trajectories: dict
    report: IngestReport = field(default_factory=IngestReport)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_groups(cls, groups, report=None, meta=None):
        """Build from ``vid -> (t, s, speed, segment_ids, directions)`` columns.

        Records are stably sorted by time; a vehicle with a repeated
        timestamp is quarantined and its rows counted as quarantined.
        """
        report = IngestReport() if report is None else report
        out = {}
        for vid in sorted(groups):
            t, s, v, segs, dirs = groups[vid]
            t = np.asarray(t, dtype=float)
            order = np.argsort(t, kind="stable")
            t = t[order]
            if np.any(np.diff(t) <= 0):
                report.quarantined_vehicles.append(vid)
                report.rows_quarantined += len(t)
                continue
            seg_arr = None
            if any(x is not None for x in segs):
                seg_arr = np.array([segs[i] for i in order], dtype=object)
            tags = {d for d in dirs if d is not None}
            direction = None
            if tags:
                # majority tag, ties broken by sort order
                direction = max(sorted(tags), key=lambda d: sum(1 for x in dirs if x == d))
            out[vid] = Trajectory(vid, t, np.asarray(s, dtype=float)[order], np.asarray(v, dtype=float)[order],
                                  seg_arr, direction)
            report.rows_parsed += len(t)
        return cls(out, report, dict(meta or {}))

    @classmethod
    def from_records(cls, records, meta=None):
        groups = {}
        report = IngestReport()
        for r in records:
            report.rows_in += 1
            g = groups.setdefault(str(r.vehicle_id), ([], [], [], [], []))
            g[0].append(r.t)
            g[1].append(r.s)
            g[2].append(r.speed)
            g[3].append(r.segment_id)
            g[4].append(r.lane_or_direction)
        return cls.from_groups(groups, report=report, meta=meta)

    @classmethod
    def from_trajectories(cls, trajectories, meta=None):
        return cls({tr.vehicle_id: tr for tr in sorted(trajectories, key=lambda tr: tr.vehicle_id)},
                   meta=dict(meta or {}))

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories.values())

    def __getitem__(self, vid):
        return self.trajectories[vid]

    def records(self):
        for tr in self:
            yield from tr.records()


def _as_list(trajs):
    return list(trajs) if not isinstance(trajs, TrajectorySet) else list(trajs.trajectories.values())


@dataclass
class Snapshot:
    """Interpolated state of every vehicle active at one instant."""

    t: float
    vehicle_id: list
    s: np.ndarray
    speed: np.ndarray
    direction: list
    segment_id: list


def snapshot(trajs, t_snap):
    """Linearly interpolate position and speed of vehicles active at ``t_snap``."""
    vids, pos, spd, dirs, segs = [], [], [], [], []
    for tr in _as_list(trajs):
        if not len(tr) or t_snap < tr.t[0] or t_snap > tr.t[-1]:
            continue
        vids.append(tr.vehicle_id)
        pos.append(np.interp(t_snap, tr.t, tr.s))
        spd.append(np.interp(t_snap, tr.t, tr.speed))
        dirs.append(tr.direction)
        if tr.segment_id is None:
            segs.append(None)
        else:
            segs.append(tr.segment_id[np.searchsorted(tr.t, t_snap, side="right") - 1])
    return Snapshot(t_snap, vids, np.array(pos), np.array(spd), dirs, segs)


def gap_cv_snapshot(trajs, t_snap, segment=None, direction=None):
    """CV of inter-vehicle spacings at ``t_snap``.

    ``segment`` restricts to positions in ``[lo, hi)``; ``direction`` to one
    direction tag.
    """
    snap = snapshot(trajs, t_snap)
    keep = np.ones(len(snap.s), dtype=bool)
    if segment is not None:
        lo, hi = segment
        keep &= (snap.s >= lo) & (snap.s < hi)
    if direction is not None:
        keep &= np.array([d == direction for d in snap.direction], dtype=bool)
    pos = np.sort(snap.s[keep])
    if len(pos) < 3:
        raise SampleSizeError(f"need at least 3 vehicles at t={t_snap}, found {len(pos)}")
    return gap_cv(pos)


def _codes(labels):
    """Integer codes for hashable labels (None allowed), ordered by repr."""
    uniq = sorted(set(labels), key=lambda x: (x is not None, str(x)))
    lookup = {u: i for i, u in enumerate(uniq)}
    return np.array([lookup[x] for x in labels], dtype=np.int64), uniq


def trajectories_to_fd(trajs, space_bin=100.0, time_bin=1.0, directions=None, rho_cap=DEFAULT_RHO_CAP):
    """Aggregate trajectories into fundamental-diagram observations.

    Records are binned by ``(direction, floor(t/time_bin), floor(s/space_bin))``.
    Each vehicle contributes its mean speed once per cell; a cell yields
    ``rho = n_vehicles / space_bin`` (veh/km), ``v`` = mean of the vehicle
    speeds and ``weight = n_vehicles``.  Cells with fewer than two vehicles
    are dropped; cells above ``rho_cap`` are counted in ``n_rejected``.
    ``time_bin`` should be short against ``space_bin / speed`` so the
    density is effectively instantaneous.
    """
    space_bin = check_positive(space_bin, "space_bin")
    time_bin = check_positive(time_bin, "time_bin")
    parts = []
    dir_labels = []
    for vi, tr in enumerate(_as_list(trajs)):
        if directions is not None and tr.direction not in directions:
            continue
        n = len(tr)
        if not n:
            continue
        parts.append((np.full(n, vi), np.floor(tr.t / time_bin), np.floor(tr.s / space_bin), tr.speed))
        dir_labels.extend([tr.direction] * n)
    if not parts:
        obs = FDObservations(np.zeros(0), np.zeros(0), np.zeros(0))
        obs.warnings.append("no trajectory records to aggregate")
        return obs
    veh = np.concatenate([p[0] for p in parts])
    tcell = np.concatenate([p[1] for p in parts]).astype(np.int64)
    scell = np.concatenate([p[2] for p in parts]).astype(np.int64)
    speed = np.concatenate([p[3] for p in parts])
    dcode, _ = _codes(dir_labels)

    # per (cell, vehicle) mean speed
    keys = np.column_stack([dcode, tcell, scell, veh])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    veh_speed = np.bincount(inv, weights=speed) / np.bincount(inv)
    # per cell
    cells, cinv = np.unique(uniq[:, :3], axis=0, return_inverse=True)
    cinv = cinv.ravel()
    count = np.bincount(cinv)
    mean_speed = np.bincount(cinv, weights=veh_speed) / count
    rho = count / (space_bin / 1000.0)
    keep = count >= 2
    over = keep & (rho > rho_cap)
    keep &= ~over
    obs = FDObservations(rho[keep], mean_speed[keep], count[keep].astype(float))
    obs.n_rejected = int(np.count_nonzero(over))
    if not len(obs):
        obs.warnings.append("no cell holds two or more vehicles")
    return obs


class FDAggregator(TransformerMixin, BaseEstimator):
    """Stateless transformer from trajectories to FD observations."""

    def __init__(self, space_bin=100.0, time_bin=1.0, directions=None, rho_cap=DEFAULT_RHO_CAP):
        self.space_bin = space_bin
        self.time_bin = time_bin
        self.directions = directions
        self.rho_cap = rho_cap

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return trajectories_to_fd(X, self.space_bin, self.time_bin, self.directions, self.rho_cap)


@dataclass
class SnapshotSample:
    segment_id: str
    t_snap: float
    n_vehicles: int
    segment_length: float
    lam: float
    x: float
    speed_variance: float


@dataclass
class DensityBin:
    x_lo: float
    x_hi: float
    n_samples: int
    mean_variance: float


@dataclass
class VarianceSummary:
    threshold: float
    n_below: int
    n_above: int
    mean_variance_below: float
    mean_variance_above: float
    ratio: float
    partial: bool
    ratio_undefined: bool


@dataclass
class VarianceResult:
    samples: list
    bins: list
    summary: VarianceSummary


def snapshot_samples(trajs, ell=DEFAULT_ELL, segment_length=DEFAULT_SEGMENT_LENGTH,
                     snapshot_period=DEFAULT_SNAPSHOT_PERIOD, min_vehicles=2, t_start=None):
    """Speed variance per (road segment, snapshot).

    Snapshots fall at ``t_start + k * snapshot_period`` (``t_start`` defaults
    to the earliest record).  A segment is the pair (recorded segment id, or
    direction when absent; ``floor(s / segment_length)``).  Samples with
    fewer than ``min_vehicles`` vehicles are skipped.
    """
    ell = check_positive(ell, "ell")
    segment_length = check_positive(segment_length, "segment_length")
    period = check_positive(snapshot_period, "snapshot_period")
    if min_vehicles < 2:
        raise SampleSizeError("speed variance needs at least 2 vehicles per sample")
    trs = [tr for tr in _as_list(trajs) if len(tr)]
    if not trs:
        return []
    t0 = min(tr.t[0] for tr in trs) if t_start is None else float(t_start)

    ks, pos, spd, labels = [], [], [], []
    for tr in trs:
        k_lo = math.ceil((tr.t[0] - t0) / period)
        k_hi = math.floor((tr.t[-1] - t0) / period)
        if k_hi < k_lo:
            continue
        k = np.arange(max(k_lo, 0), k_hi + 1)
        if not len(k):
            continue
        times = t0 + k * period
        ks.append(k)
        pos.append(np.interp(times, tr.t, tr.s))
        spd.append(np.interp(times, tr.t, tr.speed))
        if tr.segment_id is None:
            labels.extend([tr.direction] * len(k))
        else:
            idx = np.searchsorted(tr.t, times, side="right") - 1
            labels.extend(tr.segment_id[idx].tolist())
    if not ks:
        return []
    k = np.concatenate(ks)
    pos = np.concatenate(pos)
    spd = np.concatenate(spd)
    seg_code, seg_names = _codes(labels)
    cell = np.floor(pos / segment_length).astype(np.int64)

    keys = np.column_stack([seg_code, cell, k])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    n = np.bincount(inv)
    mean = np.bincount(inv, weights=spd) / n
    sq = np.bincount(inv, weights=(spd - mean[inv]) ** 2)
    samples = []
    for g in np.flatnonzero(n >= min_vehicles):
        lam = n[g] / segment_length
        name = seg_names[uniq[g, 0]]
        samples.append(SnapshotSample(
            segment_id=f"{'' if name is None else name}#{uniq[g, 1]}",
            t_snap=float(t0 + uniq[g, 2] * period),
            n_vehicles=int(n[g]),
            segment_length=segment_length,
            lam=float(lam),
            x=float(lam * ell),
            speed_variance=float(sq[g] / (n[g] - 1)),
        ))
    samples.sort(key=lambda smp: (smp.segment_id, smp.t_snap))
    return samples


def summarize_variance(samples, threshold=LN3):
    """Mean variance below (``x < threshold``) and at/above the threshold."""
    below = [smp.speed_variance for smp in samples if smp.x < threshold]
    above = [smp.speed_variance for smp in samples if smp.x >= threshold]
    mb = float(np.mean(below)) if below else float("nan")
    ma = float(np.mean(above)) if above else float("nan")
    partial = not below or not above
    undefined = partial or ma == 0.0
    return VarianceSummary(
        threshold=threshold,
        n_below=len(below),
        n_above=len(above),
        mean_variance_below=mb,
        mean_variance_above=ma,
        ratio=float("nan") if undefined else mb / ma,
        partial=partial,
        ratio_undefined=undefined,
    )


def bin_by_density(samples, x_bins=None):
    """Mean speed variance per left-closed ``[x_lo, x_hi)`` bin; empty bins omitted."""
    if not samples:
        return []
    xs = np.array([smp.x for smp in samples])
    var = np.array([smp.speed_variance for smp in samples])
    if x_bins is None:
        x_bins = np.arange(0.0, math.floor(xs.max() * 10) / 10 + 0.2, 0.1)
    edges = np.asarray(x_bins, dtype=float)
    idx = np.searchsorted(edges, xs, side="right") - 1
    rows = []
    for b in range(len(edges) - 1):
        sel = idx == b
        if np.any(sel):
            rows.append(DensityBin(float(edges[b]), float(edges[b + 1]), int(sel.sum()), float(var[sel].mean())))
    return rows


def variance_by_density(trajs, ell=DEFAULT_ELL, segment_length=DEFAULT_SEGMENT_LENGTH,
                        snapshot_period=DEFAULT_SNAPSHOT_PERIOD, x_bins=None, *, min_vehicles=2, t_start=None):
    samples = snapshot_samples(trajs, ell, segment_length, snapshot_period, min_vehicles, t_start)
    return VarianceResult(samples, bin_by_density(samples, x_bins), summarize_variance(samples))


@dataclass
class JamEvent:
    vehicle_id: str
    t_start: float
    t_end: float
    v_before: float
    v_after: float
    drop: float
    max_position_jump: float
    artifact: bool


def _range_argmin(values, lo, hi):
    """Index of the minimum of ``values[lo[i]:hi[i]]`` for every i (all ranges non-empty)."""
    n = len(values)
    table = [np.arange(n)]
    width = 1
    while 2 * width <= n:
        prev = table[-1]
        a = prev[: n - 2 * width + 1]
        b = prev[width: n - width + 1]
        table.append(np.where(values[b] < values[a], b, a))
        width *= 2
    length = hi - lo
    level = np.floor(np.log2(length)).astype(np.int64)
    out = np.empty(len(lo), dtype=np.int64)
    for lv in np.unique(level):
        sel = level == lv
        a = table[lv][lo[sel]]
        b = table[lv][hi[sel] - (1 << int(lv))]
        out[sel] = np.where(values[b] < values[a], b, a)
    return out


def _vehicle_jams(tr, drop_threshold, window, jump_threshold):
    n = len(tr)
    if n < 2 or np.ptp(tr.speed) <= drop_threshold:
        return []
    t, v = tr.t, tr.speed
    end = np.searchsorted(t, t + window, side="right")
    start = np.arange(n)
    has_later = end - start >= 2
    if not np.any(has_later):
        return []
    i = start[has_later]
    j = _range_argmin(v, i + 1, end[has_later])
    drop = v[i] - v[j]
    hit = drop > drop_threshold
    if not np.any(hit):
        return []
    i, j, drop = i[hit], j[hit], drop[hit]

    jumps = np.abs(np.diff(tr.s))
    events = []
    k = 0
    while k < len(i):
        # merge candidates whose [t_i, t_j] windows overlap into one episode
        ep_end = t[j[k]]
        last = k
        while last + 1 < len(i) and t[i[last + 1]] <= ep_end:
            last += 1
            ep_end = max(ep_end, t[j[last]])
        best = k + int(np.argmax(drop[k: last + 1]))
        lo_idx = i[k]
        hi_idx = int(np.searchsorted(t, ep_end, side="right")) - 1
        max_jump = float(jumps[lo_idx:hi_idx].max()) if hi_idx > lo_idx else 0.0
        events.append(JamEvent(
            vehicle_id=tr.vehicle_id,
            t_start=float(t[i[best]]),
            t_end=float(t[j[best]]),
            v_before=float(v[i[best]]),
            v_after=float(v[j[best]]),
            drop=float(drop[best]),
            max_position_jump=max_jump,
            artifact=max_jump > jump_threshold,
        ))
        k = last + 1
    return events


def detect_jams(trajs, drop_threshold=20.0, window=120.0, jump_threshold=DEFAULT_JUMP_THRESHOLD,
                include_artifacts=False):
    """Phantom-jam candidates: a speed drop above ``drop_threshold`` km/h within ``window`` s.

    For every record the largest drop to any later record inside the window
    is found; overlapping drop windows of one vehicle merge into a single
    episode reported by its largest drop.  An episode is an artifact when
    any consecutive position jump inside it exceeds ``jump_threshold`` m.
    Events are returned sorted by (vehicle_id, t_start); artifacts only
    with ``include_artifacts``.
    """
    drop_threshold = check_positive(drop_threshold, "drop_threshold")
    window = check_positive(window, "window")
    jump_threshold = check_positive(jump_threshold, "jump_threshold")
    events = []
    for tr in _as_list(trajs):
        events.extend(_vehicle_jams(tr, drop_threshold, window, jump_threshold))
    if not include_artifacts:
        events = [e for e in events if not e.artifact]
    events.sort(key=lambda e: (e.vehicle_id, e.t_start))
    return events


def events_per_hour(events):
    """Event counts by hour of day, taking ``t_start`` as seconds from midnight (or UTC epoch)."""
    counts = [0] * 24
    for e in events:
        counts[int(e.t_start // 3600) % 24] += 1
    return counts


class PhantomJamDetector(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`detect_jams`.

    ``fit`` stores every candidate in ``candidates_`` and the accepted
    (non-artifact) ones in ``events_``; ``transform`` returns accepted events.
    """

    def __init__(self, drop_threshold=20.0, window=120.0, jump_threshold=DEFAULT_JUMP_THRESHOLD):
        self.drop_threshold = drop_threshold
        self.window = window
        self.jump_threshold = jump_threshold

    def fit(self, X, y=None):
        self.candidates_ = detect_jams(X, self.drop_threshold, self.window, self.jump_threshold,
                                       include_artifacts=True)
        self.events_ = [e for e in self.candidates_ if not e.artifact]
        self.n_artifacts_ = len(self.candidates_) - len(self.events_)
        return self

    def transform(self, X):
        return detect_jams(X, self.drop_threshold, self.window, self.jump_threshold)
