"""Synthetic datasets with known ground truth, in the spirit of ``sklearn.datasets.make_*``."""
from dataclasses import dataclass

import numpy as np

from .core import LWRParams, lwr_speed
from .fdfit import FDObservations
from .percolation import make_rng
from .trajectory import Trajectory, TrajectorySet

KMH_TO_MS = 1 / 3.6


def _standardized(n):
    """``n`` equally spaced values with mean 0 and sample variance 1."""
    z = np.arange(n) - (n - 1) / 2
    return z / z.std(ddof=1)


def make_fd_observations(theta, n=1000, rho_j=80.0, v_f=102.2, noise=0.0, seed=0, clip=False):
    """Power-law FD points with ``rho ~ U(0.5, rho_j - 0.5)`` and Gaussian speed noise.

    The noise is left untruncated, so speeds near ``rho_j`` may be
    negative; ``clip=True`` truncates them at zero, which biases the
    noise and with it the fitted exponent.
    """
    rng = np.random.default_rng(seed)
    rho = rng.uniform(0.5, rho_j - 0.5, n)
    v = lwr_speed(rho, LWRParams(v_f, rho_j, theta))
    if noise:
        v = v + rng.normal(0.0, noise, n)
    if clip:
        return FDObservations.from_arrays(rho, np.clip(v, 0, None))
    return FDObservations(rho, v, np.ones(n))


def make_uniform_traffic(density, speed=60.0, length=5000.0, duration=60.0, dt=1.0, direction="+1", offset=0.0,
                         t0=0.0, prefix="u"):
    """Equally spaced vehicles (``density`` veh/km) moving at a constant speed on a ring of ``length`` m."""
    spacing = 1000.0 / density
    n = int(round(length / spacing))
    t = t0 + np.arange(0.0, duration + dt / 2, dt)
    trs = []
    for i in range(n):
        s = (offset + i * spacing + speed * KMH_TO_MS * (t - t0)) % length
        # split at wrap-around so each piece is a monotone trip
        cut = np.flatnonzero(np.diff(s) < 0)
        for k, (lo, hi) in enumerate(zip(np.r_[0, cut + 1], np.r_[cut + 1, len(t)])):
            trs.append(Trajectory(f"{prefix}{i:06d}.{k}", t[lo:hi], s[lo:hi], np.full(hi - lo, float(speed)),
                                  direction=direction))
    return TrajectorySet.from_trajectories(trs)


def make_poisson_traffic(lam, length, speed=80.0, seed=0, pairs=False, pair_gap=5.0):
    """Vehicles at Poisson positions (rate ``lam`` per m), two records each (t = 0, 1 s).

    With ``pairs`` every vehicle gets a follower ``pair_gap`` m behind it,
    an over-dispersed (platoon) placement.
    """
    rng = make_rng(seed)
    n = rng.poisson(lam * length)
    pos = np.sort(rng.uniform(0, length, n))
    if pairs:
        pos = np.sort(np.concatenate([pos, pos + pair_gap]))
    step = speed * KMH_TO_MS
    t = np.array([0.0, 1.0])
    trs = [Trajectory(f"p{i:07d}", t, np.array([p, p + step]), np.full(2, float(speed)), direction="+1")
           for i, p in enumerate(pos)]
    return TrajectorySet.from_trajectories(trs)


def make_two_regime_traffic(var_below=739.0, var_above=461.0, n_snapshots=40, n_segments=5,
                            segment_length=1000.0, snapshot_period=60.0, mean_speed=80.0, seed=0):
    """Snapshot samples whose speed variance is exactly ``var_below`` or ``var_above``.

    With ``ell = 300`` and the default 1000 m segments a sample of ``n``
    vehicles has ``x = 0.3 n``; samples with 2 or 3 vehicles fall below
    ln 3 and samples with 4 to 6 vehicles above.  Each vehicle has two
    records, at the snapshot instant and one second later.
    """
    rng = make_rng(seed)
    trs = []
    for k in range(n_snapshots):
        t = np.array([k * snapshot_period, k * snapshot_period + 1.0])
        for seg in range(n_segments):
            below = (k + seg) % 2 == 0
            n = int(rng.integers(2, 4) if below else rng.integers(4, 7))
            var = var_below if below else var_above
            speeds = mean_speed + np.sqrt(var) * _standardized(n)
            spacing = segment_length / (n + 1)
            for i, v in enumerate(speeds):
                s0 = seg * segment_length + spacing * (i + 0.5)
                trs.append(Trajectory(f"r{k:04d}s{seg:02d}v{i}", t, np.array([s0, s0 + v * KMH_TO_MS]),
                                      np.full(2, v), direction="+1"))
    return TrajectorySet.from_trajectories(trs)


@dataclass
class JamHarness:
    trajectories: TrajectorySet
    planted: list
    teleported: list


def make_jam_harness(n_clean=10_000, n_drops=100, n_teleports=20, duration=600.0, dt=1.0, drop=30.0,
                     ramp=60.0, teleport=500.0, seed=0, t0=0.0):
    """Smooth trajectories with planted speed drops and teleporting artifacts.

    Clean vehicles cruise at 60-110 km/h with a +-3 km/h oscillation and
    0.5 km/h noise, far from any 20 km/h drop.  ``n_drops`` of them
    instead lose ``drop`` km/h linearly over ``ramp`` s.  ``n_teleports``
    extra vehicles have the same drop plus a ``teleport`` m position jump
    mid-ramp.
    """
    rng = make_rng(seed)
    t = t0 + np.arange(0.0, duration + dt / 2, dt)
    n_total = n_clean + n_teleports
    planted_idx = set(rng.choice(n_clean, n_drops, replace=False).tolist())
    trs, planted, teleported = [], [], []
    for i in range(n_total):
        vid = f"v{i:06d}"
        base = rng.uniform(60, 110)
        phase = rng.uniform(0, 2 * np.pi)
        v = base + 3 * np.sin(2 * np.pi * (t - t0) / 300 + phase) + rng.normal(0, 0.5, len(t))
        is_tele = i >= n_clean
        if i in planted_idx or is_tele:
            start = rng.uniform(0.2, 0.6) * duration
            v = v - drop * np.clip((t - t0 - start) / ramp, 0, 1)
            (teleported if is_tele else planted).append((vid, t0 + start))
        v = np.clip(v, 0, None)
        s = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * KMH_TO_MS * np.diff(t))])
        if is_tele:
            s[t - t0 >= start + ramp / 2] += teleport
        trs.append(Trajectory(vid, t, s, v, direction="+1"))
    return JamHarness(TrajectorySet.from_trajectories(trs), sorted(planted), sorted(teleported))
