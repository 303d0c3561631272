"""Exit criteria.  Each test records one line in the ``acceptance criteria`` summary section."""
import glob
import io
import json
import os
import statistics
import time

import numpy as np
import pytest

from coopperc.cli import main
from coopperc.core import LN3, critical_penetration, lwr_critical_density_ratio, solve_fixed_point
from coopperc.fdfit import FDObservations, compare_models, fit_theta
from coopperc.ingest import read_traj_csv, write_csv
from coopperc.percolation import SimConfig, geometric_gof, gap_cv, sample_points, simulate
from coopperc.synthetic import make_fd_observations, make_jam_harness, make_two_regime_traffic
from coopperc.trajectory import detect_jams, trajectories_to_fd, variance_by_density

pytestmark = pytest.mark.acceptance

HIGHD_ENV = "COOPPERC_HIGHD_DIR"
MC_SEED = 0
SWEEP_SEED = 7
CV_SEED = 0
HARNESS_SEED = 0


# -- randomized runs, shared with the determinism criterion ----------------

def run_cluster_law():
    cfg = SimConfig(lam=LN3, ell=1.0, seed=MC_SEED)
    stats = simulate(cfg, min_clusters=100_000)
    chi2, pvalue, bins = geometric_gof(stats, LN3)
    return stats, pvalue, {"mean": stats.mean_size, "n": stats.n_clusters, "chi2": chi2, "p": pvalue, "bins": bins}


def run_sweep_cli(outdir):
    table, summary = os.path.join(outdir, "sweep.csv"), os.path.join(outdir, "sweep.json")
    code = main(["sweep", "--x-min", "0.5", "--x-max", "2.0", "--points", "64", "--clusters", "10000",
                 "--seed", str(SWEEP_SEED), "--out", table, "--summary", summary])
    assert code == 0
    return table, summary


def run_cv():
    pos = sample_points(SimConfig(lam=1.0, ell=1.0, window=1e5, seed=CV_SEED))
    return len(pos), gap_cv(pos)


def run_coverage():
    inside = []
    for seed in range(100):
        fit = fit_theta(make_fd_observations(LN3, n=100_000, noise=5.0, seed=seed), 80)
        inside.append((fit.theta_hat, fit.sigma, fit.ci95[0] <= LN3 <= fit.ci95[1]))
    return inside


def run_harness():
    h = make_jam_harness(n_clean=10_000, n_drops=100, n_teleports=20, seed=HARNESS_SEED)
    events = detect_jams(h.trajectories, 20.0, 120.0, 200.0, include_artifacts=True)
    return h, events


def _bytes_of_rows(rows):
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue().encode()


# -- criteria ---------------------------------------------------------------

def test_c01_fixed_point_root(criterion):
    root = solve_fixed_point(1e-10)
    timings = []
    for _ in range(50):
        t0 = time.perf_counter()
        solve_fixed_point(1e-10)
        timings.append(time.perf_counter() - t0)
    ms = statistics.median(timings) * 1e3
    ok = abs(root - 1.0986122886681098) <= 1e-10 and ms < 1.0
    criterion(1, ok, f"root={root!r} |err|={abs(root - LN3):.1e} median={ms:.3f} ms (<1 ms)")
    assert ok


def test_c02_analytic_constants(criterion):
    r_ln3 = lwr_critical_density_ratio(LN3)
    r_1 = lwr_critical_density_ratio(1.0)
    p_c = critical_penetration(0.030, 300)
    ok = abs(r_ln3 - 0.509) <= 0.001 and r_1 == 0.5 and abs(p_c - 0.1221) <= 0.0001
    criterion(2, ok, f"rho_c/rho_j(ln3)={r_ln3:.6f} rho_c/rho_j(1)={r_1!r} p_c={p_c:.6f}")
    assert ok


def test_c03_monte_carlo_cluster_law(criterion):
    t0 = time.perf_counter()
    stats, pvalue, _ = run_cluster_law()
    elapsed = time.perf_counter() - t0
    ok = stats.n_clusters >= 100_000 and 2.95 <= stats.mean_size <= 3.05 and pvalue > 0.01 and elapsed < 10
    criterion(3, ok, f"clusters={stats.n_clusters} mean={stats.mean_size:.4f} chi2 p={pvalue:.3f} "
                     f"time={elapsed:.2f} s (seed {MC_SEED})")
    assert ok


def test_c04_threshold_crossing(criterion, tmp_path):
    t0 = time.perf_counter()
    _, summary = run_sweep_cli(str(tmp_path))
    elapsed = time.perf_counter() - t0
    doc = json.loads(open(summary).read())
    x_hat, (lo, hi) = doc["crossing"], doc["crossing_ci95"]
    ok = 1.05 <= x_hat <= 1.15 and lo <= LN3 <= hi and elapsed < 120
    criterion(4, ok, f"x_hat={x_hat:.4f} CI=[{lo:.4f}, {hi:.4f}] time={elapsed:.2f} s (seed {SWEEP_SEED})")
    assert ok


def test_c05_exponential_spacing_cv(criterion):
    n, cv = run_cv()
    ok = 0.98 <= cv <= 1.02 and abs(n - 100_000) < 2000
    criterion(5, ok, f"n={n} CV={cv:.4f}")
    assert ok


def test_c06_noise_free_recovery(criterion):
    obs = make_fd_observations(LN3, n=1000, rho_j=80, v_f=102.2, noise=0.0)
    fit = fit_theta(obs, 80)
    ok = abs(fit.theta_hat - LN3) <= 1e-6 and abs(fit.r2 - 1.0) <= 1e-12
    criterion(6, ok, f"theta_hat={fit.theta_hat!r} |err|={abs(fit.theta_hat - LN3):.1e} R2={fit.r2!r}")
    assert ok


def test_c07_ci_coverage(criterion):
    t0 = time.perf_counter()
    runs = run_coverage()
    elapsed = time.perf_counter() - t0
    hits = sum(inside for *_, inside in runs)
    ok = hits >= 93 and elapsed < 60
    criterion(7, ok, f"coverage={hits}/100 (need >= 93) time={elapsed:.2f} s")
    assert ok


def _highd_observations(root):
    parts = []
    for tracks in sorted(glob.glob(os.path.join(root, "*_tracks.csv"))):
        meta = tracks.replace("_tracks.csv", "_recordingMeta.csv")
        ts = read_traj_csv(tracks, "highd_tracks", meta=meta if os.path.exists(meta) else None)
        parts.append(trajectories_to_fd(ts, 100.0, 1.0))
    if not parts:
        return None
    return FDObservations(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("rho", "v", "weight")))


def test_c08_conditional_highd(criterion):
    root = os.environ.get(HIGHD_ENV)
    obs = _highd_observations(root) if root and os.path.isdir(root) else None
    if obs is None:
        criterion(8, "SKIPPED-CONDITIONAL", f"no licensed highD tracks (set {HIGHD_ENV}); criteria 6-7 stand in")
        pytest.skip("highD data not present")
    fit = fit_theta(obs, 80)
    cmp_ = compare_models(obs, 80)
    ok = 0.95 <= fit.theta_hat <= 1.12 and abs(cmp_.delta_r2_ln3) <= 0.02
    criterion(8, ok, f"theta_hat={fit.theta_hat:.4f}+-{fit.sigma:.4f} dR2(ln3)={cmp_.delta_r2_ln3:.4f} "
                     f"n={fit.n_obs}")
    assert ok


def test_c09_variance_pipeline(criterion):
    res = variance_by_density(make_two_regime_traffic(739.0, 461.0), ell=300, segment_length=1000,
                              snapshot_period=60)
    s = res.summary
    ok = not s.partial and abs(s.ratio - 1.60) <= 0.02
    criterion(9, ok, f"below={s.mean_variance_below:.1f} above={s.mean_variance_above:.1f} ratio={s.ratio:.4f} "
                     f"samples={s.n_below}+{s.n_above}")
    assert ok


def test_c10_jam_detector(criterion):
    h, events = run_harness()
    planted = dict(h.planted)
    teleported = dict(h.teleported)
    accepted = [e for e in events if not e.artifact]
    true_pos = {e.vehicle_id for e in accepted
                if e.vehicle_id in planted and planted[e.vehicle_id] - 120 <= e.t_start <= planted[e.vehicle_id] + 60}
    recall = len(true_pos) / len(planted)
    precision = len(true_pos) / len(accepted) if accepted else 0.0
    flagged = {e.vehicle_id for e in events if e.artifact}
    ok = recall == 1.0 and precision == 1.0 and len(accepted) == len(planted) and flagged == set(teleported)
    criterion(10, ok, f"recall={recall:.2f} precision={precision:.2f} events={len(accepted)} "
                      f"artifacts flagged={len(flagged & set(teleported))}/{len(teleported)} "
                      f"trajectories={len(h.trajectories)}")
    assert ok


def test_c11_discrepancy_guard(criterion, capsys):
    assert main(["constants"]) == 0
    out = capsys.readouterr().out
    ok = "0.7803" in out and "39.0%" in out
    criterion(11, ok, "constants output carries 0.7803 and the published 39.0% with a note")
    assert ok


def test_c12_determinism(criterion, tmp_path):
    digests = []
    for rep in range(2):
        outdir = tmp_path / f"run{rep}"
        outdir.mkdir()
        table, summary = run_sweep_cli(str(outdir))
        _, _, law = run_cluster_law()
        n, cv = run_cv()
        h, events = run_harness()
        blob = {
            "sweep_table": open(table, "rb").read().decode(),
            "sweep_summary": open(summary, "rb").read().decode(),
            "cluster_law": law,
            "cv": [n, cv],
            "coverage": run_coverage(),
            "jams": _bytes_of_rows(events).decode(),
        }
        digests.append(json.dumps(blob, sort_keys=True).encode())
    ok = digests[0] == digests[1]
    criterion(12, ok, f"two full reruns byte-identical ({len(digests[0])} bytes compared)")
    assert ok
