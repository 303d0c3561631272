"""``coopperc`` command line: one subcommand per pipeline.

Tables go to ``--out`` as CSV (``-`` for stdout) and summaries to
``--summary`` as a JSON document carrying ``schema_version`` and the run
manifest.  Errors are reported as a JSON object on stderr; the exit code
is 1 for runtime errors and 2 for usage errors.
"""
import argparse
import contextlib
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .core import (
    LN3,
    REPORTED_DISRUPTION_AT_SF5,
    cluster_pmf,
    critical_disruption_fraction,
    critical_penetration,
    expected_cluster_size,
    lwr_critical_density_ratio,
    shannon_entropy,
    solve_fixed_point,
)
from .exceptions import CoopPercError, IngestionError
from .fdfit import DEFAULT_RHO_J_GRID, compare_models, fit_theta, metrics_at, sensitivity_table
from .ingest import read_fd_csv, read_traj_csv, write_csv, write_json
from .percolation import SimConfig, sweep
from .trajectory import (
    DEFAULT_ELL,
    DEFAULT_JUMP_THRESHOLD,
    DEFAULT_SEGMENT_LENGTH,
    DEFAULT_SNAPSHOT_PERIOD,
    detect_jams,
    events_per_hour,
    trajectories_to_fd,
    variance_by_density,
)

THREADS_ENV = "COOPPERC_THREADS"
BASELINE_RHO0 = 0.030
BASELINE_ELL = 300.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _emit_error(kind, message, **extra):
    doc = {"error": kind, "message": message, **{k: v for k, v in extra.items() if v is not None}}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")


@contextlib.contextmanager
def _sink(path):
    if path in (None, "-"):
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(args, params, seed=None):
    inputs = {}
    for path in (getattr(args, "input", None), getattr(args, "meta", None)):
        if path and os.path.exists(path):
            inputs[os.path.basename(path)] = _digest(path)
    return {"command": args.command, "params": params, "seed": seed, "inputs": inputs, "version": __version__}


def _positive(text):
    value = float(text)
    if not (value > 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def _count(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _grid(text):
    try:
        values = [_positive(v) for v in text.split(",") if v.strip()]
    except (ValueError, argparse.ArgumentTypeError):
        raise argparse.ArgumentTypeError(f"expected comma-separated positive numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty grid")
    return values


def _v_f(text):
    return "profile" if text == "profile" else _positive(text)


def _default_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}")


def _write_outputs(args, table, fieldnames, summary, manifest, started):
    """Write table, summary and manifest; the manifest also lists output digests."""
    if table is not None:
        with _sink(args.out) as fh:
            write_csv(table, fh, fieldnames)
    if args.summary:
        with _sink(args.summary) as fh:
            write_json({**summary, "manifest": manifest}, fh)
    if args.manifest:
        outputs = {}
        for path in (args.out, args.summary):
            if path not in (None, "-") and os.path.exists(path):
                outputs[os.path.basename(path)] = _digest(path)
        doc = {**manifest, "outputs": outputs, "duration_s": time.perf_counter() - started}
        with open(args.manifest, "w", encoding="utf-8") as fh:
            write_json(doc, fh)


# -- subcommands ------------------------------------------------------------

def constants_report():
    root = solve_fixed_point(1e-12)
    p_c = critical_penetration(BASELINE_RHO0, BASELINE_ELL)
    sf5 = critical_disruption_fraction(5.0)
    # truncation at 200 leaves a tail below 1e-34
    pmf = [cluster_pmf(n, LN3) for n in range(1, 200)]
    return {
        "ln3_direct": LN3,
        "ln3_solver": root,
        "solver_abs_error": abs(root - LN3),
        "mean_cluster_size_at_ln3": expected_cluster_size(LN3),
        "entropy_at_ln3_nats": shannon_entropy(pmf),
        "entropy_at_ln3_closed_form_nats": 3 * math.log(3) - 2 * math.log(2),
        "critical_density_ratio": {
            "theta_1": lwr_critical_density_ratio(1.0),
            "theta_ln3": lwr_critical_density_ratio(LN3),
        },
        "critical_penetration": {"rho0_per_m": BASELINE_RHO0, "ell_m": BASELINE_ELL, "p_c": p_c},
        "disruption_fraction_sf5": {
            "formula": "1 - ln3/SF",
            "value": sf5.fraction,
            "reported_value": REPORTED_DISRUPTION_AT_SF5,
            "note": (f"formula gives {sf5.fraction:.4f} at SF = 5 but the published figure is "
                     f"{REPORTED_DISRUPTION_AT_SF5:.1%}; the two are inconsistent and neither is adjusted"),
        },
    }


def _format_constants(rep):
    ent = rep["entropy_at_ln3_nats"]
    cd = rep["critical_density_ratio"]
    pc = rep["critical_penetration"]
    sf = rep["disruption_fraction_sf5"]
    lines = [
        f"ln 3 (direct)                 {rep['ln3_direct']!r}",
        f"ln 3 (fixed-point solver)     {rep['ln3_solver']!r}  |error| = {rep['solver_abs_error']:.1e}",
        f"mean cluster size at ln 3     {rep['mean_cluster_size_at_ln3']:.12f}",
        f"entropy at ln 3 (nats)        {ent:.12f}  closed form {rep['entropy_at_ln3_closed_form_nats']:.12f}",
        f"rho_c/rho_j, theta = 1        {cd['theta_1']:.6f}",
        f"rho_c/rho_j, theta = ln 3     {cd['theta_ln3']:.6f}  (~ {cd['theta_ln3']:.3f})",
        f"p_c at rho0 = {pc['rho0_per_m']} veh/m, ell = {pc['ell_m']:.0f} m   {pc['p_c']:.6f}  ({pc['p_c']:.1%})",
        f"disruption fraction, SF = 5   {sf['value']:.4f}  ({sf['formula']})",
        f"NOTE: {sf['note']}",
    ]
    return "\n".join(lines) + "\n"


def cmd_constants(args):
    rep = constants_report()
    with _sink(args.out) as fh:
        if args.format == "json":
            write_json(rep, fh)
        else:
            fh.write(_format_constants(rep))


def cmd_sweep(args, started):
    if args.x_min > args.x_max:
        raise UsageError("--x-min must not exceed --x-max")
    grid = np.linspace(args.x_min, args.x_max, args.points) if args.points > 1 else np.array([args.x_min])
    template = SimConfig(lam=1.0 / args.ell, ell=args.ell, window=args.points_per_window * args.ell, seed=args.seed)
    res = sweep(grid.tolist(), template, args.clusters, n_boot=args.n_boot, edge_policy=args.edge_policy,
                n_jobs=args.threads)
    params = {k: getattr(args, k) for k in
              ("x_min", "x_max", "points", "clusters", "ell", "points_per_window", "n_boot", "edge_policy")}
    summary = {"n_points": len(res.rows), "target_mean_size": 3.0, "analytic_crossing": LN3}
    if res.crossing is not None:
        summary["crossing"] = res.crossing
        summary["crossing_ci95"] = list(res.crossing_ci) if res.crossing_ci else None
    _write_outputs(args, res.rows, None, summary, _manifest(args, params, args.seed), started)


def _load_fd(args):
    if args.input_kind == "fd":
        return read_fd_csv(args.input, speed_scale=args.speed_scale, max_bad_rows=args.max_bad_rows)
    ts = read_traj_csv(args.input, args.schema, speed_scale=args.speed_scale, meta=args.meta,
                       max_bad_rows=args.max_bad_rows)
    return trajectories_to_fd(ts, args.space_bin, args.time_bin)


def cmd_fit(args, started):
    obs = _load_fd(args)
    params = {k: getattr(args, k) for k in
              ("input_kind", "schema", "rho_j", "rho_j_grid", "v_f", "theta_fixed", "speed_scale",
               "space_bin", "time_bin")}
    summary = {"n_obs": len(obs), "n_rejected": obs.n_rejected, "warnings": obs.warnings[:20]}
    v_f = args.v_f
    if args.theta_fixed is not None:
        r2, rmse = metrics_at(obs, args.theta_fixed, args.rho_j, v_f)
        row = {"rho_j": args.rho_j, "theta": args.theta_fixed, "r2": r2, "rmse": rmse}
        table, fields = [row], ["rho_j", "theta", "r2", "rmse"]
        summary["fixed"] = row
    elif args.rho_j_grid:
        rows = sensitivity_table(obs, args.rho_j_grid, v_f)
        table, fields = rows, None
        summary["sensitivity"] = rows
    else:
        fit = fit_theta(obs, args.rho_j, v_f)
        cmp_ = compare_models(obs, args.rho_j, v_f)
        row = {
            "rho_j": fit.rho_j_used, "theta_hat": fit.theta_hat, "sigma": fit.sigma,
            "ci95_lo": fit.ci95[0], "ci95_hi": fit.ci95[1], "r2": fit.r2, "rmse": fit.rmse,
            "v_f": fit.v_f_used, "n_obs": fit.n_obs, "n_excluded": fit.n_excluded,
            "r2_ln3": cmp_.ln3.r2, "r2_greenshields": cmp_.greenshields.r2,
            "ln3_distance_sigmas": abs(fit.theta_hat - LN3) / fit.sigma if fit.sigma > 0 else None,
        }
        table, fields = [row], list(row)
        summary["fit"] = fit
        summary["comparison"] = cmp_.as_dict()
    _write_outputs(args, table, fields, summary, _manifest(args, params), started)


def cmd_variance(args, started):
    ts = read_traj_csv(args.input, args.schema, speed_scale=args.speed_scale, meta=args.meta,
                       max_bad_rows=args.max_bad_rows)
    x_bins = None
    if args.x_bin_width:
        xs_hi = max(2.0, 3 * LN3)
        x_bins = np.arange(0.0, xs_hi + args.x_bin_width, args.x_bin_width)
    res = variance_by_density(ts, args.ell, args.segment_length, args.snapshot_period, x_bins,
                              min_vehicles=args.min_vehicles)
    params = {k: getattr(args, k) for k in
              ("schema", "ell", "segment_length", "snapshot_period", "x_bin_width", "min_vehicles", "speed_scale")}
    summary = {"n_samples": len(res.samples), "summary": res.summary,
               "ingest": {"rows_in": ts.report.rows_in, "rows_parsed": ts.report.rows_parsed,
                          "rows_quarantined": ts.report.rows_quarantined}}
    if args.samples_out:
        with _sink(args.samples_out) as fh:
            write_csv(res.samples, fh, ["segment_id", "t_snap", "n_vehicles", "segment_length", "lam", "x",
                                        "speed_variance"])
    _write_outputs(args, res.bins, ["x_lo", "x_hi", "n_samples", "mean_variance"], summary,
                   _manifest(args, params), started)


def cmd_jams(args, started):
    ts = read_traj_csv(args.input, args.schema, speed_scale=args.speed_scale, meta=args.meta,
                       max_bad_rows=args.max_bad_rows)
    events = detect_jams(ts, args.drop, args.window, args.jump, include_artifacts=True)
    accepted = [e for e in events if not e.artifact]
    params = {k: getattr(args, k) for k in ("schema", "drop", "window", "jump", "include_artifacts", "speed_scale")}
    summary = {
        "count": len(accepted),
        "n_artifacts": len(events) - len(accepted),
        "n_vehicles": len(ts),
        "events_per_hour": events_per_hour(accepted),
    }
    fields = ["vehicle_id", "t_start", "t_end", "v_before", "v_after", "drop", "max_position_jump", "artifact"]
    _write_outputs(args, events if args.include_artifacts else accepted, fields, summary,
                   _manifest(args, params), started)


# -- parser -----------------------------------------------------------------

def _add_outputs(p):
    p.add_argument("--out", default="-", help="table destination (CSV); '-' for stdout")
    p.add_argument("--summary", default=None, help="summary JSON destination; '-' for stdout")
    p.add_argument("--manifest", default=None, help="run manifest destination (adds output digests and duration)")


def _add_traj_input(p):
    p.add_argument("--input", required=True)
    p.add_argument("--schema", choices=("generic", "highd_tracks"), default="generic")
    p.add_argument("--meta", default=None, help="highD recordingMeta.csv for the frame rate")
    p.add_argument("--speed-scale", type=_positive, default=1.0, help="factor converting recorded speed to km/h")
    p.add_argument("--max-bad-rows", type=int, default=1000)


def build_parser():
    parser = _Parser(prog="coopperc", description="Cooperative percolation threshold toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("constants", help="analytic constants report")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--out", default="-")

    p = sub.add_parser("sweep", help="Monte Carlo mean cluster size over a grid of lam*ell")
    p.add_argument("--x-min", type=_positive, default=0.5)
    p.add_argument("--x-max", type=_positive, default=2.0)
    p.add_argument("--points", type=_count, default=64)
    p.add_argument("--clusters", type=_count, default=10_000, help="minimum accepted clusters per grid point")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ell", type=_positive, default=1.0)
    p.add_argument("--points-per-window", type=_positive, default=1e4)
    p.add_argument("--n-boot", type=int, default=200)
    p.add_argument("--edge-policy", choices=("discard", "keep"), default="discard")
    p.add_argument("--threads", type=_count, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    _add_outputs(p)

    p = sub.add_parser("fit", help="fit the LWR exponent theta to FD observations")
    p.add_argument("--input", required=True)
    p.add_argument("--input-kind", choices=("fd", "traj"), default="fd",
                   help="'traj' aggregates trajectories into FD observations first")
    p.add_argument("--schema", choices=("generic", "highd_tracks"), default="generic")
    p.add_argument("--meta", default=None)
    p.add_argument("--space-bin", type=_positive, default=100.0)
    p.add_argument("--time-bin", type=_positive, default=1.0)
    p.add_argument("--speed-scale", type=_positive, default=1.0)
    p.add_argument("--max-bad-rows", type=int, default=1000)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--rho-j", type=_positive, default=80.0)
    group.add_argument("--rho-j-grid", type=_grid, default=None,
                       help="comma-separated jam densities, e.g. " + ",".join(f"{v:g}" for v in DEFAULT_RHO_J_GRID))
    p.add_argument("--v-f", type=_v_f, default="profile", help="free-flow speed in km/h, or 'profile'")
    p.add_argument("--theta-fixed", type=_positive, default=None, help="report metrics at this theta only")
    _add_outputs(p)

    p = sub.add_parser("variance", help="speed variance binned by topological density")
    _add_traj_input(p)
    p.add_argument("--ell", type=_positive, default=DEFAULT_ELL)
    p.add_argument("--segment-length", type=_positive, default=DEFAULT_SEGMENT_LENGTH)
    p.add_argument("--snapshot-period", type=_positive, default=DEFAULT_SNAPSHOT_PERIOD)
    p.add_argument("--x-bin-width", type=_positive, default=0.1)
    p.add_argument("--min-vehicles", type=int, default=2)
    p.add_argument("--samples-out", default=None, help="optional per-sample CSV")
    _add_outputs(p)

    p = sub.add_parser("jams", help="phantom-jam candidate detection")
    _add_traj_input(p)
    p.add_argument("--drop", type=_positive, default=20.0, help="speed drop threshold, km/h")
    p.add_argument("--window", type=_positive, default=120.0, help="window, s")
    p.add_argument("--jump", type=_positive, default=DEFAULT_JUMP_THRESHOLD, help="artifact position jump, m")
    p.add_argument("--include-artifacts", action="store_true")
    _add_outputs(p)
    return parser


COMMANDS = {"sweep": cmd_sweep, "fit": cmd_fit, "variance": cmd_variance, "jams": cmd_jams}


def main(argv=None):
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        if args.command == "constants":
            cmd_constants(args)
            return 0
        if args.command == "sweep" and args.threads is None:
            args.threads = _default_threads()
        COMMANDS[args.command](args, started)
    except UsageError as exc:
        _emit_error("UsageError", str(exc))
        return 2
    except IngestionError as exc:
        _emit_error("IngestionError", str(exc), line=exc.line, column=exc.column)
        return 1
    except (CoopPercError, ValueError, ArithmeticError, OSError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
