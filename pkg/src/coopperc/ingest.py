"""CSV readers for FD observations and vehicle trajectories, and table writers.

Readers stream rows with :mod:`csv`; a bad row is quarantined and counted
rather than dropped silently, and ingestion stops with
:class:`~coopperc.exceptions.IngestionError` once ``max_bad_rows`` is
exceeded.  Counts always satisfy ``rows_in = rows_parsed + rows_quarantined``.
"""
import array
import contextlib
import csv
import dataclasses
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import IngestionError

SCHEMA_VERSION = "1.0"
MAX_REPORTED_BAD_LINES = 100

FD_COLUMNS = {"rho": "rho", "v": "v", "weight": "weight"}
GENERIC_COLUMNS = {
    "vehicle_id": "vehicle_id",
    "t": "t",
    "s": "s",
    "speed": "speed",
    "segment_id": "segment_id",
    "direction": "direction",
}
HIGHD_COLUMNS = {"frame": "frame", "id": "id", "x": "x", "xVelocity": "xVelocity", "laneId": "laneId"}
HIGHD_DEFAULT_FRAME_RATE = 25.0
MS_TO_KMH = 3.6


@dataclass
class IngestReport:
    rows_in: int = 0
    rows_parsed: int = 0
    rows_quarantined: int = 0
    bad_lines: list = field(default_factory=list)
    quarantined_vehicles: list = field(default_factory=list)

    def reject(self, line, reason, budget):
        self.rows_quarantined += 1
        if len(self.bad_lines) < MAX_REPORTED_BAD_LINES:
            self.bad_lines.append((line, reason))
        if budget is not None and self.rows_quarantined > budget:
            raise IngestionError(f"bad-row budget of {budget} exceeded ({reason})", line=line)


@contextlib.contextmanager
def open_text(source):
    """Yield a text stream for a path, a binary stream or a text stream."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8", newline="") as fh:
            yield fh
    elif isinstance(source, io.TextIOBase):
        yield source
    else:
        wrapper = io.TextIOWrapper(source, encoding="utf-8", newline="")
        try:
            yield wrapper
        finally:
            wrapper.detach()


def _resolve(header, columns, required):
    index = {}
    for role, name in columns.items():
        if name is None:
            continue
        if name not in header:
            if role in required:
                raise IngestionError(f"missing required column {name!r} (role {role!r})", line=1, column=name)
            continue
        index[role] = header.index(name)
    return index


def _rows(fh):
    """Yield ``(line_number, row)``; decoding errors carry the line number."""
    reader = csv.reader(fh)
    while True:
        try:
            row = next(reader)
        except StopIteration:
            return
        except UnicodeDecodeError as exc:
            raise IngestionError(f"input is not valid UTF-8 ({exc.reason})", line=reader.line_num + 1) from exc
        except csv.Error as exc:
            raise IngestionError(f"malformed CSV: {exc}", line=reader.line_num) from exc
        yield reader.line_num, row


def _header(rows):
    try:
        _, header = next(rows)
    except StopIteration:
        return None
    return [h.strip() for h in header]


def _float(row, i):
    value = float(row[i])
    if not math.isfinite(value):
        raise ValueError("non-finite value")
    return value


def iter_fd_csv(source, columns=None, *, speed_scale=1.0, rho_cap=200.0, max_bad_rows=1000, report=None):
    """Stream ``(rho, v, weight)`` tuples from a CSV source.

    Memory use does not grow with the number of rows.  ``columns`` maps the
    roles ``rho``, ``v`` and optionally ``weight`` to header names;
    ``speed_scale`` converts recorded speed units to km/h.
    """
    columns = {**FD_COLUMNS, **(columns or {})}
    report = IngestReport() if report is None else report
    with open_text(source) as fh:
        rows = _rows(fh)
        header = _header(rows)
        if header is None:
            raise IngestionError("empty input: no header row", line=1)
        idx = _resolve(header, columns, required=("rho", "v"))
        wi = idx.get("weight")
        for line, row in rows:
            if not row:
                continue
            report.rows_in += 1
            try:
                rho = _float(row, idx["rho"])
                v = _float(row, idx["v"]) * speed_scale
                w = _float(row, wi) if wi is not None else 1.0
            except (ValueError, IndexError) as exc:
                report.reject(line, f"unparseable row: {exc}", max_bad_rows)
                continue
            if rho <= 0 or rho > rho_cap:
                report.reject(line, f"density {rho} outside (0, {rho_cap}]", max_bad_rows)
                continue
            if v < 0:
                report.reject(line, f"negative speed {v}", max_bad_rows)
                continue
            if w <= 0:
                report.reject(line, f"non-positive weight {w}", max_bad_rows)
                continue
            report.rows_parsed += 1
            yield rho, v, w


def read_fd_csv(source, columns=None, **kwargs):
    """Read a whole FD file into :class:`~coopperc.fdfit.FDObservations`."""
    from .fdfit import FDObservations

    report = IngestReport()
    cols = [array.array("d") for _ in range(3)]
    for values in iter_fd_csv(source, columns, report=report, **kwargs):
        for col, value in zip(cols, values):
            col.append(value)
    obs = FDObservations(*(np.frombuffer(c, dtype=float).copy() for c in cols))
    obs.n_rejected = report.rows_quarantined
    obs.warnings = [f"line {line}: {reason}" for line, reason in report.bad_lines]
    obs.report = report
    return obs


def read_highd_frame_rate(meta_source):
    """``frameRate`` from a highD ``recordingMeta.csv`` sidecar."""
    with open_text(meta_source) as fh:
        reader = csv.DictReader(fh)
        row = next(reader, None)
        if row is None or "frameRate" not in row:
            raise IngestionError("recording metadata lacks a frameRate column", line=1, column="frameRate")
        return float(row["frameRate"])


def read_traj_csv(
    source,
    schema="generic",
    columns=None,
    *,
    speed_scale=1.0,
    frame_rate=None,
    meta=None,
    max_bad_rows=1000,
):
    """Read trajectories, grouped per vehicle and sorted by time.

    ``schema="generic"`` expects ``vehicle_id, t, s, speed`` (and optionally
    ``segment_id``, ``direction``).  ``schema="highd_tracks"`` reads highD
    ``tracks.csv`` columns ``frame, id, x, xVelocity``: time is
    ``frame / frameRate`` (from ``meta`` or ``frame_rate``, default 25 Hz),
    speed is ``|xVelocity| * 3.6`` km/h and the sign of ``xVelocity`` is
    kept as the direction tag.

    Vehicles with repeated timestamps are quarantined as a whole.
    """
    from .trajectory import TrajectorySet

    report = IngestReport()
    meta_out = {"schema": schema, "units": {"t": "s", "s": "m", "speed": "km/h"}}
    if schema == "generic":
        columns = {**GENERIC_COLUMNS, **(columns or {})}
        meta_out["speed_scale"] = speed_scale
    elif schema == "highd_tracks":
        columns = {**HIGHD_COLUMNS, **(columns or {})}
        if frame_rate is None:
            frame_rate = read_highd_frame_rate(meta) if meta is not None else HIGHD_DEFAULT_FRAME_RATE
        meta_out["frame_rate"] = frame_rate
        meta_out["speed_conversion"] = "abs(xVelocity) * 3.6 m/s -> km/h; direction = sign(xVelocity)"
    else:
        raise IngestionError(f"unknown schema {schema!r}")

    groups = {}
    with open_text(source) as fh:
        rows = _rows(fh)
        header = _header(rows)
        if header is None:
            return TrajectorySet.from_groups({}, report=report, meta=meta_out)
        if schema == "generic":
            idx = _resolve(header, columns, required=("vehicle_id", "t", "s", "speed"))
        else:
            idx = _resolve(header, columns, required=("frame", "id", "x", "xVelocity"))
        for line, row in rows:
            if not row:
                continue
            report.rows_in += 1
            try:
                if schema == "generic":
                    vid = row[idx["vehicle_id"]].strip()
                    t = _float(row, idx["t"])
                    s = _float(row, idx["s"])
                    speed = _float(row, idx["speed"]) * speed_scale
                    seg = (row[idx["segment_id"]].strip() or None) if "segment_id" in idx else None
                    direction = (row[idx["direction"]].strip() or None) if "direction" in idx else None
                else:
                    vid = row[idx["id"]].strip()
                    t = _float(row, idx["frame"]) / frame_rate
                    s = _float(row, idx["x"])
                    xv = _float(row, idx["xVelocity"])
                    speed = abs(xv) * MS_TO_KMH
                    seg = (row[idx["laneId"]].strip() or None) if "laneId" in idx else None
                    direction = "-1" if xv < 0 else "+1"
            except (ValueError, IndexError) as exc:
                report.reject(line, f"unparseable row: {exc}", max_bad_rows)
                continue
            if not vid:
                report.reject(line, "empty vehicle id", max_bad_rows)
                continue
            if speed < 0:
                report.reject(line, f"negative speed {speed}", max_bad_rows)
                continue
            g = groups.get(vid)
            if g is None:
                g = groups[vid] = (array.array("d"), array.array("d"), array.array("d"), [], [])
            g[0].append(t)
            g[1].append(s)
            g[2].append(speed)
            g[3].append(seg)
            g[4].append(direction)
    return TrajectorySet.from_groups(groups, report=report, meta=meta_out)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {k: _plain(v) for k, v in dataclasses.asdict(value).items()}
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _as_row(item):
    if dataclasses.is_dataclass(item):
        return {f.name: getattr(item, f.name) for f in dataclasses.fields(item)}
    return dict(item)


def write_csv(rows, fh, fieldnames=None):
    """Write dataclass or mapping rows as CSV with a header."""
    rows = [_as_row(r) for r in rows]
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})


def write_jsonl(rows, fh):
    for row in rows:
        fh.write(json.dumps(_plain(_as_row(row)), sort_keys=True) + "\n")


def write_json(document, fh):
    """Write a summary document; a ``schema_version`` key is always present."""
    doc = {"schema_version": SCHEMA_VERSION, **_plain(document)}
    fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def write_traj_csv(trajs, fh):
    """Write trajectories in the generic schema (readable by :func:`read_traj_csv`)."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["vehicle_id", "t", "s", "speed", "segment_id", "direction"])
    for tr in trajs:
        seg = tr.segment_id if tr.segment_id is not None else [""] * len(tr)
        direction = "" if tr.direction is None else tr.direction
        for t, s, v, g in zip(tr.t.tolist(), tr.s.tolist(), tr.speed.tolist(), seg):
            writer.writerow([tr.vehicle_id, repr(t), repr(s), repr(v), "" if g is None else g, direction])
