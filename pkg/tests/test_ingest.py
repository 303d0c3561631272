import io
import json
import tracemalloc

import numpy as np
import pytest

from coopperc.exceptions import IngestionError
from coopperc.ingest import (
    SCHEMA_VERSION,
    iter_fd_csv,
    read_fd_csv,
    read_highd_frame_rate,
    read_traj_csv,
    write_csv,
    write_json,
    write_jsonl,
)
from coopperc.trajectory import JamEvent


def test_two_row_fd_file():
    obs = read_fd_csv(io.StringIO("rho,v\n10,95\n40,60"))
    assert obs.rho.tolist() == [10.0, 40.0] and obs.v.tolist() == [95.0, 60.0]
    assert obs.weight.tolist() == [1.0, 1.0] and obs.n_rejected == 0


def test_negative_density_is_counted():
    obs = read_fd_csv(io.StringIO("rho,v\n10,95\n-4,60\n20,abc\n30,70\n"))
    assert len(obs) == 2 and obs.n_rejected == 2
    rep = obs.report
    assert rep.rows_in == rep.rows_parsed + rep.rows_quarantined == 4
    assert [line for line, _ in rep.bad_lines] == [3, 4]


def test_column_map_and_speed_scale():
    text = "density,speed_01kmh,n\n10,950,3\n"
    obs = read_fd_csv(io.StringIO(text), {"rho": "density", "v": "speed_01kmh", "weight": "n"}, speed_scale=0.1)
    assert obs.v[0] == pytest.approx(95.0) and obs.weight[0] == 3.0


def test_missing_column_names_it():
    with pytest.raises(IngestionError, match="'v'"):
        read_fd_csv(io.StringIO("rho,speed\n1,2\n"))
    with pytest.raises(IngestionError, match="'speed'"):
        read_traj_csv(io.StringIO("vehicle_id,t,s\nA,0,0\n"))


def test_budget_exceeded_reports_line():
    text = "rho,v\n" + "x,1\n" * 5
    with pytest.raises(IngestionError) as err:
        read_fd_csv(io.StringIO(text), max_bad_rows=3)
    assert err.value.line == 5
    assert str(err.value).startswith("line 5:")


def test_non_utf8_reports_line():
    data = b"rho,v\n10,95\n20,9\xff5\n"
    with pytest.raises(IngestionError) as err:
        read_fd_csv(io.BytesIO(data))
    assert err.value.line is not None and "UTF-8" in str(err.value)


def test_empty_input():
    with pytest.raises(IngestionError):
        read_fd_csv(io.StringIO(""))
    assert len(read_traj_csv(io.StringIO(""))) == 0


def _write_fd(path, n):
    rng = np.random.default_rng(0)
    rho = rng.uniform(1, 79, n)
    v = rng.uniform(0, 100, n)
    with open(path, "w") as fh:
        fh.write("rho,v\n")
        fh.write("".join(f"{a:.3f},{b:.3f}\n" for a, b in zip(rho, v)))


def _peak_stream(path):
    tracemalloc.start()
    count = sum(1 for _ in iter_fd_csv(path))
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return count, peak


def test_streaming_memory_is_bounded(tmp_path):
    small, big = tmp_path / "small.csv", tmp_path / "big.csv"
    _write_fd(small, 10_000)
    _write_fd(big, 1_000_000)
    n_small, peak_small = _peak_stream(small)
    n_big, peak_big = _peak_stream(big)
    assert (n_small, n_big) == (10_000, 1_000_000)
    # 100x the rows, essentially the same peak
    assert peak_big < 2 * peak_small + 64 * 1024


def test_generic_trajectory_single_vehicle():
    ts = read_traj_csv(io.StringIO("vehicle_id,t,s,speed\nA,2,20,50\nA,0,0,50\nA,1,10,50\n"))
    assert len(ts) == 1
    tr = ts["A"]
    assert len(tr) == 3 and tr.t.tolist() == [0.0, 1.0, 2.0] and tr.s.tolist() == [0.0, 10.0, 20.0]
    assert ts.meta["units"]["speed"] == "km/h"


def test_interleaved_vehicles():
    text = "vehicle_id,t,s,speed\nA,0,0,50\nB,0,5,40\nA,1,14,50\nB,1,16,40\nA,2,28,50\n"
    ts = read_traj_csv(io.StringIO(text))
    assert sorted(ts.trajectories) == ["A", "B"]
    assert ts["A"].s.tolist() == [0.0, 14.0, 28.0]
    assert ts["B"].s.tolist() == [5.0, 16.0]


def test_duplicate_timestamps_quarantine_vehicle_only():
    text = "vehicle_id,t,s,speed,segment_id\nA,0,0,50,k1\nA,0,3,50,k1\nB,0,5,40,k2\nB,1,16,-3,k2\nB,2,27,40,k2\n"
    ts = read_traj_csv(io.StringIO(text))
    rep = ts.report
    assert list(ts.trajectories) == ["B"] and rep.quarantined_vehicles == ["A"]
    assert rep.rows_in == 5 and rep.rows_parsed == 2 and rep.rows_quarantined == 3
    assert ts["B"].segment_id.tolist() == ["k2", "k2"]


def test_highd_unit_conversion(tmp_path):
    meta = tmp_path / "01_recordingMeta.csv"
    meta.write_text("id,frameRate,speedLimit\n1,25,-1\n")
    assert read_highd_frame_rate(meta) == 25.0
    text = "frame,id,x,xVelocity,laneId\n1,7,400.0,-13.9,2\n26,7,386.1,-13.9,2\n1,8,10.0,30.0,5\n"
    ts = read_traj_csv(io.StringIO(text), schema="highd_tracks", meta=meta)
    tr = ts["7"]
    assert tr.speed[0] == pytest.approx(50.0, abs=0.05)
    assert tr.direction == "-1" and ts["8"].direction == "+1"
    assert tr.t.tolist() == [pytest.approx(0.04), pytest.approx(1.04)]
    assert ts.meta["frame_rate"] == 25.0 and "3.6" in ts.meta["speed_conversion"]


def test_writers_roundtrip():
    events = [JamEvent("A", 0.0, 60.0, 60.0, 30.0, 30.0, 16.7, False)]
    buf = io.StringIO()
    write_csv(events, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("vehicle_id,t_start") and lines[1].startswith("A,0.0,60.0")
    buf = io.StringIO()
    write_jsonl(events, buf)
    assert json.loads(buf.getvalue())["drop"] == 30.0
    buf = io.StringIO()
    write_json({"ratio": float("nan"), "n": np.int64(3)}, buf)
    doc = json.loads(buf.getvalue())
    assert doc == {"schema_version": SCHEMA_VERSION, "ratio": None, "n": 3}
