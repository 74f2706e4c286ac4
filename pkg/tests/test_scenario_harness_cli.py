import copy
import json
import logging
import math

import numpy as np
import pytest

from overact import cli
from overact.harness import (CONTROLLER_COLUMNS, EXIT_INVALID, EXIT_OK, EXIT_SAFE_STOP, SIM_COLUMNS, load_logs, run,
                             summarize)
from overact.plots import export_plots
from overact.scenario import Scenario, ScenarioError, bundled, bundled_names, interpolate_path, validate


def _data(name="reproduction"):
    with open(bundled(name)) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("short")
    sc = Scenario.load(bundled("reproduction"))
    return run(sc, out, duration=3.0), out


# ---------------------------------------------------------------------------
# path interpolation
# ---------------------------------------------------------------------------

def test_two_waypoints_give_a_straight_path():
    p = interpolate_path([[0, 0], [5, 0]], [1.0])
    np.testing.assert_allclose(p.y, 0.0, atol=1e-12)
    np.testing.assert_allclose(p.psi, 0.0, atol=1e-12)
    assert p.x[0] == 0.0 and p.x[-1] == pytest.approx(5.0)


def test_square_passes_through_corners():
    sq = [[0, 0], [4, 0], [4, 4], [0, 4]]
    p = interpolate_path(sq, [1.0], closed=True)
    pts = np.column_stack([p.x, p.y])
    for c in sq:
        assert np.min(np.hypot(*(pts - c).T)) < 0.03
    assert np.hypot(p.x[-1] - p.x[0], p.y[-1] - p.y[0]) < 1e-9


@pytest.mark.parametrize("name", ["reproduction", "obstacle", "corrections"])
def test_arc_length_spacing(name):
    d = _data(name)["path"]
    p = interpolate_path(d["waypoints"], d["velocities"], closed=d.get("closed", False))
    step = np.hypot(np.diff(p.x), np.diff(p.y))
    assert np.all(np.abs(step - 0.05) <= 1e-3)


def test_headings_follow_the_tangent():
    p = interpolate_path([[0, 0], [3, 1], [5, 4], [4, 7]], [1.0, 1.2, 0.8])
    tang = np.arctan2(np.diff(p.y), np.diff(p.x))
    mid = 0.5 * (p.psi[1:] + p.psi[:-1])
    assert np.max(np.abs(np.angle(np.exp(1j * (tang - mid))))) < 0.01


def test_velocities_interpolate_between_segment_targets():
    p = interpolate_path([[0, 0], [4, 0], [8, 0]], [1.0, 2.0])
    assert p.v[0] == pytest.approx(1.0)
    assert p.v[-1] == pytest.approx(2.0)
    assert np.all(np.diff(p.v) >= -1e-12)


def test_duplicate_waypoints_rejected():
    with pytest.raises(ValueError):
        interpolate_path([[0, 0], [0, 0], [1, 0]], [1.0, 1.0])
    with pytest.raises(ValueError):
        interpolate_path([[0, 0]], [1.0])


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_bundled_scenarios_validate():
    names = bundled_names()
    assert {"reproduction", "obstacle", "corrections"} <= set(names)
    for name in names:
        assert validate(bundled(name)) == []


def test_missing_mass_is_named():
    d = _data()
    del d["vehicle"]["mass"]
    problems = validate(d)
    assert problems and any("mass" in p for p in problems)
    with pytest.raises(ScenarioError):
        Scenario.from_dict(d)


def test_waypoint_inside_obstacle_is_named():
    d = _data()
    d["path"]["waypoints"][1] = [5.5, 7.5]
    problems = validate(d)
    assert any("waypoint 1" in p and "(5.50, 7.50)" in p for p in problems)


def test_unknown_field_rejected():
    d = _data()
    d["planner"] = {"horizon_steps": 3}
    assert validate(d)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def test_rates_in_virtual_time(short_run):
    r, _ = short_run
    assert r.summary["sim_steps"] == 3000
    assert abs(r.summary["controller_cycles"] - 100 * 3) <= 1
    assert abs(r.summary["planner_cycles"] - 5 * 3) <= 1


def test_controller_records_have_no_gaps(short_run):
    r, _ = short_run
    t = r.column("controller", "t")
    np.testing.assert_allclose(np.diff(t), 0.01, atol=1e-9)


def test_sim_records_are_time_ordered(short_run):
    r, _ = short_run
    t = r.column("sim", "t")
    assert np.all(np.diff(t) > 0)


def test_summary_is_recomputable_from_files(short_run):
    r, out = short_run
    back = load_logs(out)
    s = summarize(back.sim, back.controller, back.planner, back.localization, back.summary["events"],
                  budget=back.summary.get("mpc_budget"))
    for key in ("max_tracking_error", "controller_cycles", "planner_cycles", "mpc_fallbacks", "min_clearance"):
        assert s[key] == pytest.approx(r.summary[key], rel=1e-6, abs=1e-9)


def test_nominal_short_run(short_run):
    r, _ = short_run
    assert r.exit_code == EXIT_OK
    assert r.summary["max_tracking_error"] < 0.02
    assert r.summary["min_clearance"] > 0


def test_empty_run_writes_headers_only(tmp_path, caplog):
    sc = Scenario.load(bundled("reproduction"))
    with caplog.at_level(logging.WARNING):
        r = run(sc, tmp_path / "empty", duration=0.0)
    assert r.sim.shape == (0, len(SIM_COLUMNS))
    lines = (tmp_path / "empty" / "controller.csv").read_text().splitlines()
    assert lines == [",".join(CONTROLLER_COLUMNS)]
    with caplog.at_level(logging.WARNING):
        files = export_plots(tmp_path / "empty")
    assert files == []
    assert not list((tmp_path / "empty").glob("*.png"))
    assert "no figures" in caplog.text


def test_command_dropout_ends_in_safe_stop(tmp_path):
    d = _data()
    d["faults"] = {"command_dropout": [1.0, 100.0]}
    sc = Scenario.from_dict(d)
    r = run(sc, tmp_path, duration=3.0)
    assert r.exit_code == EXIT_SAFE_STOP
    assert r.summary["safe_stop"]
    assert r.summary["safe_stop_time"] == pytest.approx(1.1, abs=0.01)
    t = r.column("sim", "t")
    speed = np.hypot(r.column("sim", "vx"), r.column("sim", "vy"))
    after = speed[t >= r.summary["safe_stop_time"]]
    assert np.all(np.diff(after) <= 1e-9)
    assert after[-1] < 1e-3
    assert r.summary["stopped_after_safe_stop"]


def test_runs_are_deterministic(tmp_path):
    sc = Scenario.load(bundled("obstacle"))
    run(sc, tmp_path / "a", duration=1.5)
    run(sc, tmp_path / "b", duration=1.5)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_seed_changes_the_noise(tmp_path):
    sc = Scenario.load(bundled("reproduction"))
    a = run(sc, None, seed=1, duration=0.5)
    b = run(sc, None, seed=2, duration=0.5)
    assert not np.array_equal(a.sim, b.sim)


def test_plots_written(short_run, tmp_path):
    _, out = short_run
    files = export_plots(out, tmp_path)
    names = {f.name for f in files}
    assert names == {"reference_origins.png", "solve_times.png", "tracking_error.png", "freespace.png"}
    for f in files:
        assert f.stat().st_size > 1000


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_validate_bundled(capsys):
    assert cli.main(["validate"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in bundled_names():
        assert f"{name}: ok" in out


def test_cli_validate_bad_file(tmp_path, capsys):
    d = _data()
    del d["vehicle"]["mass"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    assert cli.main(["validate", "--scenario", str(path)]) == EXIT_INVALID
    assert "mass" in capsys.readouterr().err


def test_cli_run_and_plot(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["run", "--scenario", "reproduction", "--out", str(out), "--duration", "1.0", "--seed", "3"])
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3
    assert summary["duration"] == pytest.approx(1.0)
    assert cli.main(["plot", "--out", str(out)]) == EXIT_OK
    assert (out / "tracking_error.png").exists()


def test_cli_run_reports_safe_stop(tmp_path):
    d = _data()
    d["faults"] = {"command_dropout": [0.5, 100.0]}
    path = tmp_path / "drop.json"
    path.write_text(json.dumps(d))
    assert cli.main(["run", "--scenario", str(path), "--out", str(tmp_path / "r"), "--duration", "1.0"]) == \
        EXIT_SAFE_STOP


def test_cli_run_needs_scenario(capsys):
    assert cli.main(["run"]) == EXIT_INVALID


def test_cli_bench(tmp_path, capsys):
    assert cli.main(["bench", "--duration", "1.0", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "bench.json").read_text())
    for key in ("planner", "mpc"):
        assert report[key]["samples"] > 0
        assert 0 < report[key]["p50_ms"] <= report[key]["p99_ms"] <= report[key]["max_ms"]
    assert report["reference_mean_ms"] == {"planner": 37.54, "mpc": 5.43}
