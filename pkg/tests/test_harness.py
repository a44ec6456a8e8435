import math
from pathlib import Path

import numpy as np
import pytest

from lattice_mpc.cli import main
from lattice_mpc.config import (
    DEFAULT_SEED,
    ConfigError,
    bundled_config,
    dumps_config,
    load_config,
    loads_config,
    parse_number,
)
from lattice_mpc.harness import (
    RUN_COLUMNS,
    build_artifacts,
    emit_plot_data,
    parse_strategies,
    read_run_csv,
    run_compare,
)

SMALL = """\
scenario.name = small
scenario.shape = circle
scenario.T = 0.1
scenario.K = 20
geometry.radius = 2.0
start.x0 = 1.9, 0, 1.57
sampling.samples_per_point = 10
sampling.validation_grid_size = 20
"""


def small_cfg(extra="", drop=()):
    lines = [l for l in SMALL.splitlines() if not any(l.startswith(d) for d in drop)]
    return loads_config("\n".join(lines) + "\n" + extra)


def test_bundled_circle_values():
    cfg = load_config(bundled_config("circle"))
    assert cfg.Q == (10.0, 10.0, 0.5) and cfg.R == (0.1, 0.1)
    assert cfg.N == 10 and cfg.T == 0.1 and cfg.wheelbase == 0.1
    assert cfg.K == 360 and cfg.x0 == (1.9, 0.0, 1.57)
    assert cfg.x_max[2] == pytest.approx(3 * math.pi) and cfg.u_max[1] == pytest.approx(math.pi / 2)
    assert cfg.samples_per_point == 50


def test_bundled_figure8_values():
    cfg = load_config(bundled_config("figure8"))
    assert cfg.K == 252 and cfg.x0 == (0.25, 0.0, 1.3)
    assert cfg.x_min[:2] == (-2.5, -1.5) and cfg.x_max[:2] == (2.5, 1.5)


def test_reversed_bounds_rejected():
    with pytest.raises(ConfigError, match="bounds.u_min"):
        small_cfg("bounds.u_min = 3, -1\nbounds.u_max = 2, 1\n")


def test_unknown_key_named_with_line():
    with pytest.raises(ConfigError) as exc:
        small_cfg("mpc.horizon = 10\n")
    msg = str(exc.value)
    assert "mpc.horizon" in msg and ":9:" in msg


def test_duplicate_and_bad_values():
    with pytest.raises(ConfigError, match="duplicate"):
        small_cfg("scenario.K = 30\n")
    with pytest.raises(ConfigError, match="scenario.T"):
        small_cfg("scenario.T = fast\n", drop=("scenario.T",))
    with pytest.raises(ConfigError, match="integer"):
        small_cfg("mpc.N = 2.5\n")
    with pytest.raises(ConfigError, match="geometry.a"):
        small_cfg("geometry.a = 1\n")
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/x.cfg")


def test_missing_seed_defaults():
    cfg = small_cfg()
    assert cfg.seed == DEFAULT_SEED == 12345


def test_number_expressions():
    assert parse_number("-3*pi") == pytest.approx(-3 * math.pi)
    assert parse_number("pi/2") == pytest.approx(math.pi / 2)
    assert parse_number("1e-4") == 1e-4
    with pytest.raises(ValueError):
        parse_number("__import__('os')")


def test_config_round_trip():
    for cfg in (load_config(bundled_config("circle")), load_config(bundled_config("figure8")),
                small_cfg("sampling.radius = 0.05\nrun.seed = 7\n")):
        assert loads_config(dumps_config(cfg)) == cfg


def test_parse_strategies():
    assert parse_strategies(None) == ["lattice", "linear_mpc", "explicit_seq"]
    assert parse_strategies("lattice, lattice,linear_mpc") == ["lattice", "linear_mpc"]
    with pytest.raises(ValueError):
        parse_strategies("lattice,nmpc")
    with pytest.raises(ValueError):
        parse_strategies(",")


def test_lattice_only_skips_regions(tmp_path):
    cfg = small_cfg()
    art = build_artifacts(cfg, ["lattice"])
    assert art.explicit is None and art.lattice is not None
    report, _ = run_compare(cfg, ["lattice"], tmp_path, art)
    assert [r.strategy for r in report.rows] == ["lattice"]
    assert report.row("lattice").regions == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["report.csv", "report.txt", "run_lattice.csv"]


def _strip_timing(path):
    lines = Path(path).read_text().splitlines()
    return [l.rsplit(",", 1)[0] for l in lines]


def test_rerun_is_identical_except_timing(tmp_path):
    cfg = small_cfg()
    run_compare(cfg, None, tmp_path / "a")
    run_compare(cfg, None, tmp_path / "b")
    for s in ("lattice", "linear_mpc", "explicit_seq"):
        a, b = tmp_path / "a" / f"run_{s}.csv", tmp_path / "b" / f"run_{s}.csv"
        assert _strip_timing(a) == _strip_timing(b)
        assert b"\r" not in a.read_bytes()


def test_circle_compare_report(circle_artifacts, tmp_path):
    cfg, art = circle_artifacts
    report, results = run_compare(cfg, None, tmp_path, art)
    assert [r.strategy for r in report.rows] == ["lattice", "linear_mpc", "explicit_seq"]
    for r in report.rows:
        assert r.average_error >= 0
        assert abs(r.average_error - 0.0043) <= 0.25 * 0.0043
        d = read_run_csv(tmp_path / f"run_{r.strategy}.csv")
        assert list(d) == list(RUN_COLUMNS)
        assert d["k"].shape == (cfg.K,)
        assert abs(r.average_error - np.mean(d["err"])) <= 1e-12
        np.testing.assert_array_equal(d["err"], results[r.strategy].errors)
    lat = report.row("lattice")
    assert lat.terms > 0 and lat.literals > 0
    assert report.row("explicit_seq").regions >= cfg.K
    text = (tmp_path / "report.txt").read_text()
    assert "lattice" in text and "seed 12345" in text


def test_plot_data_matches_runs(circle_artifacts, tmp_path):
    cfg, art = circle_artifacts
    _, results = run_compare(cfg, ["lattice", "linear_mpc"], tmp_path, art)
    out = emit_plot_data([tmp_path / "run_lattice.csv", tmp_path / "run_linear_mpc.csv"], tmp_path / "xy.csv")
    rows = out.read_text().splitlines()
    assert rows[0] == "x_ref,y_ref,x_act_lattice,y_act_lattice,x_act_linear_mpc,y_act_linear_mpc"
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    assert data.shape == (cfg.K, 6)
    for c, s in ((2, "lattice"), (4, "linear_mpc")):
        dev = np.hypot(data[:, c] - data[:, 0], data[:, c + 1] - data[:, 1])
        assert dev.max() <= results[s].errors.max() + 1e-12


def test_plot_data_figure8_rows(figure8_artifacts, tmp_path):
    cfg, art = figure8_artifacts
    run_compare(cfg, ["lattice"], tmp_path, art)
    out = emit_plot_data([tmp_path / "run_lattice.csv"], tmp_path / "xy.csv")
    assert len(out.read_text().splitlines()) == 1 + 252


def test_plot_data_bad_input(tmp_path):
    empty = tmp_path / "run_empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError, match="empty"):
        emit_plot_data([empty], tmp_path / "xy.csv")
    assert not (tmp_path / "xy.csv").exists()
    with pytest.raises(ValueError):
        emit_plot_data([], tmp_path / "xy.csv")
    partial = tmp_path / "run_partial.csv"
    partial.write_text("k,t,x_ref\n0,0.0,1.0\n")
    with pytest.raises(ValueError, match="missing columns"):
        emit_plot_data([partial], tmp_path / "xy.csv")
    assert not (tmp_path / "xy.csv").exists()


# CLI --------------------------------------------------------------------


def _write_cfg(tmp_path, extra=""):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL + extra)
    return p


def test_cli_compare_build_and_plotdata(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    out = tmp_path / "out"
    assert main(["build", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "controller" / "manifest.json").is_file()
    assert len(list((out / "regions").glob("*.regions"))) == 20
    assert main(["compare", "--config", str(cfg), "--out", str(out), "--strategies", "lattice,linear_mpc"]) == 0
    printed = capsys.readouterr().out
    assert "scenario small, seed 12345" in printed
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "one"), "--seed", "9"]) == 0
    assert "seed 9" in capsys.readouterr().out
    assert (tmp_path / "one" / "run_lattice.csv").is_file()
    assert main(["plotdata", str(out / "run_lattice.csv"), "--out", str(tmp_path / "xy.csv")]) == 0


def test_cli_exit_codes(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    assert main(["compare", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    assert main(["compare", "--config", "no_such_bundle", "--out", str(tmp_path)]) == 1
    assert main(["compare", "--config", str(cfg), "--strategies", "nmpc", "--out", str(tmp_path)]) == 1
    assert main(["run", "--config", str(cfg), "--strategies", "lattice,linear_mpc", "--out", str(tmp_path)]) == 1
    assert main(["compare", "--config", str(cfg), "--seed", "-1", "--out", str(tmp_path)]) == 1
    # no state within one step of the start can satisfy x <= 1
    bad = _write_cfg(tmp_path, "bounds.x_min = -3, -3, -10\nbounds.x_max = 1, 3, 10\n")
    assert main(["build", "--config", str(bad), "--out", str(tmp_path / "b")]) == 2
    assert main(["compare", "--config", str(bad), "--strategies", "lattice", "--out", str(tmp_path / "b")]) == 2
    empty = tmp_path / "run_x.csv"
    empty.write_text("")
    assert main(["plotdata", str(empty), "--out", str(tmp_path / "xy.csv")]) == 3
    err = capsys.readouterr().err
    assert "config error" in err and "build error" in err and "run error" in err
