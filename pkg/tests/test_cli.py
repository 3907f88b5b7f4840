import io
import subprocess
import sys

import numpy as np
import pytest

from dynbc.cli import COMMANDS, run
from dynbc.io import format_value, read_csv, write_csv

SMALL = ["--set", "geometry.n_r=12", "--set", "geometry.n_phi=24"]


def _run(args):
    out, err = io.StringIO(), io.StringIO()
    code = run(args, out, err)
    return code, out.getvalue(), err.getvalue()


def test_selftest_passes(tmp_path):
    code, out, _ = _run(["selftest", "--out", str(tmp_path)])
    assert code == 0
    text = (tmp_path / "selftest.csv").read_text().splitlines()
    assert text[0] == "check,value,tolerance,passed"
    assert all(line.endswith(",1") for line in text[1:])
    assert "FAIL" not in out


def test_window_order_exit_1(tmp_path):
    code, _, err = _run(["forward", "--out", str(tmp_path), "--set", "window.t0=0.8"])
    assert code == 1
    assert "window requires t0 < t1" in err


def test_unknown_subcommand(tmp_path):
    code, _, err = _run(["backward", "--out", str(tmp_path)])
    assert code == 1 and "unknown subcommand" in err


def test_bad_key_named(tmp_path):
    code, _, err = _run(["forward", "--out", str(tmp_path), "--set", "geometry.radius=2"])
    assert code == 1 and "geometry.radius" in err


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[inversion]\nmax_iter = many\n")
    code, _, err = _run(["forward", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 1 and "inversion.max_iter" in err


def test_set_without_equals(tmp_path):
    code, _, err = _run(["forward", "--out", str(tmp_path), "--set", "geometry.n_r"])
    assert code == 1 and "KEY=VALUE" in err


def test_markov_forward_csv(tmp_path):
    code, _, _ = _run(["forward", "--preset", "markov", "--out", str(tmp_path), *SMALL])
    assert code == 0
    header, data = read_csv(tmp_path / "forward_trajectory.csv")
    assert header == ["t", "node", "x1", "x2", "y"]
    assert np.max(np.abs(data[:, 4] - 1.0)) <= 1e-10
    assert data[0, 0] == 0.0 and data[-1, 0] == pytest.approx(1.0)


def test_forward_default_positivity(tmp_path):
    code, out, _ = _run(["forward", "--out", str(tmp_path), *SMALL])
    assert code == 0 and "min y e^(Rt)" in out
    rows = dict(line.split(",", 1) for line in (tmp_path / "forward_positivity.csv").read_text().splitlines()[1:])
    assert rows["lower_ok"] == "1" and rows["upper_ok"] == "1"


def test_carleman_check_small(tmp_path):
    args = ["carleman-check", "--out", str(tmp_path), "--set", "carleman.n_r=8", "--set", "carleman.n_phi=16",
            "--set", "carleman.n_fields=2", "--set", "carleman.s=4, 8"]
    code, _, _ = _run(args)
    assert code == 0
    header, data = read_csv(tmp_path / "carleman_sweep.csv")
    assert header == ["s", "lambda", "field", "lhs", "rhs", "ratio"]
    assert data.shape == (4, 6) and np.all(np.isfinite(data[:, 5]))


def test_logconvexity_and_stability_initial(tmp_path):
    base = ["--out", str(tmp_path), "--set", "harness.n_r=8", "--set", "harness.n_phi=16",
            "--set", "harness.n_samples=3", "--set", "harness.max_mode=4"]
    assert _run(["logconvexity", *base])[0] == 0
    assert _run(["stability-initial", *base])[0] == 0
    for name in ("logconvexity.csv", "logconvexity_summary.csv", "stability_initial.csv", "stability_initial_fit.csv"):
        assert (tmp_path / name).exists()


def test_stability_potentials(tmp_path):
    code, _, _ = _run(["stability-potentials", "--out", str(tmp_path), "--set", "harness.n_r=8", "--set",
                       "harness.n_phi=16", "--set", "harness.n_samples=3"])
    assert code == 0
    header, data = read_csv(tmp_path / "stability_potentials.csv")
    assert len(data) > 0


def test_invert_noiseless(tmp_path):
    code, out, _ = _run(["invert", "--out", str(tmp_path), "--set", "geometry.n_r=8", "--set", "geometry.n_phi=16",
                         "--set", "inversion.max_iter=100"])
    assert code == 0
    header, hist = read_csv(tmp_path / "invert_history.csv")
    assert np.all(np.diff(hist[:, 1]) <= 0)


def test_determinism(tmp_path):
    for d in ("a", "b"):
        assert _run(["selftest", "--out", str(tmp_path / d), "--seed", "5"])[0] == 0
    assert (tmp_path / "a" / "selftest.csv").read_bytes() == (tmp_path / "b" / "selftest.csv").read_bytes()


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("DYNBC_OUT", str(tmp_path / "env"))
    assert _run(["forward", "--preset", "markov", *SMALL])[0] == 0
    assert (tmp_path / "env" / "forward_trajectory.csv").exists()


def test_seed_range(tmp_path):
    assert _run(["selftest", "--out", str(tmp_path), "--seed", str(2**64)])[0] == 1


def test_commands_listed():
    assert set(COMMANDS) == {"forward", "carleman-check", "invert", "stability-potentials", "logconvexity",
                             "stability-initial", "selftest"}


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dynbc.cli", "selftest", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0


def test_csv_format(tmp_path):
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(True) == "1" and format_value(np.int64(3)) == "3"
    p = write_csv(tmp_path / "sub" / "f.csv", ["a", "b"], [(1, 0.5), (2, 1 / 3)])
    header, data = read_csv(p)
    assert header == ["a", "b"] and data[1, 1] == 1 / 3
    with pytest.raises(ValueError):
        write_csv(tmp_path / "g.csv", ["a"], [(1, 2)])
