import numpy as np
import pytest

from dynbc.config import ConfigError, ExperimentConfig, PRESETS, expression


def test_defaults_validate():
    cfg = ExperimentConfig.load()
    assert (cfg.geometry.n_r, cfg.geometry.n_phi) == (32, 64)
    assert cfg.dt == pytest.approx(0.5 / 128)
    assert cfg.carleman.s == (16.0, 32.0, 64.0)


def test_shipped_config_matches_defaults(repo_root):
    assert ExperimentConfig.load(repo_root / "configs" / "default.cfg").to_pairs() == ExperimentConfig.load().to_pairs()


def test_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[geometry]\nn_r = 16\nn_phi = 32\n[carleman]\nlambda = 3\ns = 4, 8\n")
    cfg = ExperimentConfig.load(p, {"geometry.n_r": "8", "geometry.n_phi": "16"})
    assert cfg.geometry.n_r == 8
    assert cfg.carleman.lambda_ == 3.0 and cfg.carleman.s == (4.0, 8.0)


def test_preset_then_explicit_keys(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[geometry]\nn_r = 12\n[experiment]\npreset = quick\n")
    cfg = ExperimentConfig.load(p)
    assert cfg.geometry.n_r == 12 and cfg.geometry.n_phi == 32
    assert set(PRESETS) == {"default", "markov", "quick"}


@pytest.mark.parametrize(
    "pairs, path",
    [
        ({"geometry.n_rr": "3"}, "geometry.n_rr"),
        ({"nosuch.key": "3"}, "nosuch.key"),
        ({"geometry.n_r": "abc"}, "geometry.n_r"),
        ({"potentials.p": "0.5 + os"}, "potentials.p"),
        ({"potentials.p": "0.5 +"}, "potentials.p"),
        ({"solver.scheme": "rk4"}, "solver.scheme"),
        ({"solver.dt": "0.3"}, "solver.dt"),
        ({"carleman.lambda": "0.5"}, "carleman.lambda"),
        ({"inversion.reg_kind": "H1"}, "inversion.reg_kind"),
        ({"experiment.preset": "fast"}, "experiment.preset"),
    ],
)
def test_bad_keys_named(pairs, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        ExperimentConfig.load(None, pairs)


def test_window_order_rejected():
    with pytest.raises(ConfigError, match="window requires t0 < t1"):
        ExperimentConfig.load(None, {"window.t0": "0.75", "window.t1": "0.25"})


def test_odd_angular_count():
    with pytest.raises(ConfigError, match="geometry"):
        ExperimentConfig.load(None, {"geometry.n_phi": "63"})


def test_malformed_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("n_r = 3\n")
    with pytest.raises(ConfigError, match="malformed"):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.load(tmp_path / "missing.cfg")


def test_inadmissible_potentials():
    cfg = ExperimentConfig.load(None, {"potentials.p": "3.0", "geometry.n_r": "8", "geometry.n_phi": "16"})
    with pytest.raises(ConfigError, match="potentials"):
        cfg.make_potentials(cfg.make_grid())


def test_expression_evaluation():
    f = expression("rho**2 + sin(phi)", "k")
    x, y = np.array([0.0, 0.5]), np.array([1.0, 0.0])
    assert np.allclose(f(x, y), [2.0, 0.25])
    assert expression("2").__call__(x, y).shape == x.shape


def test_custom_coefficients():
    cfg = ExperimentConfig.load(None, {"geometry.n_r": "8", "geometry.n_phi": "16", "coefficients.a": "1 + 0.1*x*x", "coefficients.B1": "0.2"})
    c = cfg.make_coefficients(cfg.make_grid())
    assert np.allclose(c.B[:, 0], 0.2)


def test_output_dir_precedence(monkeypatch):
    cfg = ExperimentConfig.load()
    monkeypatch.delenv("DYNBC_OUT", raising=False)
    assert str(cfg.output_dir()) == "dynbc_out"
    monkeypatch.setenv("DYNBC_OUT", "/tmp/envdir")
    assert str(cfg.output_dir()) == "/tmp/envdir"
    assert str(cfg.output_dir("x")) == "x"


def test_with_seed_sets_all():
    cfg = ExperimentConfig.load().with_seed(99)
    assert cfg.carleman.seed == cfg.inversion.seed == cfg.harness.seed == 99
