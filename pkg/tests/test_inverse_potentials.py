import numpy as np
import pytest

from dynbc.errors import PreconditionError
from dynbc.forward import TimeWindow
from dynbc.grid import State, build_grid
from dynbc.inverse_potentials import (
    ForwardMap,
    InversionConfig,
    MisfitFunctional,
    TwinSetup,
    discrepancy_reconstruction,
    lipschitz_harness,
    misfit_and_gradient,
    reconstruct_potentials,
    relative_error,
    synthesize_observations,
)
from dynbc.model import AdmissibleBounds, Coefficients, PotentialPair


def _truth(g):
    return PotentialPair.from_functions(g, lambda x, y: 0.5 + 0.3 * x, lambda x, y: 0.4 + 0.2 * x)


@pytest.fixture(scope="module")
def setup16():
    g = build_grid(16, 32, 0.3)
    w = TimeWindow(1.0, 0.25, 0.75)
    Y0 = State.from_function(g, lambda x, y: 1.2 + 0.3 * x * y + 0.2 * y)
    return TwinSetup(g, Coefficients.preset(g, "variable"), w, w.default_dt(), Y0)


@pytest.fixture(scope="module")
def obs16(setup16):
    return synthesize_observations(setup16, _truth(setup16.grid))


def test_markov_data(grid_mid, window):
    s = TwinSetup(grid_mid, Coefficients.preset(grid_mid, "variable"), window, window.default_dt(), State.constant(grid_mid, 1.0))
    obs = synthesize_observations(s, PotentialPair.zeros(grid_mid))
    assert np.max(np.abs(obs.state_at_theta.bulk - 1.0)) <= 1e-12
    assert np.max(np.abs(obs.dtY_on_omega)) <= 1e-10


def test_constant_reaction_data(grid_mid, window):
    c, dt = 0.6, window.default_dt()
    s = TwinSetup(grid_mid, Coefficients.preset(grid_mid, "isotropic"), window, dt, State.constant(grid_mid, 1.0))
    obs = synthesize_observations(s, PotentialPair.constant(grid_mid, c))
    n = np.arange(s.n_t0, s.n_t1 + 1)
    y = (1 - c * dt) ** (-n.astype(float))
    expected = (y - y * (1 - c * dt)) / dt
    assert np.max(np.abs(obs.dtY_on_omega / expected[:, None] - 1.0)) <= 1e-12
    assert np.allclose(obs.state_at_theta.bulk, (1 - c * dt) ** (-s.n_theta), rtol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_noise_level(setup16, seed):
    clean = synthesize_observations(setup16, _truth(setup16.grid))
    noisy = synthesize_observations(setup16, _truth(setup16.grid), noise=0.01, rng=np.random.default_rng(seed))
    for a, b in ((noisy.state_at_theta.bulk, clean.state_at_theta.bulk), (noisy.dtY_on_omega, clean.dtY_on_omega)):
        rms = lambda v: np.sqrt(np.mean(v**2))
        assert rms(a - b) / rms(b) == pytest.approx(0.01, abs=1e-3)
    assert noisy.noise_norm > 0


def test_inadmissible_rejected(setup16):
    bad = PotentialPair.constant(setup16.grid, 5.0)
    with pytest.raises(PreconditionError, match="inadmissible"):
        synthesize_observations(setup16, bad, bounds=AdmissibleBounds(0.5, 2.0))
    with pytest.raises(PreconditionError):
        synthesize_observations(setup16, _truth(setup16.grid), noise=-0.1)


def test_misfit_zero_at_truth(obs16):
    val, _ = misfit_and_gradient(_truth(obs16.setup.grid), obs16, InversionConfig())
    assert val <= 1e-16


def test_regularized_misfit_zero_at_anchor(obs16):
    t = _truth(obs16.setup.grid)
    for kind in ("L2", "gradient"):
        val, _ = misfit_and_gradient(t, obs16, InversionConfig(reg_beta=0.3, initial=t, reg_kind=kind))
        assert val <= 1e-16


def test_config_validation():
    with pytest.raises(PreconditionError, match="reg_kind"):
        InversionConfig(reg_kind="H1").validate()
    with pytest.raises(PreconditionError, match="reg_beta"):
        InversionConfig(reg_beta=-1.0).validate()
    with pytest.raises(PreconditionError):
        InversionConfig(R=0.0).validate()


def test_gradient_matches_central_differences(obs16):
    g = obs16.setup.grid
    rng = np.random.default_rng(4)
    cand = PotentialPair(0.3 + 0.1 * rng.standard_normal(g.n_bulk), 0.2 + 0.1 * rng.standard_normal(g.n_surf))
    cfg = InversionConfig(reg_beta=1e-2, initial=PotentialPair.constant(g, 0.1), reg_kind="gradient")
    J = MisfitFunctional(obs16, cfg)
    _, grad = J(cand)
    coords = [("p", i) for i in rng.choice(g.n_bulk, 7, replace=False)] + [("q", i) for i in rng.choice(g.n_surf, 3, replace=False)]
    h = 1e-5
    fd, an = [], []
    for kind, i in coords:
        e = PotentialPair.zeros(g)
        getattr(e, kind)[i] = h
        fd.append((J(cand + e)[0] - J(cand - e)[0]) / (2 * h))
        an.append(getattr(grad, kind)[i])
    fd, an = np.array(fd), np.array(an)
    assert np.linalg.norm(fd - an) <= 1e-5 * np.linalg.norm(an)


def test_adjoint_exactness(setup16):
    g = setup16.grid
    rng = np.random.default_rng(5)
    fm = ForwardMap(setup16)
    r = fm.reaction(_truth(g))
    dr = rng.standard_normal(g.n_bulk)
    yth, d = fm.tangent(r, dr)
    v_th = rng.standard_normal(g.n_bulk)
    v_d = rng.standard_normal(d.shape)
    lhs = yth @ v_th + np.sum(d * v_d)
    rhs = dr @ fm.adjoint(r, v_th, v_d)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_stationary_at_zero(grid_small, window):
    s = TwinSetup(grid_small, Coefficients.preset(grid_small, "isotropic"), window, window.default_dt(), State.constant(grid_small, 1.0))
    obs = synthesize_observations(s, PotentialPair.zeros(grid_small))
    res = reconstruct_potentials(obs, InversionConfig(initial=PotentialPair.zeros(grid_small)))
    assert res.converged and len(res.history) == 1


def test_noiseless_reconstruction(obs16):
    res = reconstruct_potentials(obs16, InversionConfig(max_iter=300))
    assert relative_error(obs16.setup.grid, res.pq, _truth(obs16.setup.grid)) <= 0.05
    vals = [h[1] for h in res.history]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert not res.stalled


def test_error_vanishes_with_noise(setup16):
    g = setup16.grid
    errs = []
    for delta in (1e-2, 1e-3, 1e-4):
        obs = synthesize_observations(setup16, _truth(g), noise=delta, rng=np.random.default_rng(0))
        res = reconstruct_potentials(obs, InversionConfig(max_iter=300, reg_beta=10 * delta, reg_kind="gradient"))
        errs.append(relative_error(g, res.pq, _truth(g)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 0.01


def test_discrepancy_requires_noise(obs16):
    with pytest.raises(PreconditionError, match="noise"):
        discrepancy_reconstruction(obs16, [1.0], InversionConfig())


def test_discrepancy_trail(setup16):
    obs = synthesize_observations(setup16, _truth(setup16.grid), noise=0.01, rng=np.random.default_rng(1))
    res, beta, trail = discrepancy_reconstruction(obs, [10.0, 1.0, 0.1], InversionConfig(max_iter=60, reg_kind="gradient"))
    assert [t[0] for t in trail] == sorted([t[0] for t in trail], reverse=True)
    assert beta == trail[-1][0]
    assert trail[-1][1] <= 1.1 * obs.noise_norm or beta == 0.1


def test_lipschitz_identical_pair_skipped(setup16):
    g = setup16.grid
    assert lipschitz_harness(setup16, [_truth(g)], [PotentialPair.zeros(g)], [1e-1]) == []


def test_lipschitz_single_mode_linear(setup16):
    g = setup16.grid
    direction = PotentialPair(g.x1.copy(), np.zeros(g.n_surf))
    out = lipschitz_harness(setup16, [_truth(g)], [direction], [1e-1, 1e-2, 1e-3])
    ratios = np.array([s.ratio for s in out])
    assert len(ratios) == 3 and np.all(np.isfinite(ratios))
    assert ratios.max() / ratios.min() - 1.0 <= 0.05
