import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynbc.errors import PreconditionError
from dynbc.grid import State, build_grid, inner_product
from dynbc.model import (
    AdmissibleBounds,
    Coefficients,
    PotentialPair,
    apply_L,
    apply_L_gamma,
    assemble_generator,
    bilinear_form,
    check_admissible,
)

PRESETS = ("isotropic", "variable", "anisotropic")


def test_apply_L_constant_is_harmonic(grid_mid):
    c = Coefficients.preset(grid_mid, "isotropic")
    assert np.max(np.abs(apply_L(grid_mid, c, 0.0, np.ones(grid_mid.n_bulk)))) <= 1e-12


def test_apply_L_linear_with_unit_drift(grid_mid):
    g = grid_mid
    c = Coefficients.from_functions(g, B=lambda x, y: (np.ones_like(x), np.zeros_like(x)))
    out = apply_L(g, c, 0.0, g.x1)
    assert np.max(np.abs(out - 1.0)) <= 1e-10


def test_apply_L_reaction_only(grid_mid):
    c = Coefficients.preset(grid_mid, "isotropic")
    out = apply_L(grid_mid, c, 0.7, np.ones(grid_mid.n_bulk))
    assert np.max(np.abs(out - 0.7)) <= 1e-12


def test_apply_L_gamma_constant(grid_mid):
    c = Coefficients.preset(grid_mid, "variable")
    assert np.max(np.abs(apply_L_gamma(grid_mid, c, 0.0, State.constant(grid_mid, 1.0)))) <= 1e-12


def test_apply_L_gamma_linear_field():
    errs = []
    for n in (16, 32):
        g = build_grid(n, 2 * n, 0.3)
        c = Coefficients.preset(g, "isotropic")
        out = apply_L_gamma(g, c, 0.0, State.from_bulk(g, g.x1))
        errs.append(np.max(np.abs(out + 2 * np.cos(g.angles))))
    assert errs[-1] <= 1e-10


def test_apply_L_gamma_tangential_drift():
    g = build_grid(32, 64, 0.3)
    c = Coefficients.from_functions(g, b=1.0)
    out = apply_L_gamma(g, c, 0.0, State.from_bulk(g, g.x1))
    ref = -2 * np.cos(g.angles) - np.sin(g.angles)
    assert np.max(np.abs(out - ref)) <= 1e-10


def test_apply_L_gamma_rejects_incompatible(grid_small):
    c = Coefficients.preset(grid_small, "isotropic")
    bad = State(np.ones(grid_small.n_bulk), np.zeros(grid_small.n_surf))
    with pytest.raises(PreconditionError, match="trace-compatible"):
        apply_L_gamma(grid_small, c, 0.0, bad)


def test_check_admissible_examples(grid_small):
    b = AdmissibleBounds(0.5, 2.0)
    assert check_admissible(grid_small, State.constant(grid_small, 1.0), b).admissible
    rep = check_admissible(grid_small, State.constant(grid_small, 0.1), b)
    assert not rep.admissible and any("lower bound violated" in v for v in rep.violations)
    rep = check_admissible(grid_small, PotentialPair.constant(grid_small, 2.5), b)
    assert not rep.admissible and any("||p||_inf exceeds R" in v for v in rep.violations)
    rep = check_admissible(grid_small, State(np.ones(grid_small.n_bulk), np.full(grid_small.n_surf, 2.0)), b)
    assert any("trace compatibility" in v for v in rep.violations)


@pytest.mark.parametrize("r, R", [(0.0, 1.0), (2.0, 1.0), (-1.0, 1.0)])
def test_bounds_reject(r, R):
    with pytest.raises(PreconditionError):
        AdmissibleBounds(r, R)


@pytest.mark.parametrize("name", PRESETS)
def test_constants_in_kernel(grid_mid, name):
    gen = assemble_generator(grid_mid, Coefficients.preset(grid_mid, name))
    one = np.ones(grid_mid.n_bulk)
    assert np.max(np.abs(gen.gen0 @ one)) <= 1e-12
    assert np.max(np.abs(gen.bulk0 @ one)) <= 1e-12
    assert np.max(np.abs(gen.surf0 @ one)) <= 1e-12


def test_symmetry_without_drift(grid_mid, rng):
    c = Coefficients.preset(grid_mid, "variable").without_drift()
    G = assemble_generator(grid_mid, c).gen0
    m = grid_mid.mass
    worst = 0.0
    for _ in range(20):
        u, v = rng.normal(size=(2, grid_mid.n_bulk))
        worst = max(worst, abs(np.dot(m * (G @ u), v) - np.dot(m * u, G @ v)))
    assert worst <= 1e-10


@pytest.mark.parametrize("name", PRESETS)
def test_weak_form_consistency(grid_mid, rng, name):
    c = Coefficients.preset(grid_mid, name)
    G = assemble_generator(grid_mid, c).gen0
    for _ in range(5):
        u, v = rng.normal(size=(2, grid_mid.n_bulk))
        lhs = -np.dot(grid_mid.mass * (G @ u), v)
        assert lhs == pytest.approx(bilinear_form(grid_mid, c, u, v), abs=1e-10)


def test_pair_inner_product_matches_mass(grid_mid, rng):
    u, v = rng.normal(size=(2, grid_mid.n_bulk))
    ip = inner_product(grid_mid, State.from_bulk(grid_mid, u), State.from_bulk(grid_mid, v))
    assert ip == pytest.approx(np.dot(grid_mid.mass * u, v), rel=1e-13)


@pytest.mark.parametrize("name", PRESETS)
def test_operator_paths_agree(grid_mid, rng, name):
    g = grid_mid
    c = Coefficients.preset(g, name)
    pq = PotentialPair(rng.uniform(-1, 1, g.n_bulk), rng.uniform(-1, 1, g.n_surf))
    gen = assemble_generator(g, c, pq)
    y = rng.normal(size=g.n_bulk)
    ref_b, ref_s = gen.bulk_rows @ y, gen.surf_rows @ y
    scale = max(np.max(np.abs(ref_b)), np.max(np.abs(ref_s)))
    assert np.max(np.abs(apply_L(g, c, pq.p, y) - ref_b)) <= 1e-12 * scale
    assert np.max(np.abs(apply_L_gamma(g, c, pq.q, State.from_bulk(g, y)) - ref_s)) <= 1e-12 * scale


@pytest.mark.parametrize("name", ["isotropic", "variable"])
def test_implicit_step_is_m_matrix(grid_mid, name):
    gen = assemble_generator(grid_mid, Coefficients.preset(grid_mid, name))
    assert gen.min_offdiag >= -1e-12


def test_non_elliptic_rejected(grid_small):
    c = Coefficients.from_functions(grid_small, a=0.2, beta=0.5)
    with pytest.raises(PreconditionError, match="not elliptic"):
        assemble_generator(grid_small, c)
    c = Coefficients.from_functions(grid_small, D=0.1, beta=0.5)
    with pytest.raises(PreconditionError, match="D is not elliptic"):
        assemble_generator(grid_small, c)


def test_potentials_fold_into_reaction(grid_mid):
    gen0 = assemble_generator(grid_mid, Coefficients.preset(grid_mid, "variable"))
    gen = gen0.with_potentials(PotentialPair.constant(grid_mid, 0.3))
    one = np.ones(grid_mid.n_bulk)
    scale = np.max(np.abs(gen0.gen0.diagonal()))
    assert np.max(np.abs(gen.matrix @ one - 0.3)) <= 1e-14 * scale


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(PRESETS))
def test_kernel_property_random_drift(seed, name):
    g = build_grid(6, 12, 0.3)
    r = np.random.default_rng(seed)
    base = Coefficients.preset(g, name)
    B = r.uniform(-2, 2, size=(g.n_bulk, 2))
    b = r.uniform(-2, 2, size=g.n_surf)
    c = Coefficients(base.A, B, base.D, b, base.beta)
    gen = assemble_generator(g, c)
    assert np.max(np.abs(gen.gen0 @ np.ones(g.n_bulk))) <= 1e-12
