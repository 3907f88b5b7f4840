from dataclasses import replace

import numpy as np
import pytest

from dynbc.carleman import (
    apply_M1_N1,
    build_eta0,
    build_weights,
    carleman_sides,
    carleman_sweep,
    check_weight_properties,
    compute_IJ,
    field_densities,
    gamma_of,
    ij_identity,
    sample_field_trajectory,
    window_times,
)
from dynbc.errors import PreconditionError
from dynbc.forward import TimeWindow, solve_forward
from dynbc.grid import State, build_grid
from dynbc.model import Coefficients, assemble_generator
from dynbc.sampling import random_smooth_field


def _weights(grid, window, s=4.0, lam=2.0, dt=None):
    dt = dt or window.default_dt()
    eta0, _ = build_eta0(grid)
    times = window_times(window, dt)
    return build_weights(grid, eta0, lam, s, window, times[1:-1]), times, dt


def test_eta0_values(grid_mid):
    eta0, rep = build_eta0(grid_mid)
    assert eta0[0] == 1.0
    assert np.all(eta0[grid_mid.trace_map] == 0.0)
    assert rep.ok


def test_eta0_normal_derivative_second_order():
    errs = []
    for n in (16, 32):
        _, rep = build_eta0(build_grid(n, 2 * n, 0.3))
        errs.append(np.max(np.abs(rep.normal_derivative + 2.0)))
    assert errs[1] <= 1e-12 or errs[0] / errs[1] > 3.5


def test_eta0_gradient_outside_omega(grid_desk):
    _, rep = build_eta0(grid_desk)
    assert rep.min_grad_outside_omega == pytest.approx(0.6, abs=2.0 / grid_desk.n_r)


def test_eta0_rejects_omega_without_origin():
    g = build_grid(8, 16, 0.3)
    g = build_grid(8, 16, 0.3)
    mask = g.omega_mask.copy()
    mask[0] = False
    g = replace(g, omega_mask=mask)
    with pytest.raises(PreconditionError, match="origin"):
        build_eta0(g)


def test_gamma_vertex(window):
    assert gamma_of(window, window.theta) == pytest.approx(0.0625, rel=1e-15)


def test_boundary_values_at_theta(grid_mid, window):
    w, _, _ = _weights(grid_mid, window, lam=2.0)
    k = np.flatnonzero(np.isclose(w.times, window.theta))[0]
    t = grid_mid.trace_map
    assert np.allclose(w.xi[k, t], 16.0, rtol=1e-14)
    assert np.allclose(w.alpha[k, t], (np.exp(4.0) - 1.0) / 0.0625, rtol=1e-14)


def test_weight_rejections(grid_small, window):
    eta0, _ = build_eta0(grid_small)
    with pytest.raises(PreconditionError, match="strictly inside"):
        build_weights(grid_small, eta0, 2.0, 1.0, window, [window.t0])
    with pytest.raises(PreconditionError, match="strictly inside"):
        build_weights(grid_small, eta0, 2.0, 1.0, window, [window.t1 + 0.1])
    with pytest.raises(PreconditionError, match="lambda"):
        build_weights(grid_small, eta0, 0.5, 1.0, window, [window.theta])


@pytest.mark.parametrize("s", [1.0, 16.0, 64.0])
@pytest.mark.parametrize("lam", [1.0, 2.0, 3.0])
def test_weight_properties(grid_mid, window, s, lam):
    w, _, _ = _weights(grid_mid, window, s=s, lam=lam)
    rep = check_weight_properties(w)
    assert rep.ok
    assert rep.xi_equality_gap <= 1e-12


def test_constants(grid_small, window):
    w, _, _ = _weights(grid_small, window)
    L = window.length
    assert (w.C1, w.C2, w.C3) == (L**6 / 64, L**4 / 16, L**2 / 4)


def test_M1_N1_s_zero_is_time_derivative(grid_mid, window):
    w, times, dt = _weights(grid_mid, window, s=0.0)
    coeffs = Coefficients.preset(grid_mid, "variable")
    z = sample_field_trajectory(grid_mid, random_smooth_field(np.random.default_rng(1)), times)
    m1, n1 = apply_M1_N1(w, coeffs, z, dt)
    dz = (z[2:] - z[:-2]) / (2 * dt)
    assert np.max(np.abs(m1 - dz)) <= 1e-12
    assert np.max(np.abs(n1 - dz[:, grid_mid.trace_map])) <= 1e-12


def test_M1_N1_zero_field(grid_mid, window):
    w, times, dt = _weights(grid_mid, window, s=8.0)
    coeffs = Coefficients.preset(grid_mid, "variable")
    m1, n1 = apply_M1_N1(w, coeffs, np.zeros((len(times), grid_mid.n_bulk)), dt)
    assert not m1.any() and not n1.any()


def test_M1_N1_constant_in_time_s_zero(grid_mid, window):
    w, times, dt = _weights(grid_mid, window, s=0.0)
    coeffs = Coefficients.preset(grid_mid, "variable")
    z = np.tile(grid_mid.x1 + grid_mid.x2**2, (len(times), 1))
    m1, n1 = apply_M1_N1(w, coeffs, z, dt)
    assert not m1.any() and not n1.any()
    I, J = compute_IJ(w, coeffs, z, dt)
    assert I == 0.0 and J == 0.0


def test_M1_N1_needs_three_nodes(grid_small, window):
    eta0, _ = build_eta0(grid_small)
    w = build_weights(grid_small, eta0, 2.0, 1.0, window, [0.4, 0.5])
    with pytest.raises(PreconditionError, match="3 interior"):
        apply_M1_N1(w, Coefficients.preset(grid_small, "isotropic"), np.zeros((4, grid_small.n_bulk)), 0.1)


def test_IJ_zero_field(grid_small, window):
    w, times, dt = _weights(grid_small, window)
    coeffs = Coefficients.preset(grid_small, "isotropic")
    assert compute_IJ(w, coeffs, np.zeros((len(times), grid_small.n_bulk)), dt) == (0.0, 0.0)


def test_IJ_integration_by_parts_identity():
    # the weighted field has gradients of size s lam xi; the discrepancy scales like s h^2 and dt^2
    g = build_grid(128, 256, 0.3)
    window = TimeWindow(1.0, 0.25, 0.75)
    w, times, dt = _weights(g, window, s=1.0, lam=1.0, dt=1 / 1024)
    coeffs = Coefficients.preset(g, "variable")
    v = sample_field_trajectory(g, random_smooth_field(np.random.default_rng(3), kmax=2.0, wmax=2.0), times)
    I, J = compute_IJ(w, coeffs, v, dt)
    I2, J2 = ij_identity(w, coeffs, v, dt)
    assert abs(I - I2) <= 1e-3 * abs(I2)
    assert abs(J - J2) <= 1e-3 * abs(J2)


def test_sides_zero_field_degenerate(grid_small, window):
    w, times, dt = _weights(grid_small, window)
    coeffs = Coefficients.preset(grid_small, "isotropic")
    dens = field_densities(grid_small, coeffs, np.zeros((len(times), grid_small.n_bulk)), dt)
    cs = carleman_sides(w, dens, dt)
    assert cs.lhs == 0.0 and cs.degenerate and np.isnan(cs.ratio)


def test_sides_homogeneous_solution(grid_mid, window):
    coeffs = Coefficients.preset(grid_mid, "variable")
    gen = assemble_generator(grid_mid, coeffs)
    Y0 = State.from_function(grid_mid, lambda x, y: 1.0 + 0.5 * x * y + 0.3 * x)
    dt = window.default_dt()
    traj = solve_forward(gen, Y0, window, dt, scheme="crank_nicolson")
    n = window.steps(dt)
    z = traj.values[n["t0"]: n["t1"] + 1]
    w, _, _ = _weights(grid_mid, window, s=4.0, dt=dt)
    cs = carleman_sides(w, field_densities(grid_mid, coeffs, z, dt), dt)
    assert np.isfinite(cs.ratio) and cs.ratio > 0
    assert cs.omega_term > 0


def test_sweep_rows(grid_small, window):
    coeffs = Coefficients.preset(grid_small, "isotropic")
    dt = window.default_dt()
    times = window_times(window, dt)
    rng = np.random.default_rng(0)
    fields = [sample_field_trajectory(grid_small, random_smooth_field(rng), times) for _ in range(3)]
    rows = carleman_sweep(grid_small, coeffs, window, dt, 2.0, (16.0, 32.0), fields)
    assert len(rows) == 6
    assert all(np.isfinite(r[5]) and r[5] > 0 for r in rows)
