"""
Carleman weights and empirical checks of the weighted estimate.

The spatial weight is ``eta0 = 1 - rho^2``: positive in the disk, zero on the
circle with ``d_nu eta0 = -2``, and critical only at the origin, which lies
in the observation disk. With ``gamma(t) = (t - t0)(t1 - t)``,

    alpha = (exp(2 lam) - exp(lam eta0)) / gamma,   xi = exp(lam eta0) / gamma.

Weights ``exp(-2 s alpha)`` underflow already for moderate ``s``; every
weighted quantity here carries the common factor ``exp(2 s alpha_min)``
(``alpha_min`` is the minimum of ``alpha`` over the time nodes and the grid),
which leaves ratios and identities unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dynbc.errors import PreconditionError
from dynbc.forward import TimeWindow
from dynbc.grid import PolarGrid, State
from dynbc.model import Coefficients, apply_L, apply_L_gamma, conormal_derivative, surface_stiffness_apply


@dataclass
class Eta0Report:
    positive_inside: bool
    zero_on_boundary: bool
    normal_derivative: np.ndarray
    min_grad_outside_omega: float

    @property
    def ok(self) -> bool:
        return (
            self.positive_inside
            and self.zero_on_boundary
            and bool(np.all(self.normal_derivative < 0))
            and self.min_grad_outside_omega > 0
        )


def build_eta0(grid: PolarGrid) -> tuple[np.ndarray, Eta0Report]:
    """``eta0 = 1 - rho^2`` with a verification report."""
    if not grid.omega_mask[0]:
        raise PreconditionError("omega must contain the origin, the only critical point of eta0")
    eta0 = 1.0 - grid.rho**2
    inside = ~grid.boundary_mask
    dnu = (grid.radial_op @ eta0)[grid.trace_map]
    gx, gy = grid.grad_ops
    gnorm = np.hypot(gx @ eta0, gy @ eta0)
    rep = Eta0Report(
        positive_inside=bool(np.all(eta0[inside] > 0)),
        zero_on_boundary=bool(np.all(eta0[grid.trace_map] == 0)),
        normal_derivative=dnu,
        min_grad_outside_omega=float(np.min(gnorm[~grid.omega_mask])),
    )
    return eta0, rep


@dataclass(frozen=True, eq=False)
class WeightFields:
    """Weights at the interior time nodes ``times`` (shape ``(n_t,)``).

    ``alpha``, ``xi`` and ``dt_alpha`` have shape ``(n_t, n_bulk)``; the
    surface values are the columns ``grid.trace_map``. ``weight`` is the
    normalized ``exp(-2 s (alpha - alpha_min))``.
    """

    grid: PolarGrid
    eta0: np.ndarray
    lambda_: float
    s: float
    window: TimeWindow
    times: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    dt_alpha: np.ndarray
    alpha_min: float
    weight: np.ndarray
    grad_eta0: tuple[np.ndarray, np.ndarray]

    @property
    def C1(self) -> float:
        return self.window.length**6 / 64

    @property
    def C2(self) -> float:
        return self.window.length**4 / 16

    @property
    def C3(self) -> float:
        return self.window.length**2 / 4

    def sigma(self, coeffs: Coefficients) -> np.ndarray:
        """``A grad eta0 . grad eta0`` at every bulk node."""
        gx, gy = self.grad_eta0
        A = coeffs.A
        return A[:, 0, 0] * gx * gx + 2 * A[:, 0, 1] * gx * gy + A[:, 1, 1] * gy * gy

    def surf(self, field: np.ndarray) -> np.ndarray:
        return field[:, self.grid.trace_map]


def gamma_of(window: TimeWindow, t):
    return (np.asarray(t) - window.t0) * (window.t1 - np.asarray(t))


def build_weights(
    grid: PolarGrid, eta0: np.ndarray, lambda_: float, s: float, window: TimeWindow, times
) -> WeightFields:
    """Evaluate ``alpha``, ``xi`` and the normalized Carleman weight on ``times``.

    Rejects ``lambda_ < 1``, ``s < 0`` and any time outside the open window.
    ``s = 0`` is accepted for the degenerate checks.
    """
    if lambda_ < 1:
        raise PreconditionError("lambda must be >= 1")
    if s < 0:
        raise PreconditionError("s must be nonnegative")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times <= window.t0) or np.any(times >= window.t1):
        raise PreconditionError("weights are only defined strictly inside (t0, t1): gamma vanishes at the endpoints")
    g = gamma_of(window, times)[:, None]
    top = np.exp(2 * lambda_ * np.max(np.abs(eta0)))
    e = np.exp(lambda_ * eta0)[None, :]
    alpha = (top - e) / g
    xi = e / g
    dgamma = (window.t0 + window.t1 - 2 * times)[:, None]
    dt_alpha = -(top - e) * dgamma / g**2
    amin = float(alpha.min())
    weight = np.exp(-2 * s * (alpha - amin))
    grad = (-2.0 * grid.x1, -2.0 * grid.x2)
    return WeightFields(grid, eta0, float(lambda_), float(s), window, times, g[:, 0], alpha, xi, dt_alpha, amin, weight, grad)


def window_times(window: TimeWindow, dt: float) -> np.ndarray:
    """Nodes ``t0, t0 + dt, ..., t1`` (both endpoints included)."""
    n = window.steps(dt)
    return dt * np.arange(n["t0"], n["t1"] + 1)


@dataclass
class WeightPropertyReport:
    positive: bool
    boundary_tangential_zero: bool
    dt_alpha_constant: float
    xi_lower: bool
    xi_equality_gap: float
    xi_upper: bool
    one_le_C3_xi: bool
    argmin_theta: bool
    log_inf_weight_theta: float
    log_sup_weight_xi3: float
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return (
            self.positive
            and self.boundary_tangential_zero
            and np.isfinite(self.dt_alpha_constant)
            and self.xi_lower
            and self.xi_upper
            and self.one_le_C3_xi
            and self.argmin_theta
            and np.isfinite(self.log_inf_weight_theta)
            and np.isfinite(self.log_sup_weight_xi3)
        )


def check_weight_properties(w: WeightFields) -> WeightPropertyReport:
    """Nodewise checks of the weight properties on the tested time grid.

    The weight bounds are evaluated in logarithmic form: ``log inf exp(-2 s alpha(theta))``
    and ``log sup exp(-2 s alpha) xi^3`` must be finite (the raw values
    underflow for large ``s``).
    """
    grid = w.grid
    lower = 4.0 / w.window.length**2
    t = w.grid.trace_map
    k_theta = np.flatnonzero(np.isclose(w.times, w.window.theta, rtol=0, atol=1e-12))
    argmin_ok = k_theta.size == 1 and bool(np.all(np.argmin(w.alpha, axis=0) == k_theta[0]))
    T = w.window.T
    dt_c = float(np.max(np.abs(w.dt_alpha) / (T * w.xi**2)))
    bnd_alpha, bnd_xi = w.alpha[:, t], w.xi[:, t]
    tangential = bool(
        np.all(bnd_alpha.max(axis=1) == bnd_alpha.min(axis=1)) and np.all(bnd_xi.max(axis=1) == bnd_xi.min(axis=1))
    )
    eq_gap = float(np.max(np.abs(w.xi[k_theta[0], t] - lower))) if k_theta.size else float("inf")
    log_inf = float(np.min(-2 * w.s * w.alpha[k_theta[0]])) if k_theta.size else float("-inf")
    log_sup = float(np.max(-2 * w.s * w.alpha + 3 * np.log(w.xi)))
    return WeightPropertyReport(
        positive=bool(np.all(w.alpha > 0) and np.all(w.xi > 0)),
        boundary_tangential_zero=tangential,
        dt_alpha_constant=dt_c,
        xi_lower=bool(np.all(w.xi >= lower * (1 - 1e-14))),
        xi_equality_gap=eq_gap,
        xi_upper=bool(np.all(w.xi <= w.C2 * w.xi**3 * (1 + 1e-14))),
        one_le_C3_xi=bool(np.all(1.0 <= w.C3 * w.xi * (1 + 1e-14))),
        argmin_theta=argmin_ok,
        log_inf_weight_theta=log_inf,
        log_sup_weight_xi3=log_sup,
        details={"n_nodes": grid.n_bulk, "n_times": len(w.times)},
    )


# ----------------------------------------------------------------------
# weighted operators
# ----------------------------------------------------------------------
def _check_traj(w: WeightFields, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != w.grid.n_bulk:
        raise PreconditionError("trajectory must have shape (n_times, n_bulk)")
    if len(w.times) < 3:
        raise PreconditionError("fewer than 3 interior time nodes")
    if z.shape[0] != len(w.times) + 2:
        raise PreconditionError("trajectory must hold the interior weight times plus both neighbours")
    return z


def _centered_dt(z: np.ndarray, dt: float) -> np.ndarray:
    return (z[2:] - z[:-2]) / (2 * dt)


def apply_M1_N1(
    w: WeightFields, coeffs: Coefficients, z: np.ndarray, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """``M1 y`` and ``N1 y_G`` for ``y = exp(-s alpha) z`` at the interior nodes.

    ``z`` holds the trajectory at ``times[0] - dt, times..., times[-1] + dt``.
    Time derivatives of ``z`` are centered; derivatives of the weight are
    analytic (``grad alpha = -lam xi grad eta0``).
    """
    z = _check_traj(w, z)
    grid = w.grid
    s, lam = w.s, w.lambda_
    zc = z[1:-1]
    dz = _centered_dt(z, dt)
    gx, gy = grid.grad_ops
    zx, zy = (gx @ zc.T).T, (gy @ zc.T).T
    ex, ey = w.grad_eta0
    A = coeffs.A
    Agx = A[:, 0, 0] * ex + A[:, 0, 1] * ey
    Agy = A[:, 0, 1] * ex + A[:, 1, 1] * ey
    sigma = w.sigma(coeffs)
    yx = zx + s * lam * w.xi * ex * zc
    yy = zy + s * lam * w.xi * ey * zc
    m1 = dz - s * w.dt_alpha * zc + 2 * s * lam * w.xi * (Agx * yx + Agy * yy) + 2 * s * lam**2 * w.xi * sigma * zc
    dnu = conormal_derivative(grid, coeffs, w.eta0)
    t = grid.trace_map
    zs = zc[:, t]
    n1 = dz[:, t] - s * w.dt_alpha[:, t] * zs - s * lam * w.xi[:, t] * zs * dnu
    scale = np.exp(-s * (w.alpha - w.alpha_min))
    return scale * m1, scale[:, t] * n1


def _time_weights_to_theta(w: WeightFields, dt: float) -> np.ndarray:
    theta = w.window.theta
    tw = np.where(w.times < theta - 1e-12, dt, 0.0)
    tw[np.isclose(w.times, theta, rtol=0, atol=1e-12)] = 0.5 * dt
    return tw


def compute_IJ(w: WeightFields, coeffs: Coefficients, v: np.ndarray, dt: float) -> tuple[float, float]:
    """``I = int M1 u u`` over ``(t0, theta) x Omega`` and ``J`` on the circle, ``u = exp(-s alpha) v``.

    Trapezoid rule in time; ``u`` vanishes at ``t0``.
    """
    v = _check_traj(w, v)
    grid = w.grid
    m1, n1 = apply_M1_N1(w, coeffs, v, dt)
    u = np.exp(-w.s * (w.alpha - w.alpha_min)) * v[1:-1]
    tw = _time_weights_to_theta(w, dt)
    I = float(np.sum(tw[:, None] * grid.w_bulk * m1 * u))
    J = float(np.sum(tw[:, None] * grid.w_surf * n1 * u[:, grid.trace_map]))
    return I, J


def ij_identity(w: WeightFields, coeffs: Coefficients, v: np.ndarray, dt: float) -> tuple[float, float]:
    """Integrated-by-parts forms of ``I`` and ``J``.

    ``I = 1/2 int u(theta)^2 + s lam^2 int xi sigma u^2 - s lam int xi div(A grad eta0) u^2
    + s lam int_G xi d_nu^A eta0 u^2`` and
    ``J = 1/2 int_G u(theta)^2 - s lam int_G xi d_nu^A eta0 u^2``.
    """
    v = _check_traj(w, v)
    grid = w.grid
    s, lam = w.s, w.lambda_
    u = np.exp(-s * (w.alpha - w.alpha_min)) * v[1:-1]
    k = np.flatnonzero(np.isclose(w.times, w.window.theta, rtol=0, atol=1e-12))
    if k.size != 1:
        raise PreconditionError("theta must be a time node")
    k = int(k[0])
    tw = _time_weights_to_theta(w, dt)
    div_eta = apply_L(grid, coeffs.without_drift(), 0.0, w.eta0)
    dnu = conormal_derivative(grid, coeffs, w.eta0)
    sigma = w.sigma(coeffs)
    t = grid.trace_map
    us = u[:, t]
    I = 0.5 * np.dot(grid.w_bulk, u[k] ** 2)
    I += s * lam**2 * np.sum(tw[:, None] * grid.w_bulk * w.xi * sigma * u**2)
    I -= s * lam * np.sum(tw[:, None] * grid.w_bulk * w.xi * div_eta * u**2)
    I += s * lam * np.sum(tw[:, None] * grid.w_surf * w.xi[:, t] * dnu * us**2)
    J = 0.5 * np.dot(grid.w_surf, us[k] ** 2) - s * lam * np.sum(tw[:, None] * grid.w_surf * w.xi[:, t] * dnu * us**2)
    return float(I), float(J)


# ----------------------------------------------------------------------
# the weighted estimate as a functional inequality
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FieldDensities:
    """Unweighted integrands of a test trajectory at the interior time nodes."""

    bulk: dict[str, np.ndarray]
    surf: dict[str, np.ndarray]
    omega_z2: np.ndarray


def field_densities(grid: PolarGrid, coeffs: Coefficients, z: np.ndarray, dt: float) -> FieldDensities:
    """Squares of every quantity entering the estimate, for ``z`` on ``t0 - dt ... t1 + dt``-style nodes."""
    z = np.asarray(z, dtype=float)
    zc = z[1:-1]
    dz = _centered_dt(z, dt)
    gx, gy = grid.grad_ops
    nodiff = coeffs.without_drift()
    div = np.array([apply_L(grid, nodiff, 0.0, u) for u in zc])
    Lsp = np.array([apply_L(grid, coeffs, 0.0, u) for u in zc])
    t = grid.trace_map
    states = [State.from_bulk(grid, u) for u in zc]
    Lg = np.array([apply_L_gamma(grid, coeffs, 0.0, Y) for Y in states])
    divg = np.array([-surface_stiffness_apply(grid, coeffs, u[t]) / grid.w_surf for u in zc])
    dnu = np.array([conormal_derivative(grid, coeffs, u) for u in zc])
    zs = zc[:, t]
    bulk = {
        "dt2": dz**2,
        "div2": div**2,
        "grad2": (gx @ zc.T).T ** 2 + (gy @ zc.T).T ** 2,
        "z2": zc**2,
        "Lz2": (dz - Lsp) ** 2,
    }
    surf = {
        "dt2": dz[:, t] ** 2,
        "div2": divg**2,
        "grad2": (grid.surf_d1 @ zs.T).T ** 2,
        "z2": zs**2,
        "dnu2": dnu**2,
        "Lz2": (dz[:, t] - Lg) ** 2,
    }
    return FieldDensities(bulk, surf, zc**2 * grid.omega_mask)


@dataclass
class CarlemanSides:
    lhs: float
    rhs: float
    omega_term: float
    degenerate: bool

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if not self.degenerate else float("nan")


def carleman_sides(w: WeightFields, dens: FieldDensities, dt: float) -> CarlemanSides:
    """Left side and constant-free right side of the weighted estimate (common scaling removed)."""
    grid = w.grid
    s, lam = w.s, w.lambda_
    t = grid.trace_map
    wb = dt * w.weight * grid.w_bulk
    ws = dt * w.weight[:, t] * grid.w_surf
    xi, xis = w.xi, w.xi[:, t]
    b, g = dens.bulk, dens.surf
    lhs = np.sum(wb * ((b["dt2"] + b["div2"]) / (s * xi) + s * lam**2 * xi * b["grad2"] + s**3 * lam**4 * xi**3 * b["z2"]))
    lhs += np.sum(
        ws
        * (
            (g["dt2"] + g["div2"]) / (s * xis)
            + s * lam * xis * g["grad2"]
            + s**3 * lam**3 * xis**3 * g["z2"]
            + s * lam * xis * g["dnu2"]
        )
    )
    omega = float(s**3 * lam**4 * np.sum(wb * xi**3 * dens.omega_z2))
    rhs = omega + float(np.sum(wb * b["Lz2"])) + float(np.sum(ws * g["Lz2"]))
    return CarlemanSides(float(lhs), rhs, omega, rhs == 0.0)


def carleman_sweep(
    grid: PolarGrid,
    coeffs: Coefficients,
    window: TimeWindow,
    dt: float,
    lambda_: float,
    s_values,
    fields,
) -> list[tuple[float, float, int, float, float, float]]:
    """Rows ``(s, lambda, field_id, lhs, rhs, ratio)`` for each field trajectory.

    ``fields`` yields arrays of shape ``(n_window_nodes, n_bulk)`` sampled
    at ``t0, t0 + dt, ..., t1``.
    """
    eta0, _ = build_eta0(grid)
    times = window_times(window, dt)[1:-1]
    weights = {s: build_weights(grid, eta0, lambda_, s, window, times) for s in s_values}
    rows = []
    for fid, z in enumerate(fields):
        dens = field_densities(grid, coeffs, z, dt)
        for s in s_values:
            cs = carleman_sides(weights[s], dens, dt)
            rows.append((float(s), float(lambda_), fid, cs.lhs, cs.rhs, cs.ratio))
    return rows


def sample_field_trajectory(grid: PolarGrid, field, times: np.ndarray) -> np.ndarray:
    """Evaluate a space-time callable ``field(t, x1, x2)`` on the grid at each time."""
    return np.array([field(t, grid.x1, grid.x2) for t in times])
