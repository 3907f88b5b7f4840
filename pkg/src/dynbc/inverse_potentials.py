"""
Recovery of the potentials ``(p, q)`` and Lipschitz-ratio diagnostics.

Data are the full state at ``theta`` (compared in the discrete H2 norm) and
``dy/dt`` on ``omega x (t0, t1)``. The forward model is implicit Euler on
``[0, t1]`` from a known initial state; gradients use the exact discrete
adjoint of that scheme.

With shared bulk/surface degrees of freedom the boundary ring sees ``p`` and
``q`` only through the lumped reaction ``(w_bulk p + w_surf q) / mass``, so
the two cannot be separated there. The reconstruction therefore ties ``p`` on
the boundary ring to the adjacent inner ring.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize as so
import scipy.sparse as sp

from dynbc.errors import NumericalError, PreconditionError
from dynbc.forward import TimeWindow, _Factorized
from dynbc.grid import PolarGrid, State, discrete_norm, h2_gram
from dynbc.model import (
    AdmissibleBounds,
    Coefficients,
    PotentialPair,
    assemble_generator,
    check_admissible,
)
from dynbc.sampling import random_smooth_field


@dataclass(frozen=True, eq=False)
class TwinSetup:
    """Known ingredients of the inverse problem: grid, coefficients, window, step and ``Y0``."""

    grid: PolarGrid
    coeffs: Coefficients
    window: TimeWindow
    dt: float
    Y0: State

    def __post_init__(self):
        steps = self.window.steps(self.dt)
        object.__setattr__(self, "_steps", steps)
        self.Y0.dofs(self.grid)

    @property
    def n_t0(self) -> int:
        return self._steps["t0"]

    @property
    def n_theta(self) -> int:
        return self._steps["theta"]

    @property
    def n_t1(self) -> int:
        return self._steps["t1"]

    @property
    def time_weights(self) -> np.ndarray:
        """Trapezoid weights on the window nodes ``t0 .. t1``."""
        tw = np.full(self.n_t1 - self.n_t0 + 1, self.dt)
        tw[[0, -1]] *= 0.5
        return tw

    @property
    def omega_idx(self) -> np.ndarray:
        return np.flatnonzero(self.grid.omega_mask)


@dataclass(frozen=True, eq=False)
class Observations:
    """Measured state at ``theta`` and ``dy/dt`` on ``omega`` at the nodes ``t0 .. t1``.

    ``noise_norm`` is the misfit-metric norm of the added noise (0 for exact data).
    """

    setup: TwinSetup
    state_at_theta: State
    dtY_on_omega: np.ndarray
    noise_level: float = 0.0
    noise_norm: float = 0.0

    @property
    def times(self) -> np.ndarray:
        s = self.setup
        return s.dt * np.arange(s.n_t0, s.n_t1 + 1)


_REG_KINDS = ("L2", "gradient")


@dataclass
class InversionConfig:
    reg_beta: float = 0.0
    max_iter: int = 200
    grad_tol: float = 1e-10
    R: float = 2.0
    initial: PotentialPair | None = None
    reg_kind: str = "L2"

    def validate(self) -> None:
        if self.reg_beta < 0:
            raise PreconditionError("reg_beta must be nonnegative")
        if self.reg_kind not in _REG_KINDS:
            raise PreconditionError(f"unknown reg_kind {self.reg_kind!r}; expected one of {sorted(_REG_KINDS)}")
        if not self.R > 0:
            raise PreconditionError("box bound R must be positive")
        if self.max_iter < 0:
            raise PreconditionError("max_iter must be nonnegative")


# ----------------------------------------------------------------------
# forward map, tangent and adjoint
# ----------------------------------------------------------------------
class ForwardMap:
    """Implicit-Euler map from the lumped reaction ``r`` to the observed quantities."""

    def __init__(self, setup: TwinSetup):
        self.setup = setup
        g = setup.grid
        self.gen = assemble_generator(g, setup.coeffs)
        self.I = sp.identity(g.n_bulk, format="csr")
        self.H = h2_gram(g)

    def reaction(self, pq: PotentialPair) -> np.ndarray:
        return pq.reaction(self.setup.grid)

    def factor(self, r: np.ndarray) -> _Factorized:
        return _Factorized(self.I - self.setup.dt * (self.gen.gen0 + sp.diags(r)))

    def simulate(self, r: np.ndarray, lu: _Factorized | None = None) -> np.ndarray:
        """States at the nodes ``0 .. t1``."""
        s = self.setup
        lu = lu or self.factor(r)
        out = np.empty((s.n_t1 + 1, s.grid.n_bulk))
        out[0] = s.Y0.bulk
        for n in range(s.n_t1):
            out[n + 1] = lu.solve(out[n])
        return out

    def observe(self, traj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(Y(theta), backward-difference dy/dt on omega at t0 .. t1)``."""
        s = self.setup
        d = (traj[s.n_t0 : s.n_t1 + 1] - traj[s.n_t0 - 1 : s.n_t1]) / s.dt
        return traj[s.n_theta].copy(), d[:, s.omega_idx]

    def tangent(self, r: np.ndarray, dr: np.ndarray, traj=None, lu=None) -> tuple[np.ndarray, np.ndarray]:
        """Directional derivative of :meth:`observe` o :meth:`simulate` along ``dr``."""
        s = self.setup
        lu = lu or self.factor(r)
        traj = self.simulate(r, lu) if traj is None else traj
        du = np.zeros_like(traj)
        for n in range(s.n_t1):
            du[n + 1] = lu.solve(du[n] + s.dt * dr * traj[n + 1])
        return self.observe(du)

    def adjoint(self, r: np.ndarray, g_theta: np.ndarray, g_d: np.ndarray, traj=None, lu=None) -> np.ndarray:
        """Transpose of :meth:`tangent`: maps output weights to ``dr`` (Euclidean pairings)."""
        s = self.setup
        lu = lu or self.factor(r)
        traj = self.simulate(r, lu) if traj is None else traj
        n_bulk = s.grid.n_bulk
        # sensitivities of the outputs to each state u^n
        g = np.zeros((s.n_t1 + 1, n_bulk))
        g[s.n_theta] += g_theta
        gd = np.zeros((g_d.shape[0], n_bulk))
        gd[:, s.omega_idx] = g_d / s.dt
        g[s.n_t0 : s.n_t1 + 1] += gd
        g[s.n_t0 - 1 : s.n_t1] -= gd
        lam = np.zeros(n_bulk)
        grad = np.zeros(n_bulk)
        for n in range(s.n_t1, 0, -1):
            lam = lu.solve(g[n] + lam, transpose=True)
            grad += s.dt * lam * traj[n]
        return grad


def _reaction_jacobian_T(grid: PolarGrid, dr: np.ndarray) -> PotentialPair:
    """Transpose of ``(p, q) -> reaction``."""
    return PotentialPair(grid.w_bulk / grid.mass * dr, (grid.w_surf / grid.mass[grid.trace_map]) * dr[grid.trace_map])


def synthesize_observations(
    setup: TwinSetup,
    truth: PotentialPair,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    bounds: AdmissibleBounds | None = None,
    noise_kmax: float = 2.0,
) -> Observations:
    """Simulate exact data and optionally add noise of relative level ``noise``.

    The state at ``theta`` receives a smooth random Gaussian field with
    wavenumbers up to ``noise_kmax`` (the data are compared in H2, where
    white noise has unbounded norm); ``dy/dt`` on
    ``omega`` receives white Gaussian noise. Each realization is rescaled so
    its RMS is exactly ``noise`` times the RMS of the clean signal.
    """
    if bounds is not None:
        for obj in (truth, setup.Y0):
            rep = check_admissible(setup.grid, obj, bounds)
            if not rep:
                raise PreconditionError("inadmissible input: " + "; ".join(rep.violations))
    if noise < 0:
        raise PreconditionError("noise level must be nonnegative")
    fm = ForwardMap(setup)
    yth, d = fm.observe(fm.simulate(fm.reaction(truth)))
    noise_norm = 0.0
    if noise > 0:
        rng = rng or np.random.default_rng()
        g = setup.grid
        field_ = random_smooth_field(rng, n_modes=24, kmax=noise_kmax, wmax=0.0).on_grid(g)
        field_ -= field_.mean()
        n_th = noise * _rms(yth) / _rms(field_) * field_
        n_d = rng.normal(size=d.shape)
        n_d *= noise * _rms(d) / _rms(n_d) if _rms(d) > 0 else 0.0
        yth = yth + n_th
        d = d + n_d
        noise_norm = float(np.sqrt(n_th @ (fm.H @ n_th) + _omega_sq(setup, n_d)))
    return Observations(setup, State.from_bulk(setup.grid, yth), d, float(noise), noise_norm)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.asarray(x) ** 2)))


def _omega_sq(setup: TwinSetup, d: np.ndarray) -> float:
    w = setup.grid.w_bulk[setup.omega_idx]
    return float(np.sum(setup.time_weights[:, None] * w * d**2))


# ----------------------------------------------------------------------
# misfit
# ----------------------------------------------------------------------
def _regularizer(grid: PolarGrid, kind: str) -> tuple[sp.spmatrix, sp.spmatrix]:
    """Gram matrices of the penalty on ``p`` and on ``q``."""
    if kind == "L2":
        return sp.diags(grid.w_bulk), sp.diags(grid.w_surf)
    gx, gy = grid.grad_ops
    Wb, Ws = sp.diags(grid.w_bulk), sp.diags(grid.w_surf)
    Rp = gx.T @ Wb @ gx + gy.T @ Wb @ gy
    Rq = grid.surf_d1.T @ Ws @ grid.surf_d1
    return Rp.tocsr(), Rq.tocsr()


class MisfitFunctional:
    """``1/2 |Y(theta) - obs|_H2^2 + 1/2 |dy/dt - obs|_{L2(omega x (t0,t1))}^2 + beta/2 |pq - pq0|_R^2``.

    ``R`` is the L2 norm (``reg_kind="L2"``) or the gradient seminorm
    ``|grad p|_L2(Omega)^2 + |grad_Gamma q|_L2(Gamma)^2`` (``reg_kind="gradient"``),
    which leaves constants unpenalized.
    """

    def __init__(self, obs: Observations, cfg: InversionConfig, fmap: ForwardMap | None = None):
        cfg.validate()
        self.obs = obs
        self.cfg = cfg
        self.fm = fmap or ForwardMap(obs.setup)
        g = obs.setup.grid
        self.pq0 = cfg.initial or PotentialPair.zeros(g)
        self.wd = obs.setup.time_weights[:, None] * g.w_bulk[obs.setup.omega_idx]
        self.Rp, self.Rq = _regularizer(g, cfg.reg_kind)

    def data_terms(self, pq: PotentialPair):
        r = self.fm.reaction(pq)
        lu = self.fm.factor(r)
        traj = self.fm.simulate(r, lu)
        yth, d = self.fm.observe(traj)
        e_th = yth - self.obs.state_at_theta.bulk
        e_d = d - self.obs.dtY_on_omega
        return r, lu, traj, e_th, e_d

    def data_misfit(self, pq: PotentialPair) -> float:
        _, _, _, e_th, e_d = self.data_terms(pq)
        return 0.5 * float(e_th @ (self.fm.H @ e_th)) + 0.5 * float(np.sum(self.wd * e_d**2))

    def __call__(self, pq: PotentialPair) -> tuple[float, PotentialPair]:
        g = self.obs.setup.grid
        r, lu, traj, e_th, e_d = self.data_terms(pq)
        H_eth = self.fm.H @ e_th
        val = 0.5 * float(e_th @ H_eth) + 0.5 * float(np.sum(self.wd * e_d**2))
        dr = self.fm.adjoint(r, H_eth, self.wd * e_d, traj, lu)
        grad = _reaction_jacobian_T(g, dr)
        beta = self.cfg.reg_beta
        if beta > 0:
            dp, dq = pq.p - self.pq0.p, pq.q - self.pq0.q
            Rdp, Rdq = self.Rp @ dp, self.Rq @ dq
            val += 0.5 * beta * float(dp @ Rdp + dq @ Rdq)
            grad = grad + PotentialPair(beta * Rdp, beta * Rdq)
        return val, grad


def misfit_and_gradient(candidate: PotentialPair, obs: Observations, cfg: InversionConfig) -> tuple[float, PotentialPair]:
    """Misfit value and its exact discrete gradient with respect to the nodal values of ``(p, q)``."""
    return MisfitFunctional(obs, cfg)(candidate)


# ----------------------------------------------------------------------
# reconstruction
# ----------------------------------------------------------------------
class _Parametrization:
    """Free variables: ``p`` off the boundary ring and ``q``, scaled by the square roots of their L2 weights."""

    def __init__(self, grid: PolarGrid):
        self.grid = grid
        inner = np.flatnonzero(~grid.boundary_mask)
        self.inner = inner
        # the boundary ring copies the ring just inside
        src = grid.trace_map - grid.n_phi
        rows = np.concatenate([inner, grid.trace_map])
        cols = np.concatenate([np.arange(inner.size), np.searchsorted(inner, src)])
        self.P = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(grid.n_bulk, inner.size))
        wp = self.P.T @ grid.w_bulk
        self.scale = np.sqrt(np.concatenate([wp, grid.w_surf]))

    @property
    def n(self) -> int:
        return self.scale.size

    def to_pq(self, x: np.ndarray) -> PotentialPair:
        y = x / self.scale
        k = self.inner.size
        return PotentialPair(self.P @ y[:k], y[k:].copy())

    def from_pq(self, pq: PotentialPair) -> np.ndarray:
        return np.concatenate([pq.p[self.inner], pq.q]) * self.scale

    def grad_to_x(self, g: PotentialPair) -> np.ndarray:
        return np.concatenate([self.P.T @ g.p, g.q]) / self.scale


@dataclass
class ReconstructionResult:
    pq: PotentialPair
    history: list[tuple[int, float, float]]
    converged: bool
    stalled: bool
    message: str
    data_misfit: float = float("nan")
    extra: dict = field(default_factory=dict)


def reconstruct_potentials(
    obs: Observations,
    cfg: InversionConfig,
    fmap: ForwardMap | None = None,
    start: PotentialPair | None = None,
) -> ReconstructionResult:
    """Projected quasi-Newton (L-BFGS-B) minimization of the misfit over the box ``|p|, |q| <= R``.

    Starts from ``start`` (default: the initial guess of ``cfg``, which is
    also the Tikhonov anchor). The history records ``(iteration, misfit,
    projected-gradient norm)``. A line search that fails after 40 backtracks
    ends the run as a stall and returns the best iterate.
    """
    cfg.validate()
    grid = obs.setup.grid
    J = MisfitFunctional(obs, cfg, fmap)
    par = _Parametrization(grid)
    x0 = par.from_pq(start or cfg.initial or PotentialPair.zeros(grid))
    lo, hi = -cfg.R * par.scale, cfg.R * par.scale
    x0 = np.clip(x0, lo, hi)
    cache: dict = {}

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            val, g = J(par.to_pq(x))
            cache.clear()
            cache[key] = (val, par.grad_to_x(g))
        return cache[key]

    def pgnorm(x, gx):
        return float(np.linalg.norm(np.clip(x - gx, lo, hi) - x))

    history = []
    best = [np.inf, x0]

    def record(x):
        val, gx = fun(x)
        history.append((len(history), val, pgnorm(x, gx)))
        if val < best[0]:
            best[0], best[1] = val, x.copy()

    record(x0)
    if history[0][2] <= cfg.grad_tol or cfg.max_iter == 0:
        return ReconstructionResult(par.to_pq(x0), history, history[0][2] <= cfg.grad_tol, False, "initial point stationary", J.data_misfit(par.to_pq(x0)))
    res = so.minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=so.Bounds(lo, hi),
        callback=record,
        options={"maxiter": cfg.max_iter, "maxls": 40, "gtol": cfg.grad_tol, "ftol": 1e-15, "maxcor": 20},
    )
    if not np.all(np.isfinite(res.x)):
        raise NumericalError("reconstruction produced non-finite iterates")
    if res.fun < best[0]:
        best = [res.fun, res.x]
    msg = str(res.message)
    stalled = "ABNORMAL" in msg.upper()
    converged = history[-1][2] <= cfg.grad_tol or (res.success and not stalled)
    pq = par.to_pq(best[1])
    return ReconstructionResult(pq, history, converged, stalled, msg, J.data_misfit(pq))


def relative_error(grid: PolarGrid, est: PotentialPair, truth: PotentialPair) -> float:
    """Relative L2(Omega) x L2(Gamma) error."""
    return (est - truth).norm(grid) / truth.norm(grid)


def discrepancy_reconstruction(
    obs: Observations,
    betas,
    cfg: InversionConfig,
    tau: float = 1.1,
) -> tuple[ReconstructionResult, float, list[tuple[float, float]]]:
    """Tikhonov weight by the discrepancy principle.

    Sweeps ``betas`` from large to small, warm-starting each run, and keeps
    the first whose data residual ``sqrt(2 * data_misfit)`` is at most
    ``tau`` times the noise norm. Falls back to the smallest beta.
    """
    if obs.noise_norm <= 0:
        raise PreconditionError("discrepancy principle needs a positive noise norm")
    fmap = ForwardMap(obs.setup)
    trail = []
    result = None
    for beta in sorted(betas, reverse=True):
        run = replace(cfg, reg_beta=beta)
        result = reconstruct_potentials(obs, run, fmap, start=None if result is None else result.pq)
        resid = float(np.sqrt(2 * result.data_misfit))
        trail.append((float(beta), resid))
        if resid <= tau * obs.noise_norm:
            return result, float(beta), trail
    return result, float(min(betas)), trail


# ----------------------------------------------------------------------
# Lipschitz ratio harness
# ----------------------------------------------------------------------
@dataclass
class LipschitzSample:
    sample_id: int
    scale: float
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs


def difference_response(setup: TwinSetup, fmap: ForwardMap, base: PotentialPair, pert: PotentialPair, Y0_pert: State | None = None):
    """``Z = Y - Y~`` for ``(p, q) = base + pert`` against ``base``, by its own linear recursion.

    Returns ``(Z at theta, dz/dt on omega)``; the recursion avoids the
    cancellation of subtracting two nearby trajectories.
    """
    g = setup.grid
    r_t = fmap.reaction(base)
    r = fmap.reaction(base + pert)
    lu_t = fmap.factor(r_t)
    ytil = fmap.simulate(r_t, lu_t)
    lu = fmap.factor(r)
    z = np.zeros_like(ytil)
    if Y0_pert is not None:
        z[0] = Y0_pert.dofs(g)
    dr = r - r_t
    for n in range(setup.n_t1):
        z[n + 1] = lu.solve(z[n] + setup.dt * dr * ytil[n + 1])
    return fmap.observe(z)


def observation_norm(setup: TwinSetup, z_theta: np.ndarray, dz: np.ndarray) -> float:
    """``||Z(theta)||_H2 + ||dz/dt||_{L2(omega x (t0, t1))}``."""
    g = setup.grid
    return discrete_norm(g, State.from_bulk(g, z_theta), "H2") + float(np.sqrt(_omega_sq(setup, dz)))


def lipschitz_harness(
    setup: TwinSetup,
    bases,
    directions,
    scales,
) -> list[LipschitzSample]:
    """Ratios ``||(a, l)|| / (||Z(theta)||_H2 + ||dz/dt||_{L2(omega)})`` per sample and scale.

    ``bases`` and ``directions`` are matched sequences of potential pairs;
    each direction is normalized to unit L2 norm and scaled by every entry
    of ``scales``. Degenerate samples (zero perturbation or zero response)
    are skipped.
    """
    fmap = ForwardMap(setup)
    g = setup.grid
    out = []
    for k, (base, d) in enumerate(zip(bases, directions)):
        nd = d.norm(g)
        if nd == 0:
            continue
        for eps in scales:
            pert = d * (eps / nd)
            zt, dz = difference_response(setup, fmap, base, pert)
            rhs = observation_norm(setup, zt, dz)
            if rhs == 0:
                continue
            out.append(LipschitzSample(k, float(eps), pert.norm(g), rhs))
    return out
