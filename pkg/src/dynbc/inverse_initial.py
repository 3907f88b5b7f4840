"""
Initial-data diagnostics: the splitting ``V = U + W`` of ``V = dZ/dt``,
logarithmic convexity of the homogeneous part and the logarithmic stability
harness for ``Y0``.

Everything is stated for the implicit-Euler trajectories of
:mod:`dynbc.forward`. With ``Z = Y - Y~``, ``a = p - p~`` and ``l = q - q~``
the scheme gives ``V^n = A Z^n + r_a Y~^n`` for the backward difference
``V^n = (Z^n - Z^{n-1}) / dt`` (``r_a`` is the lumped reaction of
``(a, l)``). Taking the same formula at ``n = 0`` defines ``V(0)``, and then
``V`` solves the scheme with source ``r_a dY~/dt``. Hence ``U`` (homogeneous,
``U(0) = V(0)``) and ``W`` (forced, ``W(0) = 0``) add up to ``V`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from dynbc.errors import PreconditionError
from dynbc.forward import TimeWindow, Trajectory, solve_forward
from dynbc.grid import PolarGrid, State, discrete_norm, w2inf_norm
from dynbc.model import AdmissibleBounds, Coefficients, DiscreteGenerator, PotentialPair, assemble_generator
from dynbc.sampling import random_initial, random_potentials


def l2_norms(grid: PolarGrid, values: np.ndarray) -> np.ndarray:
    """L2(Omega) x L2(Gamma) norm of each row of a dof array."""
    return np.sqrt(np.einsum("ij,j,ij->i", values, grid.mass, values))


@dataclass(frozen=True, eq=False)
class SplitUW:
    times: np.ndarray
    V: np.ndarray
    U: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    a: PotentialPair

    def superposition_defect(self, grid: PolarGrid) -> float:
        """``max_t ||V - U - W|| / max_t ||V||``."""
        top = np.max(l2_norms(grid, self.V))
        return float(np.max(l2_norms(grid, self.V - self.U - self.W)) / top) if top > 0 else 0.0


def split_UW(
    grid: PolarGrid,
    coeffs: Coefficients,
    window: TimeWindow,
    dt: float,
    pq: PotentialPair,
    pq_tilde: PotentialPair,
    Y0: State,
    Y0_tilde: State,
    gen0: DiscreteGenerator | None = None,
) -> SplitUW:
    """``V = dZ/dt`` and its splitting into ``U`` (free) and ``W`` (forced) on ``[0, theta]``."""
    gen0 = gen0 or assemble_generator(grid, coeffs)
    if gen0.grid is not grid:
        raise PreconditionError("generator and grid do not match")
    gen = gen0.with_potentials(pq)
    gen_t = gen0.with_potentials(pq_tilde)
    theta = window.theta
    Y = solve_forward(gen, Y0, window, dt, t_end=theta)
    Yt = solve_forward(gen_t, Y0_tilde, window, dt, t_end=theta)
    a = pq - pq_tilde
    r_a = a.reaction(grid)
    Z = Y.values - Yt.values
    V = np.empty_like(Z)
    V[1:] = (Z[1:] - Z[:-1]) / dt
    V[0] = gen.matrix @ Z[0] + r_a * Yt.values[0]
    src = np.zeros_like(Z)
    src[1:] = r_a * (Yt.values[1:] - Yt.values[:-1]) / dt
    W = solve_forward(gen, State.constant(grid, 0.0), window, dt, source=list(src), t_end=theta).values
    U = solve_forward(gen, State.from_bulk(grid, V[0]), window, dt, t_end=theta).values
    return SplitUW(Y.times, V, U, W, Z, a)


@dataclass
class LogConvexityReport:
    """``K_hat`` against ``||U(t)|| <= K M^{1 - t/theta} ||U(theta)||^{t/theta}`` on ``(0, theta]``."""

    M: float
    K_hat: float
    times: np.ndarray
    norms: np.ndarray
    bound: np.ndarray
    min_second_difference: float
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def margins(self) -> np.ndarray:
        return self.K_hat * self.bound - self.norms


def logconvexity_check(grid: PolarGrid, times: np.ndarray, U: np.ndarray, theta: float, M: float | None = None) -> LogConvexityReport:
    """Smallest ``K`` for the interpolation bound on the nodes ``dt .. theta``.

    Also returns the smallest second difference of ``log ||U(t)||^2`` on
    the grid (nonnegative for log-convex trajectories).
    """
    times = np.asarray(times, dtype=float)
    k_th = int(np.argmin(np.abs(times - theta)))
    if abs(times[k_th] - theta) > 1e-9:
        raise PreconditionError("theta must be a node of the time grid")
    norms = l2_norms(grid, U[: k_th + 1])
    M = float(norms[0]) if M is None else float(M)
    if norms[0] > M * (1 + 1e-12):
        raise PreconditionError("M must bound ||U(0)||")
    t = times[1 : k_th + 1]
    nt = norms[1:]
    if norms[k_th] == 0 or M == 0:
        return LogConvexityReport(M, float("nan"), t, nt, np.full_like(nt, np.nan), float("nan"), True)
    bound = M ** (1 - t / theta) * norms[k_th] ** (t / theta)
    logs = 2 * np.log(norms)
    d2 = logs[2:] - 2 * logs[1:-1] + logs[:-2]
    return LogConvexityReport(M, float(np.max(nt / bound)), t, nt, bound, float(d2.min()) if d2.size else 0.0)


def ground_mode(gen: DiscreteGenerator, with_potential: bool = True) -> State:
    """Eigenvector of the largest eigenvalue of a self-adjoint generator, unit L2 norm."""
    grid = gen.grid
    G = gen.matrix if with_potential else gen.gen0
    sq = np.sqrt(grid.mass)
    S = sp.diags(sq) @ G @ sp.diags(1.0 / sq)
    S = 0.5 * (S + S.T)
    top = float(np.max(np.abs(S.diagonal()))) * 4 + 1.0
    _, vec = spla.eigsh(S.tocsc(), k=1, sigma=top, which="LM", v0=sq)
    u = vec[:, 0] / sq
    u /= np.sqrt(np.dot(grid.mass, u**2))
    if np.sum(grid.mass * u) < 0:
        u = -u
    return State.from_bulk(grid, u)


def homogeneous_trajectory(gen: DiscreteGenerator, U0: State, window: TimeWindow, dt: float) -> Trajectory:
    return solve_forward(gen, U0, window, dt, t_end=window.theta)


# ----------------------------------------------------------------------
# logarithmic stability of initial data
# ----------------------------------------------------------------------
@dataclass
class StabilitySample:
    sample_id: int
    E: float
    gap: float
    label: str = ""


def observation_quantity(
    grid: PolarGrid, window: TimeWindow, dt: float, Z: np.ndarray
) -> float:
    """``||Z(theta)||_H2 + ||dz/dt||_{L2(omega x (t0, t1))}`` from a difference trajectory on ``0 .. t1``."""
    steps = window.steps(dt)
    n0, nth, n1 = steps["t0"], steps["theta"], steps["t1"]
    d = (Z[n0 : n1 + 1] - Z[n0 - 1 : n1]) / dt
    tw = np.full(n1 - n0 + 1, dt)
    tw[[0, -1]] *= 0.5
    om = grid.omega_mask
    dz = float(np.sqrt(np.sum(tw[:, None] * grid.w_bulk[om] * d[:, om] ** 2)))
    return discrete_norm(grid, State.from_bulk(grid, Z[nth]), "H2") + dz


def stability_sample(
    gen0: DiscreteGenerator,
    window: TimeWindow,
    dt: float,
    pq: PotentialPair,
    pq_tilde: PotentialPair,
    Y0: State,
    Y0_tilde: State,
    sample_id: int = 0,
    label: str = "",
) -> StabilitySample:
    """``(E', ||Y0 - Y0~||)`` with ``Z`` from its own linear recursion (no cancellation)."""
    grid = gen0.grid
    gen = gen0.with_potentials(pq)
    gen_t = gen0.with_potentials(pq_tilde)
    Yt = solve_forward(gen_t, Y0_tilde, window, dt, t_end=window.t1)
    r_a = (pq - pq_tilde).reaction(grid)
    src = [r_a * y for y in Yt.values]
    Z0 = State.from_bulk(grid, Y0.dofs(grid) - Y0_tilde.dofs(grid))
    Z = solve_forward(gen, Z0, window, dt, source=src, t_end=window.t1).values
    gap = float(l2_norms(grid, Z[:1])[0])
    return StabilitySample(sample_id, observation_quantity(grid, window, dt, Z), gap, label)


@dataclass
class LogBoundFit:
    C: float
    C1: float
    retained: list[StabilitySample]
    excluded: list[StabilitySample]

    def bound(self, E: float) -> float:
        return -self.C / np.log(self.C1 * E)

    def margins(self) -> np.ndarray:
        return np.array([self.bound(s.E) - s.gap for s in self.retained])


def fit_log_bound(samples: list[StabilitySample], C1: float | None = None) -> LogBoundFit:
    """Smallest ``C`` such that ``gap <= -C / log(C1 E')`` on every retained sample.

    Degenerate samples (``E' = 0``) are excluded, as are samples with
    ``C1 E' >= 1``. By default ``C1 = 1 / (e max E')``, so every
    nondegenerate sample is retained with ``log(C1 E') <= -1``.
    """
    good = [s for s in samples if s.E > 0]
    if not good:
        raise PreconditionError("no nondegenerate samples to fit")
    if C1 is None:
        C1 = 1.0 / (np.e * max(s.E for s in good))
    retained = [s for s in good if C1 * s.E < 1]
    excluded = [s for s in samples if s not in retained]
    C = max((s.gap * -np.log(C1 * s.E) for s in retained), default=0.0)
    return LogBoundFit(float(C), float(C1), retained, excluded)


def frequency_mode(grid: PolarGrid, k: int) -> np.ndarray:
    """``rho^k cos(k phi)`` scaled to unit discrete ``W^{2,inf}`` norm."""
    u = grid.rho**k * np.cos(k * grid.phi)
    return u / w2inf_norm(grid, State.from_bulk(grid, u))


def local_exponents(samples: list[StabilitySample]) -> np.ndarray:
    """Slopes ``d log(gap) / d log(E')`` between consecutive sweep points."""
    E = np.log([s.E for s in samples])
    G = np.log([s.gap for s in samples])
    return np.diff(G) / np.diff(E)


@dataclass
class InitialStabilityRun:
    samples: list[StabilitySample]
    fit: LogBoundFit
    sweep: list[StabilitySample]

    @property
    def exponents(self) -> np.ndarray:
        return local_exponents(self.sweep)


def initial_stability_harness(
    gen0: DiscreteGenerator,
    window: TimeWindow,
    dt: float,
    rng: np.random.Generator,
    bounds: AdmissibleBounds,
    n_samples: int,
    max_mode: int = 8,
) -> InitialStabilityRun:
    """``(E', ||Y0 - Y0~||)`` over random admissible pairs and a frequency sweep, then the log-bound fit.

    The sweep perturbs a constant ``Y0~`` by ``rho^k cos(k phi)`` at unit
    ``W^{2,inf}`` norm for ``k = 1 .. max_mode``, keeping both data in the
    admissible set; its gaps decay slower than any power of ``E'``. Random
    samples draw both initial data and both potential pairs independently.
    """
    grid = gen0.grid
    r, R = bounds.r, bounds.R
    samples = []
    for k in range(n_samples):
        Y0, Y0t = random_initial(grid, rng, bounds), random_initial(grid, rng, bounds)
        pq, pqt = random_potentials(grid, rng, R), random_potentials(grid, rng, R)
        samples.append(stability_sample(gen0, window, dt, pq, pqt, Y0, Y0t, k, "random"))
    c = 0.5 * (r + R)
    amp = 0.5 * min(c - r, R - c)
    base = State.constant(grid, c)
    pq = random_potentials(grid, rng, R)
    sweep = []
    for k in range(1, max_mode + 1):
        Y0 = State.from_bulk(grid, c + amp * frequency_mode(grid, k))
        sweep.append(stability_sample(gen0, window, dt, pq, pq, Y0, base, n_samples + k - 1, f"mode{k}"))
    every = samples + sweep
    return InitialStabilityRun(every, fit_log_bound(every), sweep)
