"""
Time integration of the coupled bulk-surface system.

States are advanced on the shared degrees of freedom with the lumped mass
of :class:`~dynbc.grid.PolarGrid`: ``du/dt = G u + f`` where ``G`` is the
assembled generator and ``f`` the L2-projection of a (bulk, surface) source.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from dynbc.errors import NumericalError, PreconditionError
from dynbc.grid import PolarGrid, State
from dynbc.model import AdmissibleBounds, DiscreteGenerator

SCHEMES = ("implicit_euler", "crank_nicolson")
RESIDUAL_TOL = 1e-10
_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class TimeWindow:
    """Horizon ``T`` and observation window ``(t0, t1)`` with midpoint ``theta``."""

    T: float
    t0: float
    t1: float

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise PreconditionError("window requires t0 < t1")
        if not self.t0 > 0:
            raise PreconditionError("window requires t0 > 0")
        if not self.t1 <= self.T:
            raise PreconditionError("window requires t1 <= T")

    @property
    def theta(self) -> float:
        return 0.5 * (self.t0 + self.t1)

    @property
    def length(self) -> float:
        return self.t1 - self.t0

    def default_dt(self) -> float:
        return self.length / 128

    def steps(self, dt: float) -> dict[str, int]:
        """Step counts of the window nodes; rejects a ``dt`` that misses any of them."""
        if not dt > 0:
            raise PreconditionError("dt must be positive")
        marks = {"t0": self.t0, "theta": self.theta, "t1": self.t1, "T": self.T}
        out = {}
        for name, t in marks.items():
            k = t / dt
            if abs(k - round(k)) > _ALIGN_TOL * max(1.0, k):
                raise PreconditionError(f"dt={dt:g} does not align with {name}={t:g}")
            out[name] = int(round(k))
        return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniform-step trajectory on the shared degrees of freedom.

    Attributes
    ----------
    times : ndarray, shape (n_t,)
    values : ndarray, shape (n_t, n_bulk)
        Row ``k`` is the dof vector at ``times[k]``; surface values are
        ``values[:, grid.trace_map]``.
    scheme : str
    """

    grid: PolarGrid
    dt: float
    times: np.ndarray
    values: np.ndarray
    scheme: str

    def __len__(self) -> int:
        return len(self.times)

    def index(self, t: float) -> int:
        k = int(round(t / self.dt))
        if k < 0 or k >= len(self.times) or abs(self.times[k] - t) > _ALIGN_TOL * max(1.0, abs(t)):
            raise PreconditionError(f"time {t:g} is not a node of the trajectory")
        return k

    def state(self, k: int) -> State:
        return State.from_bulk(self.grid, self.values[k])

    def at(self, t: float) -> State:
        return self.state(self.index(t))

    @property
    def surf(self) -> np.ndarray:
        return self.values[:, self.grid.trace_map]

    def rows(self):
        """Yield CSV rows ``(t, node, rho, phi, y)`` over bulk nodes."""
        g = self.grid
        for t, u in zip(self.times, self.values):
            for node in range(g.n_bulk):
                yield (t, node, g.rho[node], g.phi[node], u[node])


def project_source(grid: PolarGrid, f: State) -> np.ndarray:
    """L2-projection of a (bulk, surface) source onto the shared dofs."""
    out = grid.w_bulk * f.bulk
    out[grid.trace_map] += grid.w_surf * f.surf
    return out / grid.mass


class _Factorized:
    def __init__(self, A: sp.spmatrix):
        self.A = A.tocsc()
        try:
            self.lu = spla.splu(self.A)
        except RuntimeError as exc:  # singular factor
            raise NumericalError(f"linear solver failed: {exc}") from exc

    def solve(self, b: np.ndarray, transpose: bool = False) -> np.ndarray:
        x = self.lu.solve(b, trans="T" if transpose else "N")
        A = self.A.T if transpose else self.A
        res = np.linalg.norm(A @ x - b)
        if not np.isfinite(res) or res > RESIDUAL_TOL * max(np.linalg.norm(b), np.finfo(float).tiny):
            raise NumericalError(f"linear solve residual {res:.3e} exceeds tolerance")
        return x


def _source_dofs(grid, source, times) -> np.ndarray | None:
    if source is None:
        return None
    if callable(source):
        return np.array([project_source(grid, source(t)) for t in times])
    src = list(source)
    if len(src) != len(times):
        raise PreconditionError("source sequence must provide one State per time node")
    return np.array([project_source(grid, s) if isinstance(s, State) else np.asarray(s, float) for s in src])


def solve_forward(
    gen: DiscreteGenerator,
    Y0: State,
    window: TimeWindow,
    dt: float | None = None,
    scheme: str = "implicit_euler",
    source: Callable[[float], State] | Sequence[State] | None = None,
    t_end: float | None = None,
    with_potential: bool = True,
) -> Trajectory:
    """Integrate ``dY/dt = A Y + F`` from ``Y0`` over ``[0, T]``.

    Parameters
    ----------
    gen : DiscreteGenerator
    Y0 : State
        Trace-compatible initial state.
    window : TimeWindow
    dt : float, optional
        Step; defaults to ``(t1 - t0) / 128``. Must land on ``t0``,
        ``theta``, ``t1`` and ``T``.
    scheme : {"implicit_euler", "crank_nicolson"}
    source : callable or sequence, optional
        ``F(t)`` as a :class:`State` (bulk and surface parts), or one State
        (or projected dof vector) per time node.
    t_end : float, optional
        Stop early at this aligned node (e.g. ``t1``).
    with_potential : bool
        Drop ``P`` when false (the Markov generator ``A0``).
    """
    if scheme not in SCHEMES:
        raise PreconditionError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    grid = gen.grid
    u = Y0.dofs(grid).astype(float).copy()
    dt = window.default_dt() if dt is None else float(dt)
    n_steps = window.steps(dt)["T"]
    if t_end is not None:
        n_steps = int(round(t_end / dt))
        if abs(n_steps * dt - t_end) > _ALIGN_TOL * max(1.0, t_end) or n_steps > window.steps(dt)["T"]:
            raise PreconditionError(f"t_end={t_end:g} is not an aligned node within [0, T]")
    times = dt * np.arange(n_steps + 1)
    G = gen.matrix if with_potential else gen.gen0
    I = sp.identity(grid.n_bulk, format="csr")
    F = _source_dofs(grid, source, times)

    out = np.empty((n_steps + 1, grid.n_bulk))
    out[0] = u
    if scheme == "implicit_euler":
        lhs = _Factorized(I - dt * G)
        for n in range(n_steps):
            rhs = u if F is None else u + dt * F[n + 1]
            u = lhs.solve(rhs)
            out[n + 1] = u
    else:
        lhs = _Factorized(I - 0.5 * dt * G)
        rhs_op = (I + 0.5 * dt * G).tocsr()
        for n in range(n_steps):
            rhs = rhs_op @ u
            if F is not None:
                rhs = rhs + 0.5 * dt * (F[n] + F[n + 1])
            u = lhs.solve(rhs)
            out[n + 1] = u
    if not np.all(np.isfinite(out)):
        raise NumericalError("forward solve produced non-finite values")
    return Trajectory(grid, dt, times, out, scheme)


def trotter_solve(gen: DiscreteGenerator, Y0: State, t: float, n: int) -> State:
    """``[S0(t/n) o exp((t/n) P)]^n Y0`` with ``S0`` one implicit-Euler step of ``A0``."""
    if int(n) != n or n < 1:
        raise PreconditionError("trotter_solve needs n >= 1 substeps")
    grid = gen.grid
    u = Y0.dofs(grid).astype(float).copy()
    tau = t / n
    lhs = _Factorized(sp.identity(grid.n_bulk, format="csr") - tau * gen.gen0)
    decay = np.exp(tau * gen.pot)
    for _ in range(int(n)):
        u = lhs.solve(decay * u)
    return State.from_bulk(grid, u)


def trotter_trajectory(gen: DiscreteGenerator, Y0: State, window: TimeWindow, dt: float | None = None) -> Trajectory:
    """Trajectory of the Trotter stepper with one substep per time node."""
    grid = gen.grid
    dt = window.default_dt() if dt is None else float(dt)
    n_steps = window.steps(dt)["T"]
    u = Y0.dofs(grid).astype(float).copy()
    lhs = _Factorized(sp.identity(grid.n_bulk, format="csr") - dt * gen.gen0)
    decay = np.exp(dt * gen.pot)
    out = np.empty((n_steps + 1, grid.n_bulk))
    out[0] = u
    for k in range(n_steps):
        u = lhs.solve(decay * u)
        out[k + 1] = u
    return Trajectory(grid, dt, dt * np.arange(n_steps + 1), out, "trotter")


def exact_solve(gen: DiscreteGenerator, Y0: State, t: float) -> State:
    """``exp(t A) Y0`` for the semi-discrete system (reference for splitting errors)."""
    u = spla.expm_multiply(t * gen.matrix.tocsc(), Y0.dofs(gen.grid))
    return State.from_bulk(gen.grid, u)


@dataclass
class PositivityReport:
    """Lower bound ``min y e^{Rt}`` against ``r`` and ratio ``max|y| / (e^{RT} ||Y0||_inf)``."""

    lower_min: float
    upper_ratio: float
    r: float
    tol: float

    @property
    def lower_ok(self) -> bool:
        return self.lower_min >= self.r - self.tol

    @property
    def upper_ok(self) -> bool:
        return self.upper_ratio <= 1.0 + self.tol

    @property
    def ok(self) -> bool:
        return self.lower_ok and self.upper_ok


def positivity_bound_report(traj: Trajectory, bounds: AdmissibleBounds, tol: float = 1e-6) -> PositivityReport:
    """Check the exponential lower bound and the ``e^{RT}`` bound along a trajectory."""
    R = bounds.R
    t = traj.times[:, None]
    lower = float(np.min(traj.values * np.exp(R * t)))
    T = traj.times[-1]
    y0 = float(np.max(np.abs(traj.values[0])))
    upper = float(np.max(np.abs(traj.values)) / (np.exp(R * T) * y0)) if y0 > 0 else float("inf")
    return PositivityReport(lower, upper, bounds.r, tol)
