"""Random smooth fields, admissible initial data and admissible potentials."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynbc.grid import PolarGrid, State, w2inf_norm
from dynbc.model import AdmissibleBounds, PotentialPair


@dataclass(frozen=True)
class PlaneWaveField:
    """``sum_j c_j cos(k_j . x + w_j t + phase_j)``, smooth in space and time."""

    amp: np.ndarray
    k: np.ndarray
    w: np.ndarray
    phase: np.ndarray

    def __call__(self, t: float, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        arg = np.multiply.outer(x1, self.k[:, 0]) + np.multiply.outer(x2, self.k[:, 1]) + self.w * t + self.phase
        return np.cos(arg) @ self.amp

    def on_grid(self, grid: PolarGrid, t: float = 0.0) -> np.ndarray:
        return self(t, grid.x1, grid.x2)


def random_smooth_field(
    rng: np.random.Generator, n_modes: int = 6, kmax: float = 3.0, wmax: float = 3.0
) -> PlaneWaveField:
    """Random superposition of low-frequency plane waves with unit total amplitude."""
    amp = rng.normal(size=n_modes)
    amp /= np.sum(np.abs(amp))
    k = rng.uniform(-kmax, kmax, size=(n_modes, 2))
    w = rng.uniform(-wmax, wmax, size=n_modes)
    phase = rng.uniform(0, 2 * np.pi, size=n_modes)
    return PlaneWaveField(amp, k, w, phase)


def _unit_sup(grid: PolarGrid, rng: np.random.Generator, kmax: float) -> np.ndarray:
    g = random_smooth_field(rng, kmax=kmax).on_grid(grid)
    return g / np.max(np.abs(g))


def random_initial(grid: PolarGrid, rng: np.random.Generator, bounds: AdmissibleBounds, kmax: float = 2.0) -> State:
    """Random trace-compatible ``Y0`` with ``Y0 >= r`` and discrete ``W^{2,inf}`` norm at most ``R``."""
    r, R = bounds.r, bounds.R
    g = random_smooth_field(rng, kmax=kmax).on_grid(grid)
    g /= w2inf_norm(grid, State.from_bulk(grid, g))
    c0 = rng.uniform(r, R)
    a = rng.uniform(0.2, 1.0) * min(c0 - r, R - c0)
    return State.from_bulk(grid, c0 + a * g)


def random_potentials(
    grid: PolarGrid, rng: np.random.Generator, R: float, fill: float = 0.9, kmax: float = 2.0
) -> PotentialPair:
    """Random smooth ``(p, q)`` with ``|p|, |q| <= fill * R``."""

    def one(n_bulk: bool):
        c = rng.uniform(-0.5, 0.5) * fill * R
        a = rng.uniform(0.1, 1.0) * (fill * R - abs(c))
        g = _unit_sup(grid, rng, kmax)
        return c + a * (g if n_bulk else g[grid.trace_map] / max(np.max(np.abs(g[grid.trace_map])), 1e-300))

    return PotentialPair(one(True), one(False))
