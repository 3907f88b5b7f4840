"""
Polar grid on the unit disk and its boundary circle.

Node layout
-----------
Bulk node 0 is the polar origin. Ring ``i`` (``1 <= i <= n_r``) sits at
radius ``i / n_r`` and carries ``n_phi`` equally spaced nodes; node
``(i, j)`` has flat index ``1 + (i - 1) * n_phi + j``. The outermost ring
is the boundary circle, so a trace-compatible state is fully described by
its bulk vector and the surface field is ``bulk[trace_map]``.

Quadrature uses dual (control-volume) cells: the origin owns the disk of
radius ``h/2``, interior rings own annular sectors of width ``h`` and the
boundary ring owns the half sector ``[1 - h/2, 1]``. The weights integrate
constants exactly (``sum(w_bulk) == pi``) and are second order for smooth
integrands. The circle uses the uniform rule ``2 pi / n_phi``.

Angular differences are centered and second order, with denominators
``2 sin(dphi)`` and ``2 (1 - cos(dphi))`` in place of ``2 dphi`` and
``dphi**2`` so that ``cos(phi)`` and ``sin(phi)`` are differentiated
exactly; linear functions then have exact discrete gradients and Laplacians.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from dynbc.errors import PreconditionError

NORM_KINDS = ("L2", "Linf", "H1", "H2")


@dataclass(frozen=True, eq=False)
class PolarGrid:
    """Discrete unit disk, boundary circle, quadrature and derivative stencils.

    Attributes
    ----------
    n_r, n_phi : int
        Ring count (excluding the origin) and nodes per ring.
    omega_radius : float
        Radius of the observation disk ``omega = {rho < omega_radius}``.
    radii : ndarray, shape (n_r,)
        Ring radii ``i / n_r``.
    angles : ndarray, shape (n_phi,)
        Ring angles ``2 pi j / n_phi``.
    w_bulk : ndarray, shape (n_bulk,)
        Area weights of the dual cells.
    w_surf : ndarray, shape (n_phi,)
        Arc-length weights on the boundary circle.
    trace_map : ndarray of int, shape (n_phi,)
        Bulk indices of the boundary ring, ordered by angle.
    omega_mask : ndarray of bool, shape (n_bulk,)
        Membership of bulk nodes in the observation disk.
    origin_stencil : ndarray of int, shape (n_phi,)
        First-ring nodes averaged by the origin stencils.
    """

    n_r: int
    n_phi: int
    omega_radius: float
    radii: np.ndarray
    angles: np.ndarray
    w_bulk: np.ndarray
    w_surf: np.ndarray
    trace_map: np.ndarray
    omega_mask: np.ndarray
    origin_stencil: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.n_r

    @property
    def dphi(self) -> float:
        return 2.0 * np.pi / self.n_phi

    @property
    def d1_denom(self) -> float:
        """Denominator of the centered angular difference (exact on the first Fourier mode)."""
        return 2.0 * np.sin(self.dphi)

    @property
    def d2_denom(self) -> float:
        """Denominator of the compact angular second difference (exact on the first Fourier mode)."""
        return 2.0 * (1.0 - np.cos(self.dphi))

    @property
    def n_bulk(self) -> int:
        return 1 + self.n_r * self.n_phi

    @property
    def n_surf(self) -> int:
        return self.n_phi

    @cached_property
    def rho(self) -> np.ndarray:
        return np.concatenate([[0.0], np.repeat(self.radii, self.n_phi)])

    @cached_property
    def phi(self) -> np.ndarray:
        return np.concatenate([[0.0], np.tile(self.angles, self.n_r)])

    @cached_property
    def x1(self) -> np.ndarray:
        return self.rho * np.cos(self.phi)

    @cached_property
    def x2(self) -> np.ndarray:
        return self.rho * np.sin(self.phi)

    @cached_property
    def mass(self) -> np.ndarray:
        """Lumped mass of the shared degrees of freedom (bulk plus surface weight)."""
        m = self.w_bulk.copy()
        m[self.trace_map] += self.w_surf
        return m

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_bulk, dtype=bool)
        mask[self.trace_map] = True
        return mask

    def index(self, i, j):
        """Flat bulk index of ring ``i`` (0 = origin), angle ``j`` (periodic)."""
        i = np.asarray(i)
        j = np.asarray(j) % self.n_phi
        return np.where(i == 0, 0, 1 + (i - 1) * self.n_phi + j)

    def rings(self, u: np.ndarray) -> np.ndarray:
        """View of a bulk field as an ``(n_r, n_phi)`` array (origin dropped)."""
        return np.asarray(u)[1:].reshape(self.n_r, self.n_phi)

    def evaluate(self, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        """Evaluate ``f(x1, x2)`` at every bulk node."""
        return np.broadcast_to(np.asarray(f(self.x1, self.x2), dtype=float), (self.n_bulk,)).copy()

    # ------------------------------------------------------------------
    # sparse derivative operators (bulk: Cartesian components; surface:
    # arc-length derivatives on the unit circle)
    # ------------------------------------------------------------------
    @cached_property
    def _polar_ops(self) -> dict[str, sp.csr_matrix]:
        return _build_polar_operators(self)

    @cached_property
    def grad_ops(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Sparse ``(d/dx1, d/dx2)`` acting on bulk fields."""
        ops = self._polar_ops
        return ops["gx"], ops["gy"]

    @cached_property
    def hess_ops(self) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
        """Sparse ``(d11, d12, d22)`` second derivatives acting on bulk fields."""
        ops = self._polar_ops
        return ops["hxx"], ops["hxy"], ops["hyy"]

    @cached_property
    def radial_op(self) -> sp.csr_matrix:
        """Sparse ``d/drho`` (second order; one-sided on the boundary ring)."""
        return self._polar_ops["dr"]

    @cached_property
    def surf_d1(self) -> sp.csr_matrix:
        """Centered periodic arc-length derivative on the circle."""
        return _periodic_first(self.n_phi, self.d1_denom)

    @cached_property
    def surf_d2(self) -> sp.csr_matrix:
        """Compact periodic second arc-length derivative on the circle."""
        return _periodic_second(self.n_phi, self.d2_denom)


@dataclass(frozen=True, eq=False)
class State:
    """Bulk field paired with a surface field.

    The pair is trace compatible when ``bulk[grid.trace_map] == surf``
    exactly; solvers only produce compatible states.
    """

    bulk: np.ndarray
    surf: np.ndarray

    @classmethod
    def from_bulk(cls, grid: PolarGrid, bulk) -> "State":
        bulk = np.asarray(bulk, dtype=float).reshape(grid.n_bulk).copy()
        return cls(bulk, bulk[grid.trace_map].copy())

    @classmethod
    def from_function(cls, grid: PolarGrid, f) -> "State":
        return cls.from_bulk(grid, grid.evaluate(f))

    @classmethod
    def constant(cls, grid: PolarGrid, value: float) -> "State":
        return cls(np.full(grid.n_bulk, float(value)), np.full(grid.n_surf, float(value)))

    def is_compatible(self, grid: PolarGrid) -> bool:
        return (
            self.bulk.shape == (grid.n_bulk,)
            and self.surf.shape == (grid.n_surf,)
            and bool(np.array_equal(self.bulk[grid.trace_map], self.surf))
        )

    def dofs(self, grid: PolarGrid) -> np.ndarray:
        """Shared degree-of-freedom vector; rejects incompatible pairs."""
        if not self.is_compatible(grid):
            raise PreconditionError("state is not trace compatible: bulk trace differs from surface field")
        return self.bulk

    def __add__(self, other: "State") -> "State":
        return State(self.bulk + other.bulk, self.surf + other.surf)

    def __sub__(self, other: "State") -> "State":
        return State(self.bulk - other.bulk, self.surf - other.surf)

    def __mul__(self, c: float) -> "State":
        return State(c * self.bulk, c * self.surf)

    __rmul__ = __mul__


def build_grid(n_r: int, n_phi: int, omega_radius: float) -> PolarGrid:
    """Build the polar grid of the unit disk with observation disk ``omega``.

    Parameters
    ----------
    n_r : int
        Number of rings, at least 4.
    n_phi : int
        Nodes per ring, even and at least 8.
    omega_radius : float
        Radius of ``omega``; must satisfy ``0 < omega_radius < 1 - 2/n_r`` so
        that ``omega`` stays away from the two outermost rings.
    """
    if int(n_r) != n_r or n_r < 4:
        raise PreconditionError(f"n_r must be an integer >= 4, got {n_r}")
    if int(n_phi) != n_phi:
        raise PreconditionError(f"n_phi must be an integer, got {n_phi}")
    if n_phi % 2:
        raise PreconditionError(f"odd angular count n_phi={n_phi}: centered periodic stencils need an even count")
    if n_phi < 8:
        raise PreconditionError(f"n_phi must be at least 8, got {n_phi}")
    n_r, n_phi = int(n_r), int(n_phi)
    if not 0.0 < omega_radius < 1.0 - 2.0 / n_r:
        raise PreconditionError(
            f"omega_radius={omega_radius} must lie in (0, {1.0 - 2.0 / n_r:g}); omega must not touch the boundary ring"
        )

    h = 1.0 / n_r
    dphi = 2.0 * np.pi / n_phi
    radii = np.arange(1, n_r + 1) * h
    angles = np.arange(n_phi) * dphi

    ring_w = radii * h * dphi
    ring_w[-1] = dphi * (h / 2.0 - h * h / 8.0)
    w_bulk = np.concatenate([[np.pi * h * h / 4.0], np.repeat(ring_w, n_phi)])
    w_surf = np.full(n_phi, dphi)

    trace_map = 1 + (n_r - 1) * n_phi + np.arange(n_phi)
    rho = np.concatenate([[0.0], np.repeat(radii, n_phi)])
    omega_mask = rho < omega_radius
    origin_stencil = 1 + np.arange(n_phi)

    return PolarGrid(
        n_r=n_r,
        n_phi=n_phi,
        omega_radius=float(omega_radius),
        radii=radii,
        angles=angles,
        w_bulk=w_bulk,
        w_surf=w_surf,
        trace_map=trace_map,
        omega_mask=omega_mask,
        origin_stencil=origin_stencil,
    )


def _periodic_first(n: int, denom: float) -> sp.csr_matrix:
    j = np.arange(n)
    rows = np.concatenate([j, j])
    cols = np.concatenate([(j + 1) % n, (j - 1) % n])
    vals = np.concatenate([np.full(n, 1.0 / denom), np.full(n, -1.0 / denom)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _periodic_second(n: int, denom: float) -> sp.csr_matrix:
    j = np.arange(n)
    rows = np.concatenate([j, j, j])
    cols = np.concatenate([(j + 1) % n, j, (j - 1) % n])
    vals = np.concatenate([np.ones(n), np.full(n, -2.0), np.ones(n)]) / denom
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        self.rows.append(rows.ravel())
        self.cols.append(cols.ravel())
        self.vals.append(vals.ravel())

    def tocsr(self, shape) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix(shape)
        return sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))), shape=shape
        )


def _build_polar_operators(grid: PolarGrid) -> dict[str, sp.csr_matrix]:
    n, m = grid.n_r, grid.n_phi
    h = grid.h
    N = grid.n_bulk
    ii, jj = np.meshgrid(np.arange(1, n + 1), np.arange(m), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    node = grid.index(ii, jj)
    interior = ii < n
    bnd = ~interior

    # d/drho
    dr = _Triplets()
    ni, nj, nn = ii[interior], jj[interior], node[interior]
    dr.add(nn, grid.index(ni + 1, nj), 0.5 / h)
    dr.add(nn, grid.index(ni - 1, nj), -0.5 / h)
    bi, bj, bn = ii[bnd], jj[bnd], node[bnd]
    dr.add(bn, bn, 1.5 / h)
    dr.add(bn, grid.index(bi - 1, bj), -2.0 / h)
    dr.add(bn, grid.index(bi - 2, bj), 0.5 / h)
    Dr = dr.tocsr((N, N))

    # d2/drho2
    drr = _Triplets()
    drr.add(nn, grid.index(ni + 1, nj), 1.0 / h**2)
    drr.add(nn, nn, -2.0 / h**2)
    drr.add(nn, grid.index(ni - 1, nj), 1.0 / h**2)
    drr.add(bn, bn, 2.0 / h**2)
    drr.add(bn, grid.index(bi - 1, bj), -5.0 / h**2)
    drr.add(bn, grid.index(bi - 2, bj), 4.0 / h**2)
    drr.add(bn, grid.index(bi - 3, bj), -1.0 / h**2)
    Drr = drr.tocsr((N, N))

    # d/dphi, d2/dphi2 (origin rows vanish: the origin value does not depend on phi)
    dp = _Triplets()
    dp.add(node, grid.index(ii, jj + 1), 1.0 / grid.d1_denom)
    dp.add(node, grid.index(ii, jj - 1), -1.0 / grid.d1_denom)
    Dp = dp.tocsr((N, N))
    dpp = _Triplets()
    dpp.add(node, grid.index(ii, jj + 1), 1.0 / grid.d2_denom)
    dpp.add(node, node, -2.0 / grid.d2_denom)
    dpp.add(node, grid.index(ii, jj - 1), 1.0 / grid.d2_denom)
    Dpp = dpp.tocsr((N, N))
    Drp = (Dr @ Dp).tocsr()

    inv_r = np.zeros(N)
    inv_r[1:] = 1.0 / grid.rho[1:]
    Ir = sp.diags(inv_r)
    c = sp.diags(np.cos(grid.phi) * (grid.rho > 0))
    s = sp.diags(np.sin(grid.phi) * (grid.rho > 0))

    # polar-frame gradient and Hessian components, rotated to Cartesian axes
    g_r = Dr
    g_p = Ir @ Dp
    h_rr = Drr
    h_rp = Ir @ Drp - Ir @ Ir @ Dp
    h_pp = Ir @ Ir @ Dpp + Ir @ Dr

    gx = c @ g_r - s @ g_p
    gy = s @ g_r + c @ g_p
    hxx = c @ c @ h_rr - 2 * (c @ s) @ h_rp + s @ s @ h_pp
    hyy = s @ s @ h_rr + 2 * (c @ s) @ h_rp + c @ c @ h_pp
    hxy = (c @ s) @ (h_rr - h_pp) + (c @ c - s @ s) @ h_rp

    # origin rows: least-squares fit of a quadratic on the first ring
    ring1 = grid.origin_stencil
    cos1, sin1 = np.cos(grid.angles), np.sin(grid.angles)
    cos2, sin2 = np.cos(2 * grid.angles), np.sin(2 * grid.angles)
    o = _Triplets()
    o.add(0, ring1, 2.0 * cos1 / (m * h))
    ogx = o.tocsr((N, N))
    o = _Triplets()
    o.add(0, ring1, 2.0 * sin1 / (m * h))
    ogy = o.tocsr((N, N))
    # u(h, phi) - u(0) ~ h g.e + (h^2/2) e.He; Fourier moments give the Hessian
    trace_row = np.full(m, 4.0 / (m * h * h))
    diff_row = 8.0 * cos2 / (m * h * h)
    xy_row = 4.0 * sin2 / (m * h * h)
    o = _Triplets()
    o.add(0, ring1, 0.5 * (trace_row + diff_row))
    o.add(0, 0, -0.5 * trace_row.sum())
    ohxx = o.tocsr((N, N))
    o = _Triplets()
    o.add(0, ring1, 0.5 * (trace_row - diff_row))
    o.add(0, 0, -0.5 * trace_row.sum())
    ohyy = o.tocsr((N, N))
    o = _Triplets()
    o.add(0, ring1, xy_row)
    ohxy = o.tocsr((N, N))

    def with_origin(op, origin_op):
        keep = sp.diags((grid.rho > 0).astype(float))
        return (keep @ op + origin_op).tocsr()

    return {
        "dr": Dr.tocsr(),
        "gx": with_origin(gx, ogx),
        "gy": with_origin(gy, ogy),
        "hxx": with_origin(hxx, ohxx),
        "hxy": with_origin(hxy, ohxy),
        "hyy": with_origin(hyy, ohyy),
    }


def inner_product(grid: PolarGrid, u: State, v: State) -> float:
    """Discrete L2(Omega) x L2(Gamma) inner product."""
    return float(np.dot(grid.w_bulk * u.bulk, v.bulk) + np.dot(grid.w_surf * u.surf, v.surf))


def discrete_norm(grid: PolarGrid, u: State, kind: str = "L2") -> float:
    """Discrete norm of a bulk/surface pair.

    ``L2`` and ``Linf`` act on the pair; ``H1`` and ``H2`` add the quadrature
    sums of squared first (and second) derivatives, Cartesian components in
    the bulk and arc-length derivatives on the circle.
    """
    if kind not in NORM_KINDS:
        raise PreconditionError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")
    if kind == "Linf":
        return float(max(np.max(np.abs(u.bulk)), np.max(np.abs(u.surf))))
    sq = np.dot(grid.w_bulk, u.bulk**2) + np.dot(grid.w_surf, u.surf**2)
    if kind in ("H1", "H2"):
        gx, gy = grid.grad_ops
        sq += np.dot(grid.w_bulk, (gx @ u.bulk) ** 2 + (gy @ u.bulk) ** 2)
        sq += np.dot(grid.w_surf, (grid.surf_d1 @ u.surf) ** 2)
    if kind == "H2":
        hxx, hxy, hyy = grid.hess_ops
        sq += np.dot(grid.w_bulk, (hxx @ u.bulk) ** 2 + 2.0 * (hxy @ u.bulk) ** 2 + (hyy @ u.bulk) ** 2)
        sq += np.dot(grid.w_surf, (grid.surf_d2 @ u.surf) ** 2)
    return float(np.sqrt(sq))


def h2_gram(grid: PolarGrid) -> sp.csr_matrix:
    """Gram matrix ``H`` with ``u.H.u == discrete_norm(State.from_bulk(u), 'H2')**2``."""
    gx, gy = grid.grad_ops
    hxx, hxy, hyy = grid.hess_ops
    Wb = sp.diags(grid.w_bulk)
    E = sp.csr_matrix(
        (np.ones(grid.n_surf), (np.arange(grid.n_surf), grid.trace_map)), shape=(grid.n_surf, grid.n_bulk)
    )
    Ws = sp.diags(grid.w_surf)
    H = Wb + gx.T @ Wb @ gx + gy.T @ Wb @ gy
    H = H + hxx.T @ Wb @ hxx + 2.0 * hxy.T @ Wb @ hxy + hyy.T @ Wb @ hyy
    S = Ws + grid.surf_d1.T @ Ws @ grid.surf_d1 + grid.surf_d2.T @ Ws @ grid.surf_d2
    return (H + E.T @ S @ E).tocsr()


def w2inf_norm(grid: PolarGrid, u: State) -> float:
    """Discrete W^{2,inf} norm: max of |values|, |first| and |second| differences."""
    gx, gy = grid.grad_ops
    hxx, hxy, hyy = grid.hess_ops
    parts = [u.bulk, gx @ u.bulk, gy @ u.bulk, hxx @ u.bulk, hxy @ u.bulk, hyy @ u.bulk]
    parts += [u.surf, grid.surf_d1 @ u.surf, grid.surf_d2 @ u.surf]
    return float(max(np.max(np.abs(p)) for p in parts))


def surface_calculus(grid: PolarGrid, X: np.ndarray, z: np.ndarray) -> float:
    """Residual of the discrete divergence formula on the boundary circle.

    Returns ``|sum w (div X) z + sum w X (grad z)|`` with centered periodic
    arc-length differences; it vanishes to round-off because the centered
    difference matrix is skew-symmetric.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    if X.shape != (grid.n_surf,) or z.shape != (grid.n_surf,):
        raise PreconditionError("surface fields must have one value per boundary node")
    d1 = grid.surf_d1
    return float(abs(np.dot(grid.w_surf * (d1 @ X), z) + np.dot(grid.w_surf * X, d1 @ z)))
