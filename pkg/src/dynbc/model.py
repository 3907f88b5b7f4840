"""
Coefficients, potentials and the discrete bulk-surface generator.

Discretization
--------------
The bulk diffusion is a control-volume (two-point flux) form on the dual
cells of :class:`~dynbc.grid.PolarGrid`, plus a symmetric quad-cell term for
the polar cross component of ``A``. The surface diffusion is the compact
periodic form on the circle. Both are symmetric bilinear forms ``K_b``,
``K_s`` that annihilate constants.

The spatial operators of the system are returned as a *pair* of outputs:

* bulk rows ``L y = div(A grad y) + B.grad y + p y`` at every bulk node;
  on the boundary ring the half-cell balance closes with the conormal flux;
* surface rows ``L_G y = div_G(D grad_G y_G) - d_nu^A y + b grad_G y_G + q y_G``.

Because the conormal flux enters the two rows with opposite signs, the
weighted sum ``w_bulk * L y + w_surf * L_G y`` (the L2-projection onto
trace-compatible states) is free of it, and

    <-(L y, L_G y), (v, v_G)> = a0[y, v]

holds exactly for the discrete bilinear form ``a0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from dynbc.errors import PreconditionError
from dynbc.grid import PolarGrid, State, w2inf_norm

_ORIGIN_ISO_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Diffusion and drift coefficients.

    Attributes
    ----------
    A : ndarray, shape (n_bulk, 2, 2)
        Symmetric bulk diffusion matrices (Cartesian components).
    B : ndarray, shape (n_bulk, 2)
        Bulk drift vectors.
    D : ndarray, shape (n_surf,)
        Tangential diffusion on the circle.
    b : ndarray, shape (n_surf,)
        Tangential drift (component along the counter-clockwise unit tangent).
    beta : float
        Ellipticity constant.
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    b: np.ndarray
    beta: float

    @classmethod
    def from_functions(
        cls,
        grid: PolarGrid,
        a: Callable | float | None = 1.0,
        A: Callable | None = None,
        B: Callable | None = None,
        D: Callable | float = 1.0,
        b: Callable | float = 0.0,
        beta: float = 0.5,
    ) -> "Coefficients":
        """Sample coefficients from callables of ``(x1, x2)``.

        ``a`` gives an isotropic ``A = a I``; pass ``A`` returning
        ``(a11, a12, a22)`` for a general symmetric tensor. Surface
        callables are evaluated at the boundary nodes.
        """
        x1, x2 = grid.x1, grid.x2
        n = grid.n_bulk
        if A is not None:
            a11, a12, a22 = (np.broadcast_to(np.asarray(c, dtype=float), (n,)) for c in A(x1, x2))
        else:
            av = a(x1, x2) if callable(a) else a
            a11 = a22 = np.broadcast_to(np.asarray(av, dtype=float), (n,))
            a12 = np.zeros(n)
        Amat = np.empty((n, 2, 2))
        Amat[:, 0, 0], Amat[:, 0, 1], Amat[:, 1, 0], Amat[:, 1, 1] = a11, a12, a12, a22
        Bvec = np.zeros((n, 2))
        if B is not None:
            b1, b2 = B(x1, x2)
            Bvec[:, 0], Bvec[:, 1] = np.broadcast_to(b1, (n,)), np.broadcast_to(b2, (n,))
        xs, ys = x1[grid.trace_map], x2[grid.trace_map]
        Dv = np.broadcast_to(np.asarray(D(xs, ys) if callable(D) else D, dtype=float), (grid.n_surf,)).copy()
        bv = np.broadcast_to(np.asarray(b(xs, ys) if callable(b) else b, dtype=float), (grid.n_surf,)).copy()
        return cls(Amat, Bvec, Dv, bv, float(beta))

    @classmethod
    def preset(cls, grid: PolarGrid, name: str) -> "Coefficients":
        """Named coefficient sets used by the experiments."""
        if name == "isotropic":
            return cls.from_functions(grid)
        if name == "variable":
            # drift tangential on the circle keeps the implicit step an M-matrix
            return cls.from_functions(
                grid,
                a=lambda x, y: 1.0 + 0.3 * x**2 + 0.2 * y,
                B=lambda x, y: (0.6 * (1 - x**2 - y**2) - 0.5 * y, -0.4 * (1 - x**2 - y**2) + 0.5 * x),
                D=lambda x, y: 1.0 + 0.3 * x,
                b=lambda x, y: 0.3 + 0.5 * y,
                beta=0.5,
            )
        if name == "anisotropic":
            return cls.from_functions(
                grid,
                A=lambda x, y: (1.0 + 0.5 * x**2, 0.3 * x * y, 1.0 + 0.2 * y**2),
                D=1.5,
                beta=0.5,
            )
        raise PreconditionError(f"unknown coefficient preset {name!r}; expected isotropic, variable or anisotropic")

    def without_drift(self) -> "Coefficients":
        return replace(self, B=np.zeros_like(self.B), b=np.zeros_like(self.b))

    def validate(self, grid: PolarGrid) -> None:
        """Check shapes, symmetry, finiteness and nodewise ellipticity."""
        n, ns = grid.n_bulk, grid.n_surf
        if self.A.shape != (n, 2, 2) or self.B.shape != (n, 2) or self.D.shape != (ns,) or self.b.shape != (ns,):
            raise PreconditionError("coefficient arrays do not match the grid")
        for name, arr in (("A", self.A), ("B", self.B), ("D", self.D), ("b", self.b)):
            if not np.all(np.isfinite(arr)):
                raise PreconditionError(f"coefficient {name} is not finite")
        if not self.beta > 0:
            raise PreconditionError("ellipticity constant beta must be positive")
        if not np.allclose(self.A[:, 0, 1], self.A[:, 1, 0], rtol=0, atol=1e-14):
            raise PreconditionError("A must be symmetric at every node")
        lam_min = np.linalg.eigvalsh(self.A)[:, 0]
        if np.min(lam_min) < self.beta:
            k = int(np.argmin(lam_min))
            raise PreconditionError(
                f"A is not elliptic: smallest eigenvalue {lam_min[k]:.6g} < beta={self.beta:g} at node {k}"
            )
        if np.min(self.D) < self.beta:
            raise PreconditionError(f"D is not elliptic: min D = {np.min(self.D):.6g} < beta={self.beta:g}")
        a0 = self.A[0]
        scale = max(1.0, abs(a0[0, 0]))
        if abs(a0[0, 1]) > _ORIGIN_ISO_TOL * scale or abs(a0[0, 0] - a0[1, 1]) > _ORIGIN_ISO_TOL * scale:
            raise PreconditionError("A must be isotropic at the polar origin (origin flux-averaging stencil)")


@dataclass(frozen=True, eq=False)
class PotentialPair:
    """Radiative potentials ``p`` (bulk) and ``q`` (boundary)."""

    p: np.ndarray
    q: np.ndarray

    @classmethod
    def zeros(cls, grid: PolarGrid) -> "PotentialPair":
        return cls(np.zeros(grid.n_bulk), np.zeros(grid.n_surf))

    @classmethod
    def constant(cls, grid: PolarGrid, c: float) -> "PotentialPair":
        return cls(np.full(grid.n_bulk, float(c)), np.full(grid.n_surf, float(c)))

    @classmethod
    def from_functions(cls, grid: PolarGrid, p, q) -> "PotentialPair":
        pv = grid.evaluate(p) if callable(p) else np.full(grid.n_bulk, float(p))
        xs, ys = grid.x1[grid.trace_map], grid.x2[grid.trace_map]
        qv = np.broadcast_to(np.asarray(q(xs, ys) if callable(q) else q, dtype=float), (grid.n_surf,)).copy()
        return cls(pv, qv)

    def __sub__(self, other: "PotentialPair") -> "PotentialPair":
        return PotentialPair(self.p - other.p, self.q - other.q)

    def __add__(self, other: "PotentialPair") -> "PotentialPair":
        return PotentialPair(self.p + other.p, self.q + other.q)

    def __mul__(self, c: float) -> "PotentialPair":
        return PotentialPair(c * self.p, c * self.q)

    __rmul__ = __mul__

    def as_state(self) -> State:
        return State(self.p, self.q)

    def norm(self, grid: PolarGrid) -> float:
        """Discrete L2(Omega) x L2(Gamma) norm."""
        return float(np.sqrt(np.dot(grid.w_bulk, self.p**2) + np.dot(grid.w_surf, self.q**2)))

    def reaction(self, grid: PolarGrid) -> np.ndarray:
        """Reaction rate on the shared degrees of freedom (mass-weighted on the boundary)."""
        r = grid.w_bulk * self.p
        r[grid.trace_map] += grid.w_surf * self.q
        return r / grid.mass


@dataclass(frozen=True)
class AdmissibleBounds:
    """Lower bound ``r`` on initial data and magnitude bound ``R``."""

    r: float
    R: float

    def __post_init__(self):
        if not (0 < self.r <= self.R):
            raise PreconditionError(f"admissible bounds require 0 < r <= R, got r={self.r}, R={self.R}")


@dataclass
class AdmissibilityReport:
    admissible: bool
    violations: list[str] = field(default_factory=list)
    values: dict[str, float] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.admissible


def check_admissible(grid: PolarGrid, obj: State | PotentialPair, bounds: AdmissibleBounds) -> AdmissibilityReport:
    """Report membership of initial data in the admissible set or of potentials in the box.

    Initial data need ``y0, y0_G >= r``, trace compatibility and
    ``W^{2,inf}`` norm at most ``R``; potentials need ``|p|, |q| <= R``.
    """
    rep = AdmissibilityReport(True)
    if isinstance(obj, PotentialPair):
        pinf, qinf = float(np.max(np.abs(obj.p))), float(np.max(np.abs(obj.q)))
        rep.values.update(p_inf=pinf, q_inf=qinf)
        if pinf > bounds.R:
            rep.violations.append(f"||p||_inf exceeds R ({pinf:.6g} > {bounds.R:g})")
        if qinf > bounds.R:
            rep.violations.append(f"||q||_inf exceeds R ({qinf:.6g} > {bounds.R:g})")
    else:
        lo = float(min(np.min(obj.bulk), np.min(obj.surf)))
        w2 = w2inf_norm(grid, obj)
        rep.values.update(min_value=lo, w2inf=w2)
        if not obj.is_compatible(grid):
            rep.violations.append("trace compatibility violated")
        if lo < bounds.r:
            rep.violations.append(f"lower bound violated (min {lo:.6g} < r={bounds.r:g})")
        if w2 > bounds.R:
            rep.violations.append(f"||Y0||_2,inf exceeds R ({w2:.6g} > {bounds.R:g})")
    rep.admissible = not rep.violations
    return rep


# ----------------------------------------------------------------------
# face conductances shared by all code paths
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class _Faces:
    c0: np.ndarray  # origin -> ring 1, shape (m,)
    cr: np.ndarray  # ring i -> i+1, shape (n-1, m)
    ca: np.ndarray  # (i, j) -> (i, j+1), shape (n, m)
    kq: np.ndarray  # cross-term quads between rings i, i+1 and angles j, j+1, shape (n-1, m)
    cs: np.ndarray  # surface edge j -> j+1, shape (m,)
    A_rr: np.ndarray
    A_rp: np.ndarray


def _polar_components(grid: PolarGrid, A: np.ndarray):
    c, s = np.cos(grid.phi), np.sin(grid.phi)
    a11, a12, a22 = A[:, 0, 0], A[:, 0, 1], A[:, 1, 1]
    A_rr = c * c * a11 + 2 * c * s * a12 + s * s * a22
    A_pp = s * s * a11 - 2 * c * s * a12 + c * c * a22
    A_rp = c * s * (a22 - a11) + (c * c - s * s) * a12
    return A_rr, A_pp, A_rp


def _faces(grid: PolarGrid, coeffs: Coefficients) -> _Faces:
    h, dphi = grid.h, grid.dphi
    A_rr, A_pp, A_rp = _polar_components(grid, coeffs.A)
    Rrr, Rpp, Rrp = grid.rings(A_rr), grid.rings(A_pp), grid.rings(A_rp)
    a0 = coeffs.A[0, 0, 0]
    c0 = 0.5 * dphi * 0.5 * (a0 + Rrr[0])
    rho_half = grid.radii[:-1] + 0.5 * h
    cr = (rho_half * dphi / h)[:, None] * 0.5 * (Rrr[:-1] + Rrr[1:])
    length = np.full(grid.n_r, h)
    length[-1] = 0.5 * h
    ca = (length * dphi / (grid.radii * grid.d2_denom))[:, None] * 0.5 * (Rpp + np.roll(Rpp, -1, axis=1))
    Rrp_q = 0.25 * (Rrp[:-1] + Rrp[1:] + np.roll(Rrp[:-1], -1, axis=1) + np.roll(Rrp[1:], -1, axis=1))
    kq = (rho_half * h * dphi)[:, None] * Rrp_q
    cs = 0.5 * (coeffs.D + np.roll(coeffs.D, -1)) * dphi / grid.d2_denom
    return _Faces(c0, cr, ca, kq, cs, A_rr, A_rp)


# ----------------------------------------------------------------------
# code path 1: array stencils
# ----------------------------------------------------------------------
def _stiffness_apply(grid: PolarGrid, f: _Faces, u: np.ndarray) -> np.ndarray:
    """``K_b u`` by explicit flux balances on the ring array."""
    h, dphi = grid.h, grid.dphi
    U = grid.rings(u)
    K = np.zeros_like(U)
    F0 = f.c0 * (U[0] - u[0])
    K0 = -F0.sum()
    K[0] += F0
    Fr = f.cr * (U[1:] - U[:-1])
    K[:-1] -= Fr
    K[1:] += Fr
    Fa = f.ca * (np.roll(U, -1, axis=1) - U)
    K -= Fa
    K += np.roll(Fa, 1, axis=1)
    # cross term: kq * (g_r(u) g_p(v) + g_p(u) g_r(v)) on each quad
    Ui, Uo = U[:-1], U[1:]
    Uin, Uon = np.roll(Ui, -1, axis=1), np.roll(Uo, -1, axis=1)
    cq = 1.0 / (2.0 * (grid.radii[:-1] + 0.5 * h) * dphi)[:, None]
    g_r = ((Uo - Ui) + (Uon - Uin)) / (2.0 * h)
    g_p = ((Uin - Ui) + (Uon - Uo)) * cq
    tr = f.kq * g_p
    tp = f.kq * g_r
    cross = np.zeros_like(U)
    cross[1:] += tr / (2 * h) - tp * cq
    cross[:-1] += -tr / (2 * h) - tp * cq
    cross[1:] += np.roll(tr / (2 * h) + tp * cq, 1, axis=1)
    cross[:-1] += np.roll(-tr / (2 * h) + tp * cq, 1, axis=1)
    K += cross
    return np.concatenate([[K0], K.ravel()])


def _gradient_apply(grid: PolarGrid, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Cartesian gradient plus raw ``(d/drho, d/dphi)`` on the rings."""
    h, dphi = grid.h, grid.dphi
    U = grid.rings(u)
    ext = np.vstack([np.full((1, grid.n_phi), u[0]), U])  # row k = ring k, row 0 = origin
    Ur = np.empty_like(U)
    Ur[:-1] = (ext[2:] - ext[:-2]) / (2 * h)
    Ur[-1] = (3 * ext[-1] - 4 * ext[-2] + ext[-3]) / (2 * h)
    Up = (np.roll(U, -1, axis=1) - np.roll(U, 1, axis=1)) / grid.d1_denom
    c, s = np.cos(grid.angles), np.sin(grid.angles)
    r = grid.radii[:, None]
    gx = c * Ur - s * Up / r
    gy = s * Ur + c * Up / r
    m = grid.n_phi
    g0x = 2.0 / (m * h) * np.dot(U[0], c)
    g0y = 2.0 / (m * h) * np.dot(U[0], s)
    return (
        np.concatenate([[g0x], gx.ravel()]),
        np.concatenate([[g0y], gy.ravel()]),
        Ur,
        Up,
    )


def conormal_derivative(grid: PolarGrid, coeffs: Coefficients, y: np.ndarray) -> np.ndarray:
    """``(A grad y . nu)`` on the circle; second-order one-sided in ``rho``."""
    _, _, Ur, Up = _gradient_apply(grid, np.asarray(y, dtype=float))
    A_rr, _, A_rp = _polar_components(grid, coeffs.A)
    t = grid.trace_map
    return A_rr[t] * Ur[-1] + A_rp[t] * Up[-1]


def apply_L(grid: PolarGrid, coeffs: Coefficients, p: np.ndarray | float, y: np.ndarray) -> np.ndarray:
    """Spatial part of the bulk equation, ``div(A grad y) + B.grad y + p y``.

    Returned at every bulk node; on the boundary ring the half-cell balance
    is closed by the discrete conormal flux.
    """
    y = np.asarray(y, dtype=float)
    f = _faces(grid, coeffs)
    flux = -_stiffness_apply(grid, f, y)
    flux[grid.trace_map] += grid.w_surf * conormal_derivative(grid, coeffs, y)
    gx, gy, _, _ = _gradient_apply(grid, y)
    return flux / grid.w_bulk + coeffs.B[:, 0] * gx + coeffs.B[:, 1] * gy + p * y


def surface_stiffness_apply(grid: PolarGrid, coeffs: Coefficients, z: np.ndarray) -> np.ndarray:
    cs = 0.5 * (coeffs.D + np.roll(coeffs.D, -1)) * grid.dphi / grid.d2_denom
    F = cs * (np.roll(z, -1) - z)
    return -F + np.roll(F, 1)


def apply_L_gamma(grid: PolarGrid, coeffs: Coefficients, q: np.ndarray | float, Y: State) -> np.ndarray:
    """Spatial part of the boundary equation.

    ``div_G(D grad_G y_G) - d_nu^A y + <b, grad_G y_G> + q y_G``; rejects
    trace-incompatible states.
    """
    if not Y.is_compatible(grid):
        raise PreconditionError("apply_L_gamma needs a trace-compatible state")
    z = Y.surf
    lb = -surface_stiffness_apply(grid, coeffs, z) / grid.w_surf
    dz = (np.roll(z, -1) - np.roll(z, 1)) / grid.d1_denom
    return lb - conormal_derivative(grid, coeffs, Y.bulk) + coeffs.b * dz + q * z


# ----------------------------------------------------------------------
# code path 2: sparse assembly
# ----------------------------------------------------------------------
def _trace_matrix(grid: PolarGrid) -> sp.csr_matrix:
    return sp.csr_matrix(
        (np.ones(grid.n_surf), (np.arange(grid.n_surf), grid.trace_map)), shape=(grid.n_surf, grid.n_bulk)
    )


def _stiffness_matrix(grid: PolarGrid, f: _Faces) -> sp.csr_matrix:
    n, m = grid.n_r, grid.n_phi
    h, dphi = grid.h, grid.dphi
    rows, cols, vals = [], [], []

    def edge(a, b, c):
        # c * (u_a - u_b) * (v_a - v_b)
        rows.extend([a, b, a, b])
        cols.extend([a, b, b, a])
        vals.extend([c, c, -c, -c])

    j = np.arange(m)
    edge(np.zeros(m, dtype=int), grid.index(1, j), f.c0)
    for i in range(1, n):
        edge(grid.index(i, j), grid.index(i + 1, j), f.cr[i - 1])
    for i in range(1, n + 1):
        edge(grid.index(i, j), grid.index(i, j + 1), f.ca[i - 1])
    for i in range(1, n):
        inner, outer = grid.index(i, j), grid.index(i, j + 1)
        inner_o, outer_o = grid.index(i + 1, j), grid.index(i + 1, j + 1)
        cq = 1.0 / (2.0 * grid.radii[i - 1] + h) / dphi
        # g_r and g_p as linear functionals on the four quad nodes
        nodes = [inner, inner_o, outer, outer_o]
        gr = [-1 / (2 * h), 1 / (2 * h), -1 / (2 * h), 1 / (2 * h)]
        gp = [-cq, -cq, cq, cq]
        k = f.kq[i - 1]
        for a in range(4):
            for b in range(4):
                rows.append(nodes[a])
                cols.append(nodes[b])
                vals.append(k * (gr[a] * gp[b] + gp[a] * gr[b]))
    rows = np.concatenate([np.broadcast_to(r, (m,)) for r in rows])
    cols = np.concatenate([np.broadcast_to(c, (m,)) for c in cols])
    vals = np.concatenate([np.broadcast_to(v, (m,)) for v in vals])
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_bulk, grid.n_bulk))


def _surface_stiffness_matrix(grid: PolarGrid, f: _Faces) -> sp.csr_matrix:
    m = grid.n_surf
    j = np.arange(m)
    jp = (j + 1) % m
    rows = np.concatenate([j, jp, j, jp])
    cols = np.concatenate([j, jp, jp, j])
    vals = np.concatenate([f.cs, f.cs, -f.cs, -f.cs])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))


def _conormal_matrix(grid: PolarGrid, f: _Faces) -> sp.csr_matrix:
    gx, gy = grid.grad_ops
    t = grid.trace_map
    c, s = np.cos(grid.angles), np.sin(grid.angles)
    Gr = sp.diags(c) @ gx[t] + sp.diags(s) @ gy[t]
    Gp = sp.diags(-s) @ gx[t] + sp.diags(c) @ gy[t]
    return (sp.diags(f.A_rr[t]) @ Gr + sp.diags(f.A_rp[t]) @ Gp).tocsr()


def _zero_row_sums(M: sp.csr_matrix, pivot: np.ndarray) -> sp.csr_matrix:
    """Reset the pivot entry of each row to minus the sum of the others.

    The pivot is stored last in its row and the others are summed in storage
    order, so a CSR product with the constant vector cancels exactly.
    """
    M = M.tocsr()
    M.sum_duplicates()
    n_rows = M.shape[0]
    indptr, indices, data = M.indptr, M.indices, M.data
    new_ind, new_dat, new_ptr = [], [], [0]
    for i in range(n_rows):
        sl = slice(indptr[i], indptr[i + 1])
        cols, vals = indices[sl], data[sl]
        keep = (cols != pivot[i]) & (vals != 0.0)
        cols, vals = cols[keep], vals[keep]
        d = -np.cumsum(vals)[-1] if len(vals) else 0.0
        new_ind.append(np.append(cols, pivot[i]))
        new_dat.append(np.append(vals, d))
        new_ptr.append(new_ptr[-1] + len(cols) + 1)
    out = sp.csr_matrix(
        (np.concatenate(new_dat), np.concatenate(new_ind), np.array(new_ptr)), shape=M.shape
    )
    out.has_sorted_indices = False
    return out


@dataclass(frozen=True, eq=False)
class DiscreteGenerator:
    """Assembled generator on the shared degrees of freedom.

    Attributes
    ----------
    gen0 : csr_matrix, (n_bulk, n_bulk)
        Potential-free evolution matrix: the L2-projection of the pair
        (bulk rows, surface rows) onto trace-compatible states.
    pot : ndarray, (n_bulk,)
        Diagonal reaction on the shared degrees of freedom.
    bulk0, surf0 : csr_matrix
        Potential-free bulk rows ``(n_bulk, n_bulk)`` and surface rows
        ``(n_surf, n_bulk)`` of the generator.
    pq : PotentialPair
        Potentials folded into ``pot``.
    """

    grid: PolarGrid
    coeffs: Coefficients
    gen0: sp.csr_matrix
    pot: np.ndarray
    bulk0: sp.csr_matrix
    surf0: sp.csr_matrix
    pq: PotentialPair

    @property
    def matrix(self) -> sp.csr_matrix:
        return (self.gen0 + sp.diags(self.pot)).tocsr()

    @property
    def bulk_rows(self) -> sp.csr_matrix:
        return (self.bulk0 + sp.diags(self.pq.p)).tocsr()

    @property
    def surf_rows(self) -> sp.csr_matrix:
        return (self.surf0 + sp.diags(self.pq.q) @ _trace_matrix(self.grid)).tocsr()

    def apply_pair(self, u: np.ndarray, with_potential: bool = True) -> State:
        """Generator applied to a dof vector, returned as the (bulk, surface) pair."""
        if with_potential:
            return State(self.bulk_rows @ u, self.surf_rows @ u)
        return State(self.bulk0 @ u, self.surf0 @ u)

    def with_potentials(self, pq: PotentialPair) -> "DiscreteGenerator":
        return replace(self, pot=pq.reaction(self.grid), pq=pq)

    @property
    def min_offdiag(self) -> float:
        """Smallest off-diagonal entry of ``gen0`` (nonnegative for an M-matrix step)."""
        off = self.gen0 - sp.diags(self.gen0.diagonal())
        off = off.tocoo()
        return float(off.data.min()) if off.nnz else 0.0


def assemble_generator(grid: PolarGrid, coeffs: Coefficients, pq: PotentialPair | None = None) -> DiscreteGenerator:
    """Assemble ``A = A0 + P`` as sparse matrices.

    Rejects non-elliptic ``A`` or ``D`` (eigenvalue below ``beta``).
    """
    coeffs.validate(grid)
    if pq is None:
        pq = PotentialPair.zeros(grid)
    f = _faces(grid, coeffs)
    E = _trace_matrix(grid)
    Kb = _stiffness_matrix(grid, f)
    Ks = _surface_stiffness_matrix(grid, f)
    Cn = _conormal_matrix(grid, f)
    gx, gy = grid.grad_ops
    S1 = grid.surf_d1
    drift_b = sp.diags(coeffs.B[:, 0]) @ gx + sp.diags(coeffs.B[:, 1]) @ gy
    drift_s = sp.diags(coeffs.b) @ S1 @ E

    inv_wb = sp.diags(1.0 / grid.w_bulk)
    bulk0 = inv_wb @ (-Kb + E.T @ sp.diags(grid.w_surf) @ Cn) + drift_b
    surf0 = -sp.diags(1.0 / grid.w_surf) @ Ks @ E - Cn + drift_s
    evol = sp.diags(1.0 / grid.mass) @ (
        -Kb - E.T @ Ks @ E + sp.diags(grid.w_bulk) @ drift_b + E.T @ sp.diags(grid.w_surf) @ drift_s
    )
    diag = np.arange(grid.n_bulk)
    bulk0 = _zero_row_sums(bulk0.tocsr(), diag)
    surf0 = _zero_row_sums(surf0.tocsr(), grid.trace_map)
    evol = _zero_row_sums(evol.tocsr(), diag)
    return DiscreteGenerator(grid, coeffs, evol, pq.reaction(grid), bulk0, surf0, pq)


# ----------------------------------------------------------------------
# code path 3: the bilinear form evaluated directly
# ----------------------------------------------------------------------
def bilinear_form(grid: PolarGrid, coeffs: Coefficients, u: np.ndarray, v: np.ndarray) -> float:
    """Discrete ``a0[u, v]``: diffusion minus drift terms, bulk plus circle.

    Quadrature of ``A grad u . grad v`` over faces and quads, of
    ``(B.grad u) v`` with the bulk weights, and the circle analogues.
    """
    f = _faces(grid, coeffs)
    h, dphi = grid.h, grid.dphi
    U, V = grid.rings(u), grid.rings(v)
    total = np.sum(f.c0 * (U[0] - u[0]) * (V[0] - v[0]))
    total += np.sum(f.cr * (U[1:] - U[:-1]) * (V[1:] - V[:-1]))
    total += np.sum(f.ca * (np.roll(U, -1, 1) - U) * (np.roll(V, -1, 1) - V))
    cq = 1.0 / (2.0 * (grid.radii[:-1] + 0.5 * h) * dphi)[:, None]

    def quad_grads(W):
        Wi, Wo = W[:-1], W[1:]
        Win, Won = np.roll(Wi, -1, 1), np.roll(Wo, -1, 1)
        return ((Wo - Wi) + (Won - Win)) / (2 * h), ((Win - Wi) + (Won - Wo)) * cq

    gru, gpu = quad_grads(U)
    grv, gpv = quad_grads(V)
    total += np.sum(f.kq * (gru * gpv + gpu * grv))
    gx, gy, _, _ = _gradient_apply(grid, u)
    total -= np.sum(grid.w_bulk * (coeffs.B[:, 0] * gx + coeffs.B[:, 1] * gy) * v)
    zu, zv = u[grid.trace_map], v[grid.trace_map]
    total += np.sum(f.cs * (np.roll(zu, -1) - zu) * (np.roll(zv, -1) - zv))
    dzu = (np.roll(zu, -1) - np.roll(zu, 1)) / grid.d1_denom
    total -= np.sum(grid.w_surf * coeffs.b * dzu * zv)
    return float(total)
