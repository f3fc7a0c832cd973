"""Atomic-scale fiber Hamiltonians with synthetic honeycomb potentials.

The fiber operator at (k, X) is

    h0(k, X) = (1/2)|-i grad_x + k|^2 - (1/2) d^2/dz^2 + V(x, X, z),
    V(x, X, z) = sum_{s = +-1} V_mono(x - s J X, z - s d/2) + V_int(z),

acting on functions that are lattice-periodic in the in-plane variable x
and decay in the transverse variable z.  The synthetic monolayer potential
is a sum of Gaussians at the two honeycomb sites (periodized over the
lattice) times a Gaussian in z, so its in-plane Fourier coefficients are
closed form; V_int is a smooth even Gaussian of z.  The discretization is
plane waves in x (|G| <= Gmax) tensor a uniform Dirichlet grid in z.

Verified properties: the essential-spectrum floor at 0, the uniform lower
bound -max|V|, the uniform finite rank of the spectral projections below
any E < 0, the leading DoS term, and the integrated resolvent identity

  avg_X int_k Tr[ int dbar f~ (-i/4) A'( dk A . ad A' - ad A . dk A' ) dL ]
    = avg_X int_k Tr[ int dbar f~ ( -(1/2) A' Kx A' - A' ) dL ],

with A = zeta - h0, A' = A^{-1}, Kx = |-i grad_x + k|^2 and ad the
commutator with d/dx (multiplication by i G on plane-wave indices); it is
exact in the continuum and approached under basis refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .effmodel import DoSResult
from .hscalc import (AlmostAnalyticExtension, ComplexQuadrature, TestFunction,
                     dbar_weights)
from .lattice import J, BZGrid, Lattice2D


@dataclass(frozen=True)
class SyntheticPotential:
    """Gaussian honeycomb monolayer potential plus interlayer term.

    v0 < 0 is the Gaussian depth, sigma_x / sigma_z the in-plane and
    transverse widths, d the interlayer distance, and (v_int_amp,
    v_int_sigma) the smooth even interlayer correction.
    """

    lattice: Lattice2D
    v0: float = -3.0
    sigma_x: float = 0.25 * 4.0 * np.pi / 3.0
    sigma_z: float = 0.30 * 4.0 * np.pi / 3.0
    d: float = 4.0 * np.pi / 3.0
    v_int_amp: float = -0.2
    v_int_sigma: float = 0.5 * 4.0 * np.pi / 3.0

    @property
    def sites(self) -> np.ndarray:
        a1, a2 = self.lattice.a1, self.lattice.a2
        return np.array([a1 / 3.0 + 2.0 * a2 / 3.0, 2.0 * a1 / 3.0 + a2 / 3.0])

    def gaussian_z(self, z):
        z = np.asarray(z, dtype=float)
        return np.exp(-z * z / (2.0 * self.sigma_z ** 2))

    def v_int(self, z):
        z = np.asarray(z, dtype=float)
        return self.v_int_amp * np.exp(-z * z / (2.0 * self.v_int_sigma ** 2))

    def v_mg(self, x, z, cutoff_sigmas: float = 9.0):
        """Pointwise monolayer potential (lattice-periodized in x).

        The translate window is centered on the evaluation points so the
        Gaussian tails dropped at the cutoff are uniformly negligible.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = np.asarray(z, dtype=float)
        basis = np.array([self.lattice.a1, self.lattice.a2])
        frac = np.linalg.solve(basis.T, x.reshape(-1, 2).T).T
        reach = int(np.ceil(cutoff_sigmas * self.sigma_x / self.lattice.a0)) + 1
        lo = np.floor(frac.min(axis=0)).astype(int) - reach
        hi = np.ceil(frac.max(axis=0)).astype(int) + reach
        m1 = np.arange(lo[0], hi[0] + 1)
        m2 = np.arange(lo[1], hi[1] + 1)
        M1, M2 = np.meshgrid(m1, m2, indexing="ij")
        Rs = (M1.reshape(-1, 1) * self.lattice.a1 + M2.reshape(-1, 1) * self.lattice.a2)
        acc = np.zeros(x.shape[:-1])
        for s in self.sites:
            diffs = x[..., None, :] - (Rs + s)
            acc = acc + np.exp(-np.sum(diffs ** 2, axis=-1)
                               / (2.0 * self.sigma_x ** 2)).sum(axis=-1)
        return self.v0 * acc * self.gaussian_z(z)

    def fourier_w(self, gvecs: np.ndarray) -> np.ndarray:
        """In-plane Fourier coefficients of the periodized Gaussian sum.

        For V(x) = v0 sum_{R, s} exp(-|x - R - s|^2/(2 sx^2)) the
        coefficient of exp(i Gamma.x) is
        (v0 2 pi sx^2/|Omega|) exp(-sx^2 |Gamma|^2/2) sum_s exp(-i Gamma.s).
        """
        gvecs = np.atleast_2d(np.asarray(gvecs, dtype=float))
        sx2 = self.sigma_x ** 2
        amp = self.v0 * 2.0 * np.pi * sx2 / self.lattice.cell_area
        shape = np.exp(-sx2 * np.sum(gvecs ** 2, axis=-1) / 2.0)
        phase = np.exp(-1j * gvecs @ self.sites.T).sum(axis=-1)
        return amp * shape * phase

    def sup_abs_vd(self) -> float:
        """max over samples of |V(x, X, z)| (the spectral lower bound scale)."""
        xs = np.linspace(0, 1, 8)
        pts = np.array([u * self.lattice.a1 + v * self.lattice.a2
                        for u in xs for v in xs])
        zs = np.linspace(-self.d, self.d, 33)
        vd = build_vd(self)
        worst = 0.0
        for X in (np.zeros(2), 0.2 * (J @ self.lattice.a1)):
            for z in zs:
                worst = max(worst, float(np.abs(vd(pts, X, z)).max()))
        return worst


class VdEvaluator:
    """Two-scale potential V(x, X, z) with its X-gradient."""

    def __init__(self, pot: SyntheticPotential):
        self.pot = pot

    def __call__(self, x, X, z):
        p, d = self.pot, self.pot.d
        X = np.asarray(X, dtype=float)
        return (p.v_mg(np.asarray(x) - (J @ X), np.asarray(z) - d / 2)
                + p.v_mg(np.asarray(x) + (J @ X), np.asarray(z) + d / 2)
                + p.v_int(z))

    def dX(self, x, X, z, h: float = 1e-6):
        """X-gradient by the chain rule through -s J X (central differences
        of the monolayer factor would lose the analytic z-separation; the
        in-plane gradient of a Gaussian sum is closed form, but a compact
        finite-difference form is accurate to ~1e-9 here and only used for
        validation)."""
        out = np.zeros((2,) + np.broadcast(np.asarray(x)[..., 0], np.asarray(z)).shape)
        for a, e in enumerate(np.eye(2)):
            out[a] = (self(x, X + h * e, z) - self(x, X - h * e, z)) / (2 * h)
        return out


def build_vd(pot: SyntheticPotential) -> VdEvaluator:
    """Pointwise evaluator of the two-scale potential."""
    return VdEvaluator(pot)


# ---------------------------------------------------------------------------
# discretization and assembly

@dataclass(frozen=True)
class AtomicDiscretization:
    """Plane waves (|G| <= Gmax) tensor uniform Dirichlet z-grid on [-Z, Z]."""

    lattice: Lattice2D
    Gmax: float
    n_z: int
    Z: float
    g_ints: np.ndarray = field(default=None, repr=False)
    g_vecs: np.ndarray = field(default=None, repr=False)
    z_grid: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        lat = self.lattice
        reach = int(np.ceil(self.Gmax / np.sqrt(3.0) / lat.kD * 2.0)) + 1
        ax = np.arange(-reach, reach + 1)
        M1, M2 = np.meshgrid(ax, ax, indexing="ij")
        ints = np.stack([M1.ravel(), M2.ravel()], axis=1)
        vecs = ints @ np.array([lat.a1s, lat.a2s])
        keep = np.linalg.norm(vecs, axis=1) <= self.Gmax
        h = 2.0 * self.Z / (self.n_z + 1)
        zs = -self.Z + h * np.arange(1, self.n_z + 1)
        object.__setattr__(self, "g_ints", ints[keep])
        object.__setattr__(self, "g_vecs", vecs[keep])
        object.__setattr__(self, "z_grid", zs)

    @property
    def n_g(self) -> int:
        return len(self.g_vecs)

    @property
    def dim(self) -> int:
        return self.n_g * self.n_z

    @property
    def h_z(self) -> float:
        return float(self.z_grid[1] - self.z_grid[0])

    def refined(self, factor: float) -> "AtomicDiscretization":
        return AtomicDiscretization(lattice=self.lattice,
                                    Gmax=self.Gmax * np.sqrt(factor),
                                    n_z=int(round(self.n_z * np.sqrt(factor))),
                                    Z=self.Z)


def default_discretization(lattice: Lattice2D, pot: SyntheticPotential,
                           Gmax: float = 3.2, n_z: int = 36) -> AtomicDiscretization:
    Z = pot.d / 2.0 + 6.0 * pot.sigma_z
    return AtomicDiscretization(lattice=lattice, Gmax=Gmax, n_z=n_z, Z=Z)


def assemble_h_d0(k: np.ndarray, X: np.ndarray, disc: AtomicDiscretization,
                  pot: SyntheticPotential) -> np.ndarray:
    """Dense Hermitian fiber matrix at (k, X); index is (G, z) row-major.

    Kinetic part: (1/2)|G+k|^2 diagonal plus the standard second-difference
    Laplacian in z.  Potential: diagonal in z, dense in G through the
    analytic Fourier coefficients of the periodized Gaussians.
    """
    k = np.asarray(k, dtype=float)
    X = np.asarray(X, dtype=float)
    nG, nz = disc.n_g, disc.n_z
    m = nG * nz
    H = np.zeros((m, m), dtype=complex)
    kin_g = 0.5 * np.sum((disc.g_vecs + k) ** 2, axis=1)
    hz = disc.h_z
    lap_diag = 1.0 / hz ** 2
    lap_off = -0.5 / hz ** 2
    idx = np.arange(m)
    H[idx, idx] = np.repeat(kin_g, nz) + lap_diag
    # z-Laplacian off-diagonals within each G block
    for g in range(nG):
        base = g * nz
        o = np.arange(nz - 1)
        H[base + o, base + o + 1] += lap_off
        H[base + o + 1, base + o] += lap_off
    # potential: V(x,X,z) = sum_s W(x - sJX) gz(z - s d/2) + V_int(z)
    gamma = disc.g_vecs[:, None, :] - disc.g_vecs[None, :, :]
    what = pot.fourier_w(gamma.reshape(-1, 2)).reshape(nG, nG)
    phase = np.exp(-1j * (gamma @ (J @ X)))
    gz_up = pot.gaussian_z(disc.z_grid - pot.d / 2)
    gz_dn = pot.gaussian_z(disc.z_grid + pot.d / 2)
    Vz = ((what * phase)[:, :, None] * gz_up[None, None, :]
          + (what * np.conj(phase))[:, :, None] * gz_dn[None, None, :])
    Hv = H.reshape(nG, nz, nG, nz)
    zi = np.arange(nz)
    Hv[:, zi, :, zi] += np.transpose(Vz, (2, 0, 1))
    vi = pot.v_int(disc.z_grid)
    for g in range(nG):
        base = g * nz
        H[base + zi, base + zi] += vi
    return H


def fiber_eigvals(k, X, disc, pot) -> np.ndarray:
    return np.linalg.eigvalsh(assemble_h_d0(k, X, disc, pot))


# ---------------------------------------------------------------------------
# spectral scans

def rank_bound_scan(E: float, disc: AtomicDiscretization, pot: SyntheticPotential,
                    kgrid: BZGrid, xgrid: BZGrid,
                    threads: int = 1) -> tuple[int, tuple[np.ndarray, np.ndarray]]:
    """Max count of eigenvalues <= E over the (k, X) sample grid.

    Returns the count and the arg-max sample point.

    Raises
    ------
    ValueError
        If E >= 0 (the essential spectrum starts at 0).
    """
    if E >= 0:
        raise ValueError(f"rank bound needs E < 0, got E={E}")
    pts = [(k, X) for k in kgrid.nodes for X in xgrid.nodes]

    def count(p):
        w = fiber_eigvals(p[0], p[1], disc, pot)
        return int(np.sum(w <= E))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            counts = list(ex.map(count, pts))
    else:
        counts = [count(p) for p in pts]
    best = int(np.argmax(counts))
    return max(counts), pts[best]


def atomic_leading_dos(f: TestFunction, disc: AtomicDiscretization,
                       pot: SyntheticPotential, kgrid: BZGrid, xgrid: BZGrid,
                       threads: int = 1) -> DoSResult:
    """Leading DoS term (1/(2 pi)^2) avg_X int_k Tr f(h0(k, X)).

    A warning is flagged when supp f approaches 0 within twice the basis
    resolution (Dirichlet edge states contaminate that window).
    """
    if f.support[1] >= 0:
        raise ValueError("test function must be supported in (-inf, 0)")
    resolution = 0.5 * (np.pi / (2.0 * disc.Z)) ** 2

    def trace(p):
        w = fiber_eigvals(p[0], p[1], disc, pot)
        return float(np.sum(f(w[w < 0.0])))

    pts = [(k, X) for k in kgrid.nodes for X in xgrid.nodes]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vals = np.array(list(ex.map(trace, pts)))
    else:
        vals = np.array([trace(p) for p in pts])
    wk = np.repeat(kgrid.weights, len(xgrid.nodes))
    wx = np.tile(xgrid.weights, len(kgrid.nodes))
    total = float(np.sum(wk * wx * vals))
    value = total / ((2 * np.pi) ** 2 * pot.lattice.cell_area)
    meta = {"Gmax": disc.Gmax, "n_z": disc.n_z, "Z": disc.Z, "dim": disc.dim,
            "kgrid_n": kgrid.n, "xgrid_n": xgrid.n,
            "f_support": list(f.support)}
    res = DoSResult(value=value, error_estimate=math.nan, grid_meta=meta)
    if f.support[1] > -2.0 * resolution:
        res.grid_meta["warning"] = (
            f"f support edge {f.support[1]:.3g} within 2x basis resolution "
            f"{resolution:.3g} of the Dirichlet-contaminated window")
    return res


# ---------------------------------------------------------------------------
# integrated resolvent identity

@dataclass
class IbpResult:
    lhs: float
    rhs: float
    rel_diff: float
    edge_defect: float
    meta: dict


def _eig_transform(k, X, disc, pot):
    H = assemble_h_d0(k, X, disc, pot)
    lam, U = np.linalg.eigh(H)
    nG, nz = disc.n_g, disc.n_z
    pk = [np.repeat(disc.g_vecs[:, i] + k[i], nz) for i in (0, 1)]
    kx = np.repeat(np.sum((disc.g_vecs + k) ** 2, axis=1), nz)
    # ad_i(h) = [D_i, h] with D_i = diag(i G_i): only the potential block
    gi = [np.repeat(disc.g_vecs[:, i], nz) for i in (0, 1)]
    C = [1j * (gi[i][:, None] - gi[i][None, :]) * H for i in (0, 1)]
    Pt = [U.conj().T @ (pk[i][:, None] * U) for i in (0, 1)]
    Ct = [U.conj().T @ C[i] @ U for i in (0, 1)]
    kx_diag = np.einsum("ja,j,ja->a", np.conj(U), kx, U).real
    return lam, Pt, Ct, kx_diag


def _ibp_point_traces(lam, Pt, Ct, kx_diag, nodes, w):
    """zeta-integrated traces of both kernels at one (k, X)."""
    r = 1.0 / (nodes[:, None] - lam[None, :])
    r2 = r * r
    # lhs kernel: (i/4) A' sum_i [ P_i A' C_i A' - C_i A' P_i A' ], traced as
    # sum_ab r_a^2 (P_ab C_ba - C_ab P_ba) r_b
    E = (Pt[0] * Ct[0].T - Ct[0] * Pt[0].T
         + Pt[1] * Ct[1].T - Ct[1] * Pt[1].T)
    lhs_z = np.sum((r2 @ E) * r, axis=1)
    lhs = np.sum(w * 0.25j * lhs_z)
    # rhs kernel: -(1/2) A' Kx A' - A'
    rhs_z = -0.5 * (r2 @ kx_diag) - r.sum(axis=1)
    rhs = np.sum(w * rhs_z)
    return lhs, rhs


def edge_periodicity_defect(f_aae: AlmostAnalyticExtension, quad: ComplexQuadrature,
                            disc, pot, k0: np.ndarray, X: np.ndarray) -> float:
    """Defect of the reciprocal-lattice periodicity of Tr[(grad_k A) A^{-1}].

    Exact in the continuum; the truncated-basis value differs across
    opposite BZ edges and the difference shrinks with Gmax.
    """
    nodes, w = dbar_weights(f_aae, quad, drop_tol=1e-300)
    vals = []
    for k in (k0, k0 + pot.lattice.a1s):
        lam, U = np.linalg.eigh(assemble_h_d0(k, X, disc, pot))
        g = np.zeros(2, dtype=complex)
        r = 1.0 / (nodes[:, None] - lam[None, :])
        for i in (0, 1):
            pk = np.repeat(disc.g_vecs[:, i] + k[i], disc.n_z)
            diag = np.einsum("ja,j,ja->a", np.conj(U), pk, U).real
            # grad_k A = -(…); Tr[(grad_k A) A^{-1}] = -sum_a diag_a r_a
            g[i] = -np.sum(w * (r @ diag))
        vals.append(g)
    return float(np.abs(vals[1] - vals[0]).max())


def ibp_identity_check(f_aae: AlmostAnalyticExtension, quad: ComplexQuadrature,
                       disc: AtomicDiscretization, pot: SyntheticPotential,
                       kgrid: BZGrid, xgrid: BZGrid,
                       threads: int = 1) -> IbpResult:
    """Both sides of the integrated resolvent identity on the truncated basis.

    Truncation breaks the periodicity that kills the boundary terms in the
    continuum argument, so the two sides agree only up to a defect that
    shrinks under basis refinement.
    """
    nodes, w = dbar_weights(f_aae, quad, drop_tol=1e-300)

    def point(p):
        lam, Pt, Ct, kxd = _eig_transform(p[0], p[1], disc, pot)
        return _ibp_point_traces(lam, Pt, Ct, kxd, nodes, w)

    pts = [(k, X) for k in kgrid.nodes for X in xgrid.nodes]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vals = list(ex.map(point, pts))
    else:
        vals = [point(p) for p in pts]
    wk = np.repeat(kgrid.weights, len(xgrid.nodes))
    wx = np.tile(xgrid.weights, len(kgrid.nodes))
    lhs = float(np.real(np.sum(wk * wx * np.array([v[0] for v in vals])))
                / pot.lattice.cell_area)
    rhs = float(np.real(np.sum(wk * wx * np.array([v[1] for v in vals])))
                / pot.lattice.cell_area)
    rel = abs(lhs - rhs) / max(abs(lhs) + abs(rhs), 1e-300)
    edge = edge_periodicity_defect(f_aae, quad, disc, pot,
                                   kgrid.nodes[0], xgrid.nodes[0])
    meta = {"dim": disc.dim, "Gmax": disc.Gmax, "n_z": disc.n_z,
            "kgrid_n": kgrid.n, "xgrid_n": xgrid.n,
            "zeta_nodes": [quad.nx, quad.ny]}
    return IbpResult(lhs=lhs, rhs=rhs, rel_diff=rel, edge_defect=edge, meta=meta)
