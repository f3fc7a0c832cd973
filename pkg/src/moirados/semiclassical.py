"""Semiclassical expansion coefficients of the moire DoS.

The trace per unit area of f(H) for the effective Hamiltonian expands as

    sum_j  eps^j c_j,
    c_j = (1/(2 pi)^2) avg_{J Omega} int_{R^2} Tr f_j(kappa, X) dkappa dX,

around the matrix symbol h0(kappa, X) = T0(kappa) + V(X):

    f_0 = f(h0),
    f_1 = -(1/pi) int dbar f~ [ -(i/2){R, A} R + R T01 R ] dL,
    f_2 = -(1/pi) int dbar f~ [ -(1/4) R {A, R}^2
                                + (1/4) {R, {A, R}}
                                + (1/8) R {A, R}_2
                                - (1/2) R T0 R
                                + R (T01 R)^2
                                + (i/2) {R, T01} R
                                - (i/2) {R T01 R, A} R
                                - (i/2) {R, A} R T01 R ] dL,

with A = zeta - h0, R = A^{-1}, T01 the first-order twist coefficient of
the kinetic matrix, and the matrix Poisson brackets

    {a, b}   = dX a . dk b - dk a . dX b              (order preserved),
    {a, b}_2 = sum_ij ( kk a . XX b + XX a . kk b - 2 kX a . Xk b ).

All derivatives are closed form: T0 is linear in kappa and V is a
trigonometric polynomial, so the mixed and kappa-kappa second derivatives
of h0 vanish identically.  The zeta integral uses the same almost-analytic
machinery as :mod:`moirados.hscalc`; the computation is vectorized over a
joint (kappa-chunk x zeta-node) batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .effmodel import DiracKinetic, MoirePotential
from .hscalc import (AlmostAnalyticExtension, ComplexQuadrature, TestFunction,
                     build_aae, build_quadrature, calibrate_quadrature,
                     dbar_weights)
from .lattice import BZGrid, make_bz_grid

__all__ = [
    "SymbolBundle", "h0_bundle", "resolvent_bundle", "poisson", "poisson2",
    "coeff_density", "dos_coefficient", "make_disc_grid", "DiscGrid",
    "CoefficientResult",
]


# ---------------------------------------------------------------------------
# derivative bundles

@dataclass
class SymbolBundle:
    """A matrix symbol value with first and second derivatives at one point.

    Arrays broadcast against a leading batch shape; ``None`` marks a
    derivative that vanishes identically.
    """

    value: np.ndarray                 # (..., 4, 4)
    dk: list                          # [d/dk_1, d/dk_2]
    dX: list                          # [d/dX_1, d/dX_2]
    dkk: list | None = None           # [[d2/dk_i dk_j]]
    dkX: list | None = None           # [[d2/dk_i dX_j]]
    dXX: list | None = None           # [[d2/dX_i dX_j]]


def h0_bundle(kin: DiracKinetic, pot: MoirePotential, kappa: np.ndarray,
              X: np.ndarray) -> SymbolBundle:
    """Bundle for h0(kappa, X) = T0(kappa) + V(X).

    ``kappa`` may be a batch (..., 2); X is a single point.  The additive
    separation makes d2/dkdk and d2/dkdX vanish exactly.
    """
    val = kin.t0(kappa) + pot(np.asarray(X, dtype=float))
    dk = [kin.dk_t0[0], kin.dk_t0[1]]
    vx = pot.dX(X)
    vxx = pot.d2X(X)
    return SymbolBundle(
        value=val, dk=dk, dX=[vx[0], vx[1]],
        dkk=None, dkX=None,
        dXX=[[vxx[0, 0], vxx[0, 1]], [vxx[1, 0], vxx[1, 1]]])


def _mm(*mats):
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return out


def resolvent_bundle(hb: SymbolBundle, zeta: np.ndarray,
                     with_second: bool = True) -> SymbolBundle:
    """Bundle for R = (zeta - h0)^{-1}, batched over ``zeta``.

    First derivatives are R (d h0) R; second derivatives follow from the
    product rule (the only nonvanishing second derivative of h0 is in XX).

    Raises
    ------
    ValueError
        If any zeta lies on the real axis.
    """
    zeta = np.asarray(zeta)
    if np.any(zeta.imag == 0):
        raise ValueError("resolvent bundle needs Im(zeta) != 0")
    eye = np.eye(hb.value.shape[-1], dtype=complex)
    A = zeta[..., None, None] * eye - hb.value
    R = np.linalg.inv(A)
    # U_i = R (dk_i h), V_i = R (dX_i h); dR = U R / V R
    U = [R @ np.broadcast_to(hb.dk[i], R.shape) for i in (0, 1)]
    V = [R @ np.broadcast_to(hb.dX[i], R.shape) for i in (0, 1)]
    dk = [U[0] @ R, U[1] @ R]
    dX = [V[0] @ R, V[1] @ R]
    if not with_second:
        return SymbolBundle(value=R, dk=dk, dX=dX)
    dkk = [[(U[j] @ U[i] + U[i] @ U[j]) @ R for j in (0, 1)] for i in (0, 1)]
    dkX = [[(V[j] @ U[i] + U[i] @ V[j]) @ R for j in (0, 1)] for i in (0, 1)]
    dXX = [[(V[j] @ V[i] + V[i] @ V[j]) @ R
            + R @ np.broadcast_to(hb.dXX[i][j], R.shape) @ R
            for j in (0, 1)] for i in (0, 1)]
    return SymbolBundle(value=R, dk=dk, dX=dX, dkk=dkk, dkX=dkX, dXX=dXX)


def _neg_bundle(hb: SymbolBundle, zeta: np.ndarray) -> SymbolBundle:
    """Bundle for A = zeta - h0 (derivatives are minus those of h0)."""
    eye = np.eye(hb.value.shape[-1], dtype=complex)
    zero = np.zeros((4, 4), dtype=complex)
    neg_dXX = [[-hb.dXX[i][j] for j in (0, 1)] for i in (0, 1)]
    return SymbolBundle(
        value=zeta[..., None, None] * eye - hb.value,
        dk=[-hb.dk[0], -hb.dk[1]], dX=[-hb.dX[0], -hb.dX[1]],
        dkk=[[zero, zero], [zero, zero]], dkX=[[zero, zero], [zero, zero]],
        dXX=neg_dXX)


def poisson(a: SymbolBundle, b: SymbolBundle) -> np.ndarray:
    """{a, b} = sum_i (dX_i a)(dk_i b) - (dk_i a)(dX_i b), order preserved."""
    out = None
    for i in (0, 1):
        t = a.dX[i] @ b.dk[i] - a.dk[i] @ b.dX[i]
        out = t if out is None else out + t
    return out


def poisson2(a: SymbolBundle, b: SymbolBundle) -> np.ndarray:
    """{a, b}_2 = sum_ij (kk a)(XX b) + (XX a)(kk b) - 2 (kX a)(Xk b)."""
    out = None
    for i in (0, 1):
        for j in (0, 1):
            t = 0.0
            if a.dkk is not None and b.dXX is not None:
                t = t + a.dkk[i][j] @ b.dXX[i][j]
            if a.dXX is not None and b.dkk is not None:
                t = t + a.dXX[i][j] @ b.dkk[i][j]
            if a.dkX is not None and b.dkX is not None:
                # (d_kappa_i d_X_j a)(d_X_i d_kappa_j b)
                t = t - 2.0 * (a.dkX[i][j] @ b.dkX[j][i])
            if isinstance(t, float):
                continue
            out = t if out is None else out + t
    if out is None:
        raise ValueError("poisson2 needs second derivatives on at least one side")
    return out


def _poisson_with_first(a: SymbolBundle, b: SymbolBundle):
    """Value and first derivatives of {a, b} (consumes second derivatives)."""
    val = poisson(a, b)

    def d2(bundle, kind, i, m):
        # d/d(kind_i) of dk_m / dX_m of the bundle, zeros understood
        if kind == "k":
            dk2 = bundle.dkk[i][m] if bundle.dkk is not None else None
            dx2 = bundle.dkX[i][m] if bundle.dkX is not None else None
            return dk2, dx2
        dk2 = bundle.dkX[m][i] if bundle.dkX is not None else None
        dx2 = bundle.dXX[i][m] if bundle.dXX is not None else None
        return dk2, dx2

    def grad(kind, i):
        out = None
        for m in (0, 1):
            a_km, a_xm = d2(a, kind, i, m)   # derivative of a.dk[m], a.dX[m]
            b_km, b_xm = d2(b, kind, i, m)
            t = None
            for piece in (
                (a_xm @ b.dk[m]) if a_xm is not None else None,
                (a.dX[m] @ b_km) if b_km is not None else None,
                (-(a_km @ b.dX[m])) if a_km is not None else None,
                (-(a.dk[m] @ b_xm)) if b_xm is not None else None,
            ):
                if piece is None:
                    continue
                t = piece if t is None else t + piece
            if t is not None:
                out = t if out is None else out + t
        return out if out is not None else np.zeros_like(val)

    dk = [grad("k", 0), grad("k", 1)]
    dX = [grad("X", 0), grad("X", 1)]
    return val, dk, dX


# ---------------------------------------------------------------------------
# densities

def _t01_bundle(kin: DiracKinetic, kappa: np.ndarray) -> SymbolBundle:
    zero = np.zeros((4, 4), dtype=complex)
    return SymbolBundle(value=kin.t01(kappa),
                        dk=[kin.dk_t01[0], kin.dk_t01[1]],
                        dX=[zero, zero],
                        dkk=[[zero, zero], [zero, zero]],
                        dkX=[[zero, zero], [zero, zero]],
                        dXX=[[zero, zero], [zero, zero]])


def _trace(x: np.ndarray) -> np.ndarray:
    return np.einsum("...ii->...", x)


def _density_integrand_traces(j: int, kin: DiracKinetic, hb: SymbolBundle,
                              kappa: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Fiber trace of the f_j zeta-integrand on the (batch, zeta) grid."""
    Ab = _neg_bundle(hb, zeta)
    Rb = resolvent_bundle(hb, zeta, with_second=(j == 2))
    R = Rb.value
    T01 = np.broadcast_to(kin.t01(kappa), R.shape)
    if j == 1:
        PRA = poisson(Rb, Ab)
        term = -0.5j * (PRA @ R) + R @ T01 @ R
        return _trace(term)
    # j == 2
    T0 = np.broadcast_to(kin.t0(kappa), R.shape)
    P = poisson(Ab, Rb)                      # {A, R}
    t1 = -0.25 * (R @ P @ P)
    Pval, Pdk, PdX = _poisson_with_first(Ab, Rb)
    # {R, {A,R}} needs first derivatives of the inner bracket
    t2_val = None
    for i in (0, 1):
        t = Rb.dX[i] @ Pdk[i] - Rb.dk[i] @ PdX[i]
        t2_val = t if t2_val is None else t2_val + t
    t2 = 0.25 * t2_val
    t3 = 0.125 * (R @ poisson2(Ab, Rb))
    t4 = -0.5 * (R @ T0 @ R)
    TR = T01 @ R
    RT = R @ T01
    W = RT @ R                               # R T01 R
    t5 = W @ TR                              # R T01 R T01 R
    # {R, T01}: T01 is X-independent, only the dX R . dk T01 part survives
    br_RT01 = None
    for i in (0, 1):
        t = Rb.dX[i] @ np.broadcast_to(kin.dk_t01[i], R.shape)
        br_RT01 = t if br_RT01 is None else br_RT01 + t
    t6 = 0.5j * (br_RT01 @ R)
    # {W, A} with W = R T01 R
    Wdk = [Rb.dk[i] @ TR + R @ np.broadcast_to(kin.dk_t01[i], R.shape) @ R
           + RT @ Rb.dk[i] for i in (0, 1)]
    WdX = [Rb.dX[i] @ TR + RT @ Rb.dX[i] for i in (0, 1)]
    br_WA = None
    for i in (0, 1):
        t = WdX[i] @ Ab.dk[i] - Wdk[i] @ Ab.dX[i]
        br_WA = t if br_WA is None else br_WA + t
    t7 = -0.5j * (br_WA @ R)
    t8 = -0.5j * (poisson(Rb, Ab) @ W)
    total = t1 + t2 + t3 + t4 + t5 + t6 + t7 + t8
    return _trace(total)


def coeff_density(j: int, aae: AlmostAnalyticExtension, quad: ComplexQuadrature,
                  kin: DiracKinetic, pot: MoirePotential, kappa: np.ndarray,
                  X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tr f_j(kappa, X) for a batch of kappa points at one X.

    Returns ``(values, defects)``: the real parts and the absolute imaginary
    parts (pure quadrature noise; the exact traces are real).

    j = 0 is evaluated by eigendecomposition of h0 (no zeta quadrature);
    j = 1, 2 by the Helffer-Sjostrand quadrature of the Theorem integrands.

    Raises
    ------
    ValueError
        If j is not 0, 1 or 2.
    """
    kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
    if j == 0:
        h = kin.t0(kappa) + pot(np.asarray(X, dtype=float))
        w = np.linalg.eigvalsh(h)
        vals = np.sum(aae.f(w), axis=-1)
        return vals, np.zeros_like(vals)
    if j not in (1, 2):
        raise ValueError(f"coefficient order must be 0, 1 or 2, got {j}")
    nodes, wgt = dbar_weights(aae, quad, drop_tol=1e-300)
    hb = h0_bundle(kin, pot, kappa[:, None, :], X)
    traces = _density_integrand_traces(j, kin, hb, kappa[:, None, :],
                                       np.broadcast_to(nodes, (kappa.shape[0], nodes.size)))
    acc = np.einsum("z,bz->b", wgt, traces) * (-1.0 / np.pi)
    return acc.real, np.abs(acc.imag)


def coeff_density_j0_hs(aae, quad, kin, pot, kappa, X) -> np.ndarray:
    """Tr f(h0) through the HS quadrature (cross-check for the eig route)."""
    kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
    nodes, wgt = dbar_weights(aae, quad, drop_tol=1e-300)
    hb = h0_bundle(kin, pot, kappa[:, None, :], X)
    Rb = resolvent_bundle(hb, np.broadcast_to(nodes, (kappa.shape[0], nodes.size)),
                          with_second=False)
    acc = np.einsum("z,bz->b", wgt, _trace(Rb.value)) * (-1.0 / np.pi)
    return acc.real


def coeff_density_j1_variant(aae, quad, kin, pot, kappa, X) -> np.ndarray:
    """Independent transcription of the first-order density.

    Writes the integrand as (i/(2 pi)) {R, A} R  minus  (1/pi) R T01 R under
    the dbar integral (instead of one -(1/pi)[...] block); must agree with
    ``coeff_density(1, ...)`` to rounding.
    """
    kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
    nodes, wgt = dbar_weights(aae, quad, drop_tol=1e-300)
    hb = h0_bundle(kin, pot, kappa[:, None, :], X)
    zeta = np.broadcast_to(nodes, (kappa.shape[0], nodes.size))
    Ab = _neg_bundle(hb, zeta)
    Rb = resolvent_bundle(hb, zeta, with_second=False)
    R = Rb.value
    T01 = np.broadcast_to(kin.t01(kappa[:, None, :]), R.shape)
    tr_bracket = _trace(poisson(Rb, Ab) @ R)
    tr_kin = _trace(R @ T01 @ R)
    acc = (0.5j / np.pi) * np.einsum("z,bz->b", wgt, tr_bracket) \
        - (1.0 / np.pi) * np.einsum("z,bz->b", wgt, tr_kin)
    return acc.real


# ---------------------------------------------------------------------------
# integration grids and the coefficient integral

@dataclass(frozen=True)
class DiscGrid:
    """Cartesian midpoint grid restricted to a disc around the origin."""

    nodes: np.ndarray     # (m, 2)
    weights: np.ndarray   # (m,)
    radius: float
    spacing: float

    @property
    def boundary_ring(self) -> np.ndarray:
        r = np.linalg.norm(self.nodes, axis=1)
        return np.nonzero(r >= self.radius - 1.5 * self.spacing)[0]


def make_disc_grid(radius: float, spacing: float) -> DiscGrid:
    n = int(np.ceil(radius / spacing))
    ax = (np.arange(-n, n + 1)) * spacing
    X1, X2 = np.meshgrid(ax, ax, indexing="ij")
    pts = np.stack([X1.ravel(), X2.ravel()], axis=1)
    keep = np.linalg.norm(pts, axis=1) <= radius
    pts = pts[keep]
    w = np.full(len(pts), spacing * spacing)
    return DiscGrid(nodes=pts, weights=w, radius=radius, spacing=spacing)


@dataclass
class CoefficientResult:
    """One expansion coefficient with its numerical context."""

    j: int
    value: float
    defect: float
    boundary_density: float
    meta: dict = field(default_factory=dict)
    warning: str | None = None


def dos_coefficient(j: int, f: TestFunction, kin: DiracKinetic,
                    pot: MoirePotential, *,
                    aae: AlmostAnalyticExtension | None = None,
                    quad: ComplexQuadrature | None = None,
                    kappa_grid: DiscGrid | None = None,
                    x_grid_n: int = 6,
                    kappa_spacing: float | None = None,
                    kappa_margin: float = 0.08,
                    chunk: int = 16) -> CoefficientResult:
    """Expansion coefficient c_j: the (kappa, X) integral of the j-density.

    The kappa integral runs over a disc of radius
    (sup|supp f| + sup||V||)/vF + margin, outside of which the integrand
    vanishes identically (the spectrum of h0 leaves the support of f~), and
    the X average over the rotated unit cell.

    Raises
    ------
    ValueError
        If the measured boundary density exceeds 1e-8 of the peak density
        (the disc is too small for this f and V).
    """
    if aae is None or quad is None:
        aae_c, quad_c = calibrate_quadrature(f, n=8)
        aae = aae or aae_c
        quad = quad or quad_c
    sup_v = pot.sup_norm()
    e_max = max(abs(f.support[0]), abs(f.support[1]))
    radius = (e_max + sup_v) / kin.vF + kappa_margin
    if kappa_grid is None:
        spacing = kappa_spacing if kappa_spacing is not None else e_max / 8.0
        kappa_grid = make_disc_grid(radius, spacing)
    xg = make_bz_grid(pot.lattice, "j_omega", x_grid_n)
    total = 0.0
    defect = 0.0
    peak = 0.0
    boundary = 0.0
    ring = kappa_grid.boundary_ring
    for Xi, wX in zip(xg.nodes, xg.weights):
        vals = np.empty(len(kappa_grid.nodes))
        defs = np.zeros(len(kappa_grid.nodes))
        for i0 in range(0, len(kappa_grid.nodes), chunk):
            sl = slice(i0, i0 + chunk)
            v, d = coeff_density(j, aae, quad, kin, pot,
                                 kappa_grid.nodes[sl], Xi)
            vals[sl], defs[sl] = v, d
        total += wX * float(np.sum(kappa_grid.weights * vals))
        defect = max(defect, float(defs.max(initial=0.0)))
        peak = max(peak, float(np.abs(vals).max()))
        boundary = max(boundary, float(np.abs(vals[ring]).max(initial=0.0)))
    if peak > 0 and boundary > 1e-8 * peak:
        raise ValueError(
            f"kappa disc too small: boundary density {boundary:.3e} exceeds "
            f"1e-8 of peak {peak:.3e}; enlarge the radius")
    cell = pot.lattice.cell_area
    value = total / ((2 * np.pi) ** 2 * cell)
    meta = {"j": j, "n_kappa": len(kappa_grid.nodes),
            "kappa_radius": kappa_grid.radius, "kappa_spacing": kappa_grid.spacing,
            "x_grid_n": x_grid_n, "zeta_nodes": [quad.nx, quad.ny],
            "aae_order": aae.n, "delta_y": aae.delta_y}
    warning = None
    if j > 0 and defect > 100 * max(1e-14, abs(value) * 1e-8):
        warning = f"imaginary defect {defect:.3e} large relative to value {value:.3e}"
    return CoefficientResult(j=j, value=value, defect=defect,
                             boundary_density=boundary, meta=meta,
                             warning=warning)
