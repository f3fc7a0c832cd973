"""Effective moire-scale Hamiltonians, Bloch fibers, bands, and exact DoS.

The Hamiltonian family is

    H = T_eps(-i grad - K) + V(eps x)

acting on C^4-valued functions of x in R^2, where the kinetic matrix has
rotated Dirac blocks

    T_eps(kappa) = vF * diag(sigma . (R_{-theta/2} kappa),
                             sigma . (R_{+theta/2} kappa))

and V is a Hermitian 4x4 trigonometric polynomial, periodic under the
rotated lattice J*L (the Bistritzer-MacDonald interlayer coupling is the
three-mode special case).  H is periodic under (1/eps) J L, so it is
decomposed by Bloch fibers over the moire Brillouin zone, each fiber acting
on plane waves exp(i(Q+q).x) with Q in the moire reciprocal lattice
eps*J*L^*.  The trace per unit area paired with a test function f is

    (1/(2 pi)^2) * integral_BZ  sum_n f(E_n(q))  dq,

evaluated on a uniform grid; this is the exact reference value the
semiclassical expansion is compared against.
"""

from __future__ import annotations

import collections
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Sequence

import numpy as np
from scipy.integrate import quad

from .hscalc import TestFunction
from .lattice import J, BZGrid, Lattice2D, TwistParams, rotation

SIGMA = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)

SCHEMA_VERSION = "moirados-result-1"


# ---------------------------------------------------------------------------
# kinetic part

@dataclass(frozen=True)
class DiracKinetic:
    """Rotated Dirac kinetic matrices and their twist-series coefficients."""

    vF: float = 1.0

    def t_eps(self, kappa: np.ndarray, tw: TwistParams) -> np.ndarray:
        """T_eps(kappa): block-diagonal rotated Dirac matrices, batched.

        ``kappa`` of shape (..., 2) gives output of shape (..., 4, 4).
        """
        kappa = np.asarray(kappa, dtype=float)
        out = np.zeros(kappa.shape[:-1] + (4, 4), dtype=complex)
        for sign, sl in ((-1, slice(0, 2)), (+1, slice(2, 4))):
            rk = kappa @ rotation(sign * tw.theta / 2).T
            blk = self.vF * (rk[..., 0, None, None] * SIGMA[1]
                             + rk[..., 1, None, None] * SIGMA[2])
            out[..., sl, sl] = blk
        return out

    def t0(self, kappa: np.ndarray) -> np.ndarray:
        """Leading coefficient: vF sigma.kappa in both blocks."""
        kappa = np.asarray(kappa, dtype=float)
        blk = self.vF * (kappa[..., 0, None, None] * SIGMA[1]
                         + kappa[..., 1, None, None] * SIGMA[2])
        out = np.zeros(kappa.shape[:-1] + (4, 4), dtype=complex)
        out[..., 0:2, 0:2] = blk
        out[..., 2:4, 2:4] = blk
        return out

    def t01(self, kappa: np.ndarray) -> np.ndarray:
        """First-order coefficient: vF (-sigma_2, sigma_1).kappa, opposite sign per block."""
        kappa = np.asarray(kappa, dtype=float)
        blk = self.vF * (-kappa[..., 0, None, None] * SIGMA[2]
                         + kappa[..., 1, None, None] * SIGMA[1])
        out = np.zeros(kappa.shape[:-1] + (4, 4), dtype=complex)
        out[..., 0:2, 0:2] = blk
        out[..., 2:4, 2:4] = -blk
        return out

    def t02(self, kappa: np.ndarray) -> np.ndarray:
        """Second-order coefficient, equal to -T_0/2."""
        return -0.5 * self.t0(kappa)

    @property
    def dk_t0(self) -> np.ndarray:
        """The two constant matrices d T_0 / d kappa_i, shape (2, 4, 4)."""
        out = np.zeros((2, 4, 4), dtype=complex)
        for i in (0, 1):
            out[i, 0:2, 0:2] = self.vF * SIGMA[i + 1]
            out[i, 2:4, 2:4] = self.vF * SIGMA[i + 1]
        return out

    @property
    def dk_t01(self) -> np.ndarray:
        """The two constant matrices d T_{0,1} / d kappa_i, shape (2, 4, 4)."""
        out = np.zeros((2, 4, 4), dtype=complex)
        for i, s in ((0, -1), (1, +1)):
            blk = s * self.vF * SIGMA[2 - i]
            out[i, 0:2, 0:2] = blk
            out[i, 2:4, 2:4] = -blk
        return out


# ---------------------------------------------------------------------------
# moire potential

class MoirePotential:
    """Hermitian 4x4 trigonometric polynomial, periodic under J*L.

    Stored as a list of modes (g, M) with integer g = (g1, g2) labelling the
    frequency G = g1*J a1* + g2*J a2* and M the 4x4 coefficient, so

        V(X) = sum_n  exp(i G_n . X) M_n .

    The mode list is closed under (G, M) -> (-G, M^dagger) at construction,
    which makes V(X) Hermitian for every X.
    """

    def __init__(self, lattice: Lattice2D, modes: Iterable[tuple[tuple[int, int], np.ndarray]]):
        self.lattice = lattice
        acc: dict[tuple[int, int], np.ndarray] = collections.defaultdict(
            lambda: np.zeros((4, 4), dtype=complex))
        for g, M in modes:
            g = (int(g[0]), int(g[1]))
            M = np.asarray(M, dtype=complex)
            acc[g] += 0.5 * M
            acc[(-g[0], -g[1])] += 0.5 * M.conj().T
        self.modes = [(g, M) for g, M in sorted(acc.items()) if np.abs(M).max() > 0]
        jb = np.array([J @ lattice.a1s, J @ lattice.a2s])
        self._gvecs = (np.array([g for g, _ in self.modes], dtype=float) @ jb
                       if self.modes else np.zeros((0, 2)))
        self._mats = (np.array([M for _, M in self.modes])
                      if self.modes else np.zeros((0, 4, 4), dtype=complex))

    @property
    def g_integer(self) -> list[tuple[int, int]]:
        return [g for g, _ in self.modes]

    @property
    def g_vectors(self) -> np.ndarray:
        return self._gvecs

    def __call__(self, X) -> np.ndarray:
        """V(X); X of shape (..., 2) gives (..., 4, 4)."""
        X = np.asarray(X, dtype=float)
        if self._gvecs.size == 0:
            return np.zeros(X.shape[:-1] + (4, 4), dtype=complex)
        phases = np.exp(1j * X @ self._gvecs.T)
        return np.einsum("...n,nij->...ij", phases, self._mats)

    def dX(self, X) -> np.ndarray:
        """Gradient (d/dX_1 V, d/dX_2 V); shape (..., 2, 4, 4)."""
        X = np.asarray(X, dtype=float)
        if self._gvecs.size == 0:
            return np.zeros(X.shape[:-1] + (2, 4, 4), dtype=complex)
        phases = np.exp(1j * X @ self._gvecs.T)
        return np.einsum("...n,na,nij->...aij", phases, 1j * self._gvecs, self._mats)

    def d2X(self, X) -> np.ndarray:
        """Hessian d^2 V / dX_a dX_b; shape (..., 2, 2, 4, 4)."""
        X = np.asarray(X, dtype=float)
        if self._gvecs.size == 0:
            return np.zeros(X.shape[:-1] + (2, 2, 4, 4), dtype=complex)
        phases = np.exp(1j * X @ self._gvecs.T)
        gg = -np.einsum("na,nb->nab", self._gvecs, self._gvecs)
        return np.einsum("...n,nab,nij->...abij", phases, gg, self._mats)

    def sup_norm(self, n: int = 32) -> float:
        """Estimate of sup_X ||V(X)||_op sampled over the periodicity cell."""
        fr = np.linspace(0.0, 1.0, n, endpoint=False)
        f1, f2 = np.meshgrid(fr, fr, indexing="ij")
        jb = np.array([J @ self.lattice.a1, J @ self.lattice.a2])
        Xs = f1.reshape(-1, 1) * jb[0] + f2.reshape(-1, 1) * jb[1]
        vals = self(Xs)
        return float(np.linalg.norm(vals, ord=2, axis=(-2, -1)).max())


def bm_potential(wAA: float, wAB: float, lattice: Lattice2D,
                 extra_modes: Sequence[tuple[tuple[int, int], np.ndarray]] = ()) -> MoirePotential:
    """Three-mode interlayer coupling with AA and AB amplitudes.

    The upper-right 2x2 block is

        V(X) = sum_{n=0..2} exp(i G_n . X)
               (wAA I + wAB (cos(2 pi n/3) sigma_1 + sin(2 pi n/3) sigma_2))

    with G_0 = 0, G_1 = J a1*, G_2 = J(a1* + a2*).  ``extra_modes`` appends
    additional (g, M) full 4x4 modes (Hermitian closure is automatic), used
    e.g. to break the symmetry that kills the odd expansion orders.
    """
    gs = [(0, 0), (1, 0), (1, 1)]
    modes = []
    for n, g in enumerate(gs):
        t = wAA * SIGMA[0] + wAB * (np.cos(2 * np.pi * n / 3) * SIGMA[1]
                                    + np.sin(2 * np.pi * n / 3) * SIGMA[2])
        M = np.zeros((4, 4), dtype=complex)
        M[0:2, 2:4] = t
        # factor 2: construction symmetrizes each mode as (M + matching dagger)/2,
        # and the dagger partner is exactly the lower-left block at -G
        modes.append((g, 2.0 * M))
    modes.extend(extra_modes)
    return MoirePotential(lattice, modes)


# ---------------------------------------------------------------------------
# Bloch fibers

@dataclass(frozen=True)
class FiberHamiltonian:
    """One Bloch fiber of the moire Hamiltonian in the plane-wave basis."""

    q: np.ndarray
    eps: float
    Lambda: float
    basis_int: np.ndarray    # (nQ, 2) integer moire reciprocal coordinates
    basis: np.ndarray        # (nQ, 2) the vectors Q
    kappas: np.ndarray       # (nQ, 2) the shifted momenta Q + q - K
    matrix: np.ndarray       # (4 nQ, 4 nQ) Hermitian

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def spectral_bound(self, kin: DiracKinetic, pot: MoirePotential) -> float:
        """Crude a priori bound |E| <= vF max|Q+q-K| + sup||V||."""
        return (kin.vF * float(np.linalg.norm(self.kappas, axis=1).max())
                + pot.sup_norm())


def moire_basis(q: np.ndarray, tw: TwistParams, lattice: Lattice2D,
                Lambda: float) -> tuple[np.ndarray, np.ndarray]:
    """Integer coordinates and vectors of {Q in eps J L^* : |Q+q-K| <= Lambda}."""
    jb = tw.eps * np.array([J @ lattice.a1s, J @ lattice.a2s])
    center = np.linalg.solve(jb.T, lattice.K - q)
    spacing = min(np.linalg.norm(jb[0]), np.linalg.norm(jb[1]))
    # the dual basis is hexagonal; 2/sqrt(3) covers the worst-case skew
    reach = int(np.ceil(Lambda / spacing * 2.0 / np.sqrt(3.0))) + 1
    m1 = np.arange(int(np.floor(center[0])) - reach, int(np.ceil(center[0])) + reach + 1)
    m2 = np.arange(int(np.floor(center[1])) - reach, int(np.ceil(center[1])) + reach + 1)
    M1, M2 = np.meshgrid(m1, m2, indexing="ij")
    ints = np.stack([M1.ravel(), M2.ravel()], axis=1)
    Q = ints @ jb
    keep = np.linalg.norm(Q + q - lattice.K, axis=1) <= Lambda
    return ints[keep], Q[keep]


def assemble_fiber(q: np.ndarray, tw: TwistParams, kin: DiracKinetic,
                   pot: MoirePotential, Lambda: float) -> FiberHamiltonian:
    """Dense Hermitian fiber matrix at quasi-momentum q.

    Kinetic diagonal blocks are T_eps(Q+q-K); the potential mode (G, M)
    couples the basis vector Q to Q - eps G with block M.

    Raises
    ------
    ValueError
        If the momentum cutoff leaves an empty basis.
    """
    q = np.asarray(q, dtype=float)
    lattice = pot.lattice
    ints, Q = moire_basis(q, tw, lattice, Lambda)
    nQ = len(ints)
    if nQ == 0:
        raise ValueError(f"empty fiber basis at q={q}, Lambda={Lambda}")
    kappas = Q + q - lattice.K
    H = np.zeros((4 * nQ, 4 * nQ), dtype=complex)
    tblocks = kin.t_eps(kappas, tw)
    for i in range(nQ):
        H[4 * i:4 * i + 4, 4 * i:4 * i + 4] = tblocks[i]
    index = {tuple(m): i for i, m in enumerate(map(tuple, ints))}
    for g, M in pot.modes:
        for i, m in enumerate(map(tuple, ints)):
            j = index.get((m[0] - g[0], m[1] - g[1]))
            if j is not None:
                H[4 * i:4 * i + 4, 4 * j:4 * j + 4] += M
    return FiberHamiltonian(q=q, eps=tw.eps, Lambda=Lambda, basis_int=ints,
                            basis=Q, kappas=kappas, matrix=H)


# ---------------------------------------------------------------------------
# DoS

@dataclass
class DoSResult:
    """A trace-per-unit-area value with its numerical context."""

    value: float
    error_estimate: float
    grid_meta: dict
    params_echo: dict = field(default_factory=dict)
    timestamp: str = ""
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now(timezone.utc).isoformat()

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "value": self.value,
            "error_estimate": self.error_estimate,
            "grid_meta": self.grid_meta,
            "params_echo": self.params_echo,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DoSResult":
        return cls(value=d["value"], error_estimate=d["error_estimate"],
                   grid_meta=d["grid_meta"], params_echo=d.get("params_echo", {}),
                   timestamp=d.get("timestamp", ""),
                   schema_version=d.get("schema_version", SCHEMA_VERSION))


def _fiber_trace(q, tw, kin, pot, Lambda, f) -> float:
    fib = assemble_fiber(q, tw, kin, pot, Lambda)
    return float(np.sum(f(fib.eigenvalues())))


def _grid_dos_sum(f, tw, kin, pot, Lambda, nodes, weights, threads) -> float:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vals = list(ex.map(lambda q: _fiber_trace(q, tw, kin, pot, Lambda, f),
                               nodes))
    else:
        vals = [_fiber_trace(q, tw, kin, pot, Lambda, f) for q in nodes]
    # ordered reduction: deterministic regardless of thread scheduling
    return float(np.sum(np.asarray(weights) * np.asarray(vals)) / (2 * np.pi) ** 2)


def exact_dos(f: TestFunction, tw: TwistParams, kin: DiracKinetic,
              pot: MoirePotential, Lambda: float, kgrid: BZGrid,
              threads: int = 1, estimate_error: bool = True) -> DoSResult:
    """Exact trace per unit area of f(H) by Bloch diagonalization.

    ``kgrid`` must cover the moire Brillouin zone (cell ``moire_bz`` at the
    same eps).  The error estimate is the difference against the
    half-resolution grid.
    """
    if tw.eps <= 0:
        raise ValueError("exact_dos needs a positive twist (eps > 0)")
    if kgrid.cell != "moire_bz":
        raise ValueError(f"kgrid must sample the moire BZ, got cell {kgrid.cell!r}")
    if not np.isclose(kgrid.weights.sum(), tw.eps ** 2 * pot.lattice.bz_area,
                      rtol=1e-8):
        raise ValueError("kgrid area does not match the moire BZ for this eps")
    value = _grid_dos_sum(f, tw, kin, pot, Lambda, kgrid.nodes, kgrid.weights,
                          threads)
    err = math.nan
    if estimate_error:
        from .lattice import make_bz_grid
        n_half = max(1, kgrid.n // 2)
        half = make_bz_grid(pot.lattice, "moire_bz", n_half, eps=tw.eps)
        v_half = _grid_dos_sum(f, tw, kin, pot, Lambda, half.nodes, half.weights,
                               threads)
        err = abs(value - v_half)
    meta = {"Lambda": Lambda, "kgrid_n": kgrid.n, "eps": tw.eps,
            "f": getattr(f, "label", "f"), "f_support": list(f.support)}
    return DoSResult(value=value, error_estimate=err, grid_meta=meta)


def free_dirac_dos(f: TestFunction, vF: float = 1.0) -> float:
    """Closed-form reference: two Dirac cones, each twofold degenerate.

    (1/(pi vF^2)) * integral_0^inf (f(s) + f(-s)) s ds, by 1D quadrature.
    This is independent of the Bloch machinery and serves as its oracle.
    """
    s_hi = max(abs(f.support[0]), abs(f.support[1]))
    val, _ = quad(lambda s: (float(f(np.array([s]))[0]) + float(f(np.array([-s]))[0])) * s,
                  0.0, s_hi, limit=200, epsabs=1e-13, epsrel=1e-12)
    return val / (np.pi * vF ** 2)


# ---------------------------------------------------------------------------
# band structures

def moire_path_points(lattice: Lattice2D, tw: TwistParams,
                      corners: str = "KGMK", per_segment: int = 30) -> np.ndarray:
    """Polyline through named points of the moire BZ (K, G=Gamma, M)."""
    named = {
        "G": np.zeros(2),
        "K": tw.eps * (J @ lattice.K),
        "M": tw.eps * (J @ lattice.a1s) / 2.0,
    }
    pts = [named[c] for c in corners]
    out = []
    for a, b in zip(pts[:-1], pts[1:]):
        for t in np.linspace(0.0, 1.0, per_segment, endpoint=False):
            out.append((1 - t) * a + t * b)
    out.append(pts[-1])
    return np.array(out)


def band_structure(path: np.ndarray, tw: TwistParams, kin: DiracKinetic,
                   pot: MoirePotential, Lambda: float,
                   threads: int = 1) -> np.ndarray:
    """Sorted eigenvalues along a q-path; rows follow the path order.

    The basis is rebuilt per q, so fiber dimensions can vary by a few
    states along the path; rows are trimmed symmetrically to the smallest
    dimension to keep the table rectangular (only the highest |E| states,
    far outside any window of interest, are affected).
    """
    def solve(q):
        return np.sort(assemble_fiber(q, tw, kin, pot, Lambda).eigenvalues())

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(solve, path))
    else:
        rows = [solve(q) for q in path]
    width = min(len(r) for r in rows)
    lo = [(len(r) - width) // 2 for r in rows]
    return np.array([r[l:l + width] for r, l in zip(rows, lo)])


def middle_band_width(energies: np.ndarray, count: int = 4) -> float:
    """Width of the union of the ``count`` central bands over the path."""
    nb = energies.shape[1]
    lo = nb // 2 - count // 2
    mid = energies[:, lo:lo + count]
    return float(mid.max() - mid.min())
