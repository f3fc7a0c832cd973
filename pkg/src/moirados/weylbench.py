"""Exact finite-dimensional Weyl and twisted-Weyl quantization test bench.

Symbols live on lattice Fourier data,

    a(k, X)[G, G'] = sum  c_{Q,rho,G,G'} exp(i k.rho) exp(i Q.X),

with rho in the direct lattice L, Q in the rotated reciprocal lattice J L^*,
and G, G' in a finite set S of reciprocal fiber modes.  In the lattice-site
basis e_{R,G}: k -> exp(i k.R) (x e_G), the quantization

    Op_eps(a): e_{R,G'} -> sum c_{Q,rho,G,G'} exp(-i eps Q.(R + rho/2)) e_{R+rho,G}

is exact: the position operator i eps grad_k has eigenvalue -eps R on
e_{R,.}, so X-frequencies act as pure phases and no grid commensurability
is ever needed -- including for the irrational shifts g(eps) = eps c(eps)
of the twisted calculus, where conjugation by the translation T_{c(eps) X}
replaces Q by Q - c(eps)(G - G') on the (G, G') component.

The composition expansion checked here is

    Op^c(a) Op^c(b) = Op^c(d0 + eps d1 + eps^2 d2 + O(eps^3)),
    d0 = a b,   d1 = (i/2){a, b},
    d2 = -(1/8){a, b}_2 + (i/4)(dk a . ad b - ad a . dk b),

with {a,b} = dX a . dk b - dk a . dX b, ad the commutator with the fiber
derivative (multiplication by i(G - G') on components), and {a,b}_2 the
second-order bracket.  Coefficients are stored as a dense tensor over the
integer (Q, rho) box, so symbol products are 4D convolutions plus a fiber
matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.signal import fftconvolve

from .hscalc import smooth_step
from .lattice import J, Lattice2D, wigner_seitz_hex_norm

Key = tuple[int, int, int, int, int, int]   # (q1, q2, r1, r2, gi, gj)


class LatticeSymbol:
    """Finite Fourier symbol over a lattice, with exact calculus operations.

    ``data[i1, i2, j1, j2, gi, gj]`` is the coefficient of
    exp(i Q.X) exp(i k.rho) |G_gi><G_gj| with Q = (i1 - off) J a1* + ...,
    rho = (j1 - off) a1 + (j2 - off) a2; ``reach`` is the common box
    half-width.
    """

    def __init__(self, lattice: Lattice2D, fiber_modes: list[tuple[int, int]],
                 reach: int, data: np.ndarray | None = None):
        self.lattice = lattice
        self.fiber_modes = [tuple(m) for m in fiber_modes]
        self.reach = int(reach)
        n = 2 * self.reach + 1
        nf = len(self.fiber_modes)
        if data is None:
            data = np.zeros((n, n, n, n, nf, nf), dtype=complex)
        assert data.shape == (n, n, n, n, nf, nf)
        self.data = data

    # -- construction ------------------------------------------------------
    @classmethod
    def from_terms(cls, lattice: Lattice2D, fiber_modes,
                   terms: dict[Key, complex]) -> "LatticeSymbol":
        reach = max((max(abs(k[0]), abs(k[1]), abs(k[2]), abs(k[3]))
                     for k in terms), default=0)
        sym = cls(lattice, fiber_modes, reach)
        for (q1, q2, r1, r2, gi, gj), c in terms.items():
            sym.data[q1 + reach, q2 + reach, r1 + reach, r2 + reach, gi, gj] += c
        return sym

    def terms(self, tol: float = 0.0) -> dict[Key, complex]:
        """Nonzero coefficients as a dictionary keyed by integer coordinates."""
        out = {}
        off = self.reach
        idx = np.argwhere(np.abs(self.data) > tol)
        for i1, i2, j1, j2, gi, gj in idx:
            out[(i1 - off, i2 - off, j1 - off, j2 - off, int(gi), int(gj))] = \
                complex(self.data[i1, i2, j1, j2, gi, gj])
        return out

    # -- geometry helpers ---------------------------------------------------
    def q_vector(self, q1: int, q2: int) -> np.ndarray:
        return q1 * (J @ self.lattice.a1s) + q2 * (J @ self.lattice.a2s)

    def rho_vector(self, r1: int, r2: int) -> np.ndarray:
        return r1 * self.lattice.a1 + r2 * self.lattice.a2

    def g_vector(self, gi: int) -> np.ndarray:
        m = self.fiber_modes[gi]
        return m[0] * self.lattice.a1s + m[1] * self.lattice.a2s

    @property
    def n_fiber(self) -> int:
        return len(self.fiber_modes)

    def _axis_values(self) -> np.ndarray:
        return np.arange(-self.reach, self.reach + 1)

    def bandwidth(self) -> int:
        """Largest |rho| in Chebyshev lattice coordinates among nonzeros."""
        nz = np.argwhere(np.abs(self.data) > 0)
        if nz.size == 0:
            return 0
        return int(np.max(np.abs(nz[:, 2:4] - self.reach)))

    # -- linear algebra -----------------------------------------------------
    def _grown(self, reach: int) -> "LatticeSymbol":
        if reach == self.reach:
            return self
        pad = reach - self.reach
        if pad < 0:
            raise ValueError("cannot shrink a symbol box")
        data = np.pad(self.data, [(pad, pad)] * 4 + [(0, 0), (0, 0)])
        return LatticeSymbol(self.lattice, self.fiber_modes, reach, data)

    def __add__(self, other: "LatticeSymbol") -> "LatticeSymbol":
        reach = max(self.reach, other.reach)
        a, b = self._grown(reach), other._grown(reach)
        return LatticeSymbol(self.lattice, self.fiber_modes, reach, a.data + b.data)

    def __sub__(self, other: "LatticeSymbol") -> "LatticeSymbol":
        return self + (-1.0) * other

    def __mul__(self, s: complex) -> "LatticeSymbol":
        return LatticeSymbol(self.lattice, self.fiber_modes, self.reach, s * self.data)

    __rmul__ = __mul__

    def matmul(self, other: "LatticeSymbol") -> "LatticeSymbol":
        """Pointwise product a(k,X) b(k,X): (Q, rho) convolution, fiber matmul."""
        nf = self.n_fiber
        reach = self.reach + other.reach
        n = 2 * reach + 1
        out = np.zeros((n, n, n, n, nf, nf), dtype=complex)
        for gi in range(nf):
            for gj in range(nf):
                acc = None
                for gk in range(nf):
                    A = self.data[..., gi, gk]
                    B = other.data[..., gk, gj]
                    if not A.any() or not B.any():
                        continue
                    conv = fftconvolve(A, B, mode="full")
                    acc = conv if acc is None else acc + conv
                if acc is not None:
                    out[..., gi, gj] = acc
        out[np.abs(out) < 1e-300] = 0.0
        return LatticeSymbol(self.lattice, self.fiber_modes, reach, out)

    def _scale_by(self, factors: np.ndarray, axes: str) -> "LatticeSymbol":
        shape = [1] * 6
        if axes == "q":
            shape[0] = shape[1] = 2 * self.reach + 1
        elif axes == "r":
            shape[2] = shape[3] = 2 * self.reach + 1
        else:
            shape[4] = shape[5] = self.n_fiber
        return LatticeSymbol(self.lattice, self.fiber_modes, self.reach,
                             self.data * factors.reshape(shape))

    def dk(self, i: int) -> "LatticeSymbol":
        """d/dk_i: multiplies each term by i rho_i."""
        ax = self._axis_values()
        basis = np.array([self.lattice.a1, self.lattice.a2])
        rho_i = ax[:, None] * basis[0, i] + ax[None, :] * basis[1, i]
        return self._scale_by(1j * rho_i, "r")

    def dX(self, i: int) -> "LatticeSymbol":
        """d/dX_i: multiplies each term by i Q_i."""
        ax = self._axis_values()
        jb = np.array([J @ self.lattice.a1s, J @ self.lattice.a2s])
        Q_i = ax[:, None] * jb[0, i] + ax[None, :] * jb[1, i]
        return self._scale_by(1j * Q_i, "q")

    def ad(self, i: int) -> "LatticeSymbol":
        """Fiber-derivative commutator: factor i(G - G')_i on components."""
        gv = np.array([self.g_vector(g)[i] for g in range(self.n_fiber)])
        diff = gv[:, None] - gv[None, :]
        return self._scale_by(1j * diff, "f")

    def dagger(self) -> "LatticeSymbol":
        data = np.conj(self.data[::-1, ::-1, ::-1, ::-1].swapaxes(4, 5))
        return LatticeSymbol(self.lattice, self.fiber_modes, self.reach, data)

    def hermitize(self) -> "LatticeSymbol":
        return 0.5 * (self + self.dagger())

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return bool(np.abs((self - self.dagger()).data).max() <= tol)

    def norm_scale(self) -> float:
        """Coefficient l1 norm, a crude sup-norm bound used to scale residuals."""
        return float(np.abs(self.data).sum())

    def evaluate(self, k: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Pointwise fiber matrix a(k, X) (finite-difference oracle hook)."""
        ax = self._axis_values()
        jb = np.array([J @ self.lattice.a1s, J @ self.lattice.a2s])
        basis = np.array([self.lattice.a1, self.lattice.a2])
        phq = np.exp(1j * (np.add.outer(ax * (jb[0] @ X), ax * (jb[1] @ X))))
        phr = np.exp(1j * (np.add.outer(ax * (basis[0] @ k), ax * (basis[1] @ k))))
        return np.einsum("ab,cd,abcdij->ij", phq, phr, self.data)

    def trace_mean(self) -> complex:
        """Fiber trace averaged over both tori: the (Q=0, rho=0) diagonal."""
        c = self.reach
        return complex(np.trace(self.data[c, c, c, c]))


def identity_symbol(lattice: Lattice2D, fiber_modes) -> LatticeSymbol:
    return LatticeSymbol.from_terms(
        lattice, fiber_modes,
        {(0, 0, 0, 0, g, g): 1.0 for g in range(len(fiber_modes))})


def random_symbol(lattice: Lattice2D, fiber_modes, rng: np.random.Generator,
                  reach: int = 2, hermitian: bool = False,
                  fiber_diagonal: bool = False, x_damp: float = 1.0) -> LatticeSymbol:
    """Seeded random symbol with |Q|, |rho| within ``reach`` lattice steps.

    Amplitudes are iid complex Gaussians damped by 1/(1 + |Q|^2 + |rho|^2)
    in lattice-step units.  ``x_damp`` additionally scales every Q != 0
    coefficient; weak X-dependence makes the fiber-derivative part of the
    composition stand out against the higher-order remainder.
    """
    nf = len(fiber_modes)
    n = 2 * reach + 1
    ax = np.arange(-reach, reach + 1)
    Q2 = ax[:, None, None, None] ** 2 + ax[None, :, None, None] ** 2
    R2 = ax[None, None, :, None] ** 2 + ax[None, None, None, :] ** 2
    damp = 1.0 / (1.0 + Q2 + R2)
    if x_damp != 1.0:
        damp = damp * np.where(Q2 > 0, x_damp, 1.0)
    z = rng.normal(size=(n, n, n, n, nf, nf)) + 1j * rng.normal(size=(n, n, n, n, nf, nf))
    data = z * damp[..., None, None]
    if fiber_diagonal:
        mask = np.eye(nf)[None, None, None, None]
        data = data * mask
    sym = LatticeSymbol(lattice, fiber_modes, reach, data)
    return sym.hermitize() if hermitian else sym


# ---------------------------------------------------------------------------
# windows and quantization

@dataclass(frozen=True)
class LatticeWindow:
    """Finite square block of direct-lattice sites (in lattice coordinates)."""

    lattice: Lattice2D
    half_size: int
    ints: np.ndarray       # (nR, 2)
    vectors: np.ndarray    # (nR, 2)

    @property
    def n_sites(self) -> int:
        return len(self.ints)

    def interior_indices(self, margin: int) -> np.ndarray:
        keep = np.max(np.abs(self.ints), axis=1) <= self.half_size - margin
        return np.nonzero(keep)[0]


def make_window(lattice: Lattice2D, half_size: int) -> LatticeWindow:
    rng1 = np.arange(-half_size, half_size + 1)
    M1, M2 = np.meshgrid(rng1, rng1, indexing="ij")
    ints = np.stack([M1.ravel(), M2.ravel()], axis=1)
    vecs = ints @ np.array([lattice.a1, lattice.a2])
    return LatticeWindow(lattice=lattice, half_size=half_size, ints=ints, vectors=vecs)


@dataclass(frozen=True)
class QuantizedOperator:
    """Banded matrix of Op_eps(a) over a finite window x fiber set."""

    window: LatticeWindow
    fiber_modes: list
    eps: float
    matrix: sparse.csr_matrix
    twisted: bool

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def hermiticity_defect(self) -> float:
        d = self.matrix - self.matrix.conj().T
        return float(np.abs(d.data).max()) if d.nnz else 0.0


def _site_index_grid(window: LatticeWindow) -> np.ndarray:
    # sites enumerate a (2h+1)^2 grid in row-major (m1, m2) order
    n = 2 * window.half_size + 1
    return np.arange(n * n).reshape(n, n)


def _quantize_impl(sym: LatticeSymbol, eps: float, window: LatticeWindow,
                   c_eps: float) -> QuantizedOperator:
    if eps <= 0:
        raise ValueError(f"quantization needs eps > 0, got {eps}")
    if window.n_sites == 0:
        raise ValueError("empty window")
    nf = sym.n_fiber
    h = window.half_size
    n = 2 * h + 1
    grid = _site_index_grid(window)
    site_vecs = window.vectors
    rows, cols, vals = [], [], []
    off = sym.reach
    for (i1, i2, j1, j2, gi, gj) in np.argwhere(np.abs(sym.data) > 0):
        c = sym.data[i1, i2, j1, j2, gi, gj]
        q1, q2, r1, r2 = i1 - off, i2 - off, j1 - off, j2 - off
        Q = sym.q_vector(q1, q2)
        if c_eps != 0.0:
            Q = Q - c_eps * (sym.g_vector(gi) - sym.g_vector(gj))
        rho = sym.rho_vector(r1, r2)
        # source sites whose shifted partner stays inside the window
        m1_lo, m1_hi = max(-h, -h - r1), min(h, h - r1)
        m2_lo, m2_hi = max(-h, -h - r2), min(h, h - r2)
        if m1_lo > m1_hi or m2_lo > m2_hi:
            continue
        src = grid[m1_lo + h:m1_hi + h + 1, m2_lo + h:m2_hi + h + 1].ravel()
        dst = grid[m1_lo + r1 + h:m1_hi + r1 + h + 1,
                   m2_lo + r2 + h:m2_hi + r2 + h + 1].ravel()
        phases = c * np.exp(-1j * eps * ((site_vecs[src] + 0.5 * rho) @ Q))
        rows.append(dst * nf + gi)
        cols.append(src * nf + gj)
        vals.append(phases)
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    else:
        rows = cols = np.zeros(0, dtype=int)
        vals = np.zeros(0, dtype=complex)
    nR = window.n_sites
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(nR * nf, nR * nf))
    return QuantizedOperator(window=window, fiber_modes=sym.fiber_modes, eps=eps,
                             matrix=mat, twisted=c_eps != 0.0)


def quantize(sym: LatticeSymbol, eps: float, window: LatticeWindow) -> QuantizedOperator:
    """Exact Weyl quantization Op_eps(a) on the window (untwisted)."""
    return _quantize_impl(sym, eps, window, 0.0)


def quantize_twisted(sym: LatticeSymbol, eps: float,
                     window: LatticeWindow) -> QuantizedOperator:
    """Twisted quantization Op^c_eps(a) = Op_eps(T_{cX} a T_{cX}^{-1}).

    The conjugation shifts the X-frequency of each (G, G') component from Q
    to Q - c(eps)(G - G'); everything else is as in :func:`quantize`.
    """
    c_eps = (1.0 - np.sqrt(1.0 - eps * eps)) / eps
    return _quantize_impl(sym, eps, window, c_eps)


# ---------------------------------------------------------------------------
# Moyal expansion

def poisson_symbol(a: LatticeSymbol, b: LatticeSymbol) -> LatticeSymbol:
    """{a, b} = dX a . dk b - dk a . dX b, exact on Fourier data."""
    out = a.dX(0).matmul(b.dk(0)) + a.dX(1).matmul(b.dk(1))
    return out - a.dk(0).matmul(b.dX(0)) - a.dk(1).matmul(b.dX(1))


def poisson2_symbol(a: LatticeSymbol, b: LatticeSymbol) -> LatticeSymbol:
    """Second-order bracket sum_{ij} (kk a . XX b + XX a . kk b - 2 kX a . Xk b)."""
    out = None
    for i in (0, 1):
        for j in (0, 1):
            t = (a.dk(i).dk(j).matmul(b.dX(i).dX(j))
                 + a.dX(i).dX(j).matmul(b.dk(i).dk(j))
                 - 2.0 * a.dk(i).dX(j).matmul(b.dX(i).dk(j)))
            out = t if out is None else out + t
    return out


def moyal_asymptotic(a: LatticeSymbol, b: LatticeSymbol, order: int, eps: float,
                     include_ad_term: bool = True) -> LatticeSymbol:
    """d0 + eps d1 + eps^2 d2 of the twisted composition, as a symbol.

    ``include_ad_term=False`` drops the fiber-derivative part of d2 (an
    ablation hook for regression tests; the result is then wrong at order
    eps^2 for fiber-off-diagonal symbols under the twisted calculus).

    Raises
    ------
    ValueError
        If ``order > 2``.
    """
    if order > 2:
        raise ValueError(f"composition expansion implemented through order 2, got {order}")
    out = a.matmul(b)
    if order >= 1:
        out = out + (0.5j * eps) * poisson_symbol(a, b)
    if order >= 2:
        d2 = (-0.125) * poisson2_symbol(a, b)
        if include_ad_term:
            for i in (0, 1):
                d2 = d2 + 0.25j * (a.dk(i).matmul(b.ad(i)) - a.ad(i).matmul(b.dk(i)))
        out = out + eps * eps * d2
    return out


def compose_residual(a: LatticeSymbol, b: LatticeSymbol, eps: float,
                     window: LatticeWindow, probe_count: int = 8,
                     seed: int = 0, order: int = 2,
                     include_ad_term: bool = True) -> float:
    """Max norm of [Op^c(a) Op^c(b) - Op^c(moyal(a,b))] v over interior probes.

    The probes are random unit vectors supported on the interior sub-window
    so that the truncation boundary is never touched.

    Raises
    ------
    ValueError
        If the window margin is smaller than twice the combined bandwidth.
    """
    margin = 2 * (a.bandwidth() + b.bandwidth())
    if window.half_size <= margin:
        raise ValueError(
            f"window half_size {window.half_size} too small for margin {margin}")
    A = quantize_twisted(a, eps, window).matrix
    B = quantize_twisted(b, eps, window).matrix
    C = quantize_twisted(moyal_asymptotic(a, b, order, eps, include_ad_term),
                         eps, window).matrix
    interior = window.interior_indices(margin)
    nf = a.n_fiber
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probe_count):
        amp = (rng.normal(size=(interior.size, nf))
               + 1j * rng.normal(size=(interior.size, nf)))
        v = np.zeros(A.shape[0], dtype=complex)
        v[(interior[:, None] * nf + np.arange(nf)[None, :]).ravel()] = amp.ravel()
        v /= np.linalg.norm(v)
        resid = A @ (B @ v) - C @ v
        worst = max(worst, float(np.linalg.norm(resid)))
    return worst


# ---------------------------------------------------------------------------
# trace formula

def cutoff_profile(lattice: Lattice2D, N: int, X: np.ndarray) -> np.ndarray:
    """Smooth cutoff: 1 on the N-fold rotated cell, 0 outside the (N+1)-fold one.

    A fixed smooth step in the hexagon norm, so derivative bounds are
    uniform in N.
    """
    d = wigner_seitz_hex_norm(lattice, X)
    return smooth_step((N + 1.0) - np.atleast_1d(d))


def trace_check(a: LatticeSymbol, eps: float, N: int) -> tuple[float, float]:
    """Both sides of the trace formula for the twisted quantization.

    lhs = eps^2/|N J Omega| Tr[Op^c_eps(a) Op_eps(chi_N^2)]
    rhs = (1/(2 pi)^2) avg_{J Omega} int_{Omega*} Tr a dk dX
        = (sum of (Q=0, rho=0) diagonal coefficients) / |Omega|

    Op_eps(chi_N^2) is exactly the multiplication operator chi_N^2(-eps R)
    in the lattice-site basis (X-only symbols quantize to multiplication by
    their value at -eps R; see the module docstring), so the trace requires
    only the diagonal of Op^c_eps(a): the terms with rho = 0 and G = G'.

    Raises
    ------
    ValueError
        If eps <= 0 or N < 1.
    """
    if eps <= 0 or N < 1:
        raise ValueError("need eps > 0 and N >= 1")
    lat = a.lattice
    # sites where the cutoff is nonzero: hexagon norm of eps R below N+1
    reach = int(np.ceil((N + 1.5) / eps)) + 2
    ax = np.arange(-reach, reach + 1)
    M1, M2 = np.meshgrid(ax, ax, indexing="ij")
    ints = np.stack([M1.ravel(), M2.ravel()], axis=1)
    vecs = ints @ np.array([lat.a1, lat.a2])
    chi2 = cutoff_profile(lat, N, -eps * vecs) ** 2
    keep = chi2 > 0
    vecs, chi2 = vecs[keep], chi2[keep]
    diag_sum = 0.0 + 0.0j
    off = a.reach
    for (i1, i2, j1, j2, gi, gj) in np.argwhere(np.abs(a.data) > 0):
        if (j1 - off, j2 - off) != (0, 0) or gi != gj:
            continue
        # G - G' vanishes on the fiber diagonal, so no twist shift appears
        Q = a.q_vector(i1 - off, i2 - off)
        c = a.data[i1, i2, j1, j2, gi, gj]
        diag_sum += c * np.sum(np.exp(-1j * eps * (vecs @ Q)) * chi2)
    cell = N * N * lat.cell_area
    lhs = float((eps * eps / cell * diag_sum).real)
    rhs = float(np.real(a.trace_mean()) / lat.cell_area)
    return lhs, rhs
