"""Graphene and moire lattice geometry, twist parameterization, BZ sampling.

Conventions (see docs/conventions.md):

* direct basis  a1 = a0*(1/2, -sqrt(3)/2),  a2 = a0*(1/2, sqrt(3)/2)
* reciprocal basis fixed by  a_i . a_j* = 2*pi*delta_ij
* Dirac momentum scale  k_D = 4*pi/(3*a0), Dirac points K = (a1* + a2*)/3,
  K' = -K
* J = [[0, 1], [-1, 0]] (rotation by -90 degrees); the moire cell is J*Omega
  and the moire reciprocal lattice is eps*J*L^* with eps = sin(theta/2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


J = np.array([[0.0, 1.0], [-1.0, 0.0]])


def rotation(angle: float) -> np.ndarray:
    """Standard 2D rotation matrix R_angle."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Lattice2D:
    """Graphene direct/reciprocal lattice data. Immutable."""

    a0: float
    a1: np.ndarray
    a2: np.ndarray
    a1s: np.ndarray
    a2s: np.ndarray
    cell_area: float
    kD: float
    K: np.ndarray
    Kp: np.ndarray

    def direct(self, m1: int, m2: int) -> np.ndarray:
        """Lattice vector m1*a1 + m2*a2."""
        return m1 * self.a1 + m2 * self.a2

    def reciprocal(self, m1: int, m2: int) -> np.ndarray:
        """Reciprocal vector m1*a1* + m2*a2*."""
        return m1 * self.a1s + m2 * self.a2s

    @property
    def bz_area(self) -> float:
        """|Omega*| = (2*pi)^2 / |Omega|."""
        return (2.0 * np.pi) ** 2 / self.cell_area


def build_graphene_lattice(a0: float = 4.0 * np.pi / 3.0) -> Lattice2D:
    """Construct the graphene lattice for lattice constant ``a0``.

    The default ``a0 = 4*pi/3`` makes k_D = 1, the natural momentum unit
    used throughout.

    Raises
    ------
    ValueError
        If ``a0 <= 0``.
    """
    if a0 <= 0:
        raise ValueError(f"lattice constant must be positive, got a0={a0}")
    s3 = np.sqrt(3.0)
    a1 = a0 * np.array([0.5, -s3 / 2.0])
    a2 = a0 * np.array([0.5, s3 / 2.0])
    kD = 4.0 * np.pi / (3.0 * a0)
    a1s = s3 * kD * np.array([s3 / 2.0, -0.5])
    a2s = s3 * kD * np.array([s3 / 2.0, 0.5])
    cell_area = abs(_cross2(a1, a2))
    K = (a1s + a2s) / 3.0
    for v in (a1, a2, a1s, a2s, K):
        v.setflags(write=False)
    return Lattice2D(a0=a0, a1=a1, a2=a2, a1s=a1s, a2s=a2s,
                     cell_area=cell_area, kD=kD, K=K, Kp=-K)


@dataclass(frozen=True)
class TwistParams:
    """Twist angle theta and the derived small parameters.

    eps = sin(theta/2), eta = tan(theta/2), c_eps = (1 - sqrt(1-eps^2))/eps
    (continued by 0 at eps = 0), g_eps = eps*c_eps = 1 - sqrt(1-eps^2).
    """

    theta: float
    eps: float
    eta: float
    c_eps: float
    g_eps: float

    def half_rotation(self, sign: int = 1) -> np.ndarray:
        """R_{sign*theta/2} through the decomposition (1-c*eps)I - sign*eps*J."""
        return (1.0 - self.c_eps * self.eps) * np.eye(2) - sign * self.eps * J


def _c_of_eps(eps: float) -> float:
    # series below 1e-4 avoids cancellation in 1 - sqrt(1-eps^2)
    if abs(eps) < 1e-4:
        e2 = eps * eps
        return eps * (0.5 + e2 * (0.125 + e2 * 0.0625))
    return (1.0 - np.sqrt(1.0 - eps * eps)) / eps


def twist_params(theta: float) -> TwistParams:
    """Twist parameters for theta in [0, pi/3).

    Raises
    ------
    ValueError
        If theta is outside [0, pi/3).
    """
    if not 0.0 <= theta < np.pi / 3.0:
        raise ValueError(f"twist angle must lie in [0, pi/3), got theta={theta}")
    eps = np.sin(theta / 2.0)
    eta = np.tan(theta / 2.0)
    c = _c_of_eps(eps)
    return TwistParams(theta=theta, eps=eps, eta=eta, c_eps=c, g_eps=eps * c)


def twist_from_eps(eps: float) -> TwistParams:
    """Twist parameters from eps = sin(theta/2) directly."""
    return twist_params(2.0 * np.arcsin(eps))


@dataclass(frozen=True)
class BZGrid:
    """Uniform quadrature grid over a 2D torus cell.

    ``nodes`` has shape (n*n, 2); ``weights`` are all equal to
    cell_area/n^2 and sum to the cell area.
    """

    cell: str
    basis: np.ndarray          # (2, 2), rows are the cell basis vectors
    nodes: np.ndarray          # (m, 2)
    weights: np.ndarray        # (m,)
    n: int

    @property
    def cell_area(self) -> float:
        return abs(_cross2(self.basis[0], self.basis[1]))


_CELLS = ("omega_star", "j_omega", "moire_bz", "moire_cell")


def make_bz_grid(lattice: Lattice2D, cell: str, n: int,
                 eps: float | None = None, offset: np.ndarray | None = None) -> BZGrid:
    """Uniform n x n Monkhorst-style grid over the requested cell.

    Cells
    -----
    ``omega_star``
        First-BZ torus Omega* (basis a1*, a2*).
    ``j_omega``
        Rotated unit cell J*Omega (basis J a1, J a2), the moire torus in the
        slow variable X.
    ``moire_bz``
        Primitive cell of the moire reciprocal lattice eps*J*L^*; requires
        ``eps``.
    ``moire_cell``
        Moire-scale direct cell (1/eps)*J*Omega; requires ``eps``.

    Nodes sit at fractional coordinates (i + 1/2)/n - 1/2, so n = 1 gives the
    single node at the cell center (the origin). ``offset`` shifts every node
    by a constant vector (used for grid-invariance checks).
    """
    if n < 1:
        raise ValueError(f"grid resolution must be >= 1, got n={n}")
    if cell not in _CELLS:
        raise ValueError(f"unknown cell {cell!r}; expected one of {_CELLS}")
    if cell == "omega_star":
        basis = np.array([lattice.a1s, lattice.a2s])
    elif cell == "j_omega":
        basis = np.array([J @ lattice.a1, J @ lattice.a2])
    elif cell == "moire_bz":
        if eps is None or eps <= 0:
            raise ValueError("cell 'moire_bz' requires eps > 0")
        basis = eps * np.array([J @ lattice.a1s, J @ lattice.a2s])
    else:
        if eps is None or eps <= 0:
            raise ValueError("cell 'moire_cell' requires eps > 0")
        basis = np.array([J @ lattice.a1, J @ lattice.a2]) / eps
    fr = (np.arange(n) + 0.5) / n - 0.5
    f1, f2 = np.meshgrid(fr, fr, indexing="ij")
    nodes = f1.reshape(-1, 1) * basis[0] + f2.reshape(-1, 1) * basis[1]
    if offset is not None:
        nodes = nodes + np.asarray(offset)
    area = abs(_cross2(basis[0], basis[1]))
    weights = np.full(n * n, area / (n * n))
    return BZGrid(cell=cell, basis=basis, nodes=nodes, weights=weights, n=n)


def wigner_seitz_hex_norm(lattice: Lattice2D, X: np.ndarray) -> np.ndarray:
    """Hexagon norm d(X) of the rotated cell J*Omega: d <= 1 iff X in J*Omega.

    Works on a single 2-vector or an (m, 2) array.
    """
    X = np.atleast_2d(X)
    out = np.zeros(X.shape[0])
    # a1 and a2 span 120 degrees, so the six nearest lattice vectors are
    # +-a1, +-a2, +-(a1 + a2)
    for e in (lattice.a1, lattice.a2, lattice.a1 + lattice.a2):
        je = J @ e
        out = np.maximum(out, 2.0 * np.abs(X @ je) / (je @ je))
    return out if out.shape[0] > 1 else out[0]
