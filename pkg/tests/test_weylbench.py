import numpy as np
import pytest

from moirados.lattice import J, build_graphene_lattice, twist_from_eps
from moirados.weylbench import (LatticeSymbol, compose_residual, cutoff_profile,
                                identity_symbol, make_window, moyal_asymptotic,
                                poisson2_symbol, poisson_symbol, quantize,
                                quantize_twisted, random_symbol, trace_check)

LAT = build_graphene_lattice()
FIBER1 = [(0, 0)]
FIBER3 = [(0, 0), (1, 0), (0, 1)]


def term_symbol(fiber, terms):
    return LatticeSymbol.from_terms(LAT, fiber, terms)


# ------------------------------------------------------------ symbol algebra

def test_identity_quantizes_to_identity():
    sym = identity_symbol(LAT, FIBER3)
    w = make_window(LAT, 3)
    op = quantize(sym, 0.3, w)
    assert np.abs(op.dense() - np.eye(op.dim)).max() < 1e-14


def test_pure_shift_symbol():
    # a = exp(i k.rho0): shift R -> R + rho0, all phases 1
    sym = term_symbol(FIBER1, {(0, 0, 1, 0, 0, 0): 1.0})
    w = make_window(LAT, 2)
    op = quantize(sym, 0.7, w).dense()
    nz = np.argwhere(np.abs(op) > 0)
    assert np.allclose(op[tuple(nz.T)], 1.0)
    # column of site (0,0) maps to site (1,0)
    grid = np.arange((2 * 2 + 1) ** 2).reshape(5, 5)
    src = grid[2, 2]
    dst = grid[3, 2]
    assert abs(op[dst, src] - 1.0) < 1e-14
    assert np.abs(np.delete(op[:, src], dst)).max() == 0.0


def test_x_only_symbol_is_diagonal_phase():
    # a = exp(i Q0.X): diagonal with phase exp(-i eps Q0.R)
    eps = 0.37
    sym = term_symbol(FIBER1, {(1, 0, 0, 0, 0, 0): 1.0})
    w = make_window(LAT, 2)
    op = quantize(sym, eps, w).dense()
    Q0 = J @ LAT.a1s
    expect = np.exp(-1j * eps * (w.vectors @ Q0))
    assert np.abs(op - np.diag(expect)).max() < 1e-14


def weyl_oracle_entry(sym_term, eps, R_int, window_width=2e5, ngrid=160):
    """Matrix element of Op_eps by direct quadrature of the defining integral.

    For a single term c exp(i k.rho) exp(i Q.X) M, the X-integral against a
    Gaussian window exp(-|X|^2/(2 W^2)) is carried out in closed form (it is
    a plain Gaussian integral), leaving a numerical k'-integral on a fine
    grid; W -> infinity recovers the exact element.  Returns the coefficient
    of e_{R+rho} relative to the input Bloch wave exp(i k.R).
    """
    (q1, q2, r1, r2, gi, gj), c = sym_term
    Q = q1 * (J @ LAT.a1s) + q2 * (J @ LAT.a2s)
    rho = r1 * LAT.a1 + r2 * LAT.a2
    R = R_int @ np.array([LAT.a1, LAT.a2])
    k = np.array([0.123, -0.456])
    Wd = window_width
    center = k - eps * Q
    sig = eps / Wd
    span = 8 * sig
    g1 = np.linspace(center[0] - span, center[0] + span, ngrid)
    g2 = np.linspace(center[1] - span, center[1] + span, ngrid)
    K1, K2 = np.meshgrid(g1, g2, indexing="ij")
    dk = (g1[1] - g1[0]) * (g2[1] - g2[0])
    # closed-form X integral: (2 pi W^2) exp(-W^2 |Q - (k - k')/eps|^2 / 2)
    gauss = (2 * np.pi * Wd ** 2) * np.exp(
        -Wd ** 2 * ((Q[0] - (k[0] - K1) / eps) ** 2
                    + (Q[1] - (k[1] - K2) / eps) ** 2) / 2)
    phase = np.exp(1j * ((k[0] + K1) / 2 * rho[0] + (k[1] + K2) / 2 * rho[1])) \
        * np.exp(1j * (K1 * R[0] + K2 * R[1]))
    val = c * np.sum(gauss * phase) * dk / (2 * np.pi * eps) ** 2
    return val * np.exp(-1j * k @ (R + rho))


def test_quantization_phase_against_quadrature_oracle():
    eps = 0.31
    term = ((1, 0, 0, 0, 0, 0), 1.0)   # exp(i Q0.X)
    R_int = np.array([2, -1])
    got = weyl_oracle_entry(term, eps, R_int)
    Q0 = J @ LAT.a1s
    R = R_int @ np.array([LAT.a1, LAT.a2])
    expect = np.exp(-1j * eps * Q0 @ R)
    assert abs(got - expect) < 1e-8


def test_quantization_midpoint_phase_oracle():
    # mixed term exp(i k.rho) exp(i Q.X) picks up the midpoint phase rho/2
    eps = 0.23
    term = ((0, 1, 1, -1, 0, 0), 0.8 - 0.3j)
    R_int = np.array([1, 1])
    got = weyl_oracle_entry(term, eps, R_int)
    (q1, q2, r1, r2, _, _), c = term
    Q = q1 * (J @ LAT.a1s) + q2 * (J @ LAT.a2s)
    rho = r1 * LAT.a1 + r2 * LAT.a2
    R = R_int @ np.array([LAT.a1, LAT.a2])
    expect = c * np.exp(-1j * eps * Q @ (R + rho / 2))
    assert abs(got - expect) < 1e-8


def test_quantize_linearity():
    rng = np.random.default_rng(0)
    a = random_symbol(LAT, FIBER3, rng, reach=1)
    b = random_symbol(LAT, FIBER3, rng, reach=1)
    w = make_window(LAT, 3)
    eps = 0.4
    lhs = quantize(2.0 * a + (1.5 - 0.5j) * b, eps, w).dense()
    rhs = 2.0 * quantize(a, eps, w).dense() + (1.5 - 0.5j) * quantize(b, eps, w).dense()
    assert np.abs(lhs - rhs).max() < 1e-14


def test_hermitian_symbol_quantizes_hermitian():
    rng = np.random.default_rng(1)
    a = random_symbol(LAT, FIBER3, rng, reach=1, hermitian=True)
    assert a.is_hermitian()
    w = make_window(LAT, 4)
    for quant in (quantize, quantize_twisted):
        op = quant(a, 0.3, w)
        assert op.hermiticity_defect() < 1e-12


def test_twisted_equals_plain_for_fiber_diagonal():
    rng = np.random.default_rng(2)
    a = random_symbol(LAT, FIBER3, rng, reach=1, fiber_diagonal=True)
    w = make_window(LAT, 3)
    A = quantize(a, 0.45, w).matrix
    B = quantize_twisted(a, 0.45, w).matrix
    assert (A != B).nnz == 0     # bit-for-bit identical


def test_twisted_small_eps_limit():
    rng = np.random.default_rng(3)
    a = random_symbol(LAT, FIBER3, rng, reach=1)
    w = make_window(LAT, 3)
    eps = 1e-8
    d = (quantize(a, eps, w).matrix - quantize_twisted(a, eps, w).matrix)
    # g(eps) = O(eps^2) so the twist correction is O(eps^2 * scale)
    assert np.abs(d.toarray()).max() < 1e-7


def test_twisted_offdiagonal_sign():
    # single off-diagonal fiber term with Q = 0, rho = 0:
    # diagonal in R with phase exp(+i g(eps) (G - G').R)
    eps = 0.5
    g_eps = 1.0 - np.sqrt(1.0 - eps ** 2)
    sym = term_symbol(FIBER3, {(0, 0, 0, 0, 1, 0): 1.0})
    w = make_window(LAT, 2)
    op = quantize_twisted(sym, eps, w).matrix.toarray()
    G1 = LAT.a1s     # fiber mode (1,0); G' = 0
    nf = 3
    for i, R in enumerate(w.vectors):
        got = op[i * nf + 1, i * nf + 0]
        assert abs(got - np.exp(1j * g_eps * (G1 @ R))) < 1e-13


# ----------------------------------------------------------- Moyal expansion

def test_moyal_constant_symbols():
    ca = np.diag([1.0, 2.0, 3.0])
    cb = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
    a = term_symbol(FIBER3, {(0, 0, 0, 0, i, j): ca[i, j]
                             for i in range(3) for j in range(3) if ca[i, j]})
    b = term_symbol(FIBER3, {(0, 0, 0, 0, i, j): cb[i, j]
                             for i in range(3) for j in range(3) if cb[i, j]})
    d = moyal_asymptotic(a, b, 2, 0.3)
    prod = d.terms()
    k0 = d.reach
    got = np.zeros((3, 3), dtype=complex)
    for (q1, q2, r1, r2, gi, gj), c in prod.items():
        assert (q1, q2, r1, r2) == (0, 0, 0, 0)
        got[gi, gj] = c
    assert np.abs(got - ca @ cb).max() < 1e-14


def test_poisson_symbol_matches_finite_differences():
    rng = np.random.default_rng(4)
    a = random_symbol(LAT, FIBER3, rng, reach=1)
    b = random_symbol(LAT, FIBER3, rng, reach=1)
    pb = poisson_symbol(a, b)
    h = 1e-6
    for _ in range(5):
        k = rng.normal(size=2)
        X = rng.normal(size=2)
        num = np.zeros((3, 3), dtype=complex)
        for i, e in enumerate(np.eye(2)):
            dXa = (a.evaluate(k, X + h * e) - a.evaluate(k, X - h * e)) / (2 * h)
            dkb = (b.evaluate(k + h * e, X) - b.evaluate(k - h * e, X)) / (2 * h)
            dka = (a.evaluate(k + h * e, X) - a.evaluate(k - h * e, X)) / (2 * h)
            dXb = (b.evaluate(k, X + h * e) - b.evaluate(k, X - h * e)) / (2 * h)
            num += dXa @ dkb - dka @ dXb
        an = pb.evaluate(k, X)
        assert np.abs(num - an).max() < 1e-5 * (1 + np.abs(an).max())


def test_poisson2_bilinearity():
    rng = np.random.default_rng(5)
    a = random_symbol(LAT, FIBER1, rng, reach=1)
    b = random_symbol(LAT, FIBER1, rng, reach=1)
    c = random_symbol(LAT, FIBER1, rng, reach=1)
    lhs = poisson2_symbol(a + 2.0 * b, c)
    rhs = poisson2_symbol(a, c) + 2.0 * poisson2_symbol(b, c)
    assert np.abs((lhs - rhs).data).max() < 1e-12 * max(1, np.abs(lhs.data).max())


def test_moyal_rejects_high_order():
    rng = np.random.default_rng(6)
    a = random_symbol(LAT, FIBER1, rng, reach=1)
    with pytest.raises(ValueError):
        moyal_asymptotic(a, a, 3, 0.1)


def test_x_independent_symbols_compose_exactly():
    # Fourier multipliers: all correction orders vanish, residual ~ 0
    rng = np.random.default_rng(7)
    terms_a = {(0, 0, r1, r2, 0, 0): complex(rng.normal(), rng.normal())
               for r1 in (-1, 0, 1) for r2 in (-1, 0, 1)}
    terms_b = {(0, 0, r1, r2, 0, 0): complex(rng.normal(), rng.normal())
               for r1 in (-1, 0, 1) for r2 in (-1, 0, 1)}
    a = term_symbol(FIBER1, terms_a)
    b = term_symbol(FIBER1, terms_b)
    w = make_window(LAT, 5)
    r = compose_residual(a, b, 0.2, w, probe_count=4, seed=0)
    assert r < 1e-12


def test_compose_residual_window_guard():
    rng = np.random.default_rng(8)
    a = random_symbol(LAT, FIBER1, rng, reach=2)
    with pytest.raises(ValueError):
        compose_residual(a, a, 0.2, make_window(LAT, 4))


def test_composition_third_order_scalar():
    rng = np.random.default_rng(9)
    a = random_symbol(LAT, FIBER1, rng, reach=1)
    b = random_symbol(LAT, FIBER1, rng, reach=1)
    w = make_window(LAT, 5)
    rs = [compose_residual(a, b, e, w, probe_count=4, seed=1)
          for e in (0.2, 0.1, 0.05)]
    slope = np.polyfit(np.log([0.2, 0.1, 0.05]), np.log(rs), 1)[0]
    assert slope >= 2.7


def test_composition_third_order_twisted_and_ablation():
    # weak X-dependence isolates the fiber-derivative term of d2: without it
    # the residual saturates at order eps^2
    rng = np.random.default_rng(10)
    a = random_symbol(LAT, FIBER3, rng, reach=1, x_damp=0.05)
    b = random_symbol(LAT, FIBER3, rng, reach=1, x_damp=0.05)
    w = make_window(LAT, 5)
    eps_list = (0.2, 0.1, 0.05)
    rs = [compose_residual(a, b, e, w, probe_count=4, seed=2) for e in eps_list]
    slope = np.polyfit(np.log(eps_list), np.log(rs), 1)[0]
    assert slope >= 2.7
    rs_ab = [compose_residual(a, b, e, w, probe_count=4, seed=2,
                              include_ad_term=False) for e in eps_list]
    slope_ab = np.polyfit(np.log(eps_list), np.log(rs_ab), 1)[0]
    assert slope_ab < 2.3
    assert all(x > y for x, y in zip(rs_ab, rs))


# --------------------------------------------------------------- trace check

def test_cutoff_profile_plateau_and_support():
    X0 = np.zeros(2)
    assert cutoff_profile(LAT, 4, X0) == 1.0
    far = 20.0 * (J @ LAT.a1)
    assert cutoff_profile(LAT, 4, far) == 0.0


def test_trace_check_constant_symbol():
    a = 0.7 * identity_symbol(LAT, FIBER3)
    for N in (4, 8, 16):
        lhs, rhs = trace_check(a, eps=0.25, N=N)
        assert np.isclose(rhs, 0.7 * 3 / LAT.cell_area)
        assert abs(lhs / rhs - 1.0) <= 1.0 / N


def test_trace_check_mean_zero_symbol():
    terms = {(1, 0, 0, 0, 0, 0): 1.0, (-1, 0, 0, 0, 0, 0): 1.0,
             (0, 0, 1, 0, 0, 0): 0.5, (0, 0, -1, 0, 0, 0): 0.5}
    a = term_symbol(FIBER1, terms)
    lhs, rhs = trace_check(a, eps=0.25, N=16)
    assert rhs == 0.0
    assert abs(lhs) <= 1e-3 * a.norm_scale() / LAT.cell_area


def test_trace_check_eps_dependence_mild():
    rng = np.random.default_rng(11)
    a = random_symbol(LAT, FIBER1, rng, reach=1, hermitian=True)
    errs = []
    for eps in (0.5, 0.25):
        lhs, rhs = trace_check(a, eps=eps, N=8)
        errs.append(abs(lhs - rhs))
    assert errs[1] <= errs[0] * 1.1


def test_trace_check_against_dense_matrix_product():
    # small-N cross-check of the diagonal shortcut against the literal
    # trace of Op^c(a) . diag(chi_N^2(-eps R)) over an enclosing window
    rng = np.random.default_rng(12)
    a = random_symbol(LAT, FIBER3, rng, reach=1, hermitian=True)
    eps, N = 0.5, 2
    lhs, rhs = trace_check(a, eps, N)
    reach = int(np.ceil((N + 1.5) / eps)) + 3
    w = make_window(LAT, reach)
    op = quantize_twisted(a, eps, w).matrix
    chi2 = cutoff_profile(LAT, N, -eps * w.vectors) ** 2
    weights = np.repeat(chi2, a.n_fiber)
    tr = float(np.real(np.sum(op.diagonal() * weights)))
    lhs_dense = eps ** 2 / (N * N * LAT.cell_area) * tr
    assert abs(lhs - lhs_dense) < 1e-12
