import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nelsonir._errors import ConvergenceError, DomainError
from nelsonir.geometry import VariableMass, japanese
from nelsonir.kernels import CutoffProfile, KernelTable, w0_eval, w_eval, w_n_eval
from nelsonir.quadrature import QuadratureSpec
from nelsonir.scattering import (
    LATTICE_COULOMB,
    BornEigenfunction,
    GeneralizedFourierTransform,
    GridEigenfunctions,
    PeriodicGridOperator,
    born_eval,
    convolution_constant,
    default_w,
    deviation_bound,
    eigen_residual,
    intertwining_defect,
    rho_x,
)


@pytest.fixture(scope="module")
def half_margin():
    free = BornEigenfunction(kappa=0.0).fit()
    return 0.5 * free.kappa_max_


@pytest.fixture(scope="module")
def gef(half_margin):
    return BornEigenfunction(kappa=half_margin, quadrature=QuadratureSpec(mc_samples=8192)).fit()


def random_kx(n, seed):
    rng = np.random.default_rng(seed)
    K = rng.normal(size=(n, 3))
    X = rng.normal(scale=2.0, size=(n, 3))
    return K, X


def test_convolution_constant_oracle():
    # at x = 0 the integral is 4 pi int r <r>^{-4} dr = 2 pi, and the sup sits away from 0
    c = convolution_constant(4.0)
    assert c >= 2 * np.pi
    r = 1.7
    s, wt = np.polynomial.legendre.leggauss(400)
    # shell theorem by brute force on [0, 200] at one radius
    y = 100 * (s + 1)
    integrand = 4 * np.pi * y**2 * (1 + y**2) ** -2 / np.maximum(r, y)
    assert np.sqrt(1 + r * r) * 100 * np.sum(wt * integrand) <= c * (1 + 1e-3)
    with pytest.raises(DomainError):
        convolution_constant(3.0)


def test_free_case_is_plane_wave():
    g = BornEigenfunction(kappa=0.0).fit()
    K, X = random_kx(50, 1)
    assert np.allclose(g.born_eval(K, X), np.exp(1j * np.sum(K * X, 1)), atol=0, rtol=0)
    assert g.deviation_bound(X).max() == 0.0
    val, err = g.born_eval(K[0], X[0], return_error=True)
    assert err == 0.0 and val == np.exp(1j * K[0] @ X[0])


def test_margin_refused():
    g = BornEigenfunction(kappa=0.0).fit()
    with pytest.raises(ConvergenceError):
        BornEigenfunction(kappa=1.01 * g.kappa_max_).fit()
    with pytest.raises(DomainError):
        BornEigenfunction(kappa=-1.0).fit()


def test_deviation_bound_holds(gef):
    K, X = random_kx(300, 2)
    dev = np.abs(gef.born_eval(K, X) - np.exp(1j * np.sum(K * X, 1)))
    assert np.all(dev <= gef.deviation_bound(X))
    assert np.all(dev <= deviation_bound(gef, X))


def test_deviation_bound_monotone(gef):
    r = np.linspace(0, 20, 50)
    b = gef.deviation_bound(np.stack([r, 0 * r, 0 * r], 1))
    assert np.all(np.diff(b) < 0)


def test_layers_decay_geometrically(gef):
    K, X = random_kx(200, 3)
    layers, _ = gef.born_layers(K, X)
    sup = np.abs(layers).max(axis=1)
    assert sup[0] == pytest.approx(1.0)
    for n in range(1, len(sup)):
        assert sup[n] <= gef.margin_**n * sup[0] * 1.5


def test_uniformly_bounded(gef):
    K, X = random_kx(300, 4)
    bound = 1 + gef.deviation_bound(np.zeros(3))
    assert np.abs(gef.born_eval(K, X)).max() <= bound


def test_born_matches_grid_solver(half_margin):
    # MC Born series vs the second-order grid Born iterate at the grid centre
    gef = BornEigenfunction(kappa=half_margin, quadrature=QuadratureSpec(mc_samples=16384)).fit()
    grid = GridEigenfunctions(half_margin, default_w(), 48, 0.25)
    k = np.array([0.5, -0.2, 0.3])
    psi = grid.solve_fft(k, born_order=2)
    j = grid.n // 2
    center = (j * grid.n + j) * grid.n + j
    ref = psi.reshape(-1)[center]
    val, err = gef.born_eval(k, np.zeros(3), return_error=True)
    layers, se = gef.born_layers(k, np.zeros(3))
    # the 12^3 box truncates the y-integral: its tail is O(1/L) of layer 1
    assert abs(val - ref) < 0.1 * abs(layers[1, 0]) + 4 * se.sum()


def test_crn_determinism(half_margin):
    K, X = random_kx(20, 5)
    q = QuadratureSpec(mc_samples=4096, seed=9)
    a = BornEigenfunction(kappa=half_margin, quadrature=q).fit().born_eval(K, X)
    g = BornEigenfunction(kappa=half_margin, quadrature=q).fit()
    assert np.array_equal(a, g.born_eval(K, X))
    # scheduling independent: one point at a time, in reverse, agrees to rounding
    b = np.array([g.born_eval(k, x) for k, x in zip(K[::-1], X[::-1])])[::-1]
    assert np.max(np.abs(a - b)) < 1e-15
    c = BornEigenfunction(kappa=half_margin, quadrature=QuadratureSpec(mc_samples=4096, seed=10)).fit()
    assert not np.array_equal(a, c.born_eval(K, X))


def test_psi_matrix_matches_paired(gef):
    K, X = random_kx(6, 6)
    M = gef.psi_matrix(K, X[:4])
    for i in range(6):
        for j in range(4):
            assert M[i, j] == pytest.approx(gef.born_eval(K[i], X[j]), abs=1e-12)


def test_mc_tolerance(half_margin):
    q = QuadratureSpec(mc_samples=1024)
    g = BornEigenfunction(kappa=half_margin, quadrature=q, mc_tolerance=1e-6).fit()
    with pytest.raises(ConvergenceError):
        g.born_eval(np.array([1.0, 0, 0]), np.zeros(3))
    loose = BornEigenfunction(kappa=half_margin, quadrature=q, mc_tolerance=0.05).fit()
    _, err = loose.born_eval(np.array([1.0, 0, 0]), np.zeros(3), return_error=True)
    assert err <= 0.05 + loose.tail_bound(np.zeros(3))


def test_zero_wavevector_allowed(gef):
    v = gef.born_eval(np.zeros(3), np.array([0.5, 0.0, 0.0]))
    assert np.isfinite(v) and abs(v - 1) <= gef.deviation_bound(np.array([0.5, 0, 0]))


def test_cache_roundtrip(tmp_path, half_margin):
    q = QuadratureSpec(mc_samples=2048)
    g = BornEigenfunction(kappa=half_margin, quadrature=q, cache_resolution=0.25).fit()
    rng = np.random.default_rng(0)
    for _ in range(5):
        g.born_eval_cached(rng.normal(size=3), rng.normal(size=3))
    path = tmp_path / "psi.bin"
    g.save_cache(path)
    h = BornEigenfunction(kappa=half_margin, quadrature=q, cache_resolution=0.25).fit()
    header = h.load_cache(path)
    assert header["version"] == 1
    assert h._cache == g._cache
    other = BornEigenfunction(kappa=0.5 * half_margin, quadrature=q, cache_resolution=0.25).fit()
    with pytest.raises(DomainError):
        other.load_cache(path)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage!" + path.read_bytes()[8:])
    with pytest.raises(DomainError):
        h.load_cache(bad)


def test_cache_lookup_is_lattice_representative(half_margin):
    g = BornEigenfunction(kappa=half_margin, quadrature=QuadratureSpec(mc_samples=2048),
                          cache_resolution=0.5).fit()
    a = g.born_eval_cached(np.array([0.0, 0.0, 1.02]), np.array([0.01, 0.0, 0.0]))
    b = g.born_eval_cached(np.array([0.0, 0.01, 0.98]), np.array([-0.02, 0.0, 0.0]))
    assert a == b and len(g._cache) == 1
    assert a == g.born_eval(np.array([0.0, 0.0, 1.0]), np.zeros(3))


# -- grid solver ------------------------------------------------------------------


def test_lattice_coulomb_constant():
    # int g/r - sum'_n g(n)/|n| for a gaussian window g of width s tends to the constant as
    # O(1/s^2) (the |n| term of the window is not smooth at 0); one Richardson step
    m = np.arange(-75, 76)
    r = np.sqrt(m[:, None, None] ** 2 + m[None, :, None] ** 2 + m[None, None, :] ** 2).ravel()
    r = r[r > 0]

    def gap(s):
        return 4 * np.pi * s**2 - np.sum(np.exp(-(r**2) / (2 * s**2)) / r)

    assert (4 * gap(12.0) - gap(6.0)) / 3 == pytest.approx(LATTICE_COULOMB, rel=1e-5)


def test_dense_and_fft_agree(half_margin):
    grid = GridEigenfunctions(half_margin, default_w(), 8, 0.5)
    k = np.array([0.4, 0.1, -0.3])
    dense = grid.solve_dense(k)[0]
    fft = grid.solve_fft(k).reshape(-1)
    assert np.max(np.abs(dense - fft)) < 1e-10
    born2 = grid.solve_dense(k, born_order=2)[0]
    assert np.max(np.abs(born2 - grid.solve_fft(k, born_order=2).reshape(-1))) < 1e-12


def test_residual_second_order(half_margin):
    k = np.array([0.6, -0.3, 0.5])
    L = 6.4
    errs = []
    for n in (16, 32, 64):
        res, ax = eigen_residual(half_margin, default_w(), k, n, L / n)
        # probe set: interior points at multiples of 0.8 with |x| <= 1.6
        q = ax / 0.8
        sel = np.nonzero((np.abs(q - np.round(q)) < 1e-6) & (np.abs(ax) <= 1.6 + 1e-9))[0]
        assert sel.size == 5
        errs.append(np.abs(res[np.ix_(sel, sel, sel)]).max())
    assert errs[0] > errs[1] > errs[2]
    order = np.log2(errs[1] / errs[2])
    assert 1.7 <= order <= 2.5


def test_gft_free_matches_fft():
    n, h = 10, 0.5
    gft = GeneralizedFourierTransform(kappa=0.0, n=n, h=h).fit()
    rng = np.random.default_rng(1)
    f = np.zeros((n,) * 3, complex)
    f[2:-2, 2:-2, 2:-2] = rng.normal(size=(n - 4,) * 3) + 1j * rng.normal(size=(n - 4,) * 3)
    F = gft.transform(f)
    pad = np.zeros((2 * n,) * 3, complex)
    pad[:n, :n, :n] = f
    m = np.arange(2 * n) - n
    D = np.fft.fftn(pad)[np.ix_(m % (2 * n), m % (2 * n), m % (2 * n))]
    ph = np.exp(1j * np.pi * m * (n // 2) / n)
    oracle = (2 * np.pi) ** -1.5 * h**3 * D * ph[:, None, None] * ph[None, :, None] * ph[None, None, :]
    assert np.max(np.abs(F - oracle)) < 1e-12 * np.max(np.abs(oracle))
    back = gft.inverse_transform(F)
    assert np.max(np.abs(back - f)) < 1e-12
    assert gft.l2_momentum(F) == pytest.approx(gft.l2_position(f), rel=1e-12)


def test_gft_boundary_warning():
    gft = GeneralizedFourierTransform(kappa=0.0, n=6, h=0.5).fit()
    with pytest.warns(RuntimeWarning):
        gft.transform(np.ones((6, 6, 6)))
    with pytest.raises(DomainError):
        gft.transform(np.ones(7))


def gaussian_field(gft, center=(0.3, 0.0, -0.2), width=1.0):
    X = gft.grid_.points
    return np.exp(-np.sum((X - np.asarray(center)) ** 2, 1) / (2 * width**2)).reshape((gft.n,) * 3)


def roundtrip_error(gft, f):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        back = gft.inverse_transform(gft.transform(f))
    return np.linalg.norm(back - f) / np.linalg.norm(f)


def test_gft_roundtrip_converges(half_margin):
    errs = []
    for n, h in ((10, 0.8), (12, 0.6)):
        gft = GeneralizedFourierTransform(kappa=half_margin, n=n, h=h).fit()
        errs.append(roundtrip_error(gft, gaussian_field(gft)))
    assert errs[1] < 0.5 * errs[0] and errs[1] < 1e-2


def test_unitarity_defect_decreases(half_margin):
    coarse = GeneralizedFourierTransform(kappa=half_margin, n=10, h=0.8).fit().unitarity_defect()
    fine = GeneralizedFourierTransform(kappa=half_margin, n=12, h=0.6).fit().unitarity_defect()
    assert fine < coarse <= 1e-2


def test_periodic_operator_function():
    op = PeriodicGridOperator(0.0, default_w(), 8, 0.5, pad=2)
    u = np.random.default_rng(0).normal(size=op.N**3)
    sq = op.function_apply(op.function_apply(u, np.sqrt, 200), np.sqrt, 200)
    assert np.linalg.norm(sq - op.apply(u)) < 1e-8 * np.linalg.norm(op.apply(u))


def test_intertwining(half_margin):
    gft = GeneralizedFourierTransform(kappa=0.5 * half_margin, n=12, h=0.6).fit()
    assert intertwining_defect(gft) < 1e-2


# -- rho_x --------------------------------------------------------------------------


def test_rho_x_free_sharp_is_translated_chi_check():
    c = CutoffProfile("sharp", 2.0)
    grid = GridEigenfunctions(0.0, default_w(), 10, 0.4)
    x = grid.points[np.argmin(np.linalg.norm(grid.points - [0.4, 0, -0.4], axis=1))]
    r = rho_x(grid, c, x)
    ref = c.chi_check(np.linalg.norm(grid.points - x, axis=1)).reshape(grid.shape)
    assert np.max(np.abs(r - ref)) < 1e-10 * np.max(np.abs(ref))


def test_rho_x_free_total_mass():
    c = CutoffProfile("gaussian", 1.5)
    grid = GridEigenfunctions(0.0, default_w(), 14, 0.5)
    x = grid.points[np.argmin(np.linalg.norm(grid.points - [0.5, 0, 0], axis=1))]
    total = grid.h**3 * rho_x(grid, c, x).sum()
    # (2 pi)^{3/2} chi(0) is the unit mass of chi_check
    assert total.real == pytest.approx(c.chi_check_mass, abs=2e-3)
    assert abs(total.imag) < 1e-10


def test_rho_x_symmetry(half_margin):
    c = CutoffProfile("gaussian", 1.0)
    grid = GridEigenfunctions(half_margin, default_w(), 6, 0.6)
    rng = np.random.default_rng(3)
    idx = rng.choice(grid.points.shape[0], size=(3, 2), replace=False)
    for i, j in idx:
        ri = rho_x(grid, c, grid.points[i], radial_nodes=16, angular_nodes=50).reshape(-1)
        rj = rho_x(grid, c, grid.points[j], radial_nodes=16, angular_nodes=50).reshape(-1)
        assert ri[j] == pytest.approx(np.conj(rj[i]), abs=1e-12)
    with pytest.raises(DomainError):
        rho_x(grid, c, np.array([0.1, 0.0, 0.0]))


# -- distorted kernel -----------------------------------------------------------------


@pytest.fixture(scope="module")
def distorted_table(half_margin):
    g = BornEigenfunction(kappa=0.25 * half_margin, quadrature=QuadratureSpec(mc_samples=2048)).fit()
    return KernelTable(cutoff=CutoffProfile("gaussian", 1.0), gef=g, radius_max=2.0, n_radius=5,
                       n_cos=5, t_max=4.0, n_t=9, k_radial_nodes=12, audit_every=10**9).fit()


def test_distorted_kernel_close_to_plane_wave(distorted_table):
    g = distorted_table.gef
    kc = g.kappa * g.c0_estimate_
    # |W - W_N| <= kappa C0 (kappa C0 + 2) W0 from |Psi - e^{ikx}| <= kappa C0
    rng = np.random.default_rng(4)
    for _ in range(5):
        x, y = rng.uniform(-1, 1, (2, 3))
        t = rng.uniform(0.1, 3.0)
        gap = abs(w_eval(distorted_table, x, y, t) - w_n_eval(distorted_table.cutoff_, x, y, t))
        assert gap <= kc * (kc + 2) * w0_eval(distorted_table.cutoff_, t)


def test_distorted_kernel_diagonal_positive(distorted_table):
    for r in (0.0, 0.7, 1.5):
        x = np.array([0.0, 0.0, r])
        assert distorted_table.direct(x, x, 0.5) > 0


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.floats(0.1, 3.0))
def test_distorted_kernel_symmetric(distorted_table, xy, t):
    x, y = np.array(xy[:3]), np.array(xy[3:])
    assert distorted_table.direct(x, y, t) == pytest.approx(distorted_table.direct(y, x, t), abs=1e-12)


def test_variable_mass_profile_accepted():
    w = VariableMass(lambda y: 2.0 * japanese(y) ** -5.0, beta=5.0, bound_C=2.0)
    g = BornEigenfunction(kappa=0.1, w=w).fit()
    assert g.weight_sup_ == pytest.approx(2.0)
    assert born_eval(g, np.array([1.0, 0, 0]), np.zeros(3)) != 1.0
