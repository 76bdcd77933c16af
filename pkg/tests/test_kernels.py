import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from nelsonir._errors import AssumptionRefused, DomainError, InvariantViolation
from nelsonir.kernels import (
    CutoffProfile,
    KernelTable,
    arctan_bound_constant,
    double_path_integral_W,
    double_path_integrals,
    trapezoid_weights,
    ir_integral,
    massive_propagator_kernel,
    massless_propagator_kernel,
    time_integral_one_sided,
    time_integral_two_sided,
    w0_eval,
    w0_full_integral,
    w0_offdiag_integral,
    w0_offdiag_position_form,
    w_eval,
    w_n_convolution_form,
    w_n_eval,
    w_n_radial,
    w_n_sharp_diagonal,
)

GAUSS = CutoffProfile("gaussian", 1.0)
SHARP = CutoffProfile("sharp", 1.0)


def one_sided_oracle(omega, T):
    val, _ = integrate.dblquad(
        lambda t, s: np.exp(-(t - s) * omega), -T, 0.0, 0.0, T, epsabs=1e-13, epsrel=1e-12
    )
    return val


def two_sided_oracle(omega, T):
    # split the inner integral at the kink t = s
    def inner(s):
        lo, _ = integrate.quad(lambda t: np.exp(-(s - t) * omega), -T, s, epsabs=1e-14)
        hi, _ = integrate.quad(lambda t: np.exp(-(t - s) * omega), s, T, epsabs=1e-14)
        return lo + hi

    val, _ = integrate.quad(inner, -T, T, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


@pytest.mark.parametrize("omega", [0.1, 1.0, 10.0])
@pytest.mark.parametrize("T", [0.1, 1.0, 10.0])
def test_time_integrals_match_2d_quadrature(omega, T):
    assert time_integral_one_sided(omega, T) == pytest.approx(one_sided_oracle(omega, T), abs=1e-8)
    assert time_integral_two_sided(omega, T) == pytest.approx(two_sided_oracle(omega, T), abs=1e-8)


def test_time_integral_reference_values():
    assert time_integral_one_sided(1.0, 1.0) == pytest.approx(0.399576, abs=1e-6)
    assert time_integral_two_sided(1.0, 1.0) == pytest.approx(2.270671, abs=1e-6)
    assert time_integral_one_sided(2.0, 0.0) == 0.0
    assert time_integral_two_sided(2.0, 0.0) == 0.0
    assert time_integral_one_sided(2.0, 1e3) == pytest.approx(0.25)


def test_time_integrals_reject_nonpositive_omega():
    with pytest.raises(DomainError):
        time_integral_one_sided(0.0, 1.0)
    with pytest.raises(DomainError):
        time_integral_two_sided(-1.0, 1.0)


@given(omega=st.floats(1e-2, 50.0), T=st.floats(0.0, 50.0))
def test_two_sided_grows_with_slope_4_over_omega(omega, T):
    v = time_integral_two_sided(omega, T)
    assert 0.0 <= v <= 4.0 * T / omega + 1e-12
    assert 0.0 <= time_integral_one_sided(omega, T) <= 1.0 / omega**2 + 1e-15


def test_w0_sharp_closed_form():
    t = np.array([0.0, 1e-5, 0.1, 1.0, 3.0, 30.0])
    np.testing.assert_allclose(w0_eval(SHARP, t), w_n_sharp_diagonal(1.0, t), rtol=1e-10)
    assert w0_eval(SHARP, 0.0) == pytest.approx(1.0 / (8.0 * np.pi**2), rel=1e-12)


def test_w0_is_diagonal_of_w_n_and_decays():
    t = np.linspace(0.0, 50.0, 101)
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(w_n_eval(GAUSS, x, x, t), w0_eval(GAUSS, t), rtol=1e-13)
    assert np.all(np.diff(w0_eval(GAUSS, t)) < 0)


def test_w_n_matches_position_space_convolution():
    rng = np.random.default_rng(7)
    for _ in range(10):
        x, y = rng.normal(size=(2, 3))
        t = rng.uniform(0.05, 3.0)
        assert w_n_eval(GAUSS, x, y, t) == pytest.approx(
            w_n_convolution_form(GAUSS, x, y, t), rel=1e-4
        )


def test_w_n_matches_fft_of_momentum_symbol():
    # discrete Fourier sum of chi^2/(2 omega) e^{-t omega} on a periodic k-lattice;
    # the 1/k cusp leaves an O(dk) defect, so compare on the scale of W0(t)
    n, dk = 160, 0.08
    k1 = (np.arange(n) - n // 2) * dk
    kx, ky, kz = np.meshgrid(k1, k1, k1, indexing="ij")
    kk = np.sqrt(kx**2 + ky**2 + kz**2)
    t = 0.5
    kk[kk == 0] = np.inf
    sym = GAUSS.chi(kk) ** 2 / (2.0 * kk) * np.exp(-t * kk)
    # k = 0 cell: average of 1/|k| over the cube is 2.380077... / dk
    sym[~np.isfinite(kk)] = GAUSS.chi0**2 / 2.0 * 2.380077363979557 / dk
    field = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(sym))).real * sym.size * dk**3
    dx = 2.0 * np.pi / (n * dk)
    for i in (1, 4, 8):
        r = i * dx
        assert field[n // 2 + i, n // 2, n // 2] == pytest.approx(
            w_n_radial(GAUSS, r, t), abs=1e-3 * w0_eval(GAUSS, t)
        )


def test_w0_offdiag_closed_forms_agree():
    for T in (0.1, 1.0, 7.0, 1e3):
        ks = w0_offdiag_integral(GAUSS, T)
        lp, ap = w0_offdiag_position_form(GAUSS, T)
        assert lp + ap == pytest.approx(ks, rel=1e-6)
        # direct 2-D time quadrature of W0(|t - s|) after reduction to a single lag integral
        direct, _ = integrate.quad(
            lambda u: w0_eval(GAUSS, u) * min(u, 2 * T - u), 0.0, 2 * T, limit=400
        )
        assert ks == pytest.approx(direct, rel=1e-6)


def test_w0_full_integral_matches_lag_quadrature():
    T = 2.0
    direct, _ = integrate.quad(lambda u: 2.0 * w0_eval(GAUSS, u) * (2 * T - u), 0.0, 2 * T)
    assert w0_full_integral(GAUSS, T) == pytest.approx(direct, rel=1e-8)


def test_arctan_constant_refuses_sharp_and_is_bounded():
    with pytest.raises(AssumptionRefused):
        w0_offdiag_position_form(SHARP, 1.0)
    K = arctan_bound_constant(GAUSS)
    assert 0.0 < K <= 1.0 / (4.0 * np.pi**2) + 1e-9


def hankel_oracle(r, t):
    val, _ = integrate.quad(
        lambda k: k * np.exp(-t * k), 0.0, 60.0 / t, weight="sin", wvar=r,
        epsabs=1e-14, limit=400,
    )
    return val / (2.0 * np.pi**2 * r)


@pytest.mark.parametrize("r,t", [(1.0, 1.0), (2.0, 0.5), (0.5, 2.0), (3.0, 0.1)])
def test_massless_kernel_matches_hankel_inversion(r, t):
    assert massless_propagator_kernel(r, t) == pytest.approx(hankel_oracle(r, t), abs=1e-5, rel=1e-6)


@pytest.mark.parametrize("t", [0.1, 1.0, 5.0])
def test_massless_kernel_has_unit_mass(t):
    mass, _ = integrate.quad(
        lambda r: 4 * np.pi * r**2 * massless_propagator_kernel(r, t), 0, np.inf, limit=400
    )
    assert mass == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("t,m", [(0.5, 1.0), (1.0, 0.3), (2.0, 2.0)])
def test_massive_kernel_mass_and_limit(t, m):
    mass, _ = integrate.quad(
        lambda r: 4 * np.pi * r**2 * massive_propagator_kernel(r, t, m), 0, np.inf, limit=400
    )
    assert mass == pytest.approx(np.exp(-t * m), abs=1e-4)


def test_massive_to_massless_limit_and_parity():
    r = np.array([0.0, 0.5, 1.0, 3.0, 7.0])
    for t in (0.3, 1.0, 2.0):
        a = massive_propagator_kernel(r, t, 1e-4)
        b = massless_propagator_kernel(r, t)
        assert np.max(np.abs(a / b - 1)) < 1e-3
        np.testing.assert_array_equal(massive_propagator_kernel(-r, t, 0.5),
                                      massive_propagator_kernel(r, t, 0.5))


def test_ir_integral_values():
    res = ir_integral(CutoffProfile("ir_regularized", 1.0, np.exp(-1.0)))
    assert not res.divergent
    assert res.value == pytest.approx(1.0 / (2.0 * np.pi**2), rel=1e-10)
    assert ir_integral(GAUSS).divergent and ir_integral(SHARP).divergent
    vals = [ir_integral(CutoffProfile("ir_regularized", 1.0, s)).value for s in (1e-1, 1e-2, 1e-3)]
    assert vals[0] < vals[1] < vals[2]


def test_cutoff_validation_and_chi_check():
    with pytest.raises(DomainError):
        CutoffProfile("box", 1.0)
    with pytest.raises(DomainError):
        CutoffProfile("ir_regularized", 1.0, 2.0)
    with pytest.raises(DomainError):
        CutoffProfile("gaussian", 1.0, 0.1)
    # chi_check integrates to (2 pi)^{3/2} chi(0) = 1
    mass, _ = integrate.quad(lambda r: 4 * np.pi * r**2 * GAUSS.chi_check(r), 0, 30)
    assert mass == pytest.approx(1.0, rel=1e-10)
    assert GAUSS.chi_check_nonnegative and not SHARP.chi_check_nonnegative
    assert np.min(SHARP.chi_check(np.linspace(0, 20, 400))) < 0


@settings(deadline=None, max_examples=30)
@given(
    x=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    y=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    t=st.floats(0.0, 10.0),
)
def test_w_n_symmetric_and_bounded_by_diagonal(x, y, t):
    x, y = np.array(x), np.array(y)
    a = w_n_eval(GAUSS, x, y, t)
    assert a == pytest.approx(w_n_eval(GAUSS, y, x, t), abs=1e-15)
    assert abs(a) <= w0_eval(GAUSS, t) * (1 + 1e-12)


def test_kernel_table_plane_wave_accuracy_and_audit():
    tab = KernelTable(GAUSS, audit_every=100).fit()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(500, 3))
    y = rng.normal(size=(500, 3))
    t = rng.uniform(0, 25, 500)  # some beyond t_max fall back to quadrature
    got = w_eval(tab, x, y, t)
    np.testing.assert_allclose(got, w_n_eval(GAUSS, x, y, t), atol=1e-6)
    assert tab.n_audits_ >= 4 and tab.max_audit_error_ < 1e-6
    assert tab.n_out_of_range_ > 0


def test_kernel_table_audit_raises_on_budget_violation():
    tab = KernelTable(GAUSS, n_r=9, n_t=6, error_budget=1e-12, audit_every=1).fit()
    with pytest.raises(InvariantViolation):
        tab(np.zeros(3), np.array([0.0, 0.0, 0.37]), 0.41)


def test_kernel_table_export(tmp_path):
    tab = KernelTable(GAUSS).fit()
    f = tmp_path / "slices.csv"
    tab.export_slices(f, [0.0, 1.0], [0.0, 1.0])
    lines = f.read_text().splitlines()
    assert lines[0].startswith("#") and lines[1] == "r,t,W,W_N,W0" and len(lines) == 6


def fake_path(T, dt, rng, n=3):
    times = np.linspace(-T, T, int(round(2 * T / dt)) + 1)
    pos = np.cumsum(rng.normal(scale=np.sqrt(dt), size=(n, times.size, 3)), axis=1) * 0.3
    return types.SimpleNamespace(times=times, positions=pos)


def test_double_path_integral_regions():
    tab = KernelTable(GAUSS).fit()
    rng = np.random.default_rng(0)
    T = 2.0
    path = fake_path(T, 0.05, rng)
    full = double_path_integral_W(tab, path, "full")
    off = double_path_integral_W(tab, path, "off_diagonal")
    assert np.all(full > 0)
    assert np.all(np.abs(off) <= 0.5 * T * GAUSS.norm_chi_over_omega_sq())
    # a constant path reproduces the time double integral of W0
    const = types.SimpleNamespace(times=path.times, positions=np.zeros((1, path.times.size, 3)))
    assert double_path_integral_W(tab, const, "off_diagonal")[0] == pytest.approx(
        w0_offdiag_integral(GAUSS, T), rel=1e-3
    )
    zero = types.SimpleNamespace(times=np.array([0.0]), positions=np.zeros((2, 1, 3)))
    np.testing.assert_array_equal(double_path_integral_W(tab, zero, "full"), 0.0)
    with pytest.raises(DomainError):
        double_path_integral_W(tab, path, "diagonal")


def test_lag_sums_match_dense_pair_matrix():
    tab = KernelTable(GAUSS, audit_every=100).fit()
    rng = np.random.default_rng(3)
    T, dt = 1.5, 0.05
    path = fake_path(T, dt, rng, n=2)
    got = double_path_integrals(tab, path, ("full", "off_diagonal", "forward", "backward"))
    n_t = path.times.size
    zero = n_t // 2
    full_w = trapezoid_weights(n_t, dt)
    half = np.zeros(n_t)
    half[: zero + 1] = trapezoid_weights(zero + 1, dt)
    upper = half[::-1]
    for p in range(2):
        X = path.positions[p]
        r = np.linalg.norm(X[:, None] - X[None], axis=-1)
        lag = np.abs(path.times[:, None] - path.times[None])
        W = w_n_radial(GAUSS, r, lag)
        assert got["full"][p] == pytest.approx(full_w @ W @ full_w, rel=1e-6)
        assert got["off_diagonal"][p] == pytest.approx(half @ W @ upper, rel=1e-6)
        assert got["forward"][p] == pytest.approx(upper @ W @ upper, rel=1e-6)
        assert got["backward"][p] == pytest.approx(half @ W @ half, rel=1e-6)
    assert tab.n_audits_ > 0
    decomposed = got["forward"] + got["backward"] + 2 * got["off_diagonal"]
    np.testing.assert_allclose(got["full"], decomposed, rtol=1e-12)
