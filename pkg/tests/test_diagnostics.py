import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nelsonir._errors import AssumptionRefused, ConvergenceError, DomainError, InvariantViolation
from nelsonir.diagnostics import (
    Estimate,
    ScanResult,
    TiltedEnsemble,
    beta_scan,
    born_weight,
    divergence_witness,
    expectation_exp_minus_betaN,
    fit_log_trend,
    gamma_estimate,
    gamma_from_ensemble,
    gamma_scan,
    gamma_upper_bound,
    horizon_tail,
    ir_regression,
    number_ceiling,
    number_expectation_mc,
    number_expectation_pullthrough,
    number_scan,
    psi0_overlap,
    schrodinger_positivity,
    second_order_shift,
    shift_window,
    stationary_characteristic,
    tilted_ensemble,
    truncated_fock_hamiltonian,
    witness_log_slope,
    witness_slope_target,
)
from nelsonir.kernels import CutoffProfile, KernelTable, chi_pair_expectation
from nelsonir.particle import GroundStateDiffusion, harmonic
from nelsonir.scattering import BornEigenfunction

GAUSS = CutoffProfile("gaussian", 1.0)
IR_REG = CutoffProfile("ir_regularized", 1.0, 0.1)


@pytest.fixture(scope="module")
def model():
    return GroundStateDiffusion(harmonic(), 6.0, 121).fit()


@pytest.fixture(scope="module")
def table():
    return KernelTable(GAUSS).fit()


@pytest.fixture(scope="module")
def ensemble(model, table):
    paths = model.sample(2.0, 0.05, seed=11, n_paths=300)
    return tilted_ensemble(table, paths, 0.5)


def synthetic_ensemble(logw, off, g=1.0):
    logw = np.asarray(logw, float)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    integrals = {"off_diagonal": np.asarray(off, float)}
    return TiltedEnsemble(None, g, integrals, logw, w, float(1 / np.sum(w**2)))


# -- tilted ensemble ------------------------------------------------------------


def test_ensemble_weights_normalised(ensemble):
    assert np.all(ensemble.weights >= 0)
    assert ensemble.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(ensemble.integrals["full"] > 0)
    assert ensemble.reliable and ensemble.ess > 290


def test_log_sum_exp_survives_huge_exponents(ensemble):
    huge = synthetic_ensemble(ensemble.log_weights * 1e5, ensemble.integrals["off_diagonal"])
    assert np.isfinite(huge.weights).all()
    assert huge.weights.sum() == pytest.approx(1.0)
    assert not huge.reliable and "ess_below_floor" in huge.flags


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=30), st.floats(-5, 5))
def test_snis_expectation_properties(logw, c):
    n = len(logw)
    off = np.linspace(0.0, 1.0, n)
    ens = synthetic_ensemble(logw, off)
    assert ens.expectation(np.full(n, c)).value == pytest.approx(c, abs=1e-12 * (1 + abs(c)))
    m = ens.expectation(off).value
    assert off.min() - 1e-12 <= m <= off.max() + 1e-12
    shifted = ens.expectation(off + c).value
    assert shifted == pytest.approx(m + c, abs=1e-10)


# -- gamma(T) ---------------------------------------------------------------------


def test_gamma_trivial_cases(model, table):
    assert tuple(gamma_estimate(model, table, 0.0, 3.0, 10, 0)) == (1.0, 0.0)
    assert tuple(gamma_estimate(model, table, 0.5, 0.0, 10, 0)) == (1.0, 0.0)
    with pytest.raises(DomainError):
        gamma_estimate(model, table, 0.5, 1.0, 1, 0)


def test_gamma_stderr_matches_seed_spread(model, table):
    est = [gamma_estimate(model, table, 0.5, 1.0, 200, seed) for seed in range(24)]
    vals = np.array([e.value for e in est])
    se = np.mean([e.stderr for e in est])
    assert 0.6 < vals.std(ddof=1) / se < 1.6


def test_gamma_below_upper_bound_and_bound_in_unit_interval(ensemble):
    gam = gamma_from_ensemble(ensemble)
    ub = gamma_upper_bound(ensemble, gam)
    assert np.all(ensemble.integrals["off_diagonal"] >= 0)
    assert 0 < ub.value <= 1
    assert gam.value <= ub.value + 3 * math.hypot(gam.stderr, ub.stderr)
    assert gamma_upper_bound(synthetic_ensemble([0, 0], [1, 2], g=0.0)).value == 1.0


def test_upper_bound_violation_raises(ensemble):
    ub = gamma_upper_bound(ensemble)
    with pytest.raises(InvariantViolation):
        gamma_upper_bound(ensemble, Estimate(ub.value + 1.0, 1e-6))


def test_gamma_decreases_for_ir_singular_cutoff(model, table):
    scan = gamma_scan(model, table, 0.5, [1.0, 2.0, 4.0, 8.0], 300, 5)
    assert np.all(np.diff(scan.estimates) < 0)
    assert fit_log_trend(scan.axis, scan).decreasing_at_3sigma
    ub = scan.extra["upper_bound"]
    assert np.all(np.diff(ub) + 3 * np.hypot(scan.extra["upper_bound_stderr"][1:],
                                             scan.extra["upper_bound_stderr"][:-1]) < 0)
    assert np.all(scan.estimates <= ub + 3 * np.hypot(scan.stderr, scan.extra["upper_bound_stderr"]))


def test_gamma_plateau_for_ir_regular_cutoff(model):
    cut = CutoffProfile("ir_regularized", 4.0, 2.0)
    tab = KernelTable(cut, n_r=641).fit()
    scan = gamma_scan(model, tab, 0.5, [1.0, 2.0, 4.0, 8.0], 1000, 7)
    gap = abs(scan.estimates[3] - scan.estimates[2])
    assert gap < 3 * math.hypot(scan.stderr[3], scan.stderr[2])
    assert np.all(scan.estimates > 0.99)


def test_estimators_invariant_under_time_shift(model, table):
    T = 1.0
    long = model.sample(2.0, 0.05, seed=21, n_paths=400)
    base = gamma_from_ensemble(tilted_ensemble(table, model.sample(T, 0.05, seed=22, n_paths=400), 0.5))
    for shift in (-1.0, 0.5, 1.0):
        ens = tilted_ensemble(table, shift_window(long, shift, T), 0.5)
        est = gamma_from_ensemble(ens)
        assert abs(est.value - base.value) < 3 * math.hypot(est.stderr, base.stderr)
    with pytest.raises(DomainError):
        shift_window(long, 1.5, T)


# -- divergence witness -------------------------------------------------------


def test_witness_refuses_non_gaussian_cutoff():
    with pytest.raises(AssumptionRefused, match="chi_check"):
        divergence_witness(CutoffProfile("sharp", 1.0), 10.0, 0.6)
    with pytest.raises(DomainError):
        divergence_witness(GAUSS, 10.0, 1.2)


def test_witness_kappa_zero_is_pure_log_expression():
    T, lam = 50.0, 0.6
    a = 8 * T ** (2 * lam)
    ref = chi_pair_expectation(GAUSS, lambda s: np.log((a + s**2 + T**2) / (a + 2 * s**2))) / (4 * np.pi**2)
    assert divergence_witness(GAUSS, T, lam) == ref


def test_witness_baseline_matches_sampled_oracle():
    rng = np.random.default_rng(4)
    n = 400_000
    X = rng.normal(size=(n, 3))
    Y = rng.normal(size=(n, 3))
    s2 = np.sum((X + Y) ** 2, axis=1)
    T, lam = 1.0, 0.55
    a = 8 * T ** (2 * lam)
    vals = np.log((a + s2 + T**2) / (a + 2 * s2)) / (4 * np.pi**2)
    got = divergence_witness(GAUSS, T, lam)
    assert abs(got - vals.mean()) < 4 * vals.std() / math.sqrt(n)


@pytest.mark.parametrize("kappa", [0.0, 0.05])
def test_witness_log_slope(kappa):
    gef = BornEigenfunction(kappa=kappa).fit() if kappa else None
    c = born_weight(gef)
    slope, rho = witness_log_slope(GAUSS, [1e2, 1e3, 1e4], 0.55, gef)
    assert np.all(np.diff(rho) > 0)
    assert abs(slope / witness_slope_target(0.55, c) - 1) < 0.15


# -- e^{-beta N} and <N> -------------------------------------------------------------


def test_exp_minus_beta_n(ensemble):
    assert expectation_exp_minus_betaN(ensemble, 0.0).value == 1.0
    zero = synthetic_ensemble(ensemble.log_weights, ensemble.integrals["off_diagonal"], g=0.0)
    for b in (0.0, 0.5, 3.0):
        assert expectation_exp_minus_betaN(zero, b).value == 1.0
    assert np.all(ensemble.integrals["off_diagonal"] >= 0)
    scan = beta_scan(ensemble, [0.0, 0.25, 0.5, 1.0, 2.0, 4.0])
    assert np.all(np.diff(scan.estimates) < 0)


def test_number_is_analytic_beta_derivative(ensemble):
    h = 1e-6
    fd = (1.0 - expectation_exp_minus_betaN(ensemble, h).value) / h
    assert number_expectation_mc(ensemble).value == pytest.approx(fd, rel=1e-4)


def test_number_trivial_and_ceiling(ensemble):
    zero = synthetic_ensemble(ensemble.log_weights, ensemble.integrals["off_diagonal"], g=0.0)
    assert number_expectation_mc(zero).value == 0.0
    fake = synthetic_ensemble([0.0, 0.0], [10.0, 10.0], g=1.0)
    with pytest.raises(InvariantViolation, match="ceiling"):
        number_expectation_mc(fake, IR_REG)
    assert number_ceiling(GAUSS, 0.5) == math.inf


def test_stationary_characteristic_harmonic(model):
    k = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.3, -0.4, 1.0]])
    # exp(-|k|^2/2) up to the O(h^2) grid error in the variance of phi^2
    np.testing.assert_allclose(stationary_characteristic(model, k),
                               np.exp(-0.5 * np.sum(k**2, axis=1)), rtol=2e-3)


def test_horizon_tail_makes_number_horizon_free(model):
    tab = KernelTable(IR_REG).fit()
    vals = []
    for T in (2.0, 4.0):
        ens = tilted_ensemble(tab, model.sample(T, 0.05, seed=8, n_paths=200), 0.3)
        vals.append(number_expectation_mc(ens, IR_REG, horizon_tail(model, IR_REG, T)).value)
    assert vals[1] == pytest.approx(vals[0], rel=0.01)
    assert horizon_tail(model, IR_REG, 4.0) > horizon_tail(model, IR_REG, 8.0) > 0


def test_ir_scan_is_affine_in_log_sigma(model, tmp_path):
    cuts = [CutoffProfile("ir_regularized", 1.0, s) for s in (1e-1, 1e-2, 1e-3, 1e-4)]
    scan = number_scan(model, cuts, 0.5, 2.0, 200, 3)
    assert np.all(scan.estimates <= scan.extra["ceiling"])
    slope, _, r2 = ir_regression(scan)
    assert r2 >= 0.95
    # leading log coefficient (g^2/2) 4 pi chi(0)^2 = (g^2/2) / (2 pi^2)
    assert slope == pytest.approx(0.125 / (2 * np.pi**2), rel=0.02)
    out = tmp_path / "ir.csv"
    scan.write_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# gnuplot")
    assert lines[1].split(",")[:5] == ["sigma", "estimate", "stderr", "ess", "flags"]
    assert len(lines) == 6


def test_scan_result_invariants():
    with pytest.raises(InvariantViolation):
        ScanResult("T", [1, 2, 2], [1, 1, 1], [0, 0, 0], [1, 1, 1], [(), (), ()])
    with pytest.raises(InvariantViolation):
        ScanResult("T", [1, 2], [1, 1], [0, np.nan], [1, 1], [(), ()])


# -- truncated Fock space ----------------------------------------------------


def test_fock_decoupled_spectrum(model):
    sp = truncated_fock_hamiltonian(model, None, IR_REG, 0.0)
    assert sp.ground_energy == pytest.approx(0.0, abs=1e-12)
    sums = sorted(e + sum(n * w for n, w in zip(o, sp.mode_omega))
                  for e in sp.particle_energies for o in sp.occupations)
    np.testing.assert_allclose(sp.energies, sums, atol=1e-10)
    # harmonic ladder up to the O(h^2) grid shift (h = 0.1)
    np.testing.assert_allclose(sp.particle_energies[:4], [0, 1, 2, 3], atol=1e-2)
    assert number_expectation_pullthrough(sp) == 0.0


def test_fock_second_order_shift(model):
    g = 0.05
    sp = truncated_fock_hamiltonian(model, None, IR_REG, g)
    e2 = second_order_shift(sp)
    assert e2 < 0
    assert sp.ground_energy / g**2 == pytest.approx(e2, rel=0.10)


def test_fock_ground_state_positive(model):
    sp = truncated_fock_hamiltonian(model, None, IR_REG, 0.3)
    assert schrodinger_positivity(sp) > 0
    assert np.allclose(sp.hamiltonian, sp.hamiltonian.T)


def test_pullthrough_matches_direct_count_and_resolvent_bound(model):
    g = 0.3
    sp = truncated_fock_hamiltonian(model, None, IR_REG, g)
    pt = number_expectation_pullthrough(sp)
    assert pt == pytest.approx(sp.number_direct(), rel=1e-4)
    # resolvent norm bound per mode: g^2 c_j^2 sup|f_j|^2 / omega_j^2
    assert pt <= np.sum(g**2 * sp.mode_coupling**2 / sp.mode_omega**2)
    with pytest.raises(ConvergenceError):
        number_expectation_pullthrough(sp, gap_threshold=10.0)


def test_pullthrough_agrees_with_mc(model):
    g = 0.3
    sp = truncated_fock_hamiltonian(model, None, IR_REG, g)
    tab = KernelTable(IR_REG).fit()
    T = 4.0
    ens = tilted_ensemble(tab, model.sample(T, 0.05, seed=2, n_paths=200), g)
    mc = number_expectation_mc(ens, IR_REG, horizon_tail(model, IR_REG, T)).value
    assert number_expectation_pullthrough(sp) == pytest.approx(mc, rel=0.25)


def test_fock_validation(model):
    with pytest.raises(DomainError):
        truncated_fock_hamiltonian(model, None, IR_REG, 0.1, n_modes=3)
    with pytest.raises(DomainError):
        truncated_fock_hamiltonian(model, None, IR_REG, 0.1, n_max=5)


def test_psi0_overlap(model):
    sp = truncated_fock_hamiltonian(model, None, IR_REG, 0.3)
    assert psi0_overlap(sp) == 1.0
    gef = BornEigenfunction(kappa=0.1).fit()
    val = psi0_overlap(sp, gef, n_quad=8)
    assert abs(val - 1.0) <= 0.1 * gef.c0_estimate_
    assert val != 1.0
