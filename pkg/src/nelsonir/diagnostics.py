"""Estimators for gamma(T), tilted-measure moments, boson numbers and infrared scans.

The tilted path measure ``mu_T`` is realised by self-normalised importance sampling
from the stationary ground-state diffusion: path ``i`` carries the log-weight
``(g^2/2) int int_{[-T,T]^2} W``. All exponential moments go through log-sum-exp.
"""

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from ._errors import AssumptionRefused, ConvergenceError, DomainError, InvariantViolation
from .kernels import (
    CutoffProfile,
    KernelTable,
    arctan_bound_constant,
    chi_pair_expectation,
    double_path_integrals,
    ir_integral,
)
from .quadrature import gauss_legendre, sphere_rule

REGIONS = ("full", "off_diagonal", "forward", "backward")
ESS_FLOOR = 100.0


# ---------------------------------------------------------------------------
# results


@dataclass
class Estimate:
    """Monte Carlo value with its standard error; unpacks as ``(value, stderr)``."""

    value: float
    stderr: float
    ess: float = math.nan
    flags: tuple = ()

    def __iter__(self):
        return iter((self.value, self.stderr))


@dataclass
class ScanResult:
    """Estimates along a monotone axis (``T``, ``sigma`` or ``beta``)."""

    axis_name: str
    axis: np.ndarray
    estimates: np.ndarray
    stderr: np.ndarray
    ess: np.ndarray
    flags: list
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        self.estimates = np.asarray(self.estimates, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        self.ess = np.asarray(self.ess, dtype=float)
        d = np.diff(self.axis)
        if self.axis.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise InvariantViolation(f"scan axis {self.axis_name} is not strictly monotone")
        if not np.all(np.isfinite(self.stderr)):
            raise InvariantViolation("scan standard errors must be finite")

    def write_csv(self, path):
        """``axis, estimate, stderr, ess, flags`` plus any extra columns."""
        extra = list(self.extra)
        with open(path, "w", newline="") as fh:
            fh.write(f"# gnuplot: plot 'file' using 1:2:3 with yerrorbars ; axis = {self.axis_name}\n")
            wr = csv.writer(fh)
            wr.writerow([self.axis_name, "estimate", "stderr", "ess", "flags"] + extra)
            for i in range(self.axis.size):
                row = [repr(float(self.axis[i])), repr(float(self.estimates[i])),
                       repr(float(self.stderr[i])), repr(float(self.ess[i])),
                       ";".join(self.flags[i])]
                row += [repr(float(self.extra[c][i])) for c in extra]
                wr.writerow(row)


@dataclass
class TrendFit:
    """Weighted least-squares slope of ``log estimate`` against ``log axis``."""

    slope: float
    stderr: float
    intercept: float

    @property
    def decreasing_at_3sigma(self):
        return self.slope + 3.0 * self.stderr < 0.0


# ---------------------------------------------------------------------------
# tilted ensemble


@dataclass
class TiltedEnsemble:
    """Stationary paths reweighted by ``exp((g^2/2) full-region W integral)``."""

    paths: object
    g: float
    integrals: dict
    log_weights: np.ndarray
    weights: np.ndarray
    ess: float
    ess_floor: float = ESS_FLOOR
    kappa: float = 0.0

    @property
    def reliable(self):
        return self.ess >= self.ess_floor

    @property
    def flags(self):
        return () if self.reliable else ("ess_below_floor",)

    def expectation(self, values):
        """Self-normalised ``E_mu[values]`` with its delta-method standard error."""
        f = np.asarray(values, dtype=float)
        w = self.weights
        mean = float(np.sum(w * f) / np.sum(w))
        se = float(np.sqrt(np.sum(w**2 * (f - mean) ** 2)))
        return Estimate(mean, se, self.ess, self.flags)


def tilted_ensemble(table, paths, g, ess_floor=ESS_FLOOR, stride=1):
    """Build ``mu_T`` from stationary ``paths`` (all four region integrals kept)."""
    integrals = double_path_integrals(table, paths, REGIONS, stride=stride)
    logw = 0.5 * g**2 * integrals["full"]
    w = np.exp(logw - logsumexp(logw))
    ess = float(1.0 / np.sum(w**2))
    kappa = 0.0 if table.plane_wave else float(table.gef.kappa)
    return TiltedEnsemble(paths, float(g), integrals, logw, w, ess, float(ess_floor), kappa)


def _check_path_count(n_paths):
    if n_paths < 2:
        raise DomainError("n_paths must be >= 2")


def _table_covers(table, T):
    if table.plane_wave:
        return
    if 2 * T > table.t_max:
        raise DomainError(f"kernel table covers t <= {table.t_max}, need 2T = {2 * T}")


# ---------------------------------------------------------------------------
# gamma(T)


def _log_mean_exp(a):
    return float(logsumexp(a) - math.log(a.size))


def gamma_from_ensemble(ensemble):
    """``E[e^{a F}] E[e^{a B}] / E[e^{a U}]`` with ``a = g^2/2``.

    ``F`` and ``B`` are the ``[0,T]^2`` and ``[-T,0]^2`` integrals, equal in law by shift
    invariance, so the numerator estimates ``(E[e^{a F}])^2``; ``U`` is the full integral.
    The standard error is the delta method on the three correlated means.
    """
    a = 0.5 * ensemble.g**2
    cols = [a * ensemble.integrals[r] for r in ("forward", "backward", "full")]
    n = cols[0].size
    log_gamma = _log_mean_exp(cols[0]) + _log_mean_exp(cols[1]) - _log_mean_exp(cols[2])
    scaled = np.stack([np.exp(c - c.max()) for c in cols])
    m = scaled.mean(axis=1)
    grad = np.array([1 / m[0], 1 / m[1], -1 / m[2]])
    var_log = float(grad @ (np.cov(scaled, ddof=1) / n) @ grad)
    value = math.exp(log_gamma)
    se = value * math.sqrt(max(var_log, 0.0))
    return Estimate(value, se, ensemble.ess, ensemble.flags)


def gamma_estimate(model, table, g, T, n_paths, seed, dt=0.05, stride=1,
                   ess_floor=ESS_FLOOR, return_ensemble=False):
    """``gamma(T)`` from ``n_paths`` stationary paths on ``[-T, T]``.

    The numerator uses the ``[0, T]`` half of each path (shift invariance).
    """
    _check_path_count(n_paths)
    if T < 0:
        raise DomainError("T must be >= 0")
    if T == 0 or g == 0:
        est = Estimate(1.0, 0.0, float(n_paths))
        return (est, None) if return_ensemble else est
    _table_covers(table, T)
    paths = model.sample(T, dt, seed=seed, n_paths=n_paths)
    ens = tilted_ensemble(table, paths, g, ess_floor, stride)
    est = gamma_from_ensemble(ens)
    return (est, ens) if return_ensemble else est


def gamma_upper_bound(ensemble, gamma=None):
    """``E_mu[exp(-g^2 off-diagonal integral)]``; checks ``gamma <= bound + 3 sigma``."""
    if ensemble is None or ensemble.g == 0:
        return Estimate(1.0, 0.0)
    off = ensemble.integrals["off_diagonal"]
    bound = ensemble.expectation(np.exp(-(ensemble.g**2) * off))
    if gamma is not None:
        slack = 3.0 * math.hypot(gamma.stderr, bound.stderr)
        if gamma.value > bound.value + slack:
            raise InvariantViolation(
                f"gamma(T) = {gamma.value:.6g} exceeds its upper bound {bound.value:.6g} + 3 sigma"
            )
    return bound


def shift_window(paths, shift, T):
    """Re-centre ``paths`` on ``[shift - T, shift + T]`` (needs a longer stationary window)."""
    i0 = paths.index(shift - T)
    i1 = paths.index(shift + T)
    if i0 < 0 or i1 >= paths.times.size:
        raise DomainError("shifted window leaves the sampled time range")
    times = paths.times[i0 : i1 + 1] - shift
    return type(paths)(float(T), paths.dt, times, paths.positions[:, i0 : i1 + 1],
                       paths.seed, paths.first_path, paths.excursions, paths.steps)


def fit_log_trend(axis, est):
    """Weighted fit of ``log gamma`` on ``log T`` (weights from ``stderr / value``)."""
    x = np.log(np.asarray(axis, float))
    y = np.log(est.estimates)
    s = est.stderr / est.estimates
    if np.any(s <= 0):
        s = np.where(s > 0, s, np.min(s[s > 0]) if np.any(s > 0) else 1.0)
    W = 1.0 / s**2
    A = np.stack([np.ones_like(x), x], 1)
    cov = np.linalg.inv(A.T @ (W[:, None] * A))
    coef = cov @ (A.T @ (W * y))
    return TrendFit(float(coef[1]), float(np.sqrt(cov[1, 1])), float(coef[0]))


def scan_seed(seed, i):
    """Independent per-point seed derived from the run seed."""
    return int(np.random.SeedSequence([int(seed), 0x6A4D, int(i)]).generate_state(1)[0])


def gamma_scan(model, table, g, times, n_paths, seed, dt=0.05, stride=1, ess_floor=ESS_FLOOR):
    """``gamma(T)`` and its upper bound over ``times`` with independent paths per ``T``."""
    vals, errs, ess, flags, bounds, bound_err = [], [], [], [], [], []
    for i, T in enumerate(times):
        est, ens = gamma_estimate(model, table, g, T, n_paths, scan_seed(seed, i), dt, stride,
                                  ess_floor, return_ensemble=True)
        ub = gamma_upper_bound(ens, est)
        vals.append(est.value)
        errs.append(est.stderr)
        ess.append(est.ess)
        flags.append(tuple(est.flags))
        bounds.append(ub.value)
        bound_err.append(ub.stderr)
    return ScanResult("T", times, vals, errs, ess, flags,
                      {"upper_bound": np.array(bounds), "upper_bound_stderr": np.array(bound_err)})


# ---------------------------------------------------------------------------
# divergence witness


def born_weight(gef):
    """``kappa C0 (kappa C0 + 2)`` for a fitted eigenfunction (0 for plane waves)."""
    if gef is None or getattr(gef, "kappa", 0.0) == 0.0:
        return 0.0
    kc = gef.kappa * gef.c0_estimate_
    return float(kc * (kc + 2.0))


def _witness_source(source, gef):
    if isinstance(source, KernelTable):
        return source.cutoff_, source.gef if gef is None else gef
    if isinstance(source, CutoffProfile):
        return source, gef
    raise DomainError("divergence_witness needs a KernelTable or a CutoffProfile")


def divergence_witness(source, T, lam, gef=None, K=None):
    """Deterministic lower bound ``rho(T)`` on the ``A_T`` off-diagonal integral.

    ``(1/4pi^2) [<log((8T^{2lam}+s^2+T^2)/(8T^{2lam}+2s^2))>_{s=|X+Y|}
    - c <log((D^2+T^2)^2/(D^2(D^2+4T^2)))>_{D=|X-Y|}] - c K`` with
    ``c = kappa C0 (kappa C0 + 2)`` and the measured arctan bound ``K``.
    """
    cutoff, gef = _witness_source(source, gef)
    if not cutoff.chi_check_nonnegative:
        raise AssumptionRefused(
            f"divergence witness needs chi_check >= 0; the {cutoff.shape} cutoff violates it"
        )
    if not 0 < lam < 1:
        raise DomainError("lambda must lie in (0, 1)")
    if T <= 0:
        raise DomainError("T must be positive")
    c = born_weight(gef)
    a = 8.0 * T ** (2.0 * lam)

    def lms(s):
        return np.log((a + s**2 + T**2) / (a + 2.0 * s**2))

    def w0log(d):
        d2 = d**2
        return np.log((d2 + T**2) ** 2 / (d2 * (d2 + 4.0 * T**2)))

    val = chi_pair_expectation(cutoff, lms) / (4.0 * np.pi**2)
    if c > 0:
        if K is None:
            K = arctan_bound_constant(cutoff)
        val -= c * (chi_pair_expectation(cutoff, w0log) / (4.0 * np.pi**2) + K)
    return float(val)


def witness_slope_target(lam, c=0.0):
    """Asymptotic ``4 pi^2 d rho / d log T`` per unit ``chi_check`` mass squared."""
    return 2.0 * (1.0 - lam - c)


def witness_log_slope(source, times, lam, gef=None):
    """Fitted ``4 pi^2 d rho / d log T / m^2`` over ``times`` (``m`` the chi_check mass)."""
    cutoff, gef = _witness_source(source, gef)
    K = arctan_bound_constant(cutoff) if born_weight(gef) > 0 else None
    rho = np.array([divergence_witness(cutoff, T, lam, gef, K) for T in times])
    slope = np.polyfit(np.log(times), rho, 1)[0]
    return float(4.0 * np.pi**2 * slope / cutoff.chi_check_mass**2), rho


# ---------------------------------------------------------------------------
# boson number


def expectation_exp_minus_betaN(ensemble, beta):
    """``E_mu[exp(-g^2 (1 - e^{-beta}) off-diagonal integral)]`` for real ``beta``."""
    beta = float(beta)
    off = ensemble.integrals["off_diagonal"]
    return ensemble.expectation(np.exp(-(ensemble.g**2) * (-math.expm1(-beta)) * off))


def stationary_characteristic(model, k):
    """``|E_{phi^2}[e^{i k.X}]|^2`` for wave vectors ``k`` (separable models)."""
    if not model.potential_.separable:
        raise DomainError("stationary characteristic function needs a separable potential")
    k = np.atleast_2d(np.asarray(k, float))
    ax = model.grid_.axis
    h = model.grid_.h
    out = np.ones(k.shape[0])
    for i, phi in enumerate(model.axis_phi_):
        dens = phi**2 * h
        c = np.exp(1j * np.outer(k[:, i], ax)) @ dens
        out *= np.abs(c) ** 2
    return out


def horizon_tail(model, cutoff, T, angular_nodes=26):
    """Off-diagonal ``W_N`` mass outside ``[-T,0] x [0,T]`` with the lag-``>= T`` pairs decorrelated.

    ``int chi^2/(2 omega^3) |E e^{ik.X}|^2 (1 - (1 - e^{-T omega})^2) dk``.
    """
    k, wk = cutoff.k_nodes()
    dirs, dw = sphere_rule(angular_nodes)
    rho = np.stack([stationary_characteristic(model, k[:, None] * d[None]) for d in dirs], 1) @ dw
    missing = -np.expm1(-T * k) ** 2 + 1.0
    return float(np.sum(wk * k**2 * cutoff.chi(k) ** 2 / (2 * k**3) * rho * missing))


def number_ceiling(cutoff, g):
    """``(g^2/2) int chi^2 / omega^3`` (infinite for IR-singular cutoffs)."""
    return 0.5 * g**2 * ir_integral(cutoff).value


def number_expectation_mc(ensemble, cutoff=None, tail=0.0):
    """``g^2 E_mu[off-diagonal integral + tail]``: the analytic ``beta``-derivative at 0."""
    off = ensemble.integrals["off_diagonal"] + tail
    est = ensemble.expectation(ensemble.g**2 * off)
    if cutoff is not None and ensemble.kappa == 0.0:
        ceiling = number_ceiling(cutoff, ensemble.g)
        if est.value > ceiling * (1 + 1e-9):
            raise InvariantViolation(
                f"<N> = {est.value:.6g} exceeds the ceiling (g^2/2) int chi^2/omega^3 = {ceiling:.6g}"
            )
    return est


def number_scan(model, cutoffs, g, T, n_paths, seed, dt=0.05, stride=1, extend_horizon=True,
                ess_floor=ESS_FLOOR, make_table=None):
    """``<N>`` over IR-regularised cutoffs sharing one path ensemble (common random numbers).

    ``make_table(cutoff)`` builds the W table (default: ``KernelTable`` defaults).
    """
    make_table = make_table or (lambda cut: KernelTable(cutoff=cut).fit())
    paths = model.sample(T, dt, seed=seed, n_paths=n_paths)
    sigma, vals, errs, ess, flags, ceil, pred = [], [], [], [], [], [], []
    for cut in cutoffs:
        ens = tilted_ensemble(make_table(cut), paths, g, ess_floor, stride)
        tail = horizon_tail(model, cut, T) if extend_horizon else 0.0
        est = number_expectation_mc(ens, cut, tail)
        sigma.append(cut.sigma)
        vals.append(est.value)
        errs.append(est.stderr)
        ess.append(est.ess)
        flags.append(tuple(est.flags))
        ceil.append(number_ceiling(cut, g))
        pred.append(math.log(cut.lam / cut.sigma))
    return ScanResult("sigma", sigma, vals, errs, ess, flags,
                      {"ceiling": np.array(ceil), "log_lam_over_sigma": np.array(pred)})


def ir_regression(scan):
    """Affine fit of ``<N>`` on ``ln(Lambda/sigma)``: ``(slope, intercept, r_squared)``."""
    fit = stats.linregress(scan.extra["log_lam_over_sigma"], scan.estimates)
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)


def beta_scan(ensemble, betas):
    """``E_mu[e^{-beta N}]`` along ``betas``."""
    est = [expectation_exp_minus_betaN(ensemble, b) for b in betas]
    return ScanResult("beta", betas, [e.value for e in est], [e.stderr for e in est],
                      [e.ess for e in est], [tuple(e.flags) for e in est])


# ---------------------------------------------------------------------------
# truncated Fock space


@dataclass
class SpectralData:
    """Eigenpairs of the Galerkin-truncated Hamiltonian and what built it."""

    g: float
    energies: np.ndarray
    vectors: np.ndarray
    hamiltonian: np.ndarray
    occupations: list
    n_particle: int
    particle_energies: np.ndarray
    particle_modes: np.ndarray
    axis: np.ndarray
    mode_k: np.ndarray
    mode_omega: np.ndarray
    mode_coupling: np.ndarray
    mode_matrices: np.ndarray
    real_modes: bool
    kappa: float
    model: object = None

    @property
    def ground_energy(self):
        return float(self.energies[0])

    @property
    def ground_state(self):
        return self.vectors[:, 0]

    @property
    def dim(self):
        return self.energies.size

    def number_direct(self):
        """``<Psi_g, N Psi_g>`` from the occupation basis."""
        n_tot = np.array([sum(o) for o in self.occupations], float)
        amp = np.abs(self.ground_state.reshape(self.n_particle, -1)) ** 2
        return float(np.sum(amp * n_tot[None, :]))


def _occupations(n_modes, n_max):
    occ = [o for o in itertools.product(range(n_max + 1), repeat=n_modes) if sum(o) <= n_max]
    occ.sort(key=lambda o: (sum(o), tuple(-x for x in o)))
    return occ


def _ladder_modes(model, n_particle, axis_index=-1):
    """Low eigenmodes along one axis with the other axes in their ground state."""
    if not model.potential_.separable:
        raise DomainError("truncated Fock basis needs a separable particle potential")
    ax = model.grid_.axis
    h = model.grid_.h
    from .particle import _second_difference

    main, off = _second_difference(ax.size, h)
    vv = model.potential_.axis_terms[axis_index](ax)
    ev, vec = linalg.eigh_tridiagonal(main + vv, off, select="i", select_range=(0, n_particle - 1))
    vec = vec / np.sqrt(h * np.sum(vec**2, axis=0))
    vec *= np.sign(vec[np.argmax(np.abs(vec), axis=0), np.arange(vec.shape[1])])
    return ev - ev[0], vec.T


def mode_shells(cutoff, n_shells):
    """Radial nodes and weights for the retained ``|k|`` shells (log-spaced for IR-regularised)."""
    lo, hi = cutoff.support
    if cutoff.ir_regular:
        u, wu = gauss_legendre(n_shells, math.log(lo), math.log(hi))
        k = np.exp(u)
        return k, wu * k
    return gauss_legendre(n_shells, lo, hi)


def _hermite_points(ell, n):
    x, w = np.polynomial.hermite.hermgauss(n)
    return ell * x, ell * w * np.exp(x**2)


def _distorted_mode_matrices(model, gef, modes, K, n_quad=12):
    """``<phi_a | Psi(K_j, .) | phi_b>`` in 3-D for the ladder basis."""
    ell = model.potential_.harmonic_length() * math.sqrt(2.0)
    x, w = _hermite_points(ell, n_quad)
    ax = model.grid_.axis
    phi0 = [np.interp(x, ax, model.axis_phi_[i]) for i in range(2)]
    lad = np.stack([np.interp(x, ax, m) for m in modes])  # (P, q)
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), -1).reshape(-1, 3)
    psi = gef.psi_matrix(K, X).reshape(len(K), n_quad, n_quad, n_quad)
    wx = w * phi0[0] ** 2
    wy = w * phi0[1] ** 2
    wz = w[None, :] * lad  # (P, q)
    # int phi0^2(x1) phi0^2(x2) phi_a(x3) phi_b(x3) Psi(K, x)
    red = np.einsum("i,j,kijl->kl", wx, wy, psi)  # (n_k, q)
    return np.einsum("al,bl,kl->kab", wz, lad, red)


def truncated_fock_hamiltonian(model, gef=None, cutoff=None, g=0.1, n_modes=4, n_max=3,
                               n_particle=6):
    """Galerkin truncation of the Nelson Hamiltonian and its full eigendecomposition.

    Modes come in ``+-|k_j| e_z`` pairs over ``n_modes // 2`` radial shells (isotropy
    replaces the angular integral by ``4 pi k^2``); the particle basis is the ladder
    ``phi_0(x_1) phi_0(x_2) phi_a(x_3)``, which is closed under ``e^{i k x_3}``.
    With plane waves the pairs are rotated to real ``cos``/``sin`` modes.
    Energies are shifted so the decoupled ground energy is 0.
    """
    cutoff = cutoff if cutoff is not None else CutoffProfile("ir_regularized", 1.0, 0.1)
    if n_modes < 2 or n_modes % 2 or n_modes > 8:
        raise DomainError("n_modes must be an even number in [2, 8]")
    if not 0 <= n_max <= 4:
        raise DomainError("n_max must lie in [0, 4]")
    kappa = 0.0 if gef is None else float(getattr(gef, "kappa", 0.0))
    eps, modes = _ladder_modes(model, n_particle)
    ax = model.grid_.axis
    h = model.grid_.h
    ks, wk = mode_shells(cutoff, n_modes // 2)
    lam2 = cutoff.chi(ks) ** 2 / (2.0 * ks) * wk * 2.0 * np.pi * ks**2
    real = kappa == 0.0
    mats, omega, kk, coup = [], [], [], []
    for j, k in enumerate(ks):
        if real:
            for fn in (np.cos, np.sin):
                mats.append(np.einsum("ax,bx,x->ab", modes, modes, fn(k * ax)) * h)
                coup.append(math.sqrt(2.0 * lam2[j]))
                omega.append(k)
                kk.append(k)
        else:
            K = np.array([[0, 0, k], [0, 0, -k]], float)
            mats.extend(_distorted_mode_matrices(model, gef, modes, K))
            coup.extend([math.sqrt(lam2[j])] * 2)
            omega.extend([k, k])
            kk.extend([k, -k])
    mats = np.array(mats)
    omega = np.array(omega)
    coup = np.array(coup)
    occ = _occupations(n_modes, n_max)
    index = {o: i for i, o in enumerate(occ)}
    nb = len(occ)
    P = n_particle
    dtype = float if real else complex
    H = np.zeros((P * nb, P * nb), dtype=dtype)
    diag_f = np.array([np.dot(o, omega) for o in occ])
    H[np.diag_indices_from(H)] = (eps[:, None] + diag_f[None, :]).ravel()
    # g c_j (F_j (x) b_j^dagger + F_j^dagger (x) b_j), F_j = <phi_a|f_j|phi_b>
    for j in range(n_modes):
        Fd = np.conj(mats[j]).T if not real else mats[j]
        for o in occ:
            if sum(o) >= n_max:
                continue
            up = list(o)
            up[j] += 1
            r, s = index[o], index[tuple(up)]
            amp = g * coup[j] * math.sqrt(o[j] + 1)
            # <a, o + e_j | H | b, o> = g c_j sqrt(n_j + 1) <phi_a | conj f_j | phi_b>
            block = amp * Fd
            H[s::nb, r::nb][:P, :P] += block
            H[r::nb, s::nb][:P, :P] += np.conj(block).T
    if not np.allclose(H, np.conj(H).T, atol=1e-12):
        raise InvariantViolation("truncated Hamiltonian is not Hermitian")
    ev, vec = linalg.eigh(H)
    g0 = vec[:, 0]
    phase = g0[np.argmax(np.abs(g0))]
    vec[:, 0] = g0 * (np.abs(phase) / phase)
    return SpectralData(float(g), ev, vec, H, occ, P, eps, modes, ax, np.array(kk), omega, coup,
                        mats, real, kappa, model)


def second_order_shift(spectral):
    """Rayleigh-Schrodinger ``E^(2) / g^2`` within the truncation."""
    a_exc = spectral.particle_energies
    total = 0.0
    for j in range(spectral.mode_omega.size):
        col = spectral.mode_matrices[j][:, 0]
        total -= spectral.mode_coupling[j] ** 2 * np.sum(np.abs(col) ** 2 / (a_exc + spectral.mode_omega[j]))
    return float(total)


def schrodinger_positivity(spectral, n_points=4096, box=2.0, seed=0):
    """Minimum of ``Psi_g(x_3, q) / max`` on a bulk sample of the Schrodinger representation.

    ``q_j`` are the dimensionless field coordinates of the real modes
    (``b_j + b_j^dagger = sqrt(2) q_j``); the factor ``phi_0(x_1) phi_0(x_2) > 0`` is dropped.
    """
    if not spectral.real_modes:
        raise DomainError("positivity in the Schrodinger representation needs real modes")
    rng = np.random.default_rng(seed)
    ell = 1.0 / math.sqrt(max(spectral.particle_energies[1], 1e-12))
    z = rng.uniform(-box * ell, box * ell, n_points)
    q = rng.uniform(-box, box, (n_points, spectral.mode_omega.size))
    lad = np.stack([np.interp(z, spectral.axis, m) for m in spectral.particle_modes])  # (P, n)
    n_max = max(sum(o) for o in spectral.occupations)
    herm = np.empty((n_max + 1,) + q.shape)
    herm[0] = math.pi**-0.25 * np.exp(-0.5 * q**2)
    if n_max >= 1:
        herm[1] = math.sqrt(2.0) * q * herm[0]
    for n in range(2, n_max + 1):
        herm[n] = math.sqrt(2.0 / n) * q * herm[n - 1] - math.sqrt((n - 1) / n) * herm[n - 2]
    fock = np.stack([np.prod([herm[o[j], :, j] for j in range(len(o))], axis=0)
                     for o in spectral.occupations])  # (nb, n)
    c = spectral.ground_state.reshape(spectral.n_particle, -1).real
    vals = np.einsum("ab,an,bn->n", c, lad, fock)
    return float(vals.min() / np.abs(vals).max())


def number_expectation_pullthrough(spectral, gef=None, cutoff=None, gap_threshold=1e-6):
    """``sum_j g^2 c_j^2 <F_j Psi_g, (H - E_g + omega_j)^{-2} F_j Psi_g>`` on the truncation."""
    if spectral.g == 0:
        return 0.0
    nb = len(spectral.occupations)
    P = spectral.n_particle
    shifted = spectral.energies - spectral.ground_energy
    gaps = shifted[None, :] + spectral.mode_omega[:, None]
    if gaps.min() < gap_threshold:
        raise ConvergenceError(f"truncated resolvent ill-conditioned (gap {gaps.min():.2e})")
    psi = spectral.ground_state.reshape(P, nb)
    total = 0.0
    for j in range(spectral.mode_omega.size):
        v = (np.conj(spectral.mode_matrices[j]) @ psi).ravel()
        amp = np.conj(spectral.vectors).T @ v
        total += spectral.g**2 * spectral.mode_coupling[j] ** 2 * float(
            np.sum(np.abs(amp) ** 2 / gaps[j] ** 2))
    return total


def psi0_overlap(spectral, gef=None, n_quad=12):
    """``(Psi(0, .) Psi_g, Psi_g) / (Psi_g, Psi_g)`` on the truncation.

    ``Psi(0, .) = 1`` for plane waves, so the ratio is exactly 1. For ``kappa > 0`` the
    multiplication matrix is assembled by 3-D quadrature; ``|value - 1| <= kappa C0`` and
    a vanishing imaginary part are checked.
    """
    P = spectral.n_particle
    kappa = 0.0 if gef is None else float(getattr(gef, "kappa", 0.0))
    if kappa == 0.0:
        A = np.eye(P)
    else:
        A = _distorted_mode_matrices(spectral.model, gef, spectral.particle_modes,
                                     np.zeros((1, 3)), n_quad)[0]
    psi = spectral.ground_state.reshape(P, -1)
    value = np.vdot(psi, A @ psi) / np.vdot(psi, psi)
    if abs(value.imag) > 1e-10 * max(1.0, abs(value.real)):
        raise InvariantViolation(f"overlap has imaginary part {value.imag:.3e}")
    value = float(value.real)
    if kappa > 0 and abs(value - 1.0) > kappa * gef.c0_estimate_:
        raise InvariantViolation(
            f"|(Psi(0,.)Psi_g, Psi_g) - 1| = {abs(value - 1):.3e} > kappa C0 = {kappa * gef.c0_estimate_:.3e}"
        )
    return value
