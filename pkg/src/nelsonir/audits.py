"""Module invariant suites shared by the CLI scenarios and the acceptance run.

Each suite returns a list of ``Check`` rows: the computed value, its independent
reference, the tolerance and the verdict.
"""

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import geometry, kernels, particle, scattering


@dataclass
class Check:
    name: str
    value: float
    reference: float
    tolerance: float
    passed: bool
    note: str = ""

    def __post_init__(self):
        self.value, self.reference = float(self.value), float(self.reference)
        self.tolerance, self.passed = float(self.tolerance), bool(self.passed)


def _close(name, value, reference, tol, relative=False, note=""):
    err = abs(value - reference)
    if relative:
        err /= abs(reference)
    return Check(name, value, reference, tol, err <= tol, note)


def write_checks(path, checks):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["check", "value", "reference", "tolerance", "passed", "note"])
        for c in checks:
            wr.writerow([c.name, repr(c.value), repr(c.reference), repr(c.tolerance),
                         int(c.passed), c.note])


# ---------------------------------------------------------------------------
# kernels


def _one_sided_oracle(omega, T):
    val, _ = integrate.dblquad(lambda t, s: np.exp(-(t - s) * omega), -T, 0.0, 0.0, T,
                               epsabs=1e-13, epsrel=1e-12)
    return val


def _two_sided_oracle(omega, T):
    # the two triangles on either side of the kink t = s
    below, _ = integrate.dblquad(lambda t, s: np.exp(-(s - t) * omega), -T, T, -T, lambda s: s,
                                 epsabs=1e-13, epsrel=1e-12)
    above, _ = integrate.dblquad(lambda t, s: np.exp(-(t - s) * omega), -T, T, lambda s: s, T,
                                 epsabs=1e-13, epsrel=1e-12)
    return below + above


def closed_form_checks(omegas=(0.1, 1.0, 10.0), times=(0.1, 1.0, 10.0), tol=1e-8):
    """One- and two-sided time integrals of ``e^{-|t-s| omega}`` against 2-D quadrature."""
    out = []
    for w in omegas:
        for T in times:
            out.append(_close(f"one_sided(omega={w},T={T})", kernels.time_integral_one_sided(w, T),
                              _one_sided_oracle(w, T), tol))
            out.append(_close(f"two_sided(omega={w},T={T})", kernels.time_integral_two_sided(w, T),
                              _two_sided_oracle(w, T), tol))
    return out


def hankel_inversion(r, t):
    """``(2 pi^2 r)^{-1} int_0^inf k e^{-t k} sin(k r) dk`` by QUADPACK's Fourier rule."""
    val, _ = integrate.quad(lambda k: k * np.exp(-t * k), 0.0, np.inf, weight="sin", wvar=r)
    return val / (2.0 * np.pi**2 * r)


def _radial_mass(fn):
    val, _ = integrate.quad(lambda r: 4 * np.pi * r**2 * fn(r), 0.0, np.inf, epsabs=1e-12,
                            epsrel=1e-10, limit=400)
    return val


def kernel_checks(points=((1.0, 1.0), (2.0, 0.5), (0.5, 2.0), (3.0, 1.0))):
    """Propagator kernels against Hankel inversion, the massless limit and total masses."""
    out = []
    for r, t in points:
        out.append(_close(f"massless_vs_hankel(r={r},t={t})",
                          float(kernels.massless_propagator_kernel(r, t)), hankel_inversion(r, t),
                          1e-5, relative=True))
        out.append(_close(f"massive_m=1e-4_vs_massless(r={r},t={t})",
                          float(kernels.massive_propagator_kernel(r, t, 1e-4)),
                          float(kernels.massless_propagator_kernel(r, t)), 1e-3, relative=True))
    for t in (0.5, 1.0, 2.0):
        out.append(_close(f"massless_mass(t={t})",
                          _radial_mass(lambda r: kernels.massless_propagator_kernel(r, t)), 1.0, 1e-4))
        for m in (0.5, 1.0):
            out.append(_close(f"massive_mass(t={t},m={m})",
                              _radial_mass(lambda r: kernels.massive_propagator_kernel(r, t, m)),
                              math.exp(-t * m), 1e-4))
    return out


# ---------------------------------------------------------------------------
# scattering


def scattering_checks(n_points=1000, seed=0, roundtrip=(18, 0.4), width=1.0, roundtrip_tol=1e-3):
    """Deviation envelope at half margin, residual order and the round trip of the transform."""
    kappa = 0.5 * scattering.BornEigenfunction(kappa=0.0).fit().kappa_max_
    gef = scattering.BornEigenfunction(kappa=kappa).fit()
    rng = np.random.default_rng(seed)
    K = rng.normal(size=(n_points, 3))
    X = rng.normal(scale=2.0, size=(n_points, 3))
    dev = np.abs(gef.born_eval(K, X) - np.exp(1j * np.sum(K * X, 1)))
    ratio = float(np.max(dev / gef.deviation_bound(X)))
    out = [Check("deviation_over_envelope_max", ratio, 1.0, 0.0, ratio <= 1.0,
                 f"kappa={kappa:.6g}, {n_points} random (k, x)")]
    k = np.array([0.6, -0.3, 0.5])
    L = 6.4
    errs = []
    for n in (16, 32, 64):
        res, ax = scattering.eigen_residual(kappa, scattering.default_w(), k, n, L / n)
        q = ax / 0.8
        sel = np.nonzero((np.abs(q - np.round(q)) < 1e-6) & (np.abs(ax) <= 1.6 + 1e-9))[0]
        errs.append(float(np.abs(res[np.ix_(sel, sel, sel)]).max()))
    order = math.log2(errs[1] / errs[2])
    out.append(Check("residual_order", order, 2.0, 0.3,
                     errs[0] > errs[1] > errs[2] and 1.7 <= order <= 2.5,
                     "max residual at shared probe points, n = 16, 32, 64"))
    n, h = roundtrip
    gft = scattering.GeneralizedFourierTransform(kappa=kappa, n=n, h=h).fit()
    P = gft.grid_.points
    f = np.exp(-np.sum((P - np.array([0.3, 0.0, -0.2])) ** 2, 1) / (2 * width**2)).reshape((n,) * 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        back = gft.inverse_transform(gft.transform(f))
    rt = float(np.linalg.norm(back - f) / np.linalg.norm(f))
    out.append(Check("gft_roundtrip_rel_l2", rt, 0.0, roundtrip_tol, rt <= roundtrip_tol,
                     f"n={n}, h={h}, gaussian width {width}"))
    return out


# ---------------------------------------------------------------------------
# particle


def particle_checks(n_paths=10_000, seed=0, workers=1, dt=0.01, model=None):
    """Ground energy order, OU moments, a three-time Feynman-Kac check and the tail envelope.

    The energy and OU checks use the unit harmonic well; the Feynman-Kac and tail checks
    use ``model`` when given.
    """
    out = []
    errs, hs = [], []
    for N in (81, 121, 161):
        m = particle.GroundStateDiffusion(particle.harmonic(), 6.0, N).fit()
        errs.append(abs(m.ground_energy_ - 1.5))
        hs.append(m.h)
    order = math.log(errs[0] / errs[2]) / math.log(hs[0] / hs[2])
    out.append(Check("ground_energy_order", order, 2.0, 0.2, abs(order - 2.0) <= 0.2,
                     f"|E0 - 3/2| = {errs[2]:.3e} at h = {hs[2]:.4g}"))
    osc = particle.GroundStateDiffusion(particle.harmonic(), 6.0, 121, n_jobs=workers).fit()
    model = osc if model is None else model
    paths = osc.sample(1.0, dt, seed=seed, n_paths=n_paths)
    x0 = paths.at(0.0)
    x1 = paths.at(1.0)
    for i in range(3):
        se = x0[:, i].std(ddof=1) / math.sqrt(n_paths)
        z = x0[:, i].mean() / se
        out.append(Check(f"ou_mean_x{i + 1}_z", float(z), 0.0, 3.0, abs(z) <= 3.0))
    prod = x0[:, 0] * x1[:, 0]
    cov_ref = 0.5 * math.exp(-1.0)
    z = (prod.mean() - cov_ref) / (prod.std(ddof=1) / math.sqrt(n_paths))
    out.append(Check("ou_cov_lag1_z", float(z), 0.0, 3.0, abs(z) <= 3.0,
                     "E[x1(0) x1(1)] against exp(-1)/2"))
    obs = [lambda x: np.cos(x[..., 0]), lambda x: np.exp(-np.sum(x**2, -1) / 4),
           lambda x: x[..., 1] ** 2 + x[..., 2]]
    fk = particle.feynman_kac_check(model, (-0.5, 0.0, 0.7), obs, n_paths, dt, seed + 1)
    out.append(Check("feynman_kac_three_time_z", fk.z, 0.0, 3.0, abs(fk.z) <= 3.0,
                     f"mc={fk.mc:.6g}, grid={fk.grid:.6g}"))
    tail = particle.tail_probability(model, 1.0, 1.5, n_paths, dt, seed + 2)
    out.append(Check("tail_probability_below_envelope", tail.estimate, tail.envelope, 0.0,
                     tail.estimate <= tail.envelope, "a = 1, b = 1.5"))
    return out


# ---------------------------------------------------------------------------
# geometry


def metric_checks(a=0.05, beta=2.0, n_points=100, seed=11, clt=geometry.DEFAULT_CLT):
    """Finite-difference potential vs closed form, the sign property and the count bound."""
    rng = np.random.default_rng(seed)
    params = [(rng.uniform(-1, 1), rng.uniform(0, 3), rng.normal(size=3)) for _ in range(n_points)]

    def max_err(h):
        return max(abs(geometry.conjugated_potential(geometry.conformal_metric(p, b), x=x, h=h)
                       - geometry.conformal_potential_closed_form(p, b, x)) for p, b, x in params)

    e1, e2 = max_err(2e-2), max_err(1e-2)
    ratio = e1 / e2
    out = [Check("fd_vs_closed_form_error_ratio", ratio, 4.0, 1.0, 3.0 < ratio < 5.0,
                 f"max error {e2:.3e} at h = 1e-2 over {n_points} points")]
    g = np.linspace(-6, 6, 10)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    vmin = min(float(np.min(geometry.conformal_potential_closed_form(p, b, pts)))
               for p in (-0.1, -1.0, -3.0) for b in (0.0, 0.5, 1.0))
    out.append(Check("sign_property_min_v", vmin, 0.0, 0.0, vmin >= 0.0,
                     "a < 0, 0 <= beta <= 1 on a 10^3 grid"))
    bound = geometry.lieb_thirring_count_bound(geometry.variable_mass_from_conformal(a, beta),
                                               clt=clt)
    out.append(Check("lieb_thirring_bound", bound, 1.0, 0.0, bound < 1.0, f"a = {a}, beta = {beta}"))
    return out
