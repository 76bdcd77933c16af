"""Cutoff profiles, the double potential W and its companions.

All momentum integrals use the radial cutoff normalisation
``chi(k) = chi_Lambda(|k|) / (2 pi)^{3/2}``, so that for the Gaussian profile the
inverse Fourier transform ``chi_check`` is a probability density.
"""

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special
from scipy.interpolate import RectBivariateSpline, RegularGridInterpolator
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._errors import AssumptionRefused, ConvergenceError, DomainError, InvariantViolation
from .quadrature import composite_gauss_legendre, gauss_legendre, sphere_rule

logger = logging.getLogger(__name__)

TWO_PI_32 = (2.0 * np.pi) ** 1.5
SHAPES = ("sharp", "gaussian", "ir_regularized")


@dataclass(frozen=True)
class CutoffProfile:
    """Radial UV cutoff with optional infrared hole ``|k| < sigma``."""

    shape: str = "gaussian"
    lam: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DomainError(f"unknown cutoff shape {self.shape!r}; expected one of {SHAPES}")
        if not self.lam > 0:
            raise DomainError("lam must be positive")
        if self.shape == "ir_regularized":
            if not 0 < self.sigma < self.lam:
                raise DomainError("ir_regularized needs 0 < sigma < lam")
        elif self.sigma != 0:
            raise DomainError(f"sigma is only meaningful for ir_regularized, got {self.sigma}")

    def chi(self, k):
        k = np.abs(np.asarray(k, dtype=float))
        if self.shape == "gaussian":
            return np.exp(-0.5 * (k / self.lam) ** 2) / TWO_PI_32
        inside = k < self.lam
        if self.shape == "ir_regularized":
            inside &= k >= self.sigma
        return inside / TWO_PI_32

    @property
    def chi0(self):
        return float(self.chi(0.0))

    @property
    def ir_regular(self):
        return self.shape == "ir_regularized"

    @property
    def chi_check_nonnegative(self):
        # sharp edges produce an oscillating sinc-like transform
        return self.shape == "gaussian"

    @property
    def support(self):
        if self.shape == "gaussian":
            return 0.0, self.lam * np.sqrt(80.0)
        if self.shape == "sharp":
            return 0.0, self.lam
        return self.sigma, self.lam

    def chi_check(self, r):
        """Inverse Fourier transform of ``chi`` as a function of ``|X|``."""
        r = np.abs(np.asarray(r, dtype=float))
        if self.shape == "gaussian":
            return self.lam**3 * np.exp(-0.5 * (self.lam * r) ** 2) / TWO_PI_32

        def ball(L):
            x = L * r
            small = x < 1e-3
            xs = np.where(small, 1.0, x)
            val = (np.sin(xs) - xs * np.cos(xs)) / xs**3
            val = np.where(small, 1.0 / 3.0 - x**2 / 30.0, val)
            return L**3 * val / (2.0 * np.pi**2)

        out = ball(self.lam)
        if self.shape == "ir_regularized":
            out = out - ball(self.sigma)
        return out

    @property
    def chi_check_mass(self):
        """``int chi_check = (2 pi)^{3/2} chi(0)``."""
        return TWO_PI_32 * self.chi0

    def norm_chi_over_omega_sq(self):
        """``||chi / omega||^2``."""
        lo, hi = self.support
        return 4.0 * np.pi * _radial_sum(self, lambda k: self.chi(k) ** 2)

    def k_nodes(self, n_per_panel=16):
        """Radial Gauss-Legendre nodes/weights in ``|k|`` (no ``4 pi k^2`` factor)."""
        return _k_nodes(self.shape, self.lam, self.sigma, n_per_panel)


_K_NODE_CACHE = {}


def _k_nodes(shape, lam, sigma, n_per_panel):
    key = (shape, lam, sigma, n_per_panel)
    if key not in _K_NODE_CACHE:
        cut = CutoffProfile(shape, lam, sigma)
        lo, hi = cut.support
        knee = 0.05 * hi
        if lo < knee:
            geo = np.geomspace(max(lo, hi * 1e-7), knee, 24)
            lin = np.linspace(knee, hi, 41)[1:]
            edges = np.concatenate([[0.0] if lo == 0 else [], geo, lin])
            if lo > 0:
                edges[0] = lo
        else:
            edges = np.linspace(lo, hi, 41)
        _K_NODE_CACHE[key] = composite_gauss_legendre(np.unique(edges), n_per_panel)
    return _K_NODE_CACHE[key]


def _radial_sum(cutoff, f, n_per_panel=16):
    k, w = cutoff.k_nodes(n_per_panel)
    return float(np.sum(w * f(k)))


# ---------------------------------------------------------------------------
# plane-wave kernels


def w0_eval(cutoff, t):
    """``W_0(t) = int chi^2/(2 omega) e^{-t omega} dk``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("t must be >= 0")
    k, w = cutoff.k_nodes()
    wk = 2.0 * np.pi * w * k * cutoff.chi(k) ** 2
    out = np.exp(-np.multiply.outer(t.ravel(), k)) @ wk
    return out.reshape(t.shape) if t.ndim else float(out[0])


def w_n_radial(cutoff, r, t, chunk=4096):
    """Plane-wave double potential as a function of ``r = |x - y|`` and ``t``."""
    r, t = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise DomainError("t must be >= 0")
    shape = r.shape
    r, t = r.ravel(), t.ravel()
    k, w = cutoff.k_nodes()
    wk = 2.0 * np.pi * w * k * cutoff.chi(k) ** 2
    out = np.empty(r.size)
    for s in range(0, r.size, chunk):
        rk = np.multiply.outer(r[s : s + chunk], k)
        tk = np.multiply.outer(t[s : s + chunk], k)
        out[s : s + chunk] = (np.exp(-tk) * np.sinc(rk / np.pi)) @ wk
    return out.reshape(shape) if shape else float(out[0])


def w_n_eval(cutoff, x, y, t):
    """Plane-wave double potential ``W_N(x, y, t)``."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return w_n_radial(cutoff, np.linalg.norm(d, axis=-1), t)


def w_n_sharp_diagonal(lam, t):
    """Closed form of ``W_N(x, x, t)`` for the sharp cutoff."""
    t = np.asarray(t, dtype=float)
    lt = lam * t
    small = lt < 1e-4
    ts = np.where(small, 1.0, t)
    val = (1.0 - np.exp(-lam * ts) * (1.0 + lam * ts)) / ts**2
    val = np.where(small, lam**2 / 2.0 - lam**3 * t / 3.0, val)
    return val / (4.0 * np.pi**2)


def w_n_convolution_form(cutoff, x, y, t, n_r=96):
    """``W_N`` from the position-space double convolution of ``chi_check``.

    Uses ``(1/4pi^2) int int chi_check(X) chi_check(Y) / (|(X-x)-(Y-y)|^2 + t^2)``,
    reduced to a radial integral over the self-convolution of ``chi_check``.
    Only available for the Gaussian profile, whose self-convolution is Gaussian.
    """
    if cutoff.shape != "gaussian":
        raise AssumptionRefused("convolution form implemented for the gaussian cutoff only")
    d = np.linalg.norm(np.asarray(x, float) - np.asarray(y, float))
    s2 = 2.0 / cutoff.lam**2  # variance per axis of X - Y
    mass2 = cutoff.chi_check_mass**2
    # average 1/(|Z - d|^2 + t^2) over Z ~ N(0, s2 I): angular part in closed form
    u, wu = composite_gauss_legendre(np.linspace(0.0, 12.0 * np.sqrt(s2), 25), n_r // 4 + 8)
    dens = 4.0 * np.pi * u**2 * np.exp(-(u**2) / (2.0 * s2)) / (2.0 * np.pi * s2) ** 1.5
    if d < 1e-12:
        ang = 1.0 / (u**2 + t**2)
    else:
        ang = np.log(((u + d) ** 2 + t**2) / ((u - d) ** 2 + t**2)) / (4.0 * u * d)
    return mass2 * float(np.sum(wu * dens * ang)) / (4.0 * np.pi**2)


# ---------------------------------------------------------------------------
# closed-form time integrals


def time_integral_one_sided(omega, T):
    """``int_{-T}^0 ds int_0^T dt e^{-|t-s| omega}``."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise DomainError("omega must be positive")
    if np.any(np.asarray(T) < 0):
        raise DomainError("T must be >= 0")
    return np.expm1(-np.multiply(T, omega)) ** 2 / omega**2


def time_integral_two_sided(omega, T):
    """``int_{-T}^T ds int_{-T}^T dt e^{-|t-s| omega}``."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise DomainError("omega must be positive")
    if np.any(np.asarray(T) < 0):
        raise DomainError("T must be >= 0")
    x = 2.0 * np.multiply(T, omega)
    return 2.0 * (np.expm1(-x) + x) / omega**2


def w0_offdiag_integral(cutoff, T):
    """``int_{-T}^0 int_0^T W_0(|t - s|)`` via the one-sided closed form."""
    k, w = cutoff.k_nodes()
    if T == 0:
        return 0.0
    return float(np.sum(2.0 * np.pi * w * cutoff.chi(k) ** 2 * np.expm1(-T * k) ** 2 / k))


def w0_full_integral(cutoff, T):
    """``int_{-T}^T int_{-T}^T W_0(|t - s|)`` via the two-sided closed form."""
    k, w = cutoff.k_nodes()
    x = 2.0 * T * k
    return float(np.sum(4.0 * np.pi * w * cutoff.chi(k) ** 2 * (np.expm1(-x) + x) / k))


def chi_pair_expectation(cutoff, func, n=48):
    """``int int chi_check(X) chi_check(Y) func(|X -+ Y|) dX dY`` for the Gaussian cutoff.

    ``X + Y`` and ``X - Y`` share the law ``N(0, 2/lam^2 I)`` when ``chi_check`` is the
    Gaussian density, so the 6-D integral collapses to one radial integral.
    """
    if not cutoff.chi_check_nonnegative:
        raise AssumptionRefused(
            f"{cutoff.shape} cutoff: chi_check is not a nonnegative measure"
        )
    scale = np.sqrt(2.0) / cutoff.lam
    u, wu = composite_gauss_legendre(np.linspace(0.0, 12.0, 25), n // 4 + 4)
    pdf = np.sqrt(2.0 / np.pi) * u**2 * np.exp(-(u**2) / 2.0)
    vals = func(scale * u)
    return cutoff.chi_check_mass**2 * float(np.sum(wu * pdf * vals))


def w0_offdiag_position_form(cutoff, T):
    """Position-space form of ``int_{-T}^0 int_0^T W_0``: ``(log_part, arctan_part)``.

    ``log_part = (1/8pi^2) <log((D^2+T^2)^2 / (D^2 (D^2+4T^2)))>`` and
    ``arctan_part = (1/4pi^2) <(2T/D)(arctan(2T/D) - arctan(T/D))>`` with ``D = |X - Y|``
    averaged against ``chi_check x chi_check``.
    """
    if T == 0:
        return 0.0, 0.0

    def logf(d):
        d2 = d**2
        return np.log((d2 + T**2) ** 2 / (d2 * (d2 + 4 * T**2)))

    def atanf(d):
        return (2 * T / d) * (np.arctan(2 * T / d) - np.arctan(T / d))

    lp = chi_pair_expectation(cutoff, logf) / (8.0 * np.pi**2)
    ap = chi_pair_expectation(cutoff, atanf) / (4.0 * np.pi**2)
    return lp, ap


def arctan_bound_constant(cutoff, t_grid=None):
    """Measured ``K = sup_T`` of the arctan part of the ``W_0`` double integral."""
    t_grid = np.geomspace(1e-3, 1e7, 121) if t_grid is None else t_grid
    return max(w0_offdiag_position_form(cutoff, float(T))[1] for T in t_grid)


# ---------------------------------------------------------------------------
# heat-type propagators of sqrt(-Delta + m^2)


def massless_propagator_kernel(r, t):
    """Integral kernel of ``e^{-t sqrt(-Delta)}`` in three dimensions."""
    r, t = np.asarray(r, dtype=float), np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("t must be positive")
    return t / (np.pi**2 * (r**2 + t**2) ** 2)


def massive_propagator_kernel(r, t, m, d=3):
    """Integral kernel of ``e^{-t sqrt(-Delta + m^2)}`` in ``d`` dimensions.

    ``K_nu`` is ``scipy.special.kve`` (AMOS, relative accuracy near 1e-15);
    the exponential scaling is undone in log space to avoid underflow.
    """
    r, t = np.asarray(r, dtype=float), np.asarray(t, dtype=float)
    if np.any(t <= 0) or m <= 0:
        raise DomainError("t and m must be positive")
    nu = (d + 1) / 2.0
    rho = np.sqrt(r**2 + t**2)
    z = m * rho
    logk = np.log(special.kve(nu, z)) - z
    return 2.0 * (m / (2 * np.pi)) ** nu * t / rho**nu * np.exp(logk)


# ---------------------------------------------------------------------------
# infrared diagnostic


@dataclass(frozen=True)
class IRIntegral:
    value: float
    divergent: bool
    log_rate: float = 0.0


def ir_integral(cutoff):
    """``int chi^2 / omega^3 dk`` (or a divergence flag with its logarithmic rate)."""
    if cutoff.chi0 > 0:
        # int_eps chi^2/k dk ~ chi(0)^2 log(1/eps)
        return IRIntegral(np.inf, True, 4.0 * np.pi * cutoff.chi0**2)
    val = 4.0 * np.pi * _radial_sum(cutoff, lambda k: cutoff.chi(k) ** 2 / k)
    return IRIntegral(val, False, 0.0)


# ---------------------------------------------------------------------------
# tabulated W


class KernelTable(BaseEstimator):
    """Cached evaluator of ``W(x, y, t)``.

    With ``gef=None`` (or ``kappa == 0``) the kernel depends on ``|x - y|`` and is
    tabulated on an ``(r, t)`` grid with bicubic splines. With a generalized
    eigenfunction the table lives on ``(|x|, |y|, cos angle, t)`` (valid for radial
    potentials) and is interpolated multilinearly.

    Every ``audit_every`` queries one query point is recomputed by direct
    quadrature; a deviation above ``error_budget`` raises ``InvariantViolation``.
    """

    def __init__(
        self,
        cutoff=None,
        gef=None,
        r_max=16.0,
        t_max=20.0,
        n_r=161,
        n_t=97,
        n_radius=9,
        n_cos=7,
        radius_max=4.0,
        k_radial_nodes=20,
        angular_nodes=26,
        error_budget=1e-6,
        audit_every=10000,
        seed=0,
    ):
        self.cutoff = cutoff
        self.gef = gef
        self.r_max = r_max
        self.t_max = t_max
        self.n_r = n_r
        self.n_t = n_t
        self.n_radius = n_radius
        self.n_cos = n_cos
        self.radius_max = radius_max
        self.k_radial_nodes = k_radial_nodes
        self.angular_nodes = angular_nodes
        self.error_budget = error_budget
        self.audit_every = audit_every
        self.seed = seed

    @property
    def plane_wave(self):
        return self.gef is None or getattr(self.gef, "kappa", 0.0) == 0.0

    def _t_knots(self):
        # geometric knots: e^{-t omega} varies fastest near t = 0
        return np.concatenate([[0.0], np.geomspace(1e-3, self.t_max, self.n_t - 1)])

    def fit(self, X=None, y=None):
        cutoff = self.cutoff if self.cutoff is not None else CutoffProfile()
        self.cutoff_ = cutoff
        self.t_knots_ = self._t_knots()
        self.n_queries_ = 0
        self.n_audits_ = 0
        self.max_audit_error_ = 0.0
        self.n_out_of_range_ = 0
        self._rng = np.random.default_rng(self.seed)
        if self.plane_wave:
            self.r_knots_ = np.linspace(0.0, self.r_max, self.n_r)
            rr, tt = np.meshgrid(self.r_knots_, self.t_knots_, indexing="ij")
            vals = w_n_radial(cutoff, rr, tt)
            self._spline = RectBivariateSpline(self.r_knots_, self.t_knots_, vals, kx=3, ky=3)
        else:
            self._fit_distorted(cutoff)
        return self

    def _k_lattice(self):
        lo, hi = self.cutoff_.support
        kr, kw = gauss_legendre(self.k_radial_nodes, lo, min(hi, 6.0 * self.cutoff_.lam))
        dirs, dw = sphere_rule(self.angular_nodes)
        K = (kr[:, None, None] * dirs[None]).reshape(-1, 3)
        wts = (kw[:, None] * kr[:, None] ** 2 * dw[None]).ravel()
        return K, wts, np.repeat(kr, len(dw))

    def _fit_distorted(self, cutoff):
        K, wts, kr = self._k_lattice()
        self.radii_ = np.linspace(0.0, self.radius_max, self.n_radius)
        self.cosines_ = np.linspace(-1.0, 1.0, self.n_cos)
        xs = np.stack([np.zeros_like(self.radii_), np.zeros_like(self.radii_), self.radii_], 1)
        sin = np.sqrt(1 - self.cosines_**2)
        ys = (
            self.radii_[:, None, None]
            * np.stack([sin, np.zeros_like(sin), self.cosines_], 1)[None]
        ).reshape(-1, 3)
        psi_x = self.gef.psi_matrix(K, xs)  # (n_k, n_radius)
        psi_y = self.gef.psi_matrix(K, ys)  # (n_k, n_radius * n_cos)
        amp = wts * cutoff.chi(kr) ** 2 / (2.0 * kr)
        decay = np.exp(-np.outer(kr, self.t_knots_))  # (n_k, n_t)
        # table[a, b, c, t] = sum_k amp e^{-t k} conj(psi(k, x_a)) psi(k, y_bc)
        prod = np.conj(psi_x)[:, :, None] * psi_y[:, None, :]
        tab = np.einsum("k,kab,kt->abt", amp, prod, decay)
        tab = tab.reshape(self.n_radius, self.n_radius, self.n_cos, -1)
        self.imag_max_ = float(np.max(np.abs(tab.imag)))
        self._grid = RegularGridInterpolator(
            (self.radii_, self.radii_, self.cosines_, self.t_knots_), tab.real
        )
        self._k_lattice_cache = (K, amp, kr)

    def direct(self, x, y, t):
        """Direct quadrature (no interpolation) at a single point."""
        check_is_fitted(self, "t_knots_")
        if self.plane_wave:
            return w_n_eval(self.cutoff_, x, y, t)
        return float(w_eval_direct(self.gef, self.cutoff_, x, y, t,
                                   self.k_radial_nodes, self.angular_nodes).real)

    def __call__(self, x, y, t):
        check_is_fitted(self, "t_knots_")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        t = np.abs(np.asarray(t, dtype=float))
        if self.plane_wave:
            out = self.w_radial(np.linalg.norm(x - y, axis=-1), t)
        else:
            out = self._distorted(x, y, t)
        self._audit(x, y, t, out)
        return out

    def w_radial(self, r, t):
        """Plane-wave kernel from the table; out-of-range points fall back to quadrature."""
        r, t = np.broadcast_arrays(np.asarray(r, float), np.asarray(t, float))
        shape = r.shape
        r, t = r.ravel(), t.ravel()
        out = self._spline.ev(r, t)
        bad = (r > self.r_max) | (t > self.t_max)
        if np.any(bad):
            self.n_out_of_range_ += int(bad.sum())
            out[bad] = w_n_radial(self.cutoff_, r[bad], t[bad])
        return out.reshape(shape)

    def _distorted(self, x, y, t):
        x, y, t = np.broadcast_arrays(x, y, t[..., None])
        t = t[..., 0]
        a = np.linalg.norm(x, axis=-1)
        b = np.linalg.norm(y, axis=-1)
        denom = np.where(a * b > 0, a * b, 1.0)
        c = np.clip(np.sum(x * y, axis=-1) / denom, -1.0, 1.0)
        c = np.where(a * b > 0, c, 1.0)
        if np.any(a > self.radius_max) or np.any(b > self.radius_max) or np.any(t > self.t_max):
            raise DomainError("query outside the distorted-wave kernel lattice")
        pts = np.stack([a, b, c, t], axis=-1)
        return self._grid(pts.reshape(-1, 4)).reshape(a.shape)

    def _audit(self, x, y, t, out):
        n = int(np.size(out))
        before = self.n_queries_ // self.audit_every
        self.n_queries_ += n
        n_audit = self.n_queries_ // self.audit_every - before
        if n_audit <= 0 or n == 0:
            return
        flat_x = np.broadcast_to(x, np.shape(out) + (3,)).reshape(-1, 3)
        flat_y = np.broadcast_to(y, np.shape(out) + (3,)).reshape(-1, 3)
        flat_t = np.broadcast_to(t, np.shape(out)).ravel()
        flat_o = np.ravel(out)
        for i in self._rng.integers(0, n, size=min(n_audit, 4)):
            ref = self.direct(flat_x[i], flat_y[i], flat_t[i])
            err = abs(ref - flat_o[i])
            self.n_audits_ += 1
            self.max_audit_error_ = max(self.max_audit_error_, err)
            if err > self.error_budget:
                raise InvariantViolation(
                    f"kernel table audit failed: |table - direct| = {err:.3e} "
                    f"> budget {self.error_budget:.1e}"
                )

    def export_slices(self, path, r_values, t_values):
        """CSV of ``(r, t, W, W_N, W0)`` along radial separations at ``x = 0``."""
        check_is_fitted(self, "t_knots_")
        with open(path, "w", newline="") as fh:
            fh.write("# gnuplot: plot 'file' using 1:3 ; columns r t W W_N W0\n")
            wr = csv.writer(fh)
            wr.writerow(["r", "t", "W", "W_N", "W0"])
            for t in t_values:
                w0 = w0_eval(self.cutoff_, t)
                for r in r_values:
                    y = np.array([0.0, 0.0, r])
                    w = float(self(np.zeros(3), y, t))
                    wn = float(w_n_radial(self.cutoff_, r, t))
                    wr.writerow([f"{r:.10g}", f"{t:.10g}", f"{w:.12e}", f"{wn:.12e}", f"{w0:.12e}"])


def w_eval_direct(gef, cutoff, x, y, t, radial_nodes=20, angular_nodes=26):
    """``int chi^2/(2 omega) conj(Psi(k, x)) Psi(k, y) e^{-t omega} dk`` (complex).

    The imaginary part carries the quadrature defect of the k-direction rule.
    """
    lo, hi = cutoff.support
    kr, kw = gauss_legendre(radial_nodes, lo, min(hi, 6.0 * cutoff.lam))
    dirs, dw = sphere_rule(angular_nodes)
    K = (kr[:, None, None] * dirs[None]).reshape(-1, 3)
    wts = (kw[:, None] * kr[:, None] ** 2 * dw[None]).ravel()
    krep = np.repeat(kr, len(dw))
    pts = np.stack([np.asarray(x, float), np.asarray(y, float)])
    psi = gef.psi_matrix(K, pts)
    amp = wts * cutoff.chi(krep) ** 2 / (2.0 * krep) * np.exp(-t * krep)
    return complex(np.sum(amp * np.conj(psi[:, 0]) * psi[:, 1]))


def w_eval(table, x, y, t):
    """``W(x, y, t)`` through a fitted ``KernelTable``."""
    if np.any(np.asarray(t) < 0):
        raise DomainError("t must be >= 0")
    return table(x, y, t)


# ---------------------------------------------------------------------------
# path double integrals


def trapezoid_weights(n, dt):
    w = np.full(n, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _region_weights(region, n_t, zero, dt):
    w = np.zeros(n_t)
    v = np.zeros(n_t)
    if region == "full":
        w[:] = v[:] = trapezoid_weights(n_t, dt)
    elif region == "off_diagonal":
        w[: zero + 1] = trapezoid_weights(zero + 1, dt)
        v[zero:] = trapezoid_weights(n_t - zero, dt)
    elif region == "forward":
        w[zero:] = v[zero:] = trapezoid_weights(n_t - zero, dt)
    elif region == "backward":
        w[: zero + 1] = v[: zero + 1] = trapezoid_weights(zero + 1, dt)
    else:
        raise DomainError(f"unknown region {region!r}")
    return w, v


def _lag_sums(table, X, dt, pairs, r_points=None):
    """``sum_ij a_i b_j W(|X_i - X_j|, |t_i - t_j|)`` per path for each ``(a, b)`` in ``pairs``.

    ``W`` only depends on ``(|X_i - X_j|, lag)`` in the plane-wave case, so each lag
    is handled for all paths at once with a fine linear radial table.
    """
    n_paths, n_t, _ = X.shape
    # linear interpolation error ~ (dr lam)^2 W / 8; dr lam = 4e-3 keeps it near 1e-8
    if r_points is None:
        r_points = int(max(4001, 250 * table.r_max * table.cutoff_.lam + 1))
    r_grid = np.linspace(0.0, table.r_max, r_points)
    out = np.zeros((len(pairs), n_paths))
    for lag in range(n_t):
        t = lag * dt
        col = table.w_radial(r_grid, np.full_like(r_grid, t))
        diff = X[:, lag:] - X[:, : n_t - lag]
        r = np.sqrt(np.einsum("pic,pic->pi", diff, diff))
        w = np.interp(r, r_grid, col)
        far = r > table.r_max
        if np.any(far):
            table.n_out_of_range_ += int(far.sum())
            w[far] = w_n_radial(table.cutoff_, r[far], np.full(int(far.sum()), t))
        table._audit(X[:, lag:], X[:, : n_t - lag], np.float64(t), w)
        for q, (a, b) in enumerate(pairs):
            if lag == 0:
                coef = a * b
            else:
                coef = a[: n_t - lag] * b[lag:] + a[lag:] * b[: n_t - lag]
            out[q] += w @ coef
    return out


def double_path_integrals(table, path, regions=("full",), stride=1, check_positive=True):
    """Several regions of ``double_path_integral_W`` from one pass over the paths."""
    times = np.asarray(path.times)[::stride]
    X = np.asarray(path.positions)[:, ::stride]
    n_t = times.size
    if n_t < 1 or abs(times[0] + times[-1]) > 1e-9 * max(1.0, abs(times[-1])):
        raise DomainError("path must cover a symmetric window [-T, T]")
    if n_t == 1:
        return {reg: np.zeros(X.shape[0]) for reg in regions}
    dt = times[1] - times[0]
    zero = int(np.argmin(np.abs(times)))
    if abs(times[zero]) > 1e-9 * dt:
        raise DomainError("time grid must contain t = 0 after striding")
    pairs = [_region_weights(reg, n_t, zero, dt) for reg in regions]
    if table.plane_wave:
        sums = _lag_sums(table, X, dt, pairs)
    else:
        lag = np.abs(times[:, None] - times[None, :])
        sums = np.zeros((len(pairs), X.shape[0]))
        for p in range(X.shape[0]):
            w = table(X[p][:, None, :], X[p][None, :, :], lag)
            for q, (a, b) in enumerate(pairs):
                sums[q, p] = a @ w @ b
    result = dict(zip(regions, sums))
    if check_positive and "full" in result and np.any(result["full"] < 0):
        raise InvariantViolation(
            f"full-region W integral negative on {int(np.sum(result['full'] < 0))} path(s): "
            "quadrature too coarse for a positive-type kernel"
        )
    return result


def double_path_integral_W(table, path, region="full", stride=1, check_positive=True):
    """Trapezoid double sum of ``W(X_s, X_t, |s - t|)`` for every path in ``path``.

    ``region`` is ``"full"`` (``[-T, T]^2``), ``"off_diagonal"``
    (``[-T, 0] x [0, T]``), ``"forward"`` (``[0, T]^2``) or ``"backward"``. Returns one
    value per path. The full-region value must be nonnegative (positive-type kernel);
    violations raise ``InvariantViolation``.
    """
    return double_path_integrals(table, path, (region,), stride, check_positive)[region]
