"""Static metrics, their variable-mass potentials and Lieb-Thirring counts.

A static metric ``g = diag(g00, -gamma)`` turns the Klein-Gordon operator into
``sum_ij d_i alpha^{ij} d_j - v`` on ``L^2(R^3)`` after conjugating with
``rho^{1/2}``, where ``rho = g00^{-1/2} sqrt(det gamma)`` and
``alpha = g00 gamma^{-1}``.

The conformal family uses ``g00 = e^{-theta}``, ``gamma = e^{-theta} I`` with
``theta(x) = -2 a <x>^{-beta}``, so that ``rho = e^{-theta}`` and, for ``m = xi = 0``,
``v = a <x>^{-beta-4} (beta(beta-1)|x|^2 - 3 beta) + a^2 beta^2 <x>^{-2beta-4} |x|^2``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from ._errors import ConvergenceError, DomainError
from .quadrature import QuadratureSpec, composite_gauss_legendre, sphere_rule

# Lieb's bound for the Cwikel-Lieb-Rozenblum inequality in three dimensions
DEFAULT_CLT = 0.1156


def japanese(x):
    """``<x> = sqrt(1 + |x|^2)`` over the last axis."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(1.0 + np.sum(x * x, axis=-1))


@dataclass(frozen=True)
class StaticMetric:
    """Time-independent metric ``diag(g00(x), -gamma(x))`` on ``R x R^3``."""

    g00: Callable
    gamma: Callable
    family: str = "custom"
    params: dict = field(default_factory=dict)
    differentiability_radius: float = np.inf

    def check(self, x):
        x = np.asarray(x, dtype=float)
        if np.linalg.norm(x) > self.differentiability_radius:
            raise DomainError(
                f"x={x.tolist()} lies outside the declared differentiability radius "
                f"{self.differentiability_radius}"
            )
        g = float(self.g00(x))
        if not g > 0:
            raise DomainError(f"g00 must be positive, got {g} at x={x.tolist()}")
        gam = np.asarray(self.gamma(x), dtype=float)
        if gam.shape != (3, 3) or not np.allclose(gam, gam.T, rtol=1e-12, atol=1e-14):
            raise DomainError(f"gamma is not a symmetric 3x3 array at x={x.tolist()}")
        if np.linalg.eigvalsh(gam)[0] <= 0:
            raise DomainError(f"gamma is not positive definite at x={x.tolist()}")
        return g, gam


def flat_metric():
    return StaticMetric(lambda x: 1.0, lambda x: np.eye(3), family="flat")


def conformal_theta(a, beta, x):
    return -2.0 * a * japanese(x) ** (-beta)


def conformal_metric(a, beta):
    if beta < 0:
        raise DomainError("conformal family needs beta >= 0")

    def g00(x):
        return np.exp(-conformal_theta(a, beta, x))

    def gamma(x):
        return np.exp(-conformal_theta(a, beta, x)) * np.eye(3)

    return StaticMetric(g00, gamma, family="conformal", params={"a": float(a), "beta": float(beta)})


def density_rho(metric, x):
    """``rho = g00^{-1/2} sqrt(det gamma)``."""
    g, gam = metric.check(x)
    return float(np.sqrt(np.linalg.det(gam)) / np.sqrt(g))


def _alpha(metric, x):
    g, gam = metric.check(x)
    return g * np.linalg.inv(gam)


def conjugated_potential(metric, m=0.0, xi=0.0, x=None, h=1e-4, scalar_curvature=None):
    """``v = g00 (m^2 + xi R) + V2`` with ``V2`` from central finite differences of step ``h``."""
    if x is None:
        raise DomainError("x is required")
    x = np.asarray(x, dtype=float)
    if not h > 0 or h < 1e-7 * max(1.0, float(np.max(np.abs(x)))):
        raise DomainError(f"finite-difference step h={h} underflows at x={x.tolist()}")
    if m < 0:
        raise DomainError("m must be >= 0")
    e = np.eye(3) * h
    rho0 = density_rho(metric, x)
    rp = np.array([density_rho(metric, x + e[i]) for i in range(3)])
    rm = np.array([density_rho(metric, x - e[i]) for i in range(3)])
    grad = (rp - rm) / (2 * h)
    hess = np.empty((3, 3))
    for i in range(3):
        hess[i, i] = (rp[i] - 2 * rho0 + rm[i]) / h**2
        for j in range(i + 1, 3):
            pp = density_rho(metric, x + e[i] + e[j])
            pm = density_rho(metric, x + e[i] - e[j])
            mp = density_rho(metric, x - e[i] + e[j])
            mm = density_rho(metric, x - e[i] - e[j])
            hess[i, j] = hess[j, i] = (pp - pm - mp + mm) / (4 * h**2)
    alpha = _alpha(metric, x)
    # div_alpha[j] = sum_i d_i alpha^{ij}
    div_alpha = np.zeros(3)
    for i in range(3):
        div_alpha += (_alpha(metric, x + e[i])[i] - _alpha(metric, x - e[i])[i]) / (2 * h)
    lg = grad / rho0
    v2 = 0.25 * (
        2.0 * div_alpha @ lg + 2.0 * np.sum(alpha * hess) / rho0 - lg @ alpha @ lg
    )
    g00 = float(metric.g00(x))
    curv = 0.0
    if xi != 0.0:
        if scalar_curvature is None:
            raise DomainError("xi != 0 needs a scalar_curvature evaluator")
        curv = xi * float(scalar_curvature(x))
    return g00 * (m**2 + curv) + v2


def conformal_potential_closed_form(a, beta, x):
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    jx = np.sqrt(1.0 + r2)
    return a * jx ** (-beta - 4) * (beta * (beta - 1) * r2 - 3 * beta) + (
        a**2 * beta**2 * jx ** (-2 * beta - 4) * r2
    )


@dataclass(frozen=True)
class VariableMass:
    """Short-range potential ``v = kappa w`` with ``|v| <= bound_C <x>^{-beta}``."""

    v: Callable
    kappa: float = 1.0
    beta: float = 4.0
    bound_C: float = 1.0
    origin: str = "direct"
    sign_nonnegative: bool = False

    def __post_init__(self):
        if self.kappa < 0:
            raise DomainError("kappa must be >= 0")
        if not self.beta > 3:
            raise DomainError(f"short-range exponent beta must exceed 3, got {self.beta}")
        if not self.bound_C > 0:
            raise DomainError("bound_C must be positive")

    def __call__(self, x):
        return self.v(x)

    def check_bound(self, points, rtol=1e-9):
        pts = np.asarray(points, dtype=float)
        vals = np.abs(np.asarray(self.v(pts), dtype=float))
        env = self.bound_C * japanese(pts) ** (-self.beta)
        ok = bool(np.all(vals <= env * (1 + rtol)))
        if self.sign_nonnegative:
            ok &= bool(np.all(np.asarray(self.v(pts)) >= -1e-15))
        return ok


def variable_mass_from_conformal(a, beta, sample_radius=30.0, n_samples=4001):
    """``VariableMass`` for the conformal family with decay exponent ``beta + 2``."""
    decay = beta + 2.0
    r = np.linspace(0.0, sample_radius, n_samples)
    pts = np.stack([r, np.zeros_like(r), np.zeros_like(r)], axis=1)
    vals = conformal_potential_closed_form(a, beta, pts)
    C = float(np.max(np.abs(vals) * japanese(pts) ** decay))
    # the closed form is radial; its envelope constant is attained on a ray
    C = max(C * (1 + 1e-9), 1e-300)

    def v(x):
        return conformal_potential_closed_form(a, beta, x)

    nonneg = a < 0 and 0 <= beta <= 1
    return VariableMass(v, 1.0, decay, C, "metric_derived", sign_nonnegative=nonneg)


def _outer_radius(bound_C, beta, tol=1e-8):
    # 4 pi C^{3/2} int_R^inf r^2 <r>^{-3beta/2} dr <= 4 pi C^{3/2} R^{3 - 3beta/2} / (3beta/2 - 3)
    p = 1.5 * beta - 3.0
    if p <= 0:
        raise ConvergenceError("|v_-|^{3/2} is not integrable for beta <= 2")

    def tail(R):
        return 4 * np.pi * bound_C**1.5 * R ** (-p) / p

    if tail(1.0) < tol:
        return 1.0
    return float(optimize.brentq(lambda R: np.log(tail(R) / tol), 1.0, 1e12))


def lieb_thirring_count_bound(vm, quadrature=None, clt=DEFAULT_CLT, tol=1e-8, radial_panels=None):
    """``C_LT int |v_-|^{3/2} dx`` by radial Gauss-Legendre x angular quadrature."""
    quadrature = quadrature or QuadratureSpec()
    R = _outer_radius(vm.bound_C, vm.beta, tol)
    n_panels = radial_panels or max(8, quadrature.radial_nodes // 8)
    edges = np.concatenate([[0.0], np.geomspace(1e-2, R, n_panels)])
    r, wr = composite_gauss_legendre(edges, 16)
    dirs, wd = sphere_rule(quadrature.angular_nodes)
    pts = r[:, None, None] * dirs[None, :, :]
    vals = np.asarray(vm.v(pts.reshape(-1, 3)), dtype=float).reshape(r.size, -1)
    integrand = np.maximum(-vals, 0.0) ** 1.5
    total = float(np.sum(wr * r**2 * (integrand @ wd)))
    if not np.isfinite(total):
        raise ConvergenceError("Lieb-Thirring integral is not finite")
    return clt * total
