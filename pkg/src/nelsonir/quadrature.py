"""Quadrature rules shared by the geometry, scattering and kernel modules."""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuadratureSpec",
    "gauss_legendre",
    "composite_gauss_legendre",
    "lebedev26",
    "product_sphere_rule",
    "sphere_rule",
    "radial_integral",
]


@dataclass(frozen=True)
class QuadratureSpec:
    """Resolution knobs for radial/angular quadrature and Monte Carlo layers."""

    radial_nodes: int = 64
    angular_nodes: int = 26
    mc_samples: int = 20000
    outer_radius: float = 40.0
    seed: int = 0

    def __post_init__(self):
        for name in ("radial_nodes", "angular_nodes", "mc_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.outer_radius > 0:
            raise ValueError("outer_radius must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")


def gauss_legendre(n, a, b):
    x, w = np.polynomial.legendre.leggauss(int(n))
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def composite_gauss_legendre(edges, n_per_panel):
    """Gauss-Legendre nodes on consecutive panels ``[edges[i], edges[i+1]]``."""
    edges = np.asarray(edges, dtype=float)
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        x, w = gauss_legendre(n_per_panel, a, b)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def lebedev26():
    """Degree-7 Lebedev rule on the unit sphere; weights sum to 4*pi."""
    pts, wts = [], []
    for i in range(3):
        for s in (1.0, -1.0):
            p = np.zeros(3)
            p[i] = s
            pts.append(p)
            wts.append(1.0 / 21.0)
    r2 = 1.0 / np.sqrt(2.0)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        for si in (1.0, -1.0):
            for sj in (1.0, -1.0):
                p = np.zeros(3)
                p[i], p[j] = si * r2, sj * r2
                pts.append(p)
                wts.append(4.0 / 105.0)
    r3 = 1.0 / np.sqrt(3.0)
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sz in (1.0, -1.0):
                pts.append(np.array([sx, sy, sz]) * r3)
                wts.append(9.0 / 280.0)
    return np.array(pts), 4.0 * np.pi * np.array(wts)


def product_sphere_rule(n_theta, n_phi=None):
    """Gauss-Legendre in cos(theta) times the trapezoid rule in phi."""
    n_phi = 2 * n_theta if n_phi is None else n_phi
    mu, wmu = gauss_legendre(n_theta, -1.0, 1.0)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1.0 - mu**2)
    pts = np.stack(
        [
            np.outer(st, np.cos(phi)).ravel(),
            np.outer(st, np.sin(phi)).ravel(),
            np.repeat(mu, n_phi),
        ],
        axis=1,
    )
    w = np.repeat(wmu, n_phi) * (2.0 * np.pi / n_phi)
    return pts, w


def sphere_rule(n):
    """Pick an angular rule with roughly ``n`` nodes (26 gives Lebedev)."""
    if n == 26:
        return lebedev26()
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]]), np.array([4.0 * np.pi])
    n_theta = max(2, int(round(np.sqrt(n / 2.0))))
    return product_sphere_rule(n_theta)


def radial_integral(f, a, b, n_panels=32, n_per_panel=16, geometric=True):
    """Integrate ``f(r)`` on ``[a, b]`` with (optionally geometric) GL panels.

    ``f`` is called once on the full node array.
    """
    if b <= a:
        return 0.0
    if geometric and a > 0:
        edges = np.geomspace(a, b, n_panels + 1)
    elif geometric:
        lo = min(1e-3, b * 1e-3)
        edges = np.concatenate([[0.0], np.geomspace(lo, b, n_panels)])
    else:
        edges = np.linspace(a, b, n_panels + 1)
    x, w = composite_gauss_legendre(edges, n_per_panel)
    return float(np.sum(w * f(x)))
