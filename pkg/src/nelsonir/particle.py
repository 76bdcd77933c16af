"""Particle ground state, ground-state transform and the diffusion behind Feynman-Kac.

``H_p = -Delta/2 + V`` is discretised with the 7-point Laplacian (3-point in the
1-D sanity case) on ``[-L, L]^d`` with Dirichlet data outside. The ground-state
transform ``L_p = phi^{-1} (H_p - E_0) phi`` acts on ``L^2(phi^2 dx)`` and generates
the stationary diffusion ``dX = grad log phi dt + dB`` with law ``phi^2 dx``.

Potentials that are sums of per-axis terms are solved axis by axis; the 3-D
Kronecker-sum eigenvector is then the exact product of the 1-D ones, and
``exp(-t H_p)`` factorises the same way.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg, optimize, sparse
from scipy.sparse import linalg as splinalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._errors import ConvergenceError, DomainError, InvariantViolation
from .quadrature import sphere_rule

PATH_BLOCK = 256


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class Potential:
    """External potential with growth ``V(x) >= C |x|^{2 alpha}`` outside ``|x| <= R``."""

    kind: str
    alpha: float
    C: float = 1.0
    compact_radius: float = 0.0
    evaluator: Optional[Callable] = None
    axis_terms: Optional[tuple] = None
    coefficient: float = 0.5

    def __post_init__(self):
        if self.kind not in ("harmonic", "poly_confining", "custom"):
            raise DomainError(f"unknown potential kind {self.kind!r}")
        if not self.alpha > 0:
            raise DomainError("growth exponent alpha must be positive")

    @property
    def separable(self):
        return self.axis_terms is not None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.separable:
            return sum(term(x[..., i]) for i, term in enumerate(self.axis_terms[: x.shape[-1]]))
        return self.evaluator(x)

    def harmonic_length(self):
        """Length scale of the well, ``(2 C)^{-1/(2 alpha + 2)}``."""
        return (2.0 * self.C) ** (-1.0 / (2.0 * self.alpha + 2.0))


def harmonic(coefficient=0.5):
    """``V = coefficient |x|^2``."""
    c = float(coefficient)
    if not c > 0:
        raise DomainError("harmonic coefficient must be positive")
    term = lambda s: c * s * s  # noqa: E731
    return Potential("harmonic", 1.0, c, 0.0, None, (term, term, term), c)


def poly_confining(C=1.0, alpha=2.0):
    """``V = C |x|^{2 alpha}`` (not separable unless ``alpha = 1``)."""
    if not C > 0:
        raise DomainError("C must be positive")

    def v(x):
        return C * np.sum(np.asarray(x) ** 2, axis=-1) ** alpha

    return Potential("poly_confining", float(alpha), float(C), 0.0, v)


def custom_potential(evaluator, alpha, C=1.0, compact_radius=0.0, axis_terms=None):
    return Potential("custom", float(alpha), float(C), float(compact_radius), evaluator,
                     None if axis_terms is None else tuple(axis_terms))


@dataclass(frozen=True)
class Grid:
    extent: float = 6.0
    points: int = 121
    dim: int = 3

    def __post_init__(self):
        if self.dim not in (1, 3):
            raise DomainError("dimension tag must be 1 or 3")
        if not self.extent > 0 or self.points < 5:
            raise DomainError("grid needs extent > 0 and at least 5 points per axis")

    @property
    def axis(self):
        return np.linspace(-self.extent, self.extent, self.points)

    @property
    def h(self):
        return 2.0 * self.extent / (self.points - 1)


def _second_difference(n, h):
    main = np.full(n, 1.0 / h**2)
    off = np.full(n - 1, -0.5 / h**2)
    return main, off


def _axis_drift(log_phi, h):
    # centered differences inside, second-order one-sided at the two ends
    return np.gradient(log_phi, h, edge_order=2)


# ---------------------------------------------------------------------------
# paths


@dataclass
class ParticlePath:
    """``n_paths`` sampled paths on the uniform time grid over ``[-T, T]``."""

    T: float
    dt: float
    times: np.ndarray
    positions: np.ndarray
    seed: int
    first_path: int = 0
    excursions: int = 0
    steps: int = 0

    @property
    def n_paths(self):
        return self.positions.shape[0]

    def index(self, t):
        return int(round((t + self.T) / self.dt))

    def at(self, t):
        return self.positions[:, self.index(t)]

    def export_columns(self, path, which=0):
        """Write ``t, x1, x2, x3`` for one path."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + [f"x{i + 1}" for i in range(self.positions.shape[-1])])
            for t, x in zip(self.times, self.positions[which]):
                wr.writerow([f"{t:.10g}"] + [f"{v:.17g}" for v in x])


@dataclass
class FeynmanKacReport:
    times: tuple
    mc: float
    stderr: float
    grid: float
    z: float
    n_paths: int


@dataclass
class TailReport:
    a: float
    b: float
    estimate: float
    stderr: float
    envelope: float
    n_paths: int


@dataclass
class DecayFit:
    C: float
    delta: float
    alpha_fit: float
    r_min: float
    r_max: float
    residual: float = 0.0
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# model


class GroundStateDiffusion(BaseEstimator):
    """Grid ground state of ``-Delta/2 + V`` and its ground-state diffusion."""

    def __init__(self, potential=None, extent=6.0, points=121, dim=3, resolved_ratio=1e-10,
                 residual_tol=1e-8, n_jobs=1):
        self.potential = potential
        self.extent = extent
        self.points = points
        self.dim = dim
        self.resolved_ratio = resolved_ratio
        self.residual_tol = residual_tol
        self.n_jobs = n_jobs

    # -- fit ------------------------------------------------------------------

    def fit(self, X=None, y=None):
        self.potential_ = self.potential if self.potential is not None else harmonic()
        self.grid_ = Grid(self.extent, self.points, self.dim)
        h = self.grid_.h
        ell = self.potential_.harmonic_length()
        if ell < 6 * h:
            raise DomainError(
                f"grid spacing h={h:.4g} does not resolve the well (length {ell:.4g} < 6 cells)"
            )
        self._check_confinement()
        ax = self.grid_.axis
        if self.potential_.separable:
            self.axis_phi_ = []
            self.axis_energy_ = []
            main, off = _second_difference(ax.size, h)
            for i in range(self.dim):
                vv = self.potential_.axis_terms[i](ax)
                ev, vec = linalg.eigh_tridiagonal(main + vv, off, select="i", select_range=(0, 0))
                phi = vec[:, 0] * np.sign(vec[np.argmax(np.abs(vec[:, 0])), 0])
                phi /= np.sqrt(h * np.sum(phi**2))
                self.axis_phi_.append(phi)
                self.axis_energy_.append(float(ev[0]))
            self.ground_energy_ = float(sum(self.axis_energy_))
            self.phi_ = self._outer(self.axis_phi_)
        else:
            self.phi_, self.ground_energy_ = self._sparse_ground_state()
        self._check_ground_state()
        self.log_phi_ = np.log(np.maximum(self.phi_, self.resolved_ratio * self.phi_.max() * 1e-6))
        if self.potential_.separable:
            self.axis_drift_ = [_axis_drift(np.log(np.maximum(p, 1e-300)), h) for p in self.axis_phi_]
        else:
            grads = np.gradient(self.log_phi_, h, edge_order=2)
            self.grid_drift_ = np.stack(grads if self.dim > 1 else [grads], axis=-1)
        self.dt_max_ = self._dt_max()
        return self

    def _outer(self, factors):
        out = factors[0]
        for f in factors[1:]:
            out = np.multiply.outer(out, f)
        return out

    def _check_confinement(self):
        pot = self.potential_
        L = self.grid_.extent
        if L <= pot.compact_radius:
            return
        # boundary ring: points on the faces of the box
        ax = self.grid_.axis
        if self.dim == 1:
            ring = np.array([[-L], [L]])
        else:
            g1, g2 = np.meshgrid(ax, ax, indexing="ij")
            faces = []
            for i in range(3):
                for s in (-L, L):
                    pts = np.empty(g1.shape + (3,))
                    others = [j for j in range(3) if j != i]
                    pts[..., i] = s
                    pts[..., others[0]] = g1
                    pts[..., others[1]] = g2
                    faces.append(pts.reshape(-1, 3))
            ring = np.concatenate(faces)
        r = np.linalg.norm(ring, axis=-1)
        v = np.asarray(pot(ring), dtype=float)
        if np.any(v < pot.C * r ** (2 * pot.alpha) * (1 - 1e-12)):
            raise DomainError("potential violates V >= C |x|^{2 alpha} on the grid boundary ring")

    def hamiltonian(self):
        """Sparse 7-point (or 3-point) matrix of ``-Delta/2 + V``."""
        n, h = self.grid_.points, self.grid_.h
        main, off = _second_difference(n, h)
        D = sparse.diags([off, main, off], [-1, 0, 1], format="csr")
        eye = sparse.identity(n, format="csr")
        if self.dim == 1:
            lap = D
        else:
            lap = (sparse.kron(sparse.kron(D, eye), eye) + sparse.kron(sparse.kron(eye, D), eye)
                   + sparse.kron(sparse.kron(eye, eye), D))
        v = np.asarray(self.potential_(self._grid_points()), dtype=float)
        return (lap + sparse.diags(v)).tocsc()

    def _grid_points(self):
        ax = self.grid_.axis
        if self.dim == 1:
            return ax[:, None]
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)

    def _sparse_ground_state(self):
        H = self.hamiltonian()
        pts = self._grid_points()
        guess = np.exp(-0.5 * np.sum(pts**2, axis=1) / self.potential_.harmonic_length() ** 2)
        ev, vec = splinalg.lobpcg(H, guess[:, None], largest=False, tol=1e-11, maxiter=5000)
        res = np.linalg.norm(H @ vec[:, 0] - ev[0] * vec[:, 0]) / np.linalg.norm(vec[:, 0])
        if not res <= self.residual_tol:
            try:
                ev, vec = splinalg.eigsh(H, k=1, which="SA", tol=1e-10, ncv=64, v0=vec[:, 0])
            except splinalg.ArpackNoConvergence as exc:
                raise ConvergenceError("Lanczos ground-state iteration did not converge") from exc
        phi = vec[:, 0]
        phi = phi * np.sign(phi[np.argmax(np.abs(phi))])
        phi /= np.sqrt(self.grid_.h**self.dim * np.sum(phi**2))
        return phi.reshape((self.grid_.points,) * self.dim), float(ev[0])

    def apply_hamiltonian(self, u):
        """``H_p u`` on the grid without forming the matrix."""
        u = np.asarray(u, dtype=float)
        h = self.grid_.h
        out = np.asarray(self.potential_(self._grid_points()), dtype=float).reshape(u.shape) * u
        for axis in range(self.dim):
            pad = np.pad(u, [(1, 1) if a == axis else (0, 0) for a in range(self.dim)])
            lo = np.take(pad, range(0, u.shape[axis]), axis=axis)
            hi = np.take(pad, range(2, u.shape[axis] + 2), axis=axis)
            out += (2 * u - lo - hi) / (2 * h**2)
        return out

    def _check_ground_state(self):
        phi = self.phi_
        res = np.linalg.norm(self.apply_hamiltonian(phi) - self.ground_energy_ * phi)
        self.eigen_residual_ = float(res / np.linalg.norm(phi))
        if self.eigen_residual_ > self.residual_tol:
            raise ConvergenceError(
                f"ground state residual {self.eigen_residual_:.2e} > {self.residual_tol:.0e}"
            )
        self.resolved_ = phi > self.resolved_ratio * phi.max()
        interior = tuple(slice(1, -1) for _ in range(self.dim))
        core = self._core_mask()
        bad = (phi[interior] <= 0) & core[interior]
        if np.any(bad):
            raise DomainError("ground state has interior zeros (not strictly positive)")

    def _core_mask(self):
        # where phi is resolved above rounding of the eigensolver
        return self.phi_ > self.resolved_ratio * self.phi_.max()

    def _dt_max(self):
        h = self.grid_.h
        if self.potential_.separable:
            ax = self.grid_.axis
            inner = np.abs(ax) <= 0.9 * self.grid_.extent
            slope = max(float(np.max(np.abs(np.gradient(d, h)[inner]))) for d in self.axis_drift_)
        else:
            J = [np.gradient(self.grid_drift_[..., i], h, axis=i) for i in range(self.dim)]
            mask = self.resolved_
            slope = max(float(np.max(np.abs(j[mask]))) for j in J)
        return 1.0 / max(slope, 1e-12)

    # -- evaluators ------------------------------------------------------------

    @property
    def h(self):
        return self.grid_.h

    def drift(self, x):
        """``grad log phi`` at positions ``x`` (linear interpolation of grid values)."""
        check_is_fitted(self, "phi_")
        x = np.asarray(x, dtype=float)
        ax = self.grid_.axis
        if self.potential_.separable:
            return np.stack(
                [np.interp(x[..., i], ax, self.axis_drift_[i]) for i in range(self.dim)], axis=-1
            )
        interp = self._drift_interpolator()
        L = self.grid_.extent
        return interp(np.clip(x, -L, L).reshape(-1, self.dim)).reshape(x.shape)

    def _drift_interpolator(self):
        if getattr(self, "_drift_interp", None) is None:
            from scipy.interpolate import RegularGridInterpolator

            ax = self.grid_.axis
            self._drift_interp = RegularGridInterpolator((ax,) * self.dim, self.grid_drift_)
        return self._drift_interp

    def log_phi(self, x):
        """``log phi`` at arbitrary positions by linear interpolation of the grid values."""
        check_is_fitted(self, "phi_")
        x = np.asarray(x, dtype=float)
        ax = self.grid_.axis
        if self.potential_.separable:
            return sum(
                np.interp(x[..., i], ax, np.log(np.maximum(self.axis_phi_[i], 1e-300)))
                for i in range(self.dim)
            )
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator((ax,) * self.dim, self.log_phi_)
        return f(x.reshape(-1, self.dim)).reshape(x.shape[:-1])

    def grid_points(self):
        return self._grid_points().reshape(self.phi_.shape + (self.dim,))

    def expectation(self, f_grid):
        """``int f phi^2 dx`` on the grid."""
        return float(self.h**self.dim * np.sum(f_grid * self.phi_**2))

    def semigroup_apply(self, u, t):
        """``exp(-t (H_p - E_0)) u`` for a grid field ``u``."""
        check_is_fitted(self, "phi_")
        if t < 0:
            raise DomainError("semigroup time must be >= 0")
        u = np.asarray(u, dtype=float)
        if t == 0:
            return u.copy()
        if self.potential_.separable:
            out = u
            for i in range(self.dim):
                E = self._axis_propagator(i, t)
                out = np.moveaxis(np.tensordot(E, out, axes=([1], [i])), 0, i)
            return out
        H = self.hamiltonian()
        shifted = -t * (H - self.ground_energy_ * sparse.identity(H.shape[0], format="csc"))
        return splinalg.expm_multiply(shifted, u.ravel()).reshape(u.shape)

    def _axis_propagator(self, i, t):
        cache = self.__dict__.setdefault("_prop_cache", {})
        key = (i, float(t))
        if key not in cache:
            h = self.grid_.h
            main, off = _second_difference(self.grid_.points, h)
            vv = self.potential_.axis_terms[i](self.grid_.axis)
            ev, vec = linalg.eigh_tridiagonal(main + vv, off)
            cache[key] = (vec * np.exp(-t * (ev - self.axis_energy_[i]))) @ vec.T
        return cache[key]

    def dirichlet_form(self, f, g):
        """``(f, L_p g)`` in ``L^2(phi^2)``, computed as ``<phi f, (H_p - E_0) phi g>``."""
        check_is_fitted(self, "phi_")
        pf = self.phi_ * f
        pg = self.phi_ * g
        return float(self.h**self.dim * np.sum(pf * (self.apply_hamiltonian(pg) - self.ground_energy_ * pg)))

    def edge_dirichlet_form(self, f, g):
        """``1/2 sum_edges h^d phi_i phi_j (f_i - f_j)(g_i - g_j) / h^2`` over grid edges."""
        h = self.h
        total = 0.0
        for axis in range(self.dim):
            sl0 = [slice(None)] * self.dim
            sl1 = [slice(None)] * self.dim
            sl0[axis] = slice(0, -1)
            sl1[axis] = slice(1, None)
            a, b = tuple(sl0), tuple(sl1)
            total += np.sum(self.phi_[a] * self.phi_[b] * (f[a] - f[b]) * (g[a] - g[b]))
        # boundary edges to the zero Dirichlet data carry phi_j = 0
        return float(0.5 * h**self.dim * total / h**2)

    # -- start law and paths -------------------------------------------------------------

    def _sample_start(self, rng_std, n):
        """``n`` draws from the piecewise-constant grid law ``phi^2``."""
        ax, h = self.grid_.axis, self.grid_.h
        if self.potential_.separable:
            cols = []
            for i in range(self.dim):
                p = self.axis_phi_[i] ** 2
                cdf = np.cumsum(p) / p.sum()
                u = rng_std.random(n)
                j = np.minimum(np.searchsorted(cdf, u, side="right"), ax.size - 1)
                cols.append(ax[j] + h * (rng_std.random(n) - 0.5))
            return np.stack(cols, axis=-1)
        p = (self.phi_**2).ravel()
        cdf = np.cumsum(p) / p.sum()
        j = np.minimum(np.searchsorted(cdf, rng_std.random(n), side="right"), p.size - 1)
        pts = self._grid_points()[j]
        return pts + h * (rng_std.random((n, self.dim)) - 0.5)

    def _path_block(self, T, dt, seed, start, count, x0):
        n_half = int(round(T / dt))
        L = self.grid_.extent
        X0 = np.empty((count, self.dim))
        noise = np.empty((2, count, n_half, self.dim))
        for p in range(count):
            ss = np.random.SeedSequence([int(seed) & (2**63 - 1), 0x50A7, start + p])
            s_start, s_fwd, s_bwd = ss.spawn(3)
            if x0 is None:
                X0[p] = self._sample_start(np.random.default_rng(s_start), 1)[0]
            noise[0, p] = np.random.default_rng(s_fwd).standard_normal((n_half, self.dim))
            noise[1, p] = np.random.default_rng(s_bwd).standard_normal((n_half, self.dim))
        if x0 is not None:
            X0[:] = np.asarray(x0, dtype=float)
        out = np.empty((count, 2 * n_half + 1, self.dim))
        out[:, n_half] = X0
        excursions = 0
        sq = math.sqrt(dt)
        for half, sign in ((0, 1), (1, -1)):
            x = X0.copy()
            for s in range(n_half):
                x = x + self.drift(x) * dt + sq * noise[half, :, s]
                over = np.abs(x) > L
                if np.any(over):
                    excursions += int(np.count_nonzero(np.any(over, axis=-1)))
                    x = np.where(x > L, 2 * L - x, x)
                    x = np.where(x < -L, -2 * L - x, x)
                    x = np.clip(x, -L, L)
                out[:, n_half + sign * (s + 1)] = x
        return out, excursions

    def sample(self, T, dt, seed=0, n_paths=1, x0=None, first_path=0):
        """Euler-Maruyama paths on ``[-T, T]``; per-path streams keyed by ``(seed, path index)``."""
        check_is_fitted(self, "phi_")
        if not T > 0 or not dt > 0:
            raise DomainError("T and dt must be positive")
        if dt > self.dt_max_:
            raise DomainError(f"dt={dt} exceeds the stability bound dt_max={self.dt_max_:.4g}")
        n_half = int(round(T / dt))
        if not math.isclose(n_half * dt, T, rel_tol=1e-9):
            raise DomainError("T must be an integer multiple of dt")
        starts = list(range(first_path, first_path + n_paths, PATH_BLOCK))
        counts = [min(PATH_BLOCK, first_path + n_paths - s) for s in starts]
        jobs = (delayed(self._path_block)(T, dt, seed, s, c, x0) for s, c in zip(starts, counts))
        if self.n_jobs == 1:
            blocks = [self._path_block(T, dt, seed, s, c, x0) for s, c in zip(starts, counts)]
        else:
            blocks = Parallel(n_jobs=self.n_jobs)(jobs)
        positions = np.concatenate([b[0] for b in blocks])
        excursions = sum(b[1] for b in blocks)
        steps = 2 * n_half * n_paths
        times = (np.arange(2 * n_half + 1) - n_half) * dt
        return ParticlePath(float(T), float(dt), times, positions, int(seed), first_path,
                            excursions, steps)


# ---------------------------------------------------------------------------
# operations


def solve_ground_state(potential, grid=None, **kwargs):
    grid = grid or Grid()
    return GroundStateDiffusion(potential, grid.extent, grid.points, grid.dim, **kwargs).fit()


def sample_path(model, T, dt, seed=0, n_paths=1, x0=None):
    return model.sample(T, dt, seed, n_paths, x0)


def feynman_kac_check(model, times, observables, n_paths=10_000, dt=0.01, seed=0, paths=None):
    """MC ``E[prod f_j(X_{t_j})]`` against the grid product ``(f_0, e^{-s_1 L} f_1 ...)``."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise DomainError("times must be ordered")
    if len(observables) != len(times):
        raise DomainError("one observable per time is required")
    T = max(float(np.max(np.abs(times))), dt)
    T = math.ceil(T / dt - 1e-9) * dt
    if paths is None:
        paths = model.sample(T, dt, seed, n_paths)
    prod = np.ones(paths.n_paths)
    for t, f in zip(times, observables):
        prod *= np.asarray(f(paths.at(t)), dtype=float)
    mc = float(prod.mean())
    se = float(prod.std(ddof=1) / np.sqrt(prod.size)) if prod.size > 1 else float("inf")
    pts = model.grid_points()
    u = np.asarray(observables[-1](pts), dtype=float) * model.phi_
    for j in range(len(times) - 2, -1, -1):
        u = model.semigroup_apply(u, times[j + 1] - times[j])
        u = u * np.asarray(observables[j](pts), dtype=float)
    grid = float(model.h**model.dim * np.sum(u * model.phi_))
    if se == 0:
        z = 0.0 if abs(mc - grid) < 1e-12 else float("inf")
    else:
        z = (mc - grid) / se
    return FeynmanKacReport(tuple(times.tolist()), mc, se, grid, float(z), paths.n_paths)


def smooth_step(u):
    """``C^infinity`` step: 0 for ``u <= 0``, 1 for ``u >= 1``, with its first derivative."""
    u = np.asarray(u, dtype=float)

    def psi(s):
        return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)

    def dpsi(s):
        sp = np.where(s > 0, s, 1.0)
        return np.where(s > 0, np.exp(-1.0 / sp) / sp**2, 0.0)

    a, b = psi(u), psi(1 - u)
    val = a / (a + b)
    der = (dpsi(u) * b + a * dpsi(1 - u)) / (a + b) ** 2
    return val, der


def ramp_function(level):
    """``f = |x|`` for ``|x| >= level``, 0 for ``|x| <= level - 1``; returns ``(f, f')`` of ``r``."""

    def f(r):
        s, ds = smooth_step(np.asarray(r, float) - (level - 1.0))
        return r * s, s + r * ds

    return f


def tail_envelope(model, a, b):
    """``(6/b) sqrt((f, f) + a (f, L_p f))`` with the ramp ``f`` at level ``b``."""
    pts = model.grid_points()
    r = np.linalg.norm(pts, axis=-1)
    f, df = ramp_function(b)(r)
    ff = model.expectation(f * f)
    # (f, L_p f) = 1/2 int |grad f|^2 phi^2 and |grad f| = f'(r) for radial f
    energy = 0.5 * model.expectation(df * df)
    return 6.0 / b * math.sqrt(ff + a * energy)


def tail_probability(model, a, b, n_paths=10_000, dt=0.01, seed=0, paths=None):
    """MC ``P(sup_{|s|<a} |X_s| > b)`` with the envelope; raises if the envelope is exceeded."""
    if paths is None:
        T = math.ceil(a / dt - 1e-9) * dt
        paths = model.sample(T, dt, seed, n_paths)
    sel = np.abs(paths.times) < a + 1e-12
    sup = np.linalg.norm(paths.positions[:, sel], axis=-1).max(axis=1)
    hit = (sup > b).astype(float)
    est = float(hit.mean())
    se = float(hit.std(ddof=1) / np.sqrt(hit.size)) if hit.size > 1 else float("inf")
    env = tail_envelope(model, a, b)
    if est > env:
        raise InvariantViolation(f"tail estimate {est:.4g} exceeds envelope {env:.4g}")
    return TailReport(float(a), float(b), est, se, env, paths.n_paths)


def confinement_decay_fit(model, fraction=0.2, n_radii=40, edge_cells=3):
    """Fit ``log phi ~ log C - delta |x|^{alpha+1}`` on the outer ``fraction`` of the resolved radii.

    ``C`` is raised afterwards so the envelope dominates ``phi`` on the fit region.
    """
    check_is_fitted(model, "phi_")
    L = model.grid_.extent - edge_cells * model.h
    dirs, _ = sphere_rule(26) if model.dim == 3 else (np.array([[1.0], [-1.0]]), None)
    floor = np.log(model.resolved_ratio) + float(model.log_phi_.max())
    radii = np.linspace(0, L, 400)
    lp = np.array([model.log_phi(r * dirs).min() for r in radii])
    resolved = radii[lp > floor]
    R = float(resolved.max()) if resolved.size else L
    r_fit = np.linspace((1 - fraction) * R, R, n_radii)
    pts = (r_fit[:, None, None] * dirs[None]).reshape(-1, model.dim)
    rr = np.linalg.norm(pts, axis=-1)
    yy = model.log_phi(pts)

    def form(r, logc, delta, p):
        return logc - delta * r**p

    p0 = (float(yy.max()), 0.5, model.potential_.alpha + 1.0)
    (logc, delta, p), _ = optimize.curve_fit(form, rr, yy, p0=p0, maxfev=20000)
    gap = float(np.max(yy - form(rr, logc, delta, p)))
    logc += max(gap, 0.0) + 1e-12
    resid = float(np.sqrt(np.mean((yy - form(rr, logc - max(gap, 0.0), delta, p)) ** 2)))
    if not delta > 0:
        raise ConvergenceError(f"decay fit returned non-positive delta={delta:.3g}")
    return DecayFit(float(np.exp(logc)), float(delta), float(p - 1.0), float(r_fit[0]), R, resid)


def default_lambda(alpha):
    """Midpoint of ``(1/(alpha+1), 1)``."""
    return 0.5 * (1.0 / (alpha + 1.0) + 1.0)


def xi_bound(model, fit, T, lam=None, n_r=400):
    """``xi(T) = (12/T^lam) sqrt(|a1 - E0| + T (a2 + a3)) + a4`` with the constants of the fit.

    ``a1, a2, a4`` are radial integrals against ``C^2 e^{-delta |x|^{alpha+1}}``; ``a3`` uses
    the grid ground state through ``G = f^2 Lap phi + 2 f grad phi . grad f + f phi Lap f``.
    """
    lam = default_lambda(model.potential_.alpha) if lam is None else lam
    alpha = model.potential_.alpha
    level = T**lam
    C, d = fit.C, fit.delta
    p = fit.alpha_fit + 1.0
    dim = model.dim
    surface = 4 * np.pi if dim == 3 else 2.0
    r = np.linspace(0, level + 40.0, n_r * 10)
    jac = surface * r ** (dim - 1)
    f, df = ramp_function(level)(r)
    env = np.exp(-d * r**p)
    a1 = C**2 * np.trapezoid(f**2 * env * jac, r)
    a2 = C**2 * np.trapezoid(env * f**2 * r ** (2 * alpha) * jac, r)
    a4 = C**2 * np.trapezoid(env * jac, r)
    # a3 on the grid
    pts = model.grid_points()
    rg = np.linalg.norm(pts, axis=-1)
    fg, dfg = ramp_function(level)(rg)
    phi = model.phi_
    lap_phi = -2.0 * (model.apply_hamiltonian(phi) - np.asarray(model.potential_(pts)) * phi)
    lap_f = _radial_laplacian(ramp_function(level), rg, dim)
    grad_phi = np.stack(np.gradient(phi, model.h, edge_order=2), -1) if dim > 1 else np.gradient(phi, model.h)[..., None]
    unit = np.where(rg[..., None] > 0, pts / np.where(rg > 0, rg, 1.0)[..., None], 0.0)
    G = fg**2 * lap_phi + 2 * fg * dfg * np.sum(grad_phi * unit, axis=-1) + lap_f * fg * phi
    a3 = C * model.h**dim * np.sum(np.exp(-0.5 * d * rg**p) * np.abs(G))
    E0 = model.ground_energy_
    xi = 12.0 / level * math.sqrt(abs(a1 - E0) + T * (a2 + a3)) + a4
    return float(xi), {"a1": float(a1), "a2": float(a2), "a3": float(a3), "a4": float(a4),
                       "lambda": float(lam), "level": float(level)}


def _radial_laplacian(fn, r, dim, eps=1e-4):
    # f'' + (d-1) f'/r for radial f by central differences of f'
    _, d0 = fn(r)
    _, dp = fn(r + eps)
    _, dm = fn(np.maximum(r - eps, 0.0))
    second = (dp - dm) / (r + eps - np.maximum(r - eps, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        first = np.where(r > 0, (dim - 1) * d0 / np.where(r > 0, r, 1.0), 0.0)
    return second + first


def a_t_complement_probability(model, T, lam=None, n_paths=10_000, dt=0.01, seed=0, paths=None):
    """MC ``P(sup_{|s|<=T} |X_s| > T^lam)`` with its standard error."""
    lam = default_lambda(model.potential_.alpha) if lam is None else lam
    if paths is None:
        paths = model.sample(T, dt, seed, n_paths)
    sup = np.linalg.norm(paths.positions, axis=-1).max(axis=1)
    hit = (sup > T**lam).astype(float)
    return float(hit.mean()), float(hit.std(ddof=1) / np.sqrt(hit.size))
