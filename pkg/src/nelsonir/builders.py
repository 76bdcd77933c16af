"""Model objects assembled from a resolved ``RunConfig``."""

import math

from . import diagnostics, particle, scattering
from .geometry import VariableMass, japanese
from .kernels import CutoffProfile, KernelTable
from .quadrature import QuadratureSpec

# spline knots per unit of the UV cutoff needed to keep W within its audit budget
KNOTS_PER_LAMBDA = 160


def potential(cfg):
    if cfg["particle.potential"] == "harmonic":
        return particle.harmonic(cfg["particle.coefficient"])
    return particle.poly_confining(cfg["particle.C"], cfg["particle.alpha"])


def particle_model(cfg, workers=None):
    n_jobs = cfg["run.workers"] if workers is None else workers
    return particle.GroundStateDiffusion(potential(cfg), cfg["particle.grid_extent"],
                                         cfg["particle.grid_points"], n_jobs=n_jobs).fit()


def cutoff(cfg, sigma=None):
    if sigma is not None:
        return CutoffProfile("ir_regularized", cfg["kernel.lambda"], sigma)
    return CutoffProfile(cfg["kernel.shape"], cfg["kernel.lambda"], cfg["kernel.sigma"])


def short_range_profile(cfg):
    beta = cfg["scattering.w_beta"]
    return VariableMass(lambda y: japanese(y) ** -beta, kappa=1.0, beta=beta, bound_C=1.0)


def eigenfunction(cfg, kappa=None):
    """Fitted ``BornEigenfunction`` (``kappa = 0`` gives plane waves)."""
    kappa = cfg["scattering.kappa"] if kappa is None else kappa
    quad = QuadratureSpec(radial_nodes=cfg["kernel.radial_nodes"],
                          angular_nodes=cfg["kernel.angular_nodes"],
                          mc_samples=cfg["scattering.mc_samples"], seed=cfg["run.seed"] % 2**64)
    return scattering.BornEigenfunction(
        kappa=kappa, w=short_range_profile(cfg), born_order=cfg["scattering.born_order"],
        quadrature=quad, mc_tolerance=cfg["scattering.mc_tolerance"],
        cache_resolution=cfg["scattering.cache_resolution"]).fit()


def kappa_max(cfg):
    return eigenfunction(cfg, 0.0).kappa_max_


def born_weight(cfg):
    if cfg["scattering.kappa"] == 0:
        return 0.0
    return diagnostics.born_weight(eigenfunction(cfg))


def kernel_table(cfg, cut=None, gef=None, horizon=None):
    cut = cutoff(cfg) if cut is None else cut
    n_r = max(cfg["kernel.table_resolution"], math.ceil(KNOTS_PER_LAMBDA * cut.lam) + 1)
    t_max = max(20.0, 2.0 * horizon + 1.0) if horizon else 20.0
    return KernelTable(cutoff=cut, gef=gef, t_max=t_max, n_r=n_r,
                       k_radial_nodes=cfg["kernel.radial_nodes"],
                       angular_nodes=cfg["kernel.angular_nodes"], seed=cfg["run.seed"]).fit()
