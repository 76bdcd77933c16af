"""Machine checks of the model hypotheses for a resolved ``RunConfig``.

Each hypothesis gets a row with how it was established (``verified``,
``guaranteed-by-family`` or ``unverifiable-documented``), whether it holds and a
severity. Rows with severity ``error`` reject the configuration.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import builders
from ._errors import NelsonIRError
from .geometry import japanese

STATUSES = ("verified", "guaranteed-by-family", "unverifiable-documented")
SEVERITIES = ("info", "warning", "error")
ABSENCE_SCENARIOS = ("gamma_scan",)


@dataclass
class AssumptionCheck:
    name: str
    status: str
    holds: bool
    severity: str
    detail: str

    def __post_init__(self):
        if self.status not in STATUSES or self.severity not in SEVERITIES:
            raise ValueError(f"bad status/severity {self.status!r}/{self.severity!r}")

    def as_dict(self):
        return asdict(self)


@dataclass
class ValidationReport:
    checks: list

    @property
    def rejected(self):
        return any(c.severity == "error" for c in self.checks)

    @property
    def warnings(self):
        return [c for c in self.checks if c.severity == "warning"]

    def lines(self):
        return [f"{c.severity.upper():7s} {c.name}: {c.status}, holds={c.holds} ({c.detail})"
                for c in self.checks]


def _row(name, status, holds, detail, fail_severity="error"):
    return AssumptionCheck(name, status, bool(holds), "info" if holds else fail_severity, detail)


def _box_faces(L, n=11):
    g = np.linspace(-L, L, n)
    a, b = np.meshgrid(g, g, indexing="ij")
    faces = []
    for i in range(3):
        others = [j for j in range(3) if j != i]
        for s in (-L, L):
            pts = np.empty(a.shape + (3,))
            pts[..., i] = s
            pts[..., others[0]] = a
            pts[..., others[1]] = b
            faces.append(pts.reshape(-1, 3))
    return np.concatenate(faces)


def _particle_checks(cfg):
    out = []
    try:
        pot = builders.potential(cfg)
    except NelsonIRError as exc:
        return [_row("V: potential family", "verified", False, str(exc))]
    L, N = cfg["particle.grid_extent"], cfg["particle.grid_points"]
    g = np.linspace(-L, L, 21)
    bulk = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    vb = np.asarray(pot(bulk), float)
    out.append(_row("V: locally regular and bounded below", "verified",
                    np.all(np.isfinite(vb)) and vb.min() >= 0,
                    f"{pot.kind} polynomial family, min V = {vb.min():.3g} on a 21^3 sample"))
    ring = _box_faces(L)
    r = np.linalg.norm(ring, axis=-1)
    ok = np.all(np.asarray(pot(ring), float) >= pot.C * r ** (2 * pot.alpha) * (1 - 1e-12))
    out.append(_row("V: V >= C |x|^{2 alpha} outside a compact set", "verified", ok,
                    f"C = {pot.C:g}, alpha = {pot.alpha:g} on the grid boundary faces"))
    h = 2 * L / (N - 1)
    ell = pot.harmonic_length()
    out.append(_row("grid resolves the well", "verified", ell >= 6 * h,
                    f"well length {ell:.3g}, h = {h:.3g}"))
    if pot.separable and ell >= 6 * h:
        try:
            model = builders.particle_model(cfg)
            holds, detail = True, f"E0 = {model.ground_energy_:.6g}, min phi > 0 on the grid"
        except NelsonIRError as exc:
            holds, detail = False, str(exc)
        out.append(_row("phi_p strictly positive", "verified", holds, detail))
    else:
        out.append(_row("phi_p strictly positive", "guaranteed-by-family", True,
                        "ground state of a confining Schrodinger operator is positive; "
                        "checked on the grid at fit time"))
    return out


def _cutoff_checks(cfg, scenarios):
    out = []
    try:
        cut = builders.cutoff(cfg)
    except NelsonIRError as exc:
        return [_row("cutoff profile", "verified", False, str(exc))]
    absence = any(s in ABSENCE_SCENARIOS for s in scenarios)
    if cut.chi_check_nonnegative:
        out.append(_row("chi_check >= 0", "verified", True, "gaussian transform is a gaussian"))
    else:
        r = np.linspace(0.0, 40.0 / cut.lam, 4001)
        vmin = float(np.min(cut.chi_check(r)))
        out.append(_row("chi_check >= 0", "verified", vmin >= 0,
                        f"{cut.shape} cutoff: min chi_check = {vmin:.3g}; absence-of-ground-state "
                        "results do not apply", "warning" if absence else "info"))
    regime = "IR regular" if cut.ir_regular else "IR singular"
    out.append(_row("infrared regime", "verified", True,
                    f"{regime}: int chi^2/omega^3 {'< inf' if cut.ir_regular else '= inf'}"))
    return out


def _short_range_checks(cfg):
    out = []
    beta = cfg["scattering.w_beta"]
    out.append(_row("w short range: beta > 3", "verified", beta > 3, f"beta = {beta:g}"))
    if beta <= 3:
        return out
    rng = np.random.default_rng(0)
    pts = rng.normal(scale=10.0, size=(2000, 3))
    w = builders.short_range_profile(cfg)
    ok = np.all(np.abs(w.v(pts)) <= w.bound_C * japanese(pts) ** -beta * (1 + 1e-12))
    out.append(_row("|w| <= C <x>^{-beta}", "verified", ok, "2000 random points"))
    out.append(_row("no non-positive eigenvalues of -Delta + kappa w", "guaranteed-by-family",
                    cfg["scattering.kappa"] >= 0, "w >= 0 and kappa >= 0 give -Delta + v >= 0 "
                    "without bound states"))
    kappa = cfg["scattering.kappa"]
    if kappa > 0:
        kmax = builders.kappa_max(cfg)
        out.append(_row("Born series margin kappa < kappa_0", "verified", kappa < kmax,
                        f"kappa = {kappa:g}, kappa_0 = {kmax:.6g}"))
    return out


def _absence_condition(cfg, scenarios):
    if not any(s in ABSENCE_SCENARIOS for s in scenarios):
        return []
    try:
        c = builders.born_weight(cfg)
        alpha = builders.potential(cfg).alpha
    except NelsonIRError as exc:
        return [_row("1/(alpha+1) + kappa C0 (kappa C0 + 2) < 1", "verified", False, str(exc))]
    lhs = 1.0 / (alpha + 1.0) + c
    return [_row("1/(alpha+1) + kappa C0 (kappa C0 + 2) < 1", "verified", lhs < 1,
                 f"value {lhs:.4g}", "warning")]


def _geometry_checks(cfg, scenarios):
    if "metric_report" not in scenarios or cfg["geometry.family"] != "conformal":
        return []
    a, beta = cfg["geometry.a"], cfg["geometry.beta"]
    if beta <= 1:
        return [_row("conformal v short range", "verified", False,
                     f"beta = {beta:g}: v decays like <x>^(-beta-2), needs beta > 1")]
    return [_row("conformal v short range", "verified", True,
                 f"decay exponent beta + 2 = {beta + 2:g}"),
            AssumptionCheck("no non-positive eigenvalues of -Delta + v", "unverifiable-documented",
                            True, "info", "only the Lieb-Thirring count bound is checked "
                            "(metric_report)")]


def validate(cfg):
    """``ValidationReport`` for ``cfg`` (no Monte Carlo, only cheap grid checks)."""
    scenarios = cfg["run.scenarios"]
    checks = _particle_checks(cfg) + _cutoff_checks(cfg, scenarios) + _short_range_checks(cfg)
    if cfg["scattering.w_beta"] > 3:
        checks += _absence_condition(cfg, scenarios)
    checks += _geometry_checks(cfg, scenarios)
    return ValidationReport(checks)
