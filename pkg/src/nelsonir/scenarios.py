"""CLI scenarios: each writes CSVs into ``out_dir`` and returns a ``ScenarioResult``."""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import audits, builders, diagnostics


@dataclass
class ScenarioResult:
    files: list
    summary: dict = field(default_factory=dict)
    failed_checks: list = field(default_factory=list)


def scenario_seed(seed, name):
    """Per-scenario seed derived from the run seed and the scenario name."""
    tag = int.from_bytes(name.encode(), "little") % 2**32
    return int(np.random.SeedSequence([int(seed), 0x5CE7, tag]).generate_state(1)[0])


def _write_rows(path, header, rows, comment):
    with open(path, "w", newline="") as fh:
        fh.write(f"# gnuplot: {comment}\n")
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _checks_result(out_dir, name, checks, extra_files=()):
    path = os.path.join(out_dir, f"{name}.csv")
    audits.write_checks(path, checks)
    failed = [c.name for c in checks if not c.passed]
    summary = {"n_checks": len(checks), "n_failed": len(failed)}
    return ScenarioResult([path, *extra_files], summary, failed)


def kernel_audit(cfg, out_dir, seed):
    checks = audits.closed_form_checks() + audits.kernel_checks()
    if cfg["scattering.kappa"] > 0:
        checks += audits.scattering_checks(seed=seed % 2**32)
    table = builders.kernel_table(cfg)
    slices = os.path.join(out_dir, "w_slices.csv")
    table.export_slices(slices, np.linspace(0.0, 8.0, 33), (0.0, 0.5, 1.0, 2.0, 4.0))
    return _checks_result(out_dir, "kernel_audit", checks, [slices])


def particle_audit(cfg, out_dir, seed):
    model = builders.particle_model(cfg)
    checks = audits.particle_checks(cfg["particle.audit_paths"], seed % 2**32, cfg["run.workers"],
                                    cfg["particle.audit_dt"], model)
    return _checks_result(out_dir, "particle_audit", checks)


def metric_report(cfg, out_dir, seed):
    checks = audits.metric_checks(cfg["geometry.a"], cfg["geometry.beta"], cfg["geometry.n_points"],
                                  seed % 2**32, cfg["geometry.clt_constant"])
    return _checks_result(out_dir, "metric_report", checks)


def gamma_scan(cfg, out_dir, seed):
    times = cfg["diagnostics.times"]
    model = builders.particle_model(cfg)
    cut = builders.cutoff(cfg)
    gef = builders.eigenfunction(cfg) if cfg["scattering.kappa"] > 0 else None
    table = builders.kernel_table(cfg, cut, gef, max(times))
    g = cfg["diagnostics.g"]
    scan = diagnostics.gamma_scan(model, table, g, times, cfg["diagnostics.n_paths"], seed,
                                  cfg["particle.dt"], cfg["diagnostics.stride"],
                                  cfg["diagnostics.ess_floor"])
    path = os.path.join(out_dir, "gamma_scan.csv")
    scan.write_csv(path)
    files = [path]
    summary = {"gamma": scan.estimates.tolist(),
               "strictly_decreasing": bool(np.all(np.diff(scan.estimates) < 0))}
    if g != 0 and len(times) > 1:
        fit = diagnostics.fit_log_trend(times, scan)
        summary.update(log_slope=fit.slope, log_slope_stderr=fit.stderr,
                       decreasing_at_3sigma=fit.decreasing_at_3sigma)
    if cut.chi_check_nonnegative:
        lam = cfg["diagnostics.witness_lambda"]
        wt = cfg["diagnostics.witness_times"]
        slope, rho = diagnostics.witness_log_slope(cut, wt, lam, gef)
        target = diagnostics.witness_slope_target(lam, diagnostics.born_weight(gef))
        wpath = os.path.join(out_dir, "witness.csv")
        _write_rows(wpath, ["T", "rho"], zip([float(t) for t in wt], rho),
                    "set logscale x; plot 'file' using 1:2")
        files.append(wpath)
        summary.update(witness_slope=slope, witness_target=target)
    return ScenarioResult(files, summary)


def ir_scan(cfg, out_dir, seed):
    model = builders.particle_model(cfg)
    cutoffs = [builders.cutoff(cfg, s) for s in cfg["diagnostics.sigmas"]]
    scan = diagnostics.number_scan(
        model, cutoffs, cfg["diagnostics.g"], cfg["diagnostics.horizon"], cfg["diagnostics.n_paths"],
        seed, cfg["particle.dt"], cfg["diagnostics.stride"], cfg["diagnostics.extend_horizon"],
        cfg["diagnostics.ess_floor"], make_table=lambda c: builders.kernel_table(cfg, c))
    path = os.path.join(out_dir, "ir_scan.csv")
    scan.write_csv(path)
    slope, intercept, r2 = diagnostics.ir_regression(scan)
    return ScenarioResult([path], {"number": scan.estimates.tolist(), "slope": slope,
                                   "intercept": intercept, "r_squared": r2})


def number_scan(cfg, out_dir, seed):
    model = builders.particle_model(cfg)
    cut = builders.cutoff(cfg)
    gef = builders.eigenfunction(cfg) if cfg["scattering.kappa"] > 0 else None
    T = cfg["diagnostics.horizon"]
    g = cfg["diagnostics.g"]
    table = builders.kernel_table(cfg, cut, gef, T)
    paths = model.sample(T, cfg["particle.dt"], seed=seed, n_paths=cfg["diagnostics.n_paths"])
    ens = diagnostics.tilted_ensemble(table, paths, g, cfg["diagnostics.ess_floor"],
                                      cfg["diagnostics.stride"])
    bpath = os.path.join(out_dir, "number_beta.csv")
    diagnostics.beta_scan(ens, cfg["diagnostics.betas"]).write_csv(bpath)
    # the decorrelated tail is log-divergent unless the cutoff is IR regular
    extend = cfg["diagnostics.extend_horizon"] and cut.ir_regular
    tail = diagnostics.horizon_tail(model, cut, T) if extend else 0.0
    mc = diagnostics.number_expectation_mc(ens, cut, tail)
    spectral = diagnostics.truncated_fock_hamiltonian(
        model, gef, cut, g, cfg["diagnostics.n_modes"], cfg["diagnostics.n_max"],
        cfg["diagnostics.n_particle"])
    pull = diagnostics.number_expectation_pullthrough(spectral, gef, cut)
    overlap = diagnostics.psi0_overlap(spectral, gef)
    cpath = os.path.join(out_dir, "number_compare.csv")
    _write_rows(cpath, ["quantity", "value", "stderr"],
                [("number_mc", mc.value, mc.stderr), ("number_pullthrough", pull, 0.0),
                 ("psi0_overlap", overlap, 0.0)], "plot 'file' using 2:xtic(1)")
    rel = abs(pull - mc.value) / abs(mc.value) if mc.value else float("inf")
    return ScenarioResult([bpath, cpath], {"number_mc": mc.value, "number_mc_stderr": mc.stderr,
                                           "number_pullthrough": pull, "relative_difference": rel,
                                           "psi0_overlap": overlap, "fock_dim": spectral.dim,
                                           "horizon_tail": tail, "matched": cut.ir_regular})


SCENARIO_FUNCTIONS = {
    "kernel_audit": kernel_audit,
    "particle_audit": particle_audit,
    "gamma_scan": gamma_scan,
    "ir_scan": ir_scan,
    "number_scan": number_scan,
    "metric_report": metric_report,
}
