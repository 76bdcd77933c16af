"""Command line: ``nelsonir run | validate | audit``.

Exit status 0 on success, 2 on an invariant violation or a failed audit check,
3 on a configuration error or a rejected configuration.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
import time

import numpy as np
import scipy

from . import audits
from ._errors import AssumptionRefused, ConvergenceError, DomainError, InvariantViolation
from .config import ConfigError, load_config, parse_config
from .scenarios import SCENARIO_FUNCTIONS, scenario_seed
from .validation import validate

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 2, 3
MANIFEST = "manifest.json"

log = logging.getLogger("nelsonir")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _overrides(args):
    items = list(args.override or [])
    if args.seed is not None:
        items.append(f"run.seed={args.seed}")
    if args.workers is not None:
        items.append(f"run.workers={args.workers}")
    return items


def _load(args):
    """``(config, expected_hashes)``; a manifest source replays its embedded config."""
    if args.source.endswith(".json"):
        try:
            with open(args.source) as fh:
                manifest = json.load(fh)
            text = manifest["config"]
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read manifest {args.source}: {exc}") from None
        return parse_config(text, _overrides(args)), manifest.get("files", {})
    return load_config(args.source, _overrides(args)), None


def run(cfg, out_dir, expected=None):
    """Execute every scenario of ``cfg`` into ``out_dir``; returns ``(status, manifest)``."""
    start = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    report = validate(cfg)
    for line in report.lines():
        if not line.startswith("INFO"):
            log.warning(line)
    manifest = {
        "config": cfg.render(),
        "seed": cfg["run.seed"],
        "workers": cfg["run.workers"],
        "scenarios": list(cfg["run.scenarios"]),
        "scenario_seeds": {},
        "validation": [c.as_dict() for c in report.checks],
        "files": {},
        "summary": {},
        "git": git_describe(),
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "status": "ok",
    }
    status = EXIT_OK
    if report.rejected:
        manifest["status"] = "rejected"
        status = EXIT_CONFIG
    else:
        for name in cfg["run.scenarios"]:
            seed = scenario_seed(cfg["run.seed"], name)
            manifest["scenario_seeds"][name] = seed
            try:
                res = SCENARIO_FUNCTIONS[name](cfg, out_dir, seed)
            except (InvariantViolation, ConvergenceError) as exc:
                manifest["status"] = f"{name}: {type(exc).__name__}: {exc}"
                status = EXIT_INVARIANT
                break
            for path in res.files:
                manifest["files"][os.path.basename(path)] = sha256(path)
            manifest["summary"][name] = res.summary
            if res.failed_checks:
                manifest["status"] = f"{name}: failed checks {res.failed_checks}"
                status = EXIT_INVARIANT
    if expected is not None and status == EXIT_OK:
        diff = sorted(k for k in set(expected) | set(manifest["files"])
                      if expected.get(k) != manifest["files"].get(k))
        manifest["reproduced"] = not diff
        if diff:
            manifest["status"] = f"not reproduced: {diff}"
            status = EXIT_INVARIANT
    manifest["wall_time_s"] = time.perf_counter() - start
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, default=float)
        fh.write("\n")
    return status, manifest


def _cmd_run(args):
    cfg, expected = _load(args)
    out_dir = cfg.output_dir(args.out)
    status, manifest = run(cfg, out_dir, expected)
    print(f"{manifest['status']} -> {os.path.join(out_dir, MANIFEST)}")
    return status


def _cmd_validate(args):
    cfg = load_config(args.source)
    report = validate(cfg)
    if args.json:
        print(json.dumps([c.as_dict() for c in report.checks], indent=2))
    else:
        print("\n".join(report.lines()))
    return EXIT_CONFIG if report.rejected else EXIT_OK


def _cmd_audit(args):
    suites = [("closed_form", audits.closed_form_checks), ("kernels", audits.kernel_checks),
              ("geometry", audits.metric_checks),
              ("particle", lambda: audits.particle_checks(seed=args.seed, workers=args.workers)),
              ("scattering", lambda: audits.scattering_checks(seed=args.seed))]
    checks = []
    for name, fn in suites:
        t0 = time.perf_counter()
        rows = fn()
        checks += rows
        for c in rows:
            print(f"{'PASS' if c.passed else 'FAIL'} {name}.{c.name}: value={c.value:.6g} "
                  f"reference={c.reference:.6g} tol={c.tolerance:.3g} {c.note}".rstrip())
        print(f"# {name}: {time.perf_counter() - t0:.1f} s")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        audits.write_checks(os.path.join(args.out, "audit.csv"), checks)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_INVARIANT


def build_parser():
    p = argparse.ArgumentParser(prog="nelsonir", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the scenarios of a config file or replay a manifest")
    r.add_argument("source", help="config file, or a manifest.json to re-run")
    r.add_argument("--override", action="append", metavar="KEY=VALUE")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=_cmd_run)
    v = sub.add_parser("validate", help="check model hypotheses without running")
    v.add_argument("source")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=_cmd_validate)
    a = sub.add_parser("audit", help="run every module invariant suite")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=_cmd_audit)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError, AssumptionRefused) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, ConvergenceError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
