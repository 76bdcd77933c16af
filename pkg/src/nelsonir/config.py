"""Run configuration: a ``key = value`` text file with one section per module.

Every key is declared in ``SCHEMA``; unknown sections or keys, malformed values and
out-of-range values raise ``ConfigError`` before any computation starts.
"""

import configparser
import os
from dataclasses import dataclass

from ._errors import NelsonIRError

SCENARIOS = ("kernel_audit", "particle_audit", "gamma_scan", "ir_scan", "number_scan",
             "metric_report")
OUTPUT_ENV = "NELSONIR_OUTPUT_DIR"


class ConfigError(NelsonIRError, ValueError):
    """The configuration is malformed or inconsistent (CLI exit status 3)."""


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class Key:
    parse: object
    default: str
    doc: str
    choices: tuple = ()
    positive: bool = False


SCHEMA = {
    "run.scenarios": Key(_names, "gamma_scan", "comma-separated scenario list", SCENARIOS),
    "run.seed": Key(int, "0", "base seed for every random stream"),
    "run.workers": Key(int, "1", "joblib workers for path sampling", positive=True),
    "run.output": Key(str, "", f"output directory (empty: ${OUTPUT_ENV} or ./runs)"),
    "geometry.family": Key(str, "conformal", "metric family", ("conformal", "flat")),
    "geometry.a": Key(float, "0.05", "conformal amplitude a"),
    "geometry.beta": Key(float, "2.0", "conformal exponent beta"),
    "geometry.fd_step": Key(float, "1e-4", "finite-difference step", positive=True),
    "geometry.clt_constant": Key(float, "0.1156", "Lieb-Thirring constant", positive=True),
    "geometry.n_points": Key(int, "100", "random comparison points", positive=True),
    "scattering.kappa": Key(float, "0.0", "variable-mass coupling kappa"),
    "scattering.w_beta": Key(float, "4.0", "short-range exponent of w(y) = <y>^-beta",
                             positive=True),
    "scattering.born_order": Key(int, "2", "Born series truncation order"),
    "scattering.cache_resolution": Key(_opt_float, "none", "lattice spacing of the Psi memo cache"),
    "scattering.mc_samples": Key(int, "20000", "MC samples per Born layer", positive=True),
    "scattering.mc_tolerance": Key(_opt_float, "none", "MC standard-error target"),
    "kernel.shape": Key(str, "gaussian", "cutoff shape", ("sharp", "gaussian", "ir_regularized")),
    "kernel.lambda": Key(float, "1.0", "UV cutoff Lambda", positive=True),
    "kernel.sigma": Key(float, "0.0", "IR hole radius sigma (ir_regularized)"),
    "kernel.radial_nodes": Key(int, "20", "radial k nodes (distorted kernel)", positive=True),
    "kernel.angular_nodes": Key(int, "26", "angular k nodes", positive=True),
    "kernel.table_resolution": Key(int, "161", "radial knots of the W table", positive=True),
    "particle.potential": Key(str, "harmonic", "potential family", ("harmonic", "poly_confining")),
    "particle.coefficient": Key(float, "0.5", "harmonic coefficient c in V = c |x|^2", positive=True),
    "particle.C": Key(float, "1.0", "poly_confining prefactor C in V = C |x|^{2 alpha}", positive=True),
    "particle.alpha": Key(float, "2.0", "poly_confining growth exponent alpha", positive=True),
    "particle.grid_extent": Key(float, "6.0", "half-width L of the grid", positive=True),
    "particle.grid_points": Key(int, "121", "points per axis", positive=True),
    "particle.dt": Key(float, "0.05", "Euler-Maruyama step of the diagnostics paths", positive=True),
    "particle.audit_dt": Key(float, "0.01", "Euler-Maruyama step of the particle audit", positive=True),
    "particle.audit_paths": Key(int, "10000", "paths of the particle audit", positive=True),
    "diagnostics.g": Key(float, "0.5", "coupling g"),
    "diagnostics.times": Key(_floats, "1,2,4,8", "gamma scan horizons T"),
    "diagnostics.n_paths": Key(int, "1000", "paths per estimate", positive=True),
    "diagnostics.stride": Key(int, "1", "time stride in the W double sums", positive=True),
    "diagnostics.ess_floor": Key(float, "100", "effective sample size floor", positive=True),
    "diagnostics.sigmas": Key(_floats, "1e-1,1e-2,1e-3,1e-4", "IR scan hole radii"),
    "diagnostics.horizon": Key(float, "4.0", "T for the number and IR scans", positive=True),
    "diagnostics.extend_horizon": Key(_bool, "true", "add the decorrelated tail beyond T"),
    "diagnostics.betas": Key(_floats, "0,0.5,1,2,4", "beta values of the e^{-beta N} scan"),
    "diagnostics.witness_lambda": Key(float, "0.55", "lambda of the divergence witness"),
    "diagnostics.witness_times": Key(_floats, "1e2,1e3,1e4", "witness horizons"),
    "diagnostics.n_modes": Key(int, "4", "truncated Fock boson modes", positive=True),
    "diagnostics.n_max": Key(int, "3", "truncated Fock boson number cutoff"),
    "diagnostics.n_particle": Key(int, "6", "truncated Fock particle modes", positive=True),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}

    @property
    def raw(self):
        return self.values["__raw__"]

    def output_dir(self, override=None):
        if override:
            return override
        if self.values["run.output"]:
            return self.values["run.output"]
        return os.environ.get(OUTPUT_ENV, os.path.join(os.getcwd(), "runs"))

    def render(self):
        """Canonical text form of the resolved configuration."""
        lines, current = [], None
        for key in SCHEMA:
            sec, name = key.split(".", 1)
            if sec != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{sec}]")
                current = sec
            lines.append(f"{name} = {self.raw[key]}")
        return "\n".join(lines) + "\n"


def _parse_value(key, text):
    spec = SCHEMA[key]
    try:
        val = spec.parse(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    items = val if isinstance(val, tuple) else (val,)
    if spec.choices:
        bad = [v for v in items if v not in spec.choices]
        if bad:
            raise ConfigError(f"{key}: {bad} not in {spec.choices}")
    if spec.positive and any(not v > 0 for v in items):
        raise ConfigError(f"{key}: must be positive, got {text!r}")
    return val


def parse_config(text, overrides=()):
    """Parse config text plus ``section.key=value`` overrides into a ``RunConfig``."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw = {k: s.default for k, s in SCHEMA.items()}
    sections = {k.split(".", 1)[0] for k in SCHEMA}
    for sec in parser.sections():
        if sec not in sections:
            raise ConfigError(f"unknown section [{sec}]")
        for name, value in parser.items(sec):
            key = f"{sec}.{name}"
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key}")
            raw[key] = value.strip()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key}")
        raw[key] = value
    values = {k: _parse_value(k, v) for k, v in raw.items()}
    values["__raw__"] = raw
    cfg = RunConfig(values)
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg):
    if len(cfg["run.scenarios"]) == 0:
        raise ConfigError("run.scenarios is empty")
    if cfg["kernel.shape"] == "ir_regularized":
        if not 0 < cfg["kernel.sigma"] < cfg["kernel.lambda"]:
            raise ConfigError("ir_regularized cutoff needs 0 < kernel.sigma < kernel.lambda")
    elif cfg["kernel.sigma"] != 0:
        raise ConfigError("kernel.sigma is only meaningful for the ir_regularized shape")
    if not 0 <= cfg["run.seed"] < 2**63:
        raise ConfigError("run.seed must lie in [0, 2^63)")
    if cfg["scattering.kappa"] < 0:
        raise ConfigError("scattering.kappa must be >= 0")
    if cfg["diagnostics.n_paths"] < 2:
        raise ConfigError("diagnostics.n_paths must be >= 2")
    n_modes, n_max = cfg["diagnostics.n_modes"], cfg["diagnostics.n_max"]
    if n_modes % 2 or not 2 <= n_modes <= 8 or not 0 <= n_max <= 4:
        raise ConfigError("truncated Fock space needs even n_modes in [2, 8] and n_max in [0, 4]")
    if any(s <= 0 or s >= cfg["kernel.lambda"] for s in cfg["diagnostics.sigmas"]):
        raise ConfigError("diagnostics.sigmas must lie in (0, kernel.lambda)")
    for key in ("diagnostics.times", "diagnostics.sigmas", "diagnostics.witness_times"):
        if any(v <= 0 for v in cfg[key]):
            raise ConfigError(f"{key} must be positive")


def load_config(path, overrides=()):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)
