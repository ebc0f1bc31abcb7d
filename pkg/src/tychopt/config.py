"""Problem configuration files.

A configuration is an INI-style text file (``configparser`` syntax) with the
sections ``problem``, ``distribution``, ``boundary``, ``final_time``,
``transcription``, ``solver``, ``montecarlo``, ``pipeline`` and ``hst``.
Every key is optional; omitted keys take the built-in problem values.
Unknown sections or keys are rejected so that typos do not pass silently.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, UnknownName
from .nlp import SolverOptions
from .problems import builtin_problem, hst_distribution, zermelo_distribution
from .uncertainty import ConstrainedGaussianSpec, GaussianSpec, get_constraint

__all__ = ["Config", "load_config", "parse_config", "default_config"]

_KEYS = {
    "problem": {"family"},
    "distribution": {"mean", "sigma", "relative_sigma", "covariance", "constraint"},
    "boundary": {"x0", "target"},
    "final_time": {"lower", "upper", "guesses"},
    "transcription": {"nodes", "scheme"},
    "solver": {"outer_tol", "inner_tol", "max_outer", "max_inner", "rho0", "rho_growth",
               "rho_max", "fd_step", "seed", "inner_method"},
    "montecarlo": {"n", "seed", "confidence", "workers", "tol"},
    "pipeline": {"mean_miss_threshold", "trace_cov_threshold", "risk_epsilon",
                 "feasibility_tolerance"},
    "hst": {"tf", "torque", "gyroscopic", "variance_bounds"},
}

FAMILIES = {"zermelo": ("Z0", "Z1", "Z2"), "hst": ("HST_baseline", "HST_unscented")}


@dataclass
class Config:
    """Parsed configuration with defaults filled in."""

    family: str = "zermelo"
    distribution: object = None
    x0: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None
    tf_lower: float = 0.1
    tf_upper: float = 50.0
    tf_guesses: tuple = ()
    nodes: int = 50
    scheme: str = "hermite_simpson"
    solver: SolverOptions = field(default_factory=SolverOptions)
    mc_n: int = 1000
    mc_seed: int = 12345
    mc_tol: float = 1e-9
    confidence: float = 0.95
    workers: Optional[int] = None
    mean_miss_threshold: float = 1e-2
    trace_cov_threshold: float = 1e-2
    risk_epsilon: float = 0.2
    feasibility_tolerance: float = 1e-3
    hst: dict = field(default_factory=dict)
    text: str = ""

    @property
    def problems(self):
        return FAMILIES[self.family]

    @property
    def digest(self):
        """SHA-256 of the configuration text (artifact identity)."""
        return hashlib.sha256(self.text.encode()).hexdigest()

    def problem(self, name):
        """Built-in problem ``name`` with this configuration's overrides applied."""
        if name not in self.problems:
            raise UnknownName(f"problem {name!r} does not belong to family {self.family!r}")
        if self.family == "zermelo":
            return builtin_problem(name, x0=self.x0, target=self.target,
                                   distribution=self.distribution, tf_lower=self.tf_lower,
                                   tf_upper=self.tf_upper)
        prob = builtin_problem(name, **self.hst)
        if self.distribution is not None:
            prob = prob.with_(distribution=self.distribution)
        return prob


def _floats(cp, section, key, size=None):
    raw = cp.get(section, key)
    try:
        vals = np.array([float(v) for v in raw.replace(";", ",").split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected comma-separated numbers, got {raw!r}",
                          f"{section}.{key}") from None
    if size is not None and vals.size != size:
        raise ConfigError(f"{section}.{key}: expected {size} values, got {vals.size}",
                          f"{section}.{key}")
    return vals


def _scalar(cp, section, key, kind=float):
    raw = cp.get(section, key)
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot read {raw!r} as {kind.__name__}",
                          f"{section}.{key}") from None


def _distribution(cp, family):
    sec = "distribution"
    if not cp.has_section(sec):
        return None
    base = zermelo_distribution() if family == "zermelo" else hst_distribution()
    mean = _floats(cp, sec, "mean") if cp.has_option(sec, "mean") else np.asarray(base.mean)
    n = mean.size
    try:
        if cp.has_option(sec, "covariance"):
            cov = _floats(cp, sec, "covariance", n * n).reshape(n, n)
            spec = GaussianSpec(mean, cov)
        elif cp.has_option(sec, "sigma"):
            spec = GaussianSpec.diagonal(mean, _floats(cp, sec, "sigma", n))
        elif cp.has_option(sec, "relative_sigma"):
            spec = GaussianSpec.relative(mean, _scalar(cp, sec, "relative_sigma"))
        else:
            cov = np.asarray(base.covariance)
            if cov.shape != (n, n):
                raise ConfigError("distribution.mean: size differs from the default and no "
                                  "covariance is given", "distribution.mean")
            spec = GaussianSpec(mean, cov)
    except ConfigError:
        raise
    except Exception as exc:  # invalid covariance data
        raise ConfigError(f"distribution: {exc}", "distribution.covariance") from None
    if cp.has_option(sec, "constraint"):
        name = cp.get(sec, "constraint").strip()
        try:
            pred = get_constraint(name)
        except UnknownName:
            raise ConfigError(f"distribution.constraint: unknown constraint {name!r}",
                              "distribution.constraint") from None
        spec = ConstrainedGaussianSpec(spec, pred, name=name)
    elif family == "hst" and not cp.has_option(sec, "constraint"):
        spec = ConstrainedGaussianSpec(spec, get_constraint("inertia"), name="inertia")
    return spec


def parse_config(text):
    """Parse configuration ``text``; raises :class:`ConfigError` naming the bad key."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}", "") from None
    for sec in cp.sections():
        if sec not in _KEYS:
            raise ConfigError(f"unknown section [{sec}]", sec)
        for key in cp.options(sec):
            if key not in _KEYS[sec]:
                raise ConfigError(f"unknown key {sec}.{key}", f"{sec}.{key}")
    cfg = Config(text=text)
    if cp.has_option("problem", "family"):
        fam = cp.get("problem", "family").strip().lower()
        if fam not in FAMILIES:
            raise ConfigError(f"problem.family: expected one of {sorted(FAMILIES)}, got {fam!r}",
                              "problem.family")
        cfg.family = fam
    if cfg.family == "hst":
        cfg.nodes, cfg.mc_n = 40, 500
    cfg.distribution = _distribution(cp, cfg.family)
    if cp.has_section("boundary"):
        if cfg.family != "zermelo":
            raise ConfigError("boundary: only the zermelo family takes boundary overrides",
                              "boundary")
        if cp.has_option("boundary", "x0"):
            cfg.x0 = _floats(cp, "boundary", "x0", 2)
        if cp.has_option("boundary", "target"):
            cfg.target = _floats(cp, "boundary", "target", 2)
    sec = "final_time"
    if cp.has_option(sec, "lower"):
        cfg.tf_lower = _scalar(cp, sec, "lower")
    if cp.has_option(sec, "upper"):
        cfg.tf_upper = _scalar(cp, sec, "upper")
    if not 0 < cfg.tf_lower < cfg.tf_upper:
        raise ConfigError("final_time: need 0 < lower < upper", "final_time.lower")
    if cp.has_option(sec, "guesses"):
        cfg.tf_guesses = tuple(float(v) for v in _floats(cp, sec, "guesses"))
    sec = "transcription"
    if cp.has_option(sec, "nodes"):
        cfg.nodes = _scalar(cp, sec, "nodes", int)
        if cfg.nodes < 5:
            raise ConfigError("transcription.nodes: at least 5 nodes required",
                              "transcription.nodes")
    if cp.has_option(sec, "scheme"):
        cfg.scheme = cp.get(sec, "scheme").strip()
        if cfg.scheme not in ("trapezoid", "hermite_simpson"):
            raise ConfigError(f"transcription.scheme: unknown scheme {cfg.scheme!r}",
                              "transcription.scheme")
    if cp.has_section("solver"):
        kw = {}
        for key in cp.options("solver"):
            if key in ("max_outer", "max_inner", "seed"):
                kw[key] = _scalar(cp, "solver", key, int)
            elif key == "inner_method":
                kw[key] = cp.get("solver", key).strip()
            else:
                kw[key] = _scalar(cp, "solver", key)
        try:
            cfg.solver = SolverOptions(**kw)
        except ValueError as exc:
            raise ConfigError(f"solver: {exc}", "solver") from None
    sec = "montecarlo"
    if cp.has_option(sec, "n"):
        cfg.mc_n = _scalar(cp, sec, "n", int)
    if cp.has_option(sec, "seed"):
        cfg.mc_seed = _scalar(cp, sec, "seed", int)
    if cp.has_option(sec, "confidence"):
        cfg.confidence = _scalar(cp, sec, "confidence")
    if cp.has_option(sec, "workers"):
        cfg.workers = _scalar(cp, sec, "workers", int)
    if cp.has_option(sec, "tol"):
        cfg.mc_tol = _scalar(cp, sec, "tol")
    sec = "pipeline"
    for key, attr in (("mean_miss_threshold", "mean_miss_threshold"),
                      ("trace_cov_threshold", "trace_cov_threshold"),
                      ("risk_epsilon", "risk_epsilon"),
                      ("feasibility_tolerance", "feasibility_tolerance")):
        if cp.has_option(sec, key):
            setattr(cfg, attr, _scalar(cp, sec, key))
    if cp.has_section("hst"):
        if cfg.family != "hst":
            raise ConfigError("hst: section only valid for the hst family", "hst")
        sec = "hst"
        if cp.has_option(sec, "tf"):
            cfg.hst["tf"] = _scalar(cp, sec, "tf")
        if cp.has_option(sec, "torque"):
            cfg.hst["torque"] = _scalar(cp, sec, "torque")
        if cp.has_option(sec, "gyroscopic"):
            g = cp.get(sec, "gyroscopic").strip()
            if g not in ("paper", "rigid_body"):
                raise ConfigError(f"hst.gyroscopic: expected paper or rigid_body, got {g!r}",
                                  "hst.gyroscopic")
            cfg.hst["gyroscopic"] = g
        if cp.has_option(sec, "variance_bounds"):
            cfg.hst["variance_bounds"] = _floats(cp, sec, "variance_bounds", 6)
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}", "") from None
    return parse_config(text)


def default_config(family="zermelo"):
    return parse_config(f"[problem]\nfamily = {family}\n")
