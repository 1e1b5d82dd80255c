"""Run configuration: TOML files, command-line overrides and canonical hashing.

Grammar
-------
A config is a TOML document. Top-level keys: ``seed``, ``input``,
``output``, ``cd4_scale``. Sections (all optional):

``[model]``
    likelihood, p0, link ("biphasic" or "linear"), random, fixed, fixed_beta
    (table of index -> value), covariate, prior_preset ("baseline" or
    "sensitivity"), and ``[model.priors]`` holding any PriorConfig field.
``[sampler]``
    any SamplerConfig field except ``seed`` (taken from the top level).
``[scenario]``
    grid (list of [p0, alpha] pairs), replicates, families, n_jobs.
``[predict]``
    schedule, cd4_intercept, cd4_slope.
``[diagnose]``
    n_sims.
``[pdf_table]``
    p0, gamma, tau0, alpha, mu, sigma, y_min, y_max, n_points.
``[kurtosis_table]``
    p0, gammas, tau0, alpha, n_draws.

Precedence, lowest to highest: built-in defaults, config file, ``--set
section.key=value`` flags, dedicated flags such as ``--seed``.
Unknown sections or keys are rejected.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import fields

from .errors import ConfigError
from .mcmc import SamplerConfig
from .model import Biphasic, Linear, ModelSpec, PriorConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DEFAULTS = {
    "seed": 20240601,
    "input": None,
    "output": None,
    "cd4_scale": None,
    "model": {
        "likelihood": "cGAL",
        "p0": 0.5,
        "link": "biphasic",
        "random": None,
        "fixed": None,
        "fixed_beta": {},
        "covariate": "cd4",
        "prior_preset": "baseline",
        "priors": {},
    },
    "sampler": {f.name: f.default for f in fields(SamplerConfig) if f.name != "seed"},
    "scenario": {
        "grid": [[0.5, 0.001], [0.5, 0.05], [0.85, 0.001], [0.85, 0.05]],
        "replicates": 50,
        "families": ["GAL", "cGAL"],
        "n_jobs": 1,
    },
    "predict": {
        "schedule": [0, 2, 7, 10, 14, 21, 28, 56, 84, 168, 336],
        "cd4_intercept": 2.25,
        "cd4_slope": 0.001,
    },
    "diagnose": {"n_sims": 250},
    "pdf_table": {
        "p0": 0.1, "gamma": 1.0, "tau0": 10.0, "alpha": 0.5, "mu": 0.0, "sigma": 1.0,
        "y_min": -15.0, "y_max": 15.0, "n_points": 301,
    },
    "kurtosis_table": {
        "p0": 0.5,
        "gammas": [-1.0, -0.75, -0.5, -0.25, 0.25, 0.5, 0.75, 1.0],
        "tau0": 10.0, "alpha": 0.5, "n_draws": 200000,
    },
}

_PRIOR_FIELDS = {f.name for f in fields(PriorConfig)}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            if path == "model.priors." and k in _PRIOR_FIELDS:
                out[k] = v
                continue
            if path == "model.fixed_beta.":
                out[k] = v
                continue
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None


def parse_assignment(text: str) -> dict:
    """``section.key=value`` to a nested dict; the value is read as TOML, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def resolve(file_cfg: dict | None = None, overrides: list[dict] | None = None) -> dict:
    cfg = _merge(DEFAULTS, file_cfg or {})
    for o in overrides or []:
        cfg = _merge(cfg, o)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    m = cfg["model"]
    if m["likelihood"] not in ("AL", "GAL", "cGAL"):
        raise ConfigError(f"model.likelihood must be AL, GAL or cGAL, got {m['likelihood']!r}")
    if m["link"] not in ("biphasic", "linear"):
        raise ConfigError("model.link must be 'biphasic' or 'linear'")
    if m["prior_preset"] not in ("baseline", "sensitivity"):
        raise ConfigError("model.prior_preset must be 'baseline' or 'sensitivity'")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    try:
        model_spec(cfg)
        sampler_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    base = PriorConfig.sensitivity() if m["prior_preset"] == "sensitivity" else PriorConfig()
    priors = PriorConfig(**{**{f: getattr(base, f) for f in _PRIOR_FIELDS}, **m["priors"]})
    pinned = tuple(sorted((int(k), float(v)) for k, v in m["fixed_beta"].items()))
    if m["link"] == "biphasic":
        random = tuple(int(k) for k in m["random"]) if m["random"] is not None else (0, 1, 2, 3)
        link = Biphasic(random=random, fixed_beta=pinned, covariate=m["covariate"] or None)
    else:
        random = tuple(m["random"]) if m["random"] is not None else ("intercept",)
        fixed = tuple(m["fixed"]) if m["fixed"] is not None else ("intercept",)
        link = Linear(fixed=fixed, random=random, fixed_beta=pinned)
    return ModelSpec(m["likelihood"], float(m["p0"]), link, priors)


def sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(seed=int(cfg["seed"]), **cfg["sampler"])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
