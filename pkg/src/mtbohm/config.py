"""Run configuration: TOML loading, validation, resolution and hashing.

A configuration is a TOML document (see README for the full schema)::

    experiment = "hsz"          # required: "hsz" or "epr"
    n = 10000
    seed = 7

    [rule]
    kind = "proper_time"        # or "equal_time"
    dtau = 0.02
    beta = 0.0                  # equal_time only: rule frame velocity

    [surface]
    scenario = 1                # hsz: 1 or 2; or explicit times = [t1, t2]

    [hsz]
    phi = 0.0
    chi = 0.7853981633974483

Validation collects every problem as ``(field path, message)`` before any
computation starts; :class:`ConfigError` carries the full list.  The resolved
configuration (all defaults filled in) is a plain JSON-compatible dict whose
SHA-256 over canonical JSON is the provenance hash written into every output.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on older interpreters only
    import tomli as tomllib

from .ensemble import CoordinationSurface, default_surface, hsz_scenario
from .experiments import (
    EprGeometry,
    Experiment,
    GeometryError,
    HszGeometry,
    epr_experiment,
    hsz_experiment,
)
from .guidance import FrameEqualTime, InvariantProperTime
from .spacetime import Event

CONFIG_ENV = "MTBOHM_CONFIG"
DEFAULT_DTAU = 2e-2
EXPERIMENTS = ("hsz", "epr")
RULES = ("proper_time", "equal_time")
TRAJECTORY_DUMP_LIMIT = 100_000

_HSZ = HszGeometry()
_EPR = EprGeometry()

DEFAULTS: dict[str, Any] = {
    "n": 10_000,
    "seed": 7,
    "workers": 1,
    "output": "mtbohm-out",
    "trajectories": False,
    "rule": {"kind": "proper_time", "dtau": DEFAULT_DTAU, "beta": 0.0},
    "surface": {"scenario": 1, "times": None},
    "hsz": {
        "phi": _HSZ.phi,
        "chi": _HSZ.chi,
        "emission": [_HSZ.emission.t, _HSZ.emission.z],
        "t_lambda": _HSZ.t_lambda,
        "t_mu": None,
        "t_nu": None,
        "v": _HSZ.v,
        "sigma": _HSZ.sigma,
        "mass": _HSZ.mass,
        "window": None,
    },
    "epr": {
        "emission": [_EPR.emission.t, _EPR.emission.z],
        "t_i": _EPR.t_i,
        "t_i2": None,
        "axis1": list(_EPR.axis1),
        "axis2": list(_EPR.axis2),
        "dp": _EPR.dp,
        "mass": _EPR.mass,
        "sigma": _EPR.sigma,
        "t_end": _EPR.t_end,
        "window": None,
    },
    "verify": {
        "betas": [0.3, -0.3, 0.6, -0.6],
        "points": 8,
        "dtau": 1e-3,
        "crossing_n": 200,
        "oracle_n": 1000,
        "contrast": [[0.8, 0.7], [0.8, 0.2]],
    },
    "plotdata": {"trajectories": 16, "resolution": 0.0},
}

# default exit time is this far after the splitter when t_nu is not given
_HSZ_EXIT_LAG = _HSZ.t_nu - _HSZ.t_mu


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))

    def to_json(self) -> str:
        body = {"error": "config", "errors": [{"path": p, "message": m} for p, m in self.errors]}
        return json.dumps(body, sort_keys=True) + "\n"


def load_toml(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError([("config", f"file not found: {path}")]) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("config", f"invalid TOML: {exc}")]) from None


def config_path(flag: str | None) -> Path | None:
    """Config file from the command-line flag, else the environment, else none."""
    value = flag or os.environ.get(CONFIG_ENV)
    return Path(value) if value else None


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins, ``None`` values are ignored."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if val is None:
            continue
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


# ---------------------------------------------------------------------------
# validation


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _check_keys(raw: dict, schema: dict, prefix: str, errors: list):
    for key, val in raw.items():
        path = f"{prefix}{key}"
        if key not in schema:
            errors.append((path, "unknown key"))
        elif isinstance(schema[key], dict):
            if not isinstance(val, dict):
                errors.append((path, "expected a table"))
            else:
                _check_keys(val, schema[key], path + ".", errors)


def _check_types(cfg: dict, schema: dict, prefix: str, errors: list):
    for key, default in schema.items():
        path = f"{prefix}{key}"
        val = cfg.get(key)
        if isinstance(default, dict):
            _check_types(val or {}, default, path + ".", errors)
        elif val is None:
            continue
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                errors.append((path, "expected true or false"))
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(val, int) or isinstance(val, bool):
                errors.append((path, "expected an integer"))
        elif isinstance(default, float) or (default is None and key not in ("times",)):
            if not _is_number(val):
                errors.append((path, "expected a finite number"))
        elif isinstance(default, str):
            if not isinstance(val, str):
                errors.append((path, "expected a string"))
        elif isinstance(default, list) or key == "times":
            if not isinstance(val, list):
                errors.append((path, "expected an array"))


def _vector(cfg: dict, path: str, length: int, errors: list):
    section, key = path.split(".")
    val = cfg[section][key]
    if val is None:
        return
    if not isinstance(val, list) or len(val) != length or not all(_is_number(x) for x in val):
        errors.append((path, f"expected an array of {length} finite numbers"))


def validate(raw: dict) -> dict:
    """Validate a raw (file + flags) config and return the resolved config."""
    errors: list[tuple[str, str]] = []
    schema = dict(DEFAULTS, experiment="")
    _check_keys(raw, schema, "", errors)
    if raw.get("experiment") is None:
        errors.append(("experiment", "required key is missing (expected 'hsz' or 'epr')"))
    cfg = merge(DEFAULTS, {k: v for k, v in raw.items() if not isinstance(v, dict) or k in DEFAULTS})
    _check_types(cfg, schema, "", errors)
    if errors:
        raise ConfigError(errors)

    if cfg["experiment"] not in EXPERIMENTS:
        errors.append(("experiment", f"expected one of {list(EXPERIMENTS)}"))
    if cfg["n"] < 1:
        errors.append(("n", "must be at least 1"))
    if cfg["seed"] < 0:
        errors.append(("seed", "must be non-negative"))
    if cfg["workers"] < 1:
        errors.append(("workers", "must be at least 1"))
    if cfg["trajectories"] and cfg["n"] > TRAJECTORY_DUMP_LIMIT:
        errors.append(("trajectories", f"per-trajectory CSV dump is limited to n <= {TRAJECTORY_DUMP_LIMIT}"))
    rule = cfg["rule"]
    if rule["kind"] not in RULES:
        errors.append(("rule.kind", f"expected one of {list(RULES)}"))
    if not rule["dtau"] > 0:
        errors.append(("rule.dtau", "must be positive"))
    if not abs(rule["beta"]) < 1:
        errors.append(("rule.beta", "must satisfy |beta| < 1"))
    if rule["kind"] == "proper_time" and rule["beta"] != 0:
        errors.append(("rule.beta", "only meaningful for rule.kind = 'equal_time'"))
    surf = cfg["surface"]
    if surf["times"] is not None:
        _vector(cfg, "surface.times", 2, errors)
    elif surf["scenario"] not in (1, 2):
        errors.append(("surface.scenario", "expected 1 or 2"))
    for path in ("hsz.emission", "epr.emission"):
        _vector(cfg, path, 2, errors)
    for path in ("epr.axis1", "epr.axis2"):
        _vector(cfg, path, 3, errors)
    ver = cfg["verify"]
    if not all(_is_number(b) and abs(b) < 1 for b in ver["betas"]):
        errors.append(("verify.betas", "expected velocities with |beta| < 1"))
    if ver["points"] < 1:
        errors.append(("verify.points", "must be at least 1"))
    if not ver["dtau"] > 0:
        errors.append(("verify.dtau", "must be positive"))
    for key in ("crossing_n", "oracle_n"):
        if ver[key] < 2:
            errors.append((f"verify.{key}", "must be at least 2"))
    pairs = ver["contrast"]
    if not all(
        isinstance(p, list) and len(p) == 2 and all(_is_number(q) and 0 < q < 1 for q in p) for p in pairs
    ):
        errors.append(("verify.contrast", "expected [q1, q2] pairs with quantiles in (0, 1)"))
    if cfg["plotdata"]["trajectories"] < 0:
        errors.append(("plotdata.trajectories", "must be non-negative"))
    if cfg["plotdata"]["resolution"] < 0:
        errors.append(("plotdata.resolution", "must be non-negative (0 = automatic)"))
    if errors:
        raise ConfigError(errors)

    # derived HSZ times
    h = cfg["hsz"]
    if h["t_mu"] is None:
        h["t_mu"] = 2 * h["t_lambda"] - h["emission"][0]
    if h["t_nu"] is None:
        h["t_nu"] = h["t_mu"] + _HSZ_EXIT_LAG
    # normalise numbers to float so the hash does not depend on "1" vs "1.0"
    for section in ("hsz", "epr"):
        for key, val in cfg[section].items():
            if _is_number(val):
                cfg[section][key] = float(val)
            elif isinstance(val, list):
                cfg[section][key] = [float(x) for x in val]
    for key in ("dtau", "beta"):
        rule[key] = float(rule[key])
    try:
        build_experiment(cfg)
    except GeometryError as exc:
        raise ConfigError([(cfg["experiment"], str(exc))]) from None
    return cfg


# ---------------------------------------------------------------------------
# resolution into library objects


def hsz_geometry(cfg: dict) -> HszGeometry:
    h = cfg["hsz"]
    return HszGeometry(
        phi=h["phi"],
        chi=h["chi"],
        emission=Event(*h["emission"]),
        t_lambda=h["t_lambda"],
        t_mu=h["t_mu"],
        t_nu=h["t_nu"],
        v=h["v"],
        sigma=h["sigma"],
        mass=h["mass"],
        window=h["window"],
    )


def epr_geometry(cfg: dict) -> EprGeometry:
    e = cfg["epr"]
    return EprGeometry(
        emission=Event(*e["emission"]),
        t_i=e["t_i"],
        t_i2=e["t_i2"],
        axis1=tuple(e["axis1"]),
        axis2=tuple(e["axis2"]),
        dp=e["dp"],
        mass=e["mass"],
        sigma=e["sigma"],
        t_end=e["t_end"],
        window=e["window"],
    )


def build_experiment(cfg: dict) -> Experiment:
    if cfg["experiment"] == "hsz":
        return hsz_experiment(hsz_geometry(cfg))
    return epr_experiment(epr_geometry(cfg))


def build_rule(cfg: dict, dtau: float | None = None):
    r = cfg["rule"]
    step = r["dtau"] if dtau is None else dtau
    if r["kind"] == "equal_time":
        return FrameEqualTime(step, r["beta"])
    return InvariantProperTime(step)


def build_surface(cfg: dict, exp: Experiment) -> CoordinationSurface:
    s = cfg["surface"]
    if s["times"] is not None:
        return CoordinationSurface(tuple(float(t) for t in s["times"]), "custom")
    if exp.kind == "hsz":
        return hsz_scenario(exp.geometry, s["scenario"])
    return default_surface(exp)


# settings that change where or how fast results are produced, not what they are
_UNHASHED = ("output", "workers")


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of everything that determines the results."""
    body = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def to_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
