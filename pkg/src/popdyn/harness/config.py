"""Experiment configuration: TOML input validated against a published JSON schema.

The schema lives next to this module (``config_schema.json``) and lists
every key with its default. :func:`load_config` parses, validates, fills in
defaults and runs the semantic checks that a schema cannot express.
"""

import copy
import itertools
import json
import sys
from importlib import resources

import jsonschema
import numpy as np

from ..exceptions import ConfigError
from ..game import GameParams

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

__all__ = ["load_schema", "load_config", "parse_config", "apply_defaults", "build_game", "sweep_points"]

MAX_SWEEP_POINTS = 10_000


def load_schema():
    text = resources.files(__package__).joinpath("config_schema.json").read_text()
    return json.loads(text)


def apply_defaults(instance, schema):
    """Fill in ``default`` values from ``schema`` recursively (returns a new dict)."""
    out = copy.deepcopy(instance)
    for key, sub in schema.get("properties", {}).items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if key in out and sub.get("type") == "object" and isinstance(out[key], dict):
            out[key] = apply_defaults(out[key], sub)
    return out


def _vector(value, n, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigError(f"game.{name} has {arr.size} entries, expected {n}")
    return arr


def build_game(cfg):
    """``GameParams`` and initial job levels from a validated config."""
    g = cfg["game"]
    n = len(g["w"])
    try:
        params = GameParams(
            R=_vector(g["R"], n, "R"),
            alpha=_vector(g["alpha"], n, "alpha"),
            beta=_vector(g["beta"], n, "beta"),
            w=np.asarray(g["w"], dtype=float),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    q0 = np.asarray(g["q0"], dtype=float)
    if q0.shape != (n,):
        raise ConfigError(f"game.q0 has {q0.size} entries, expected {n}")
    return params, tuple(q0.tolist())


def sweep_points(cfg):
    """Grid points of a sweep as a list of override dicts, in axis order.

    Axes are ``eta, lam, N, d``; an empty axis contributes the base value.
    With Smith calibration, one Smith point per candidate rate is appended
    for every distinct ``(N, d)`` of the grid.
    """
    sw, proto, fin = cfg["sweep"], cfg["protocol"], cfg["finite"]
    axes = {
        "eta": sw["eta"] or [proto["eta"]],
        "lam": sw["lam"] or [proto["lam"]],
        "N": sw["N"] or [fin["N"]],
        "d": sw["d"] or [fin["d"]],
    }
    points = [
        {"protocol": proto["name"], "eta": e, "lam": l, "N": n, "d": d}
        for e, l, n, d in itertools.product(axes["eta"], axes["lam"], axes["N"], axes["d"])
    ]
    if sw["smith_calibration"]:
        for n, d in itertools.product(axes["N"], axes["d"]):
            for l in sw["smith_lam_grid"]:
                points.append({"protocol": "smith", "eta": None, "lam": l, "N": n, "d": d})
    return points


def _semantic_checks(cfg):
    params, _ = build_game(cfg)
    n = params.n
    theta = cfg["protocol"].get("theta")
    if theta is not None and len(theta) != n:
        raise ConfigError(f"protocol.theta has {len(theta)} entries, expected {n}")
    x0 = cfg["meanfield"].get("x0")
    if x0 is not None:
        if len(x0) != n or abs(sum(x0) - 1.0) > 1e-9:
            raise ConfigError("meanfield.x0 must be a distribution over the tasks")
    xstar = cfg["stationary"].get("xstar")
    if xstar is not None and abs(sum(xstar) - 1.0) > 1e-9:
        raise ConfigError("stationary.xstar must sum to one")
    mf = cfg["meanfield"]
    if mf["d"] > 0:
        ratio = mf["d"] / mf["h"]
        if abs(ratio - round(ratio)) > 1e-9 or mf["h"] > mf["d"] / 10 + 1e-15:
            raise ConfigError("meanfield.h must divide meanfield.d and be at most d/10")
    if cfg["mode"] == "sweep":
        sw = cfg["sweep"]
        size = 1
        for axis in ("eta", "lam", "N", "d"):
            size *= max(1, len(sw[axis]))
        if size > MAX_SWEEP_POINTS:
            raise ConfigError(f"sweep has {size} grid points, limit is {MAX_SWEEP_POINTS}")
    if cfg["mode"] == "verify-bound" and cfg["protocol"]["name"] != "kldrl":
        raise ConfigError("the bound checker applies to the KLD-RL protocol only")


def parse_config(data):
    """Validate a config mapping and return it with defaults filled in.

    Raises
    ------
    ConfigError
        On any schema violation (unknown key, wrong type, out-of-range value)
        or inconsistent combination of values.
    """
    schema = load_schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        lines = []
        for err in errors:
            where = ".".join(str(p) for p in err.absolute_path) or "<root>"
            lines.append(f"{where}: {err.message}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))
    cfg = apply_defaults(data, schema)
    _semantic_checks(cfg)
    return cfg


def load_config(path):
    """Read a TOML file and return the validated config with defaults."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from exc
    return parse_config(data)
