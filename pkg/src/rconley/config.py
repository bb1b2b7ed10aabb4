"""Run configuration: TOML in, schema-validated dict with every default filled in."""
from __future__ import annotations

import copy
import sys
from pathlib import Path

from jsonschema import Draft202012Validator, validators

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration; ``key`` points at the offending entry."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_bound = {"type": "array", "items": {"anyOf": [_num, {"enum": ["inf", "-inf"]}]}, "minItems": 1}

REGION = {
    "type": "object",
    "required": ["name", "shape"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "shape": {"enum": ["ball", "box", "interval"]},
        "center": _vec,
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "lo": _vec,
        "hi": _vec,
        "k": {"type": "integer", "minimum": 1, "default": 1},
        "inv_target": _vec,
        "inv_pad": {"type": "integer", "minimum": 0, "default": 3},
    },
}

SCHEMA = {
    "type": "object",
    "required": ["noise", "grid"],
    "additionalProperties": False,
    "properties": {
        "system": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["builtin", "affine", "polynomial", "field"]},
                "name": {"type": "string", "default": ""},
                "params": {"type": "object", "default": {}},
                "lam": {"type": "number", "minimum": 0, "maximum": 1, "default": 1.0},
                "enclosure": {"enum": ["interval", "sampled"], "default": "interval"},
                "lipschitz_bound": {"type": "number", "minimum": 0},
            },
        },
        "noise": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["uniform", "discrete", "constant"]},
                "low": _vec,
                "high": _vec,
                "values": {"type": "array"},
                "weights": _vec,
                "value": _vec,
            },
        },
        "grid": {
            "type": "object",
            "required": ["lo", "hi", "subdivisions"],
            "additionalProperties": False,
            "properties": {
                "lo": _vec,
                "hi": _vec,
                "subdivisions": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "space_lo": _bound,
                "space_hi": _bound,
            },
        },
        "run": {
            "type": "object",
            "default": {},
            "additionalProperties": False,
            "properties": {
                "T": {"type": "integer", "minimum": 1, "default": 16},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1, "default": [0]},
                "checks": {
                    "type": "array",
                    "items": {"enum": ["isolating", "block", "pair", "certificate", "inv_target"]},
                    "default": ["isolating", "pair", "certificate"],
                },
                "plot_fibers": {"type": "array", "items": {"type": "integer"}, "default": [0]},
            },
        },
        "regions": {"type": "array", "items": REGION, "default": []},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "region": {"type": "string"},
                "lambdas": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
                "checks": {"type": "array", "items": {"enum": ["isolating", "block", "pair", "certificate"]}, "default": ["isolating"]},
                "assert_nontrivial": {"type": "boolean", "default": False},
            },
            "required": ["region", "lambdas"],
        },
        "timeh": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "field": {"enum": ["lorenz", "lorenz-y0", "logistic", "linear"]},
                "params": {"type": "object", "default": {}},
                "h_list": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "integrator": {"enum": ["euler", "rk4"], "default": "euler"},
                "substeps": {"type": "integer", "minimum": 1, "default": 1},
                "lambdas": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "default": [1.0]},
                "region": {"type": "string"},
            },
            "required": ["field", "h_list", "region"],
        },
        "equiv": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "first": {"type": "string"},
                "second": {"type": "string"},
                "eps_layers": {"type": "integer", "minimum": 1, "default": 1},
            },
            "required": ["first", "second"],
        },
    },
}


def _with_defaults(cls):
    validate_props = cls.VALIDATORS["properties"]

    def fill(validator, properties, instance, schema):
        if isinstance(instance, dict):
            for key, sub in properties.items():
                if "default" in sub and key not in instance:
                    instance[key] = copy.deepcopy(sub["default"])
        yield from validate_props(validator, properties, instance, schema)

    return validators.extend(cls, {"properties": fill})


_Validator = _with_defaults(Draft202012Validator)


def _key(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(extra)
    return ".".join(p for p in parts if p)


def _semantic_checks(cfg: dict) -> None:
    g = cfg["grid"]
    d = len(g["lo"])
    if len(g["hi"]) != d or len(g["subdivisions"]) != d:
        raise ConfigError("lo, hi and subdivisions must have the same length", "grid")
    if any(a >= b for a, b in zip(g["lo"], g["hi"])):
        raise ConfigError("each lo must be below hi", "grid.lo")
    names = [r["name"] for r in cfg["regions"]]
    if len(set(names)) != len(names):
        raise ConfigError("region names must be unique", "regions")
    for i, r in enumerate(cfg["regions"]):
        where = f"regions.{i}"
        if r["shape"] == "ball":
            if "center" not in r or "radius" not in r:
                raise ConfigError("ball regions need center and radius", where)
            if len(r["center"]) != d:
                raise ConfigError("center has the wrong dimension", f"{where}.center")
        else:
            if "lo" not in r or "hi" not in r:
                raise ConfigError(f"{r['shape']} regions need lo and hi", where)
            if len(r["lo"]) != d or len(r["hi"]) != d:
                raise ConfigError("bounds have the wrong dimension", f"{where}.lo")
        if "inv_target" in r and len(r["inv_target"]) != d:
            raise ConfigError("inv_target has the wrong dimension", f"{where}.inv_target")
    for section in ("sweep", "timeh"):
        if section in cfg and cfg[section]["region"] not in names:
            raise ConfigError(f"unknown region {cfg[section]['region']!r}", f"{section}.region")
    if "equiv" in cfg:
        for key in ("first", "second"):
            if cfg["equiv"][key] not in names:
                raise ConfigError(f"unknown region {cfg['equiv'][key]!r}", f"equiv.{key}")
    if "sweep" in cfg:
        lams = cfg["sweep"]["lambdas"]
        if lams != sorted(lams):
            raise ConfigError("lambdas must be sorted", "sweep.lambdas")


def resolve(raw: dict) -> dict:
    """Validate ``raw`` and return a copy with every default written in."""
    cfg = copy.deepcopy(raw)
    errors = sorted(_Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _key(err) or "<root>")
    _semantic_checks(cfg)
    return cfg


def load(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such file {path}", "--config") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}", "<file>") from None
    return resolve(raw)


def shipped_configs() -> dict[str, Path]:
    """Example configurations bundled with the package."""
    root = Path(__file__).parent / "configs"
    return {p.stem: p for p in sorted(root.glob("*.toml"))}
