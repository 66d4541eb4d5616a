"""Run configuration: JSON schema, defaults, semantic checks, and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema


class ConfigError(ValueError):
    """Invalid configuration; ``pointer`` is the JSON pointer of the bad value."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


_CLASSES = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1, "uniqueItems": True}
_POS_INT = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "output_dir"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "trials": _POS_INT,
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["synthetic", "csv"]},
                "class_count": {"type": "integer", "minimum": 2},
                "dim": _POS_INT,
                "per_class": {"type": "integer", "minimum": 3},
                "spread": {"type": "number", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "path": {"type": "string"},
                "stability_radius": {"type": "number", "minimum": 0},
                "split": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                "split_seed": {"type": "integer", "minimum": 0},
            },
            "allOf": [
                {"if": {"properties": {"kind": {"const": "csv"}}}, "then": {"required": ["path"]}},
            ],
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": _POS_INT},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _POS_INT,
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1, "uniqueItems": True},
            },
        },
        "budget": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "norm": {"enum": ["linf", "l2"]},
                "epsilon": {"type": "number", "minimum": 0},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": _POS_INT,
                "step_size": {"type": ["number", "null"], "minimum": 0},
                "random_start": {"type": "boolean"},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "families": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["untargeted", "targeted", "source_to_targets", "surjective"]},
                    "name": {"type": "string"},
                    "sources": _CLASSES,
                    "targets": _CLASSES,
                    "target": {"type": "integer", "minimum": 0},
                    "k": _POS_INT,
                    "allow_reuse": {"type": "boolean"},
                    "managers": _CLASSES,
                },
            },
        },
        "strategies": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sources", "targets"],
            "properties": {
                "sources": _CLASSES,
                "targets": _CLASSES,
                "k": {"type": "array", "items": _POS_INT, "minItems": 1},
                "campaigns": _POS_INT,
                "random_repeats": _POS_INT,
                "allow_reuse": {"type": "boolean"},
                "managers": {"oneOf": [_CLASSES, {"type": "null"}]},
                "prior_per_class": {"oneOf": [_POS_INT, {"type": "null"}]},
            },
        },
        "defense": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sources", "targets"],
            "properties": {
                "sources": _CLASSES,
                "targets": _CLASSES,
                "kappas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "slack": {"type": "number", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "attack_iterations": _POS_INT,
                "search_trials": _POS_INT,
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "trials": 200,
    "dataset": {"class_count": 10, "dim": 8, "per_class": 100, "spread": 0.03, "seed": 1,
                "stability_radius": 0.05, "split": [0.7, 0.2, 0.1], "split_seed": 1},
    "model": {"hidden": [32], "learning_rate": 0.1, "epochs": 30, "batch_size": 32, "seeds": [1]},
    "budget": {"norm": "linf", "epsilon": 0.1},
    "attack": {"iterations": 20, "step_size": None, "random_start": False, "seed": 0},
    "families": [],
    "strategies": None,
    "defense": None,
}

STRATEGY_DEFAULTS = {"k": [1, 2, 3], "campaigns": 20, "random_repeats": 10, "allow_reuse": True,
                     "managers": None, "prior_per_class": None}
DEFENSE_DEFAULTS = {"kappas": [0.1, 0.3, 1.0, 3.0, 10.0], "slack": 0.02, "epochs": 5, "batch_size": 32,
                    "learning_rate": 0.05, "attack_iterations": 5, "search_trials": 100}


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw) -> dict:
    """Schema-check ``raw``, fill defaults, and run cross-field checks."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: _pointer(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(_pointer(e.absolute_path), e.message)
    cfg = _merge(DEFAULTS, raw)
    if cfg["strategies"] is not None:
        cfg["strategies"] = _merge(STRATEGY_DEFAULTS, cfg["strategies"])
    if cfg["defense"] is not None:
        cfg["defense"] = _merge(DEFENSE_DEFAULTS, cfg["defense"])
    _check_semantics(cfg)
    return cfg


def _check_classes(values, n, pointer):
    for i, c in enumerate(values or ()):
        if c >= n:
            raise ConfigError(f"{pointer}/{i}", f"class index {c} is not below class_count {n}")


def _check_disjoint(sec, pointer):
    overlap = set(sec["sources"]) & set(sec["targets"])
    if overlap:
        raise ConfigError(pointer + "/targets", f"S and T must be disjoint; both contain {sorted(overlap)}")


def _check_semantics(cfg: dict) -> None:
    ds = cfg["dataset"]
    if abs(sum(ds["split"]) - 1.0) > 1e-9:
        raise ConfigError("/dataset/split", "fractions must sum to 1")
    n = ds["class_count"] if ds["kind"] == "synthetic" else None
    for i, fam in enumerate(cfg["families"]):
        p = f"/families/{i}"
        kind = fam["kind"]
        if kind in ("source_to_targets", "surjective"):
            for key in ("sources", "targets"):
                if key not in fam:
                    raise ConfigError(p, f"'{key}' is required for {kind} families")
            _check_disjoint(fam, p)
        if kind == "surjective":
            if "k" not in fam:
                raise ConfigError(p, "'k' is required for surjective families")
            if fam["k"] > len(fam["targets"]):
                raise ConfigError(p + "/k", f"k={fam['k']} exceeds |T|={len(fam['targets'])}")
            if not set(fam.get("managers", ())) <= set(fam["targets"]):
                raise ConfigError(p + "/managers", "managers must be a subset of targets")
        if n is not None:
            for key in ("sources", "targets", "managers"):
                _check_classes(fam.get(key), n, f"{p}/{key}")
            if "target" in fam and fam["target"] >= n:
                raise ConfigError(p + "/target", f"class index {fam['target']} is not below class_count {n}")
    for sec in ("strategies", "defense"):
        if cfg[sec] is None:
            continue
        _check_disjoint(cfg[sec], "/" + sec)
        if n is not None:
            for key in ("sources", "targets"):
                _check_classes(cfg[sec][key], n, f"/{sec}/{key}")
    st = cfg["strategies"]
    if st is not None:
        for i, k in enumerate(st["k"]):
            if k > len(st["targets"]):
                raise ConfigError(f"/strategies/k/{i}", f"K={k} exceeds |T|={len(st['targets'])}")
        if st["managers"] is not None:
            if n is not None:
                _check_classes(st["managers"], n, "/strategies/managers")
            if not set(st["managers"]) <= set(st["targets"]):
                raise ConfigError("/strategies/managers", "managers must be a subset of targets")
    names = [family_name(f, i) for i, f in enumerate(cfg["families"])]
    if len(set(names)) != len(names):
        raise ConfigError("/families", f"family names must be unique, got {names}")


def family_name(fam: dict, i: int) -> str:
    return fam.get("name") or f"{fam['kind']}-{i}"


def load(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("/", f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return validate(raw)


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]
