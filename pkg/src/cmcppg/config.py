"""Run configuration: a single schema-versioned JSON document.

Every section is optional unless a command needs it; unknown keys are
rejected everywhere. Defaults are filled in after validation.
"""
from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

from cmcppg.errors import CMCError

SCHEMA_VERSION = 1


class ConfigError(CMCError, ValueError):
    """Invalid or incomplete run configuration; carries a dotted field path."""


_prob = {"type": "number", "minimum": 0, "maximum": 1}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg = {"type": "number", "minimum": 0}
_rhythms = {"type": "string", "enum": ["NSR", "AF", "PVC"]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


NOISE = _obj({
    "p_flip_good": _prob,
    "p_flip_bad": _prob,
    "p_bad_quality": _prob,
    "good_noise_sigma": _nonneg,
    "good_wander_amp": _nonneg,
    "bad_noise_sigma": _nonneg,
    "bad_wander_amp": _nonneg,
    "artifact_amp": {"type": "number", "exclusiveMinimum": 0},
    "artifact_fraction": {"type": "array", "items": _prob, "minItems": 2, "maxItems": 2},
    "burst_prob": _prob,
})

SYNTH = _obj({
    "n_patients": _pos_int,
    "segs_per_patient": _pos_int,
    "class_mix": {"type": "object", "propertyNames": _rhythms, "additionalProperties": _prob, "minProperties": 1},
    "noise": NOISE,
    "fs_hz": {"type": "number", "exclusiveMinimum": 0},
    "window_s": {"type": "number", "exclusiveMinimum": 0},
    "mixed_patients": {"type": "boolean"},
}, required=("n_patients", "segs_per_patient", "class_mix"))

LABELING = _obj({
    "window_s": {"type": "number", "exclusiveMinimum": 0},
    "half_window_s": {"type": "number", "exclusiveMinimum": 0},
    "pvc_exclusion_s": {"type": "number", "exclusiveMinimum": 0},
    "nsr_min_gap_s": {"type": "number", "exclusiveMinimum": 0},
    "sqi_threshold": _prob,
    "dedup_window_s": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "balance": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0},
                "minItems": 2, "maxItems": 2},
})

CLUSTER = _obj({
    "M": {"type": "integer", "minimum": 2},
    "ae_epochs": {"type": "integer", "minimum": 0},
    "ae_lr": {"type": "number", "exclusiveMinimum": 0},
    "ae_batch_size": {"type": "integer", "minimum": 1},
    "latent_dim": _pos_int,
    "view": {"type": "string", "enum": ["raw", "acf"]},
    "max_iter": _pos_int,
    "tol": _nonneg,
})

TRAIN = _obj({
    "lambda1": _nonneg,
    "lambda2": _nonneg,
    "epochs": _pos_int,
    "batch_size": {"type": "integer", "minimum": 2},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "loss_mode": {"type": "string", "enum": ["CE", "SCE", "CMC"]},
    "normalization": {"type": "string", "enum": ["RAW_SUM", "PAIR_MEAN"]},
    "margin": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "preset": {"type": "string", "enum": ["TINY", "R18", "R34"]},
    "norm": {"type": "boolean"},
    "sce_alpha": _nonneg,
    "sce_beta": _nonneg,
    "sce_clamp": {"type": "number", "maximum": 0},
})

GRID = _obj({
    "lambda1": {"type": "array", "items": _nonneg, "minItems": 1},
    "lambda2": {"type": "array", "items": _nonneg, "minItems": 1},
    "tune_seed_only": {"type": "boolean"},
})

EVAL = _obj({
    "bootstrap_draws": {"type": "integer", "minimum": 0},
    "k": _pos_int,
    "n_queries": _pos_int,
    "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
})

EXPERIMENT = _obj({
    "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    "train_sizes": {"type": "array", "items": _pos_int, "minItems": 1},
    "presets": {"type": "array", "items": {"type": "string", "enum": ["TINY", "R18", "R34"]}, "minItems": 1},
    "loss_modes": {"type": "array", "items": {"type": "string", "enum": ["CE", "SCE", "CMC"]}, "minItems": 1},
    "test": SYNTH,
})

BENCH = _obj({
    "epochs": _pos_int,
    "n_records": {"type": "integer", "minimum": 8},
})

SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "seed": {"type": "integer", "minimum": 0},
    "synth": SYNTH,
    "labeling": LABELING,
    "cluster": CLUSTER,
    "train": TRAIN,
    "grid": GRID,
    "eval": EVAL,
    "experiment": EXPERIMENT,
    "bench": BENCH,
}, required=("schema_version",))

DEFAULTS = {
    "seed": 0,
    "cluster": {"M": 6, "ae_epochs": 5, "ae_lr": 1e-3, "ae_batch_size": 64, "latent_dim": 16,
                "view": "acf", "max_iter": 300, "tol": 1e-6},
    "train": {"lambda1": 0.01, "lambda2": 0.001, "epochs": 50, "batch_size": 64, "lr": 1e-3,
              "loss_mode": "CE", "normalization": "PAIR_MEAN", "margin": None, "val_fraction": 0.2,
              "preset": "TINY", "norm": True, "sce_alpha": 0.1, "sce_beta": 1.0, "sce_clamp": -4.0},
    "grid": {"lambda1": [0.0, 1e-3, 1e-2, 1e-1], "lambda2": [0.0, 1e-3, 1e-2, 1e-1], "tune_seed_only": False},
    "eval": {"bootstrap_draws": 100, "k": 50, "n_queries": 100, "alpha": 0.05},
    "labeling": {"window_s": 30.0, "half_window_s": 15.0, "pvc_exclusion_s": 30.0, "nsr_min_gap_s": 30.0,
                 "sqi_threshold": 0.5, "dedup_window_s": None, "balance": None},
    "bench": {"epochs": 3, "n_records": 1024},
}

SYNTH_DEFAULTS = {"noise": {}, "fs_hz": 40.0, "window_s": 30.0, "mixed_patients": False}


def _path(err):
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        # name the missing key itself
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(extra)
    return ".".join(p for p in parts if p) or "<root>"


def validate(doc):
    """Raise ConfigError naming the first offending field path."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        raise ConfigError(f"config error at {_path(e)}: {e.message}")
    mix = None
    for key in ("synth",):
        if key in doc:
            mix = doc[key]["class_mix"]
            if abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ConfigError(f"config error at {key}.class_mix: probabilities must sum to 1")
    t = doc.get("experiment", {}).get("test")
    if t and abs(sum(t["class_mix"].values()) - 1.0) > 1e-9:
        raise ConfigError("config error at experiment.test.class_mix: probabilities must sum to 1")
    n = doc.get("synth", {}).get("noise", {})
    if "p_flip_good" in n or "p_flip_bad" in n:
        if n.get("p_flip_bad", 0.0) < n.get("p_flip_good", 0.0):
            raise ConfigError("config error at synth.noise.p_flip_bad: must be >= p_flip_good")


def with_defaults(doc):
    out = copy.deepcopy(doc)
    for sec, d in DEFAULTS.items():
        if isinstance(d, dict):
            merged = dict(d)
            merged.update(out.get(sec, {}))
            out[sec] = merged
        else:
            out.setdefault(sec, d)
    for sec in ("synth",):
        if sec in out:
            out[sec] = {**SYNTH_DEFAULTS, **out[sec]}
    if "experiment" in out and "test" in out["experiment"]:
        out["experiment"]["test"] = {**SYNTH_DEFAULTS, **out["experiment"]["test"]}
    return out


def load(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config error at <root>: not valid JSON ({exc})") from exc
    return parse(doc)


def parse(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config error at <root>: expected a JSON object")
    validate(doc)
    return with_defaults(doc)


def require(cfg, dotted):
    cur = cfg
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigError(f"config error at {dotted}: required for this command")
        cur = cur[part]
    return cur


def canonical(cfg) -> bytes:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(cfg):
    return hashlib.sha256(canonical(cfg)).hexdigest()
