"""JSON schemas for configs and reports, checked with :mod:`jsonschema`."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int = {"type": "integer"}
_posint = {"type": "integer", "minimum": 1}
_unit = {"type": "number", "minimum": 0, "maximum": 1}
_unit_or_null = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

RULE = {
    "type": "object",
    "required": ["features", "window", "label"],
    "properties": {
        "features": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2},
        "window": {"type": "integer", "minimum": 0},
        "sign": {"enum": [-1, 1]},
        "label": {"type": "integer", "minimum": 0},
        "subgroup": {"type": ["object", "null"]},
    },
    "additionalProperties": False,
}

SYNTH_SPEC = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "SynthSpec",
    "type": "object",
    "properties": {
        "n": {"type": "integer", "minimum": 0},
        "d": _posint, "length": _posint, "s": _posint, "n_labels": _posint,
        "rules": {"type": "array", "items": RULE},
        "prevalence": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                   "exclusiveMaximum": 1}},
        "noise": _nonneg,
        "ar_coef": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": _int,
    },
    "additionalProperties": False,
}

LOSS_WEIGHTS = {
    "type": "object",
    "properties": {k: _nonneg for k in ("contrast_weight", "focal_weight", "reg_weight",
                                        "struct_weight", "vgae_weight", "focal_gamma")},
    "additionalProperties": False,
}

AUGMENT = {"type": "object"}

MODEL = {
    "type": "object",
    "properties": {
        "d": _posint, "s": _posint, "w": _posint, "n_labels": _posint,
        "k": {"type": ["integer", "null"], "minimum": 1},
        "rho": _unit, "lstm_hidden": _posint, "gin_hidden": _posint, "latent": _posint,
        "gin_layers": _posint, "pool_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "pool_kernel": _posint,
        "head_widths": {"type": "array", "items": _posint},
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "assemble_mode": {"enum": ["hadamard", "concat"]},
        "struct_mode": {"enum": ["consecutive", "augmented"]},
        "pooled_inputs": {"enum": ["both", "x", "a"]},
        "vgae_target": {"enum": ["shared", "sample"]},
        "pool_source": {"enum": ["probs", "logits"]},
        "augment": AUGMENT,
        "weights": LOSS_WEIGHTS,
        "ablate": {"type": "array", "items": {"enum": ["AUG", "FOC", "LSTM", "REG", "STRUC", "TGP"]},
                   "uniqueItems": True},
    },
    "additionalProperties": False,
}

TRAIN_CONFIG = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "TrainConfig",
    "type": "object",
    "properties": {
        "model": MODEL,
        "batch_size": _posint,
        "lr": _pos,
        "lr_schedule": {"enum": ["plateau", "inverse_time", "constant"]},
        "epochs": {"type": "integer", "minimum": 0},
        "scheduler_patience": _posint,
        "early_stop_patience": _posint,
        "importance_decay": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "importance_samples": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": _int},
        "seed": _int,
        "split_ratios": {"type": "array", "items": _unit, "minItems": 3, "maxItems": 3},
        "data": {
            "type": "object",
            "properties": {"source": {"enum": ["synth", "csv"]}, "dir": {"type": "string"},
                           "series": {"type": "string"}, "statics": {"type": "string"},
                           "interval": _pos, "length": {"type": ["integer", "null"], "minimum": 1}},
            "additionalProperties": False,
        },
        "synth": SYNTH_SPEC,
        "shuffle_labels": {"type": "boolean"},
    },
    "additionalProperties": False,
}

PREDICATE = {
    "type": "object",
    "oneOf": [
        {"required": ["field", "op", "value"],
         "properties": {"field": {"type": "string"}, "op": {"enum": [">", ">=", "<", "<=", "==", "!="]},
                        "value": _num}},
        {"required": ["always"], "properties": {"always": {"type": "boolean"}}},
    ],
}

GROUPS = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "SubgroupPredicates",
    "type": "object",
    "additionalProperties": PREDICATE,
    "minProperties": 1,
}

LABEL_METRICS = {
    "type": "object",
    "required": ["tp", "fp", "tn", "fn"],
    "properties": {"tp": {"type": "integer", "minimum": 0}, "fp": {"type": "integer", "minimum": 0},
                   "tn": {"type": "integer", "minimum": 0}, "fn": {"type": "integer", "minimum": 0},
                   "sensitivity": _unit_or_null, "specificity": _unit_or_null,
                   "balanced_accuracy": _unit_or_null, "f1": _unit_or_null},
}

METRICS_REPORT = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricsReport",
    "type": "object",
    "required": ["balanced_accuracy", "f1", "sensitivity", "per_label"],
    "properties": {"balanced_accuracy": _num, "f1": _num, "sensitivity": _num,
                   "per_label": {"type": "array", "items": LABEL_METRICS}},
}

ABLATION_TABLE = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "AblationTable",
    "type": "object",
    "required": ["split", "rows"],
    "properties": {
        "split": {"enum": ["train", "validation", "test"]},
        "rows": {"type": "array", "items": {
            "type": "object",
            "required": ["name", "flags", "seeds", "balanced_accuracy", "mean", "std"],
            "properties": {"name": {"type": "string"}, "flags": {"type": "array", "items": {"type": "string"}},
                           "seeds": {"type": "array", "items": _int},
                           "balanced_accuracy": {"type": "array", "items": _unit},
                           "mean": _unit, "std": _nonneg}}},
    },
}

OOD_TABLE = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "OODTable",
    "type": "array",
    "items": {"type": "object",
              "required": ["name", "n_source", "n_ood", "in_distribution_balanced_accuracy",
                           "ood_balanced_accuracy"],
              "properties": {"name": {"type": "string"}, "n_source": _int, "n_ood": _int,
                             "in_distribution_balanced_accuracy": _num, "ood_balanced_accuracy": _num}},
}

CHECKPOINT_MANIFEST = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "CheckpointManifest",
    "type": "object",
    "required": ["format", "dtype", "arrays", "epoch", "config", "config_hash", "rng_state"],
    "properties": {
        "format": {"const": "tsgraph-checkpoint/1"},
        "dtype": {"const": "<f8"},
        "arrays": {"type": "array", "items": {
            "type": "object", "required": ["name", "shape", "offset", "count"],
            "properties": {"name": {"type": "string"}, "shape": {"type": "array", "items": _int},
                           "offset": {"type": "integer", "minimum": 0},
                           "count": {"type": "integer", "minimum": 0}}}},
        "epoch": {"type": "integer", "minimum": 0},
        "config": TRAIN_CONFIG,
        "config_hash": {"type": "string"},
        "rng_state": {"type": "object"},
    },
}

SCHEMAS = {
    "synth_spec": SYNTH_SPEC,
    "train_config": TRAIN_CONFIG,
    "groups": GROUPS,
    "metrics_report": METRICS_REPORT,
    "ablation_table": ABLATION_TABLE,
    "ood_table": OOD_TABLE,
    "checkpoint_manifest": CHECKPOINT_MANIFEST,
}


def validate(doc, name: str):
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match schema ``name``; return ``doc``."""
    jsonschema.validate(doc, SCHEMAS[name])
    return doc


def load_json(path, name: str):
    return validate(json.loads(Path(path).read_text()), name)
