"""Configuration loading shared by the command-line harness and the service.

The JSON schema shipped at ``schema/config.schema.json`` is the single
published contract: the harness validates experiment files against its
``experiment`` definition and the service validates session bodies
against ``session``.  Builders here turn validated dictionaries into the
runnable objects of the library layer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from importlib import resources

import jsonschema
import numpy as np

from .diffusion import AnalyticEstimator, MixtureComponent, MixtureModel, ProductEstimator, Schedule
from .guidance import ConceptEdit, GuidanceConfig

__all__ = [
    "ConfigError",
    "apply_overrides",
    "estimator_from_config",
    "fingerprint",
    "guidance_from_config",
    "mixture_from_config",
    "parse_seed_text",
    "schedule_from_config",
    "schema",
    "schema_text",
    "seeds_from_config",
    "validate_config",
]

_CONCEPT_PATH = re.compile(r"^concepts\[(\d+)\]\.(\w+)$")
_SCALAR_FIELDS = ("guidance_scale", "momentum_scale", "momentum_beta")


class ConfigError(ValueError):
    """Validation failure carrying the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path or '(root)'}: {message}")


def schema_text() -> str:
    return resources.files("sega_forge").joinpath("schema/config.schema.json").read_text()


def schema() -> dict:
    return json.loads(schema_text())


def _json_path_to_field(json_path: str) -> str:
    # jsonschema reports "$.guidance.concepts[0].edit_scale".
    return json_path[2:] if json_path.startswith("$.") else ""


def validate_config(obj, kind: str) -> None:
    """Check ``obj`` against the named schema definition; raise ConfigError.

    ``kind`` is one of "experiment" or "session".
    """
    full = schema()
    if kind not in full["$defs"]:
        raise ValueError(f"no schema definition named {kind!r}")
    validator = jsonschema.Draft202012Validator(
        {"$defs": full["$defs"], "$ref": f"#/$defs/{kind}"})
    error = jsonschema.exceptions.best_match(validator.iter_errors(obj))
    if error is not None:
        raise ConfigError(_json_path_to_field(error.json_path), error.message)


def mixture_from_config(obj: dict) -> MixtureModel:
    components = tuple(
        MixtureComponent(
            weight=float(entry["weight"]),
            mean=np.asarray(entry["mean"], dtype=np.float64),
            covariance=np.asarray(entry["covariance"], dtype=np.float64),
            labels=frozenset(entry.get("labels", ())),
        )
        for entry in obj["components"]
    )
    return MixtureModel(components)


def estimator_from_config(model_obj: dict, schedule: Schedule) -> AnalyticEstimator | ProductEstimator:
    if "blocks" in model_obj:
        blocks = tuple(mixture_from_config(b).estimator(schedule) for b in model_obj["blocks"])
        return ProductEstimator(blocks)
    return mixture_from_config(model_obj).estimator(schedule)


def schedule_from_config(obj: dict) -> Schedule:
    return Schedule.cosine(int(obj["steps"]))


def _concept_from_config(entry: dict) -> ConceptEdit:
    return ConceptEdit(
        condition=entry["condition"],
        edit_scale=float(entry["edit_scale"]),
        threshold=float(entry["threshold"]),
        warmup=int(entry.get("warmup", 0)),
        direction=entry.get("direction", "positive"),
        weight=float(entry.get("weight", 1.0)),
    )


def guidance_from_config(obj: dict) -> GuidanceConfig:
    return GuidanceConfig(
        prompt_condition=obj.get("prompt_condition"),
        guidance_scale=float(obj.get("guidance_scale", 1.0)),
        momentum_scale=float(obj.get("momentum_scale", 0.0)),
        momentum_beta=float(obj.get("momentum_beta", 0.9)),
        concepts=tuple(_concept_from_config(c) for c in obj.get("concepts", ())),
    )


def seeds_from_config(obj) -> list[int]:
    if isinstance(obj, dict):
        return [int(obj["start"]) + i for i in range(int(obj["count"]))]
    return [int(s) for s in obj]


def parse_seed_text(text: str) -> list[int]:
    """Parse a seed override: comma-separated integers or "start..end" inclusive."""
    text = text.strip()
    span = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if span:
        lo, hi = int(span.group(1)), int(span.group(2))
        if hi < lo:
            raise ConfigError("seeds", f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError("seeds", f"cannot parse seed list {text!r}") from None


def _coerce_field(owner: str, field: str, value):
    if field == "warmup":
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{owner}.{field}" if owner else field,
                              f"warmup must be an integer, got {value!r}")
        return int(value)
    if field in ("condition", "direction"):
        return str(value)
    return float(value)


def apply_overrides(config: GuidanceConfig, overrides: dict) -> GuidanceConfig:
    """Return a config with dotted-path overrides applied.

    Paths are top-level scalar fields ("guidance_scale", "momentum_scale",
    "momentum_beta") or concept fields ("concepts[0].edit_scale").  Unknown
    paths and out-of-range indices raise ConfigError before anything runs.
    """
    concepts = list(config.concepts)
    scalars = {}
    for path, value in overrides.items():
        match = _CONCEPT_PATH.fullmatch(path)
        if match:
            index, field = int(match.group(1)), match.group(2)
            if index >= len(concepts):
                raise ConfigError(path, f"config has {len(concepts)} concepts")
            if field not in ConceptEdit.__dataclass_fields__:
                raise ConfigError(path, f"unknown concept field {field!r}")
            concepts[index] = dataclasses.replace(
                concepts[index], **{field: _coerce_field(path, field, value)})
        elif path in _SCALAR_FIELDS:
            scalars[path] = _coerce_field("", path, value)
        else:
            raise ConfigError(path, "unknown parameter path")
    return dataclasses.replace(config, concepts=tuple(concepts), **scalars)


def fingerprint(obj) -> str:
    """Stable digest of a JSON-able object, for caching and output naming."""
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canonical.encode()).hexdigest()[:16]
