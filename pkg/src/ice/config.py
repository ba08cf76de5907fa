"""Run configuration: JSON file, published schema, strict validation.

The canonical config format is JSON. Unknown keys are rejected at every
level; defaults are filled in for anything omitted. The effective config
(after flag overrides) is what gets hashed into artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .core import ContractViolation, IceError, IntrinsicAxis, NoiseSchedule, canonical_json, sha256_bytes
from .learning import DEFAULT_AXES, TrainSchedule
from .localization import LocalizationConfig
from .losses import LossWeights


class ConfigError(IceError, ValueError):
    """The config file is unreadable or violates the schema."""


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["backend"],
    "properties": {
        "backend": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["synthetic", "diffusion-adapter"]},
                "world": {"type": "string"},
                "attention_grid": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 1},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "jitter_px": {"type": "integer", "minimum": 0},
                "timesteps": {"type": "integer", "minimum": 1},
                "beta_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "localization": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_iterations": {"type": "integer", "minimum": 1},
                "min_mask_coverage": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "fill": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "phase1_steps": {"type": "integer", "minimum": 0},
                "phase2_steps": {"type": "integer", "minimum": 0},
                "refine_steps": {"type": "integer", "minimum": 0},
                "learning_rate_tokens": {"type": "number", "exclusiveMinimum": 0},
                "learning_rate_refine": {"type": "number", "exclusiveMinimum": 0},
                "grad_clip": {"type": "number", "minimum": 0},
                "prior_seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
            },
        },
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_att": {"type": "number", "minimum": 0},
                "lambda_triplet": {"type": "number", "minimum": 0},
                "gamma_phase1": {"type": "number", "minimum": 0},
            },
        },
        "axes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {"type": "string", "minLength": 1},
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["name"],
                        "properties": {
                            "name": {"type": "string", "minLength": 1},
                            "anchor_template": {"type": "string", "pattern": "\\{name\\}"},
                        },
                    },
                ]
            },
        },
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "input": {"type": "string"},
                "workdir": {"type": "string"},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Validated, default-filled run configuration."""

    backend: dict
    localization: LocalizationConfig
    schedule: TrainSchedule
    weights: LossWeights
    axes: tuple
    paths: dict
    seed: int
    base_dir: Path

    def canonical(self) -> dict:
        return {
            "backend": dict(sorted(self.backend.items())),
            "localization": {
                "tau": self.localization.tau,
                "max_iterations": self.localization.max_iterations,
                "min_mask_coverage": self.localization.min_mask_coverage,
                "fill": self.localization.fill,
            },
            "schedule": {
                "phase1_steps": self.schedule.phase1_steps,
                "phase2_steps": self.schedule.phase2_steps,
                "refine_steps": self.schedule.refine_steps,
                "learning_rate_tokens": self.schedule.learning_rate_tokens,
                "learning_rate_refine": self.schedule.learning_rate_refine,
                "grad_clip": self.schedule.grad_clip,
                "prior_seeds": list(self.schedule.prior_seeds),
            },
            "weights": {
                "lambda_att": self.weights.lambda_att,
                "lambda_triplet": self.weights.lambda_triplet,
                "gamma_phase1": self.weights.gamma_phase1,
            },
            "axes": [{"name": a.name, "anchor_template": a.anchor_template} for a in self.axes],
            "paths": dict(sorted(self.paths.items())),
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        return sha256_bytes(canonical_json(self.canonical()).encode("utf-8"))


def parse_config(doc: dict, base_dir: "Path | str" = ".", seed_override: "int | None" = None) -> RunConfig:
    """Validate a config document against the schema and fill defaults."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema violation: {exc.message}") from exc
    seed = int(doc.get("seed", 0))
    if seed_override is not None:
        seed = int(seed_override)
    sched_doc = dict(doc.get("schedule", {}))
    schedule = TrainSchedule(seed=seed, **sched_doc)
    weights = LossWeights(**doc.get("weights", {}))
    loc = LocalizationConfig(**doc.get("localization", {}))
    axes_doc = doc.get("axes")
    if axes_doc is None:
        axes = DEFAULT_AXES
    else:
        axes = tuple(
            IntrinsicAxis(a) if isinstance(a, str) else IntrinsicAxis(**a) for a in axes_doc
        )
    return RunConfig(
        backend=dict(doc["backend"]),
        localization=loc,
        schedule=schedule,
        weights=weights,
        axes=axes,
        paths=dict(doc.get("paths", {})),
        seed=seed,
        base_dir=Path(base_dir),
    )


def load_config(path: "str | Path", seed_override: "int | None" = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc, base_dir=path.parent, seed_override=seed_override)


def build_backend(cfg: RunConfig):
    """Instantiate the configured backend (resolving paths off the config dir)."""
    from .backends.synthetic import SyntheticBackend, load_world

    table = cfg.backend
    name = table["name"]
    if name == "synthetic":
        if "world" not in table:
            raise ConfigError("synthetic backend requires a 'world' path")
        world_path = Path(table["world"])
        if not world_path.is_absolute():
            world_path = cfg.base_dir / world_path
        world = load_world(world_path)
        schedule = NoiseSchedule.linear(
            table.get("timesteps", 50),
            table.get("beta_start", 0.02),
            table.get("beta_end", 0.12),
        )
        return SyntheticBackend(
            world,
            schedule=schedule,
            attention_grid=tuple(table.get("attention_grid", (8, 8))),
            jitter_px=table.get("jitter_px", 2),
        )
    raise ConfigError(
        "the diffusion-adapter backend is a documented contract without a bundled "
        "implementation; construct your adapter directly against DiffusionBackend"
    )
