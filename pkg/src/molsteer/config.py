"""Plain-text run configuration with a strict schema.

Config files are line-oriented ``key value`` pairs; ``#`` starts a comment.
Command-line overrides use the same ``key=value`` spelling. Every key must
exist in the schema and pass its validator; unknown keys are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .autoencoder import AutoencoderConfig
from .chem.metrics import MODES
from .diffusion import SCHEDULE_KINDS, NoiseSchedule, make_schedule
from .egnn import EgnnConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys, bad types, or failed validation."""


@dataclass(frozen=True)
class ConfigField:
    name: str
    kind: type
    default: Any
    check: Callable[[Any], bool] | None = None
    description: str = ""


def _positive(x: Any) -> bool:
    return x > 0


def _non_negative(x: Any) -> bool:
    return x >= 0


SCHEMA: dict[str, ConfigField] = {
    field.name: field
    for field in [
        ConfigField("learning_rate", float, 1e-4, _non_negative, "optimizer step size"),
        ConfigField("batch_size", int, 64, _positive, "pairs per update"),
        ConfigField("epochs", int, 1, _positive, "passes over the training pairs"),
        ConfigField("steps", int, 0, _non_negative, "explicit update count; 0 derives from epochs"),
        ConfigField("seed", int, 0, None, "run seed"),
        ConfigField("ema_decay", float, 0.999, lambda x: 0.0 <= x < 1.0, "shadow decay"),
        ConfigField("grad_clip", float, 1.0, _positive, "global gradient-norm cap"),
        ConfigField("loss_coefficient", float, 1.0, _positive, "weight on the diffusion term"),
        ConfigField("hidden_dim", int, 256, _positive, "EGNN hidden width"),
        ConfigField("encoder_layers", int, 1, _positive, "substructure encoder depth"),
        ConfigField("decoder_layers", int, 9, _positive, "molecule decoder depth"),
        ConfigField("denoiser_layers", int, 4, _positive, "denoiser depth"),
        ConfigField("use_attention", bool, True, None, "gate feature aggregation"),
        ConfigField("message_mlp_depth", int, 2, _positive, "edge MLP depth"),
        ConfigField("latent_feat_dim", int, 1, _positive, "prior feature width"),
        ConfigField("sigma_0", float, 0.01, _positive, "encoder posterior std"),
        ConfigField("virtual_noise_scale", float, 0.1, _non_negative, "virtual node spread (A)"),
        ConfigField("asymmetric", bool, True, None, "decoder may grow atoms"),
        ConfigField("schedule_kind", str, "polynomial", lambda x: x in SCHEDULE_KINDS, "ramp"),
        ConfigField("schedule_steps", int, 1000, lambda x: x >= 2, "diffusion steps"),
        ConfigField("checkpoint_every", int, 500, _positive, "steps between checkpoints"),
        ConfigField(
            "substructure_mode", str, "ring", lambda x: x in MODES, "training pair extraction"
        ),
        ConfigField(
            "fragment_fraction", float, 0.5, lambda x: 0.0 < x <= 1.0, "fragment-mode patch size"
        ),
    ]
}


def _coerce(field: ConfigField, raw: str) -> Any:
    if field.kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {field.name!r} expects a boolean, got {raw!r}")
    try:
        return field.kind(raw)
    except ValueError as err:
        raise ConfigError(
            f"key {field.name!r} expects {field.kind.__name__}, got {raw!r}"
        ) from err


def _set(config: dict[str, Any], key: str, raw: str) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    field = SCHEMA[key]
    value = _coerce(field, raw)
    if field.check is not None and not field.check(value):
        raise ConfigError(f"key {key!r} rejects value {value!r}")
    config[key] = value


def default_config() -> dict[str, Any]:
    return {name: field.default for name, field in SCHEMA.items()}


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict[str, Any]:
    """Defaults, then file values, then ``key=value`` overrides, validated."""
    config = default_config()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'key value', got {raw!r}")
            _set(config, parts[0], parts[1])
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must be key=value")
        _set(config, key.strip(), value.strip())
    return config


def config_digest(config: dict[str, Any]) -> str:
    """Stable digest of a full configuration, for output provenance."""
    canonical = "\n".join(f"{k}={config[k]!r}" for k in sorted(config))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def train_config_from(config: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        learning_rate=config["learning_rate"],
        batch_size=config["batch_size"],
        epochs=config["epochs"],
        seed=config["seed"],
        ema_decay=config["ema_decay"],
        grad_clip=config["grad_clip"],
        loss_coefficient=config["loss_coefficient"],
    )


def autoencoder_config_from(config: dict[str, Any]) -> AutoencoderConfig:
    return AutoencoderConfig(
        encoder=EgnnConfig(
            num_layers=config["encoder_layers"],
            hidden_dim=config["hidden_dim"],
            use_attention=config["use_attention"],
            message_mlp_depth=config["message_mlp_depth"],
        ),
        decoder=EgnnConfig(
            num_layers=config["decoder_layers"],
            hidden_dim=config["hidden_dim"],
            use_attention=config["use_attention"],
            message_mlp_depth=config["message_mlp_depth"],
        ),
        latent_feat_dim=config["latent_feat_dim"],
        sigma_0=config["sigma_0"],
        virtual_noise_scale=config["virtual_noise_scale"],
        asymmetric=config["asymmetric"],
    )


def denoiser_config_from(config: dict[str, Any]) -> EgnnConfig:
    return EgnnConfig(
        num_layers=config["denoiser_layers"],
        hidden_dim=config["hidden_dim"],
        use_attention=config["use_attention"],
        message_mlp_depth=config["message_mlp_depth"],
    )


def schedule_from(config: dict[str, Any]) -> NoiseSchedule:
    return make_schedule(config["schedule_steps"], config["schedule_kind"])
