"""One schema for the whole pipeline: file config, overrides, hash.

Every tunable lives in a dataclass section; the CLI help, the JSON config
file, and --set overrides are all generated from the same schema, so an
unknown or misspelled key is always an error rather than a silent default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .corpus import CorpusConfig
from .frontend import FrontendConfig
from .model import ModelConfig, preset
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad config file, unknown key, or unparseable value."""


@dataclass(frozen=True)
class TokenizerSettings:
    K: int = 32
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"tokenizer.K must be >= 2, got {self.K}")
        if self.max_iter < 1 or self.tol <= 0:
            raise ConfigError("tokenizer.max_iter must be >= 1 and tol > 0")


@dataclass
class PipelineConfig:
    frontend: FrontendConfig
    tokenizer: TokenizerSettings
    model: ModelConfig
    train: TrainConfig
    corpus: CorpusConfig


_SECTION_TYPES = {
    "frontend": FrontendConfig,
    "tokenizer": TokenizerSettings,
    "model": ModelConfig,
    "train": TrainConfig,
    "corpus": CorpusConfig,
}

DEFAULT_MODEL_PRESET = "desk"


def default_config() -> PipelineConfig:
    """Desk-scale defaults: 3 feature layers, K=32, the small test model."""
    return PipelineConfig(
        frontend=FrontendConfig(layer_count=3),
        tokenizer=TokenizerSettings(),
        model=preset(DEFAULT_MODEL_PRESET),
        train=TrainConfig(),
        corpus=CorpusConfig(),
    )


def _section_defaults(section: str) -> dict:
    if section == "model":
        return dataclasses.asdict(preset(DEFAULT_MODEL_PRESET))
    if section == "frontend":
        return dataclasses.asdict(FrontendConfig(layer_count=3))
    return dataclasses.asdict(_SECTION_TYPES[section]())


def _parse_value(section: str, key: str, text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int) and not isinstance(default, bool):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc
    if text.strip().lower() in ("none", "null"):
        return None
    return text


def _apply_section(section: str, values: dict, updates: dict, raw: bool) -> None:
    valid = set(_section_defaults(section))
    special = {"preset"} if section == "model" else set()
    for key, val in updates.items():
        if key == "size_preset":
            raise ConfigError("model.size_preset is derived; set model.preset instead")
        if key in special:
            if section == "model":
                base = dataclasses.asdict(preset(str(val)))
                for k, v in base.items():
                    values[k] = v
            continue
        if key not in valid:
            raise ConfigError(f"unknown key {section}.{key}; valid keys: "
                              + ", ".join(sorted(valid | special)))
        values[key] = val if not raw else _parse_value(section, key, val, values[key])


def load_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    """Defaults, then the JSON file, then key=value overrides, in that order."""
    values = {s: _section_defaults(s) for s in _SECTION_TYPES}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object of sections")
        for section, body in data.items():
            if section not in _SECTION_TYPES:
                raise ConfigError(f"unknown config section {section!r}; valid: "
                                  + ", ".join(sorted(_SECTION_TYPES)))
            if not isinstance(body, dict):
                raise ConfigError(f"{path}: section {section!r} must be an object")
            if "preset" in body:  # expand before sibling keys override it
                _apply_section(section, values[section], {"preset": body["preset"]}, raw=False)
            _apply_section(section, values[section],
                           {k: v for k, v in body.items() if k != "preset"}, raw=False)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, text = item.split("=", 1)
        if dotted.count(".") != 1:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = dotted.split(".")
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {section!r}; valid: "
                              + ", ".join(sorted(_SECTION_TYPES)))
        if key == "preset" and section == "model":
            _apply_section(section, values[section], {"preset": text}, raw=False)
        else:
            _apply_section(section, values[section], {key: text}, raw=True)
    try:
        return PipelineConfig(**{s: _SECTION_TYPES[s](**values[s]) for s in _SECTION_TYPES})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def validate_pipeline(cfg: PipelineConfig) -> None:
    """Cross-section consistency for commands that run the full pipeline."""
    if cfg.frontend.layer_count != cfg.model.n_layers_in:
        raise ConfigError(f"frontend.layer_count {cfg.frontend.layer_count} != "
                          f"model.n_layers_in {cfg.model.n_layers_in}")
    if cfg.tokenizer.K != cfg.model.K:
        raise ConfigError(f"tokenizer.K {cfg.tokenizer.K} != model.K {cfg.model.K}")
    if cfg.frontend.e_feat != cfg.model.e_feat:
        raise ConfigError(f"frontend.e_feat {cfg.frontend.e_feat} != model.e_feat {cfg.model.e_feat}")


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def describe_config() -> str:
    """Every config key with its default; the single source for --help."""
    lines = ["config keys (JSON sections or --set section.key=value):"]
    for section in sorted(_SECTION_TYPES):
        defaults = _section_defaults(section)
        if section == "model":
            lines.append(f"  model.preset = {DEFAULT_MODEL_PRESET}  "
                         "(one of tiny, desk, S, M, L; expands the keys below)")
        for key in sorted(defaults):
            if key == "size_preset":
                continue
            lines.append(f"  {section}.{key} = {defaults[key]!r}")
    return "\n".join(lines)
