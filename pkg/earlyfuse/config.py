"""Run configuration: TOML files with dotted section keys plus overrides.

A file looks like::

    model.depth = 4
    model.fusion_mode = "factorized"
    model.fusion_layers = "late"      # or [4], or omitted for every layer
    train.total_epochs = 10
    data.classes = 4
    output.run_name = "early"

``[model]``-style tables are accepted too. Overrides are ``key=value``
strings whose values are parsed as TOML; bare words are taken as strings.
"""

import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .encoder import FUSION_PRESETS, FusionConfig, fusion_layers_for
from .errors import ConfigurationError
from .pretraining import DecoderConfig, TrainConfig
from .tokenization import InputConfig
from .utils.validation import flatten_keys, reject_unknown_keys

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "EARLYFUSE_OUTPUT_ROOT"
DATA_SOURCES = ("synthetic", "raw")


@dataclass
class DataConfig:
    source: str = "synthetic"
    classes: int = 4
    noise: float = 0.3
    path: Optional[str] = None

    def validate(self) -> None:
        if self.source not in DATA_SOURCES:
            raise ConfigurationError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}",
                                     key="data.source")
        if self.classes < 2:
            raise ConfigurationError(f"data.classes must be at least 2, got {self.classes}", key="data.classes")
        if self.noise < 0:
            raise ConfigurationError("data.noise must not be negative", key="data.noise")
        if self.source == "raw" and not self.path:
            raise ConfigurationError("data.path is required when data.source is 'raw'", key="data.path")


@dataclass
class OutputConfig:
    root: Optional[str] = None
    run_name: str = "run"

    def resolved_root(self) -> Path:
        return Path(self.root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")

    @property
    def run_dir(self) -> Path:
        return self.resolved_root() / self.run_name

    def validate(self) -> None:
        if not self.run_name or "/" in self.run_name or self.run_name in (".", ".."):
            raise ConfigurationError(f"output.run_name {self.run_name!r} is not a plain directory name",
                                     key="output.run_name")


@dataclass
class RunConfig:
    model: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    input: InputConfig = field(default_factory=InputConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "RunConfig":
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def flat(self) -> Dict[str, Any]:
        return flatten_keys(self.to_dict())

    @classmethod
    def from_dict(cls, table: Mapping[str, Any]) -> "RunConfig":
        """Build from nested or dotted-key tables, rejecting unknown keys."""
        return from_flat(flatten_keys(table))


SECTIONS = {
    "model": FusionConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
    "input": InputConfig,
    "data": DataConfig,
    "output": OutputConfig,
}


def allowed_keys() -> List[str]:
    return [f"{section}.{f.name}" for section, kind in SECTIONS.items() for f in fields(kind)]


def _coerce(key: str, value: Any, default: Any) -> Any:
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key} must be true or false, got {value!r}", key=key)
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, type(default)):
        raise ConfigurationError(f"{key} expects {type(default).__name__}, got {value!r}", key=key)
    return value


def from_flat(flat: Mapping[str, Any]) -> RunConfig:
    reject_unknown_keys(flat, allowed_keys())
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    defaults = RunConfig()
    for key, value in flat.items():
        section, name = key.split(".", 1)
        default = getattr(getattr(defaults, section), name)
        if key == "model.fusion_layers":
            value = _fusion_layers(value, flat.get("model.depth", defaults.model.depth))
        elif isinstance(value, list):
            value = list(value)
        else:
            value = _coerce(key, value, default)
        sections[section][name] = value

    model = sections["model"]
    if model.get("fusion_layers") == [] and "fusion_mode" not in model:
        model["fusion_mode"] = "none"
        model["fusion_layers"] = None
    return RunConfig(**{name: SECTIONS[name](**values) for name, values in sections.items()})


def _fusion_layers(value: Any, depth: int) -> Optional[List[int]]:
    if value is None:
        return None
    if isinstance(value, str):
        if value not in FUSION_PRESETS:
            raise ConfigurationError(f"model.fusion_layers preset must be one of {FUSION_PRESETS}, got {value!r}",
                                     key="model.fusion_layers")
        return list(fusion_layers_for(depth, value))
    if isinstance(value, list) and all(isinstance(v, int) for v in value):
        return list(value)
    raise ConfigurationError(f"model.fusion_layers must be a preset name or a list of layers, got {value!r}",
                             key="model.fusion_layers")


def parse_value(text: str) -> Any:
    """A TOML scalar or array; anything unparsable is a plain string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(overrides: Sequence[str]) -> Dict[str, Any]:
    parsed = {}
    for item in overrides:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"Override {item!r} is not of the form key=value", key=key or item)
        parsed[key] = parse_value(text.strip())
    return parsed


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read ``path`` (optional), apply overrides, validate everything."""
    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}", key=str(path))
        try:
            with open(path, "rb") as f:
                flat = flatten_keys(tomllib.load(f))
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"Cannot parse {path}: {e}", key=str(path)) from e
    flat.update(parse_overrides(overrides))
    config = from_flat(flat).validate()
    logger.debug(f"Loaded configuration from {path or 'defaults'} with {len(overrides)} overrides")
    return config


def desk_scale() -> RunConfig:
    """Defaults sized for a laptop CPU."""
    return RunConfig()


def base_scale() -> RunConfig:
    """ViT-Base shapes: 224px images and 128x196 spectrograms at patch 16."""
    return RunConfig(
        model=FusionConfig(depth=12, embed_dim=768, num_heads=12, attn_dim=16, num_fusion_tokens=16,
                           num_agg_audio=8, num_agg_visual=8, mlp_ratio_modality=4.0, mlp_ratio_fusion=1.0),
        decoder=DecoderConfig(depth=8, embed_dim=512, num_heads=16),
        input=InputConfig(image_channels=3, image_size=224, image_patch=16, spec_bands=128, spec_frames=196,
                          spec_patch=16),
        train=TrainConfig(base_lr=1.5e-4, batch_size=256, warmup_epochs=40, total_epochs=200),
    )
