from dataclasses import replace
from typing import Any, Dict, Optional

from .config import RunConfig, SECTIONS, desk_scale, from_flat, parse_value
from .encoder import FusionConfig, fusion_layers_for
from .pretraining import DecoderConfig, TrainConfig
from .tokenization import InputConfig


class ConfigBuilder:
    """Builder for assembling run configurations.

    This class provides a fluent interface for constructing RunConfig
    instances section by section, with dotted-key overrides, fusion depth
    presets and early validation.

    Attributes:
        config (RunConfig): The configuration being assembled.
        overrides (Dict[str, Any]): Dotted-key overrides applied on build.
    """

    def __init__(self, base: Optional[RunConfig] = None):
        self.config: RunConfig = base or desk_scale()
        self.overrides: Dict[str, Any] = {}

    def with_model(self, model: FusionConfig) -> 'ConfigBuilder':
        self.config = replace(self.config, model=model)
        return self

    def with_fusion(self, mode: Optional[str] = None, preset: Optional[str] = None, **fields: Any) -> 'ConfigBuilder':
        """Set the fusion mode, a depth preset (early/mid/late/none) and any model fields."""
        model = replace(self.config.model, **fields)
        if mode is not None:
            model = replace(model, fusion_mode=mode)
        if preset is not None:
            layers = fusion_layers_for(model.depth, preset)
            model = replace(model, fusion_layers=list(layers) or None,
                            fusion_mode=model.fusion_mode if layers else "none")
        self.config = replace(self.config, model=model)
        return self

    def with_decoder(self, decoder: DecoderConfig) -> 'ConfigBuilder':
        self.config = replace(self.config, decoder=decoder)
        return self

    def with_train(self, train: Optional[TrainConfig] = None, **fields: Any) -> 'ConfigBuilder':
        self.config = replace(self.config, train=replace(train or self.config.train, **fields))
        return self

    def with_input(self, geometry: InputConfig) -> 'ConfigBuilder':
        self.config = replace(self.config, input=geometry)
        return self

    def with_data(self, **fields: Any) -> 'ConfigBuilder':
        self.config = replace(self.config, data=replace(self.config.data, **fields))
        return self

    def with_output(self, **fields: Any) -> 'ConfigBuilder':
        self.config = replace(self.config, output=replace(self.config.output, **fields))
        return self

    def override(self, key: str, value: Any) -> 'ConfigBuilder':
        """Record a dotted-key override; string values are parsed as TOML."""
        self.overrides[key] = parse_value(value) if isinstance(value, str) else value
        return self

    def print_config(self) -> 'ConfigBuilder':
        """Prints a formatted representation of the run configuration.

        Each section is shown as a branch of a tree with its keys and values;
        pending overrides are listed last.

        Returns:
            ConfigBuilder: The builder instance for method chaining.
        """
        print("\n🧪 Run Configuration")
        print("═══════════════════\n")

        table = self.config.to_dict()
        for section in SECTIONS:
            print(f"📋 {section}:")
            items = list(table[section].items())
            for i, (key, value) in enumerate(items):
                branch = "└─" if i == len(items) - 1 else "├─"
                print(f"   {branch} {key}: {value}")
            print()

        print("🔄 Overrides:")
        if not self.overrides:
            print("   No overrides defined")
        for key, value in self.overrides.items():
            print(f"   • {key} = {value}")
        print()

        return self

    def validate(self) -> 'ConfigBuilder':
        """Performs early validation of the assembled configuration.

        Returns:
            ConfigBuilder: The builder instance for method chaining.

        Raises:
            ConfigurationError: If any section is invalid or an override names an unknown key.
        """
        self._resolve().validate()
        return self

    def _resolve(self) -> RunConfig:
        if not self.overrides:
            return self.config
        flat = self.config.flat()
        flat.update(self.overrides)
        return from_flat(flat)

    def build(self) -> RunConfig:
        """Builds and validates the final RunConfig.

        Returns:
            RunConfig: A fully validated configuration.
        """
        return self._resolve().validate()
