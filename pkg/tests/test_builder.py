"""Unit tests for the ConfigBuilder functionality.

This module contains tests for assembling run configurations section by
section, with presets, overrides and early validation."""

import pytest

from earlyfuse.builder import ConfigBuilder
from earlyfuse.config import desk_scale
from earlyfuse.errors import ConfigurationError
from earlyfuse.pretraining import DecoderConfig
from earlyfuse.tokenization import InputConfig


def test_builder_creation():
    """Test ConfigBuilder initialization."""
    builder = ConfigBuilder()
    assert builder.config == desk_scale()
    assert len(builder.overrides) == 0


def test_builder_with_fusion_preset():
    """Test a late preset fuses only the last layer."""
    config = ConfigBuilder().with_fusion(mode="dense", preset="late").build()
    assert config.model.fusion_mode == "dense"
    assert config.model.fusion_layers == [config.model.depth]


def test_builder_none_preset_disables_fusion():
    """Test the none preset switches the mode off."""
    config = ConfigBuilder().with_fusion(preset="none").build()
    assert config.model.fusion_mode == "none"
    assert config.model.resolved_fusion_layers() == ()


def test_builder_sections():
    """Test adding decoder, input, train, data and output sections."""
    config = (
        ConfigBuilder()
        .with_decoder(DecoderConfig(depth=1))
        .with_input(InputConfig(image_size=32))
        .with_train(total_epochs=2, seed=5)
        .with_data(classes=3)
        .with_output(run_name="tiny")
        .build()
    )
    assert config.decoder.depth == 1
    assert config.input.image_size == 32
    assert config.train.total_epochs == 2
    assert config.train.seed == 5
    assert config.data.classes == 3
    assert config.output.run_name == "tiny"


def test_builder_overrides():
    """Test dotted-key overrides are parsed and applied on build."""
    builder = ConfigBuilder().override("train.seed", "9").override("model.fusion_mode", "token")
    config = builder.build()
    assert config.train.seed == 9
    assert config.model.fusion_mode == "token"
    assert builder.config.train.seed == 0


def test_builder_validation():
    """Test ConfigBuilder validation."""
    builder = ConfigBuilder().override("model.unknown", 1)
    with pytest.raises(ConfigurationError):
        builder.validate()

    builder = ConfigBuilder().with_fusion(embed_dim=66)
    with pytest.raises(ConfigurationError):
        builder.build()


def test_builder_print_config(capsys):
    """Test the configuration tree print."""
    ConfigBuilder().override("train.seed", 1).print_config()
    out = capsys.readouterr().out
    assert "Run Configuration" in out
    assert "📋 model:" in out
    assert "fusion_mode: factorized" in out
    assert "• train.seed = 1" in out


def test_builder_print_config_without_overrides(capsys):
    """Test the print notes when nothing is overridden."""
    ConfigBuilder().print_config()
    assert "No overrides defined" in capsys.readouterr().out
