"""Shared tiny configurations so model tests run in well under a second."""

import pytest

from earlyfuse.encoder import FusionConfig
from earlyfuse.pretraining import AudioVisualMAE, DecoderConfig, TrainConfig
from earlyfuse.tokenization import InputConfig, SyntheticAVSource

TINY_INPUT = InputConfig(image_channels=1, image_size=8, image_patch=4, spec_bands=8, spec_frames=8, spec_patch=4)


def tiny_fusion(**fields) -> FusionConfig:
    base = dict(depth=2, embed_dim=16, num_heads=2, attn_dim=4, num_fusion_tokens=2,
                num_agg_audio=2, num_agg_visual=2, mlp_ratio_modality=2.0)
    base.update(fields)
    return FusionConfig(**base)


def tiny_decoder(**fields) -> DecoderConfig:
    base = dict(depth=1, embed_dim=16, num_heads=2, mlp_ratio=2.0)
    base.update(fields)
    return DecoderConfig(**base)


def tiny_train(**fields) -> TrainConfig:
    base = dict(batch_size=2, steps_per_epoch=2, warmup_epochs=1, total_epochs=3, log_every=0,
                prefetch=0, probe_samples=16)
    base.update(fields)
    return TrainConfig(**base)


def tiny_model(seed: int = 0, **fusion_fields) -> AudioVisualMAE:
    return AudioVisualMAE.from_seed(tiny_fusion(**fusion_fields), tiny_decoder(), TINY_INPUT, seed)


@pytest.fixture
def source():
    return SyntheticAVSource(TINY_INPUT, classes=3, seed=0)
