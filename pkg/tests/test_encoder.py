"""Unit tests for the fusion encoder and its blocks."""

import numpy as np
import pytest

from earlyfuse.encoder import (
    FUSION_MODES,
    AggregationBlock,
    CrossAttentionBlock,
    DenseFusionBlock,
    FusionConfig,
    FusionEncoder,
    InteractionGrid,
    ModalityBlock,
    TokenFusionBlock,
    count_interactions,
    encoder_forward,
    fusion_layers_for,
    fusion_layers_last,
)
from earlyfuse.errors import ConfigurationError, DimensionError
from earlyfuse.tensor import Tensor, precision


def tiny(**fields):
    base = dict(depth=2, embed_dim=16, num_heads=2, attn_dim=4, num_fusion_tokens=3,
                num_agg_audio=2, num_agg_visual=2, mlp_ratio_modality=2.0)
    base.update(fields)
    return FusionConfig(**base)


def inputs(rng, n_v=5, n_a=4, dim=16, batch=2):
    return Tensor(rng.standard_normal((batch, n_v, dim))), Tensor(rng.standard_normal((batch, n_a, dim)))


def test_presets():
    """Test early, mid, late and none layer sets."""
    assert fusion_layers_for(12, "early") == tuple(range(1, 13))
    assert fusion_layers_for(12, "mid") == (9, 10, 11, 12)
    assert fusion_layers_for(12, "late") == (12,)
    assert fusion_layers_for(12, "none") == ()
    assert fusion_layers_for(4, "mid") == (3, 4)
    assert fusion_layers_last(4, 0) == ()
    with pytest.raises(ConfigurationError):
        fusion_layers_for(4, "sometimes")
    with pytest.raises(ConfigurationError):
        fusion_layers_last(4, 5)


def test_resolved_fusion_layers():
    """Test None means every layer and mode none means no layer."""
    assert tiny().resolved_fusion_layers() == (1, 2)
    assert tiny(fusion_layers=[2, 2]).resolved_fusion_layers() == (2,)
    assert tiny(fusion_mode="none").resolved_fusion_layers() == ()


@pytest.mark.parametrize("fields", [
    dict(fusion_mode="sparse"),
    dict(embed_dim=18),
    dict(embed_dim=12, num_heads=5),
    dict(fusion_layers=[3]),
    dict(fusion_layers=[]),
    dict(fusion_mode="none", fusion_layers=[1]),
    dict(num_fusion_tokens=0),
    dict(num_agg_audio=0),
    dict(depth=0),
])
def test_invalid_configs(fields):
    """Test invalid configurations are refused before any compute."""
    with pytest.raises(ConfigurationError):
        tiny(**fields).validate()


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_output_shapes(mode):
    """Test every mode keeps modality token counts and returns F fusion tokens."""
    rng = np.random.default_rng(0)
    encoder = FusionEncoder(tiny(fusion_mode=mode), rng)
    x_v, x_a = inputs(rng)
    out = encoder(x_v, x_a)
    assert out.visual.shape == (2, 5, 16)
    assert out.audio.shape == (2, 4, 16)
    assert out.fusion.shape == (2, 3, 16)


def test_mode_none_has_no_fusion_blocks():
    """Test no fusion or aggregation parameters exist without fusion."""
    encoder = FusionEncoder(tiny(fusion_mode="none"), np.random.default_rng(0))
    names = [name for name, _ in encoder.named_parameters()]
    assert not any(".fusion." in name or "agg" in name for name in names)


def test_mode_none_keeps_modalities_independent():
    """Test without fusion the visual output ignores the audio input."""
    rng = np.random.default_rng(1)
    encoder = FusionEncoder(tiny(fusion_mode="none"), rng)
    x_v, x_a = inputs(rng)
    _, other_a = inputs(rng)
    first = encoder(x_v, x_a).visual.data
    second = encoder(x_v, other_a).visual.data
    np.testing.assert_array_equal(first, second)


@pytest.mark.parametrize("mode", ["token", "dense", "factorized"])
def test_fusion_mixes_modalities(mode):
    """Test with fusion on two layers the visual output depends on the audio input."""
    rng = np.random.default_rng(2)
    encoder = FusionEncoder(tiny(fusion_mode=mode), rng)
    x_v, x_a = inputs(rng)
    _, other_a = inputs(rng)
    assert not np.allclose(encoder(x_v, x_a).visual.data, encoder(x_v, other_a).visual.data)


def test_late_fusion_only_builds_last_layer():
    """Test fusion blocks exist only on the configured layers."""
    encoder = FusionEncoder(tiny(depth=3, fusion_layers=[3]), np.random.default_rng(0))
    assert [layer.mode for layer in encoder.layers] == ["none", "none", "factorized"]


def test_factorized_equals_dense_with_identity_aggregation():
    """Test factorized fusion reduces to dense fusion when aggregation passes tokens through."""
    rng = np.random.default_rng(3)
    with precision(np.float64):
        dense = FusionEncoder(tiny(fusion_mode="dense"), np.random.default_rng(10))
        factorized = FusionEncoder(tiny(fusion_mode="factorized"), np.random.default_rng(11))
        factorized.load_state_dict(dense.state_dict(), strict=False)
        factorized.identity_aggregation = True
        x_v, x_a = inputs(rng)
        a, b = dense(x_v, x_a), factorized(x_v, x_a)
    for name in ("visual", "audio", "fusion"):
        np.testing.assert_allclose(getattr(a, name).data, getattr(b, name).data, atol=1e-6)


def test_interaction_grid_rows():
    """Test grid row i * n_v + j holds W_a x_a[i] + W_v x_v[j]."""
    rng = np.random.default_rng(4)
    grid = InteractionGrid(4, rng)
    x_a, x_v = Tensor(rng.standard_normal((1, 3, 4))), Tensor(rng.standard_normal((1, 2, 4)))
    out = grid(x_a, x_v).data
    assert out.shape == (1, 6, 4)
    expected = x_a.data[0, 2] @ grid.w_a.weight.data + x_v.data[0, 1] @ grid.w_v.weight.data
    np.testing.assert_allclose(out[0, 2 * 2 + 1], expected, atol=1e-5)


def test_count_interactions_oracle():
    """Test dense pairs are n_a * n_v and factorized pairs n_agg_a * n_agg_v over random configs."""
    rng = np.random.default_rng(5)
    for _ in range(50):
        n_v, n_a = int(rng.integers(1, 300)), int(rng.integers(1, 300))
        agg_a, agg_v = int(rng.integers(1, 16)), int(rng.integers(1, 16))
        cfg = tiny(num_agg_audio=agg_a, num_agg_visual=agg_v)
        assert count_interactions(tiny(fusion_mode="dense"), n_v, n_a) == n_a * n_v
        assert count_interactions(cfg, n_v, n_a) == agg_a * agg_v
        assert count_interactions(tiny(fusion_mode="token"), n_v, n_a) == 0


def test_reduction_ratio_at_base_scale():
    """Test 196 x 96 pairs over 8 x 8 aggregation tokens is a 294x reduction."""
    dense = count_interactions(tiny(fusion_mode="dense"), 196, 96)
    factorized = count_interactions(tiny(num_agg_audio=8, num_agg_visual=8), 196, 96)
    assert dense / factorized == 294


def test_dense_attention_covers_every_pair():
    """Test dense fusion weights range over n_a * n_v keys."""
    rng = np.random.default_rng(6)
    encoder = FusionEncoder(tiny(fusion_mode="dense", depth=1), rng)
    encoder(*inputs(rng))
    assert encoder.layers[0].fusion.cross.attn.last_weights.shape == (2, 2, 3, 20)


def test_encoder_rejects_bad_inputs():
    """Test mismatched widths and batch sizes are dimension errors."""
    encoder = FusionEncoder(tiny(), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        encoder(Tensor(np.zeros((2, 5, 8))), Tensor(np.zeros((2, 4, 16))))
    with pytest.raises(DimensionError):
        encoder(Tensor(np.zeros((2, 5, 16))), Tensor(np.zeros((3, 4, 16))))


def test_encoder_forward_from_parameter_table():
    """Test running from a parameter table matches the built encoder."""
    rng = np.random.default_rng(7)
    cfg = tiny()
    encoder = FusionEncoder(cfg, np.random.default_rng(8))
    x_v, x_a = inputs(rng)
    a = encoder_forward(x_v, x_a, cfg, encoder)
    b = encoder_forward(x_v, x_a, cfg, encoder.state_dict())
    np.testing.assert_array_equal(a.fusion.data, b.fusion.data)


def test_unimodal_parameter_names():
    """Test modality branch parameters are selected by name."""
    encoder = FusionEncoder(tiny(), np.random.default_rng(0))
    names = encoder.unimodal_parameter_names("audio")
    assert names
    assert all(".audio." in f".{name}" for name in names)
    assert not any("agg" in name for name in names)


def zero_residual_branches(module):
    """Zero every attention output projection and second MLP layer below ``module``."""
    for name, _ in list(module.named_parameters()):
        if name.endswith(("attn.proj.weight", "mlp.fc2.weight")):
            owner = module
            for part in name.split(".")[:-1]:
                owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
            owner.zero_()


@pytest.mark.parametrize("block_cls", [ModalityBlock, CrossAttentionBlock, AggregationBlock])
def test_block_with_zeroed_branches_is_identity(block_cls):
    """Test a block whose residual branches are zero returns its queries unchanged."""
    rng = np.random.default_rng(12)
    if block_cls is ModalityBlock:
        block = ModalityBlock(16, 2, 2.0, rng)
    else:
        block = block_cls(16, 2, 4, 2.0, rng)
    block.attn.proj.zero_()
    block.mlp.fc2.zero_()
    x, other = inputs(rng)
    out = block(x) if block_cls is ModalityBlock else block(x, other)
    np.testing.assert_array_equal(out.data, x.data)


def test_fusion_blocks_with_zeroed_branches_keep_fusion_tokens():
    """Test token and dense fusion pass the fusion tokens through when their branches are zero."""
    rng = np.random.default_rng(13)
    mm = Tensor(rng.standard_normal((2, 3, 16)))
    x_v, x_a = inputs(rng)
    token = TokenFusionBlock(16, 2, 4, 2.0, rng)
    token.attn.proj.zero_()
    token.mlp.fc2.zero_()
    np.testing.assert_array_equal(token(mm, x_v, x_a).data, mm.data)

    dense = DenseFusionBlock(16, 2, 4, 2.0, rng)
    dense.cross.attn.proj.zero_()
    dense.cross.mlp.fc2.zero_()
    np.testing.assert_array_equal(dense(mm, x_a, x_v).data, mm.data)


@pytest.mark.parametrize("mode", ["token", "dense", "factorized", "none"])
def test_encoder_with_zeroed_branches_is_identity(mode):
    """Test an encoder with every residual branch zeroed returns its inputs and initial fusion tokens."""
    rng = np.random.default_rng(14)
    encoder = FusionEncoder(tiny(fusion_mode=mode), rng)
    zero_residual_branches(encoder)
    x_v, x_a = inputs(rng)
    out = encoder(x_v, x_a)
    np.testing.assert_array_equal(out.visual.data, x_v.data)
    np.testing.assert_array_equal(out.audio.data, x_a.data)
    np.testing.assert_array_equal(out.fusion.data, np.broadcast_to(encoder.fusion_tokens.data, out.fusion.shape))


def test_fusion_blocks_ignore_token_order():
    """Test token fusion ignores visual token order and dense fusion ignores audio token order."""
    rng = np.random.default_rng(15)
    with precision(np.float64):
        mm = Tensor(rng.standard_normal((2, 3, 16)))
        x_v, x_a = inputs(rng)
        shuffled_v = Tensor(x_v.data[:, rng.permutation(x_v.shape[1])])
        shuffled_a = Tensor(x_a.data[:, rng.permutation(x_a.shape[1])])
        token = TokenFusionBlock(16, 2, 4, 2.0, rng)
        dense = DenseFusionBlock(16, 2, 4, 2.0, rng)
        aggregation = AggregationBlock(16, 2, 4, 2.0, rng)
        np.testing.assert_allclose(token(mm, shuffled_v, x_a).data, token(mm, x_v, x_a).data, atol=1e-6)
        np.testing.assert_allclose(dense(mm, shuffled_a, x_v).data, dense(mm, x_a, x_v).data, atol=1e-6)
        np.testing.assert_allclose(aggregation(mm, shuffled_v).data, aggregation(mm, x_v).data, atol=1e-6)


@pytest.mark.parametrize("mode", ["token", "dense", "factorized"])
def test_encoder_is_equivariant_to_visual_token_order(mode):
    """Test shuffling visual tokens shuffles the visual output and leaves audio and fusion tokens alone."""
    rng = np.random.default_rng(16)
    with precision(np.float64):
        encoder = FusionEncoder(tiny(fusion_mode=mode), rng)
        x_v, x_a = inputs(rng)
        perm = rng.permutation(x_v.shape[1])
        reference = encoder(x_v, x_a)
        shuffled = encoder(Tensor(x_v.data[:, perm]), x_a)
    np.testing.assert_allclose(shuffled.visual.data, reference.visual.data[:, perm], atol=1e-6)
    np.testing.assert_allclose(shuffled.audio.data, reference.audio.data, atol=1e-6)
    np.testing.assert_allclose(shuffled.fusion.data, reference.fusion.data, atol=1e-6)
