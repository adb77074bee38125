"""Unit tests for masked reconstruction pretraining.

Covers the decoder, the joint loss, the optimizer and schedule, cross-modal
gradient flow, and the training loop with checkpointing and resume."""

import json

import numpy as np
import pytest
from conftest import TINY_INPUT, tiny_decoder, tiny_fusion, tiny_model, tiny_train

from earlyfuse.checkpoint import load_checkpoint
from earlyfuse.errors import ConfigurationError, DimensionError, NonFiniteLossError
from earlyfuse.masking import sample_masks
from earlyfuse.pretraining import (
    AdamState,
    AdamW,
    AudioVisualMAE,
    BatchPrefetcher,
    Decoder,
    Pretrainer,
    TrainConfig,
    adam_step,
    av_mae_loss,
    decay_exempt,
    lr_schedule,
    normalize_patches,
    pretrain,
)
from earlyfuse.tensor import Tensor
from earlyfuse.tokenization import SyntheticAVSource, synthetic_arrays


def test_peak_lr_scales_with_batch():
    """Test the peak rate is base_lr * batch_size / 256."""
    assert TrainConfig(base_lr=0.016, batch_size=16).peak_lr == pytest.approx(0.001)


def test_lr_schedule_shape():
    """Test warmup is linear, the peak lands at warmup end and decay reaches zero."""
    cfg = TrainConfig(base_lr=0.016, batch_size=16, warmup_epochs=1, total_epochs=10, steps_per_epoch=20)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(10, cfg) == pytest.approx(0.0005)
    assert lr_schedule(20, cfg) == pytest.approx(0.001)
    assert lr_schedule(110, cfg) == pytest.approx(0.0005)
    assert lr_schedule(200, cfg) == 0.0
    rates = [lr_schedule(s, cfg) for s in range(20, 200)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_lr_schedule_is_continuous_at_warmup_end():
    """Test the warmup ramp meets the cosine branch at the peak, then decays monotonically to zero."""
    cfg = TrainConfig(base_lr=1.5e-4, batch_size=256, warmup_epochs=2, total_epochs=10, steps_per_epoch=20)
    warmup, total = cfg.warmup_steps, cfg.total_steps
    assert lr_schedule(warmup, cfg) == pytest.approx(1.5e-4)
    ramp_step = cfg.peak_lr / warmup
    assert cfg.peak_lr - lr_schedule(warmup - 1, cfg) == pytest.approx(ramp_step)
    assert 0 < cfg.peak_lr - lr_schedule(warmup + 1, cfg) < ramp_step
    decay = [lr_schedule(step, cfg) for step in range(warmup, total + 1)]
    assert all(later <= earlier for earlier, later in zip(decay, decay[1:]))
    ramp = [lr_schedule(step, cfg) for step in range(warmup + 1)]
    assert all(later > earlier for earlier, later in zip(ramp, ramp[1:]))
    assert lr_schedule(total - 1, cfg) < 1e-3 * cfg.peak_lr
    assert lr_schedule(total, cfg) == 0.0
    assert lr_schedule(total + 5, cfg) == 0.0


def test_lr_schedule_without_warmup():
    """Test zero warmup starts at the peak."""
    cfg = TrainConfig(warmup_epochs=0, total_epochs=2, steps_per_epoch=5)
    assert lr_schedule(0, cfg) == pytest.approx(cfg.peak_lr)


def test_train_config_validation():
    """Test inconsistent schedules and mask ratios are refused."""
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_epochs=11, total_epochs=10).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(mask_ratio_a=1.0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0).validate()


def test_adam_step_first_update():
    """Test the first bias-corrected step moves each entry by lr against its gradient sign."""
    params = {"w": np.array([[1.0, -1.0]], dtype=np.float32)}
    grads = {"w": np.array([[0.5, -2.0]], dtype=np.float32)}
    state = adam_step(params, grads, AdamState(), lr=0.1, weight_decay=0.0)
    assert state.step == 1
    np.testing.assert_allclose(params["w"], [[0.9, -0.9]], atol=1e-6)


def test_adam_step_matches_scalar_reference_on_quadratic():
    """Test 100 steps on (x - 3)^2 follow a scalar AdamW written out by hand to 1e-10."""
    lr, wd, beta1, beta2, eps = 0.1, 0.01, 0.9, 0.95, 1e-8
    params = {"x": np.array([0.0])}
    state = AdamState()
    x, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        adam_step(params, {"x": 2.0 * (params["x"] - 3.0)}, state, lr=lr, weight_decay=wd,
                  betas=(beta1, beta2), eps=eps)
        g = 2.0 * (x - 3.0)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat, v_hat = m / (1.0 - beta1 ** t), v / (1.0 - beta2 ** t)
        x -= lr * (m_hat / (v_hat ** 0.5 + eps) + wd * x)
        assert abs(params["x"][0] - x) <= 1e-10
    assert state.step == 100


def test_adam_step_decoupled_decay():
    """Test weight decay shrinks parameters even with a zero gradient, but not exempt ones."""
    params = {"w": np.ones((2, 2), dtype=np.float32), "b": np.ones(2, dtype=np.float32)}
    grads = {"w": np.zeros((2, 2), dtype=np.float32), "b": np.zeros(2, dtype=np.float32)}
    adam_step(params, grads, AdamState(), lr=0.1, weight_decay=0.5, exempt=["b"])
    np.testing.assert_allclose(params["w"], 0.95, atol=1e-6)
    np.testing.assert_allclose(params["b"], 1.0)


def test_adam_step_skips_missing_gradients():
    """Test parameters without a gradient are untouched."""
    params = {"w": np.ones(3, dtype=np.float32)}
    adam_step(params, {"w": None}, AdamState(), lr=1.0, weight_decay=0.1)
    np.testing.assert_array_equal(params["w"], 1.0)


def test_adam_step_shape_mismatch():
    """Test a gradient of the wrong shape is a dimension error."""
    with pytest.raises(DimensionError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(4)}, AdamState(), lr=0.1, weight_decay=0.0)


def test_decay_exempt_names():
    """Test biases, gains and learned tokens skip weight decay."""
    assert decay_exempt("encoder.layers.0.visual.norm1.gain", np.ones(4))
    assert decay_exempt("encoder.fusion_tokens", np.ones((2, 4)))
    assert decay_exempt("visual_decoder.mask_token", np.ones(4))
    assert not decay_exempt("encoder.layers.0.visual.attn.q.weight", np.ones((4, 4)))


def test_adamw_exempt_set_covers_tokens():
    """Test the optimizer exempts the learned fusion tokens."""
    optimizer = AdamW(tiny_model())
    assert "encoder.fusion_tokens" in optimizer.exempt
    assert "encoder.agg_audio_tokens" in optimizer.exempt


def test_normalize_patches():
    """Test per-patch normalization gives zero mean and unit variance."""
    targets = np.random.default_rng(0).standard_normal((2, 3, 16)) * 5 + 2
    out = normalize_patches(targets)
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)


@pytest.mark.parametrize("policy", ["fusion_plus_unimodal", "fusion_only"])
def test_decoder_predicts_masked_patches(policy):
    """Test the decoder returns one patch per masked token under both input policies."""
    rng = np.random.default_rng(0)
    decoder = Decoder(tiny_decoder(input_policy=policy), 16, 12, (2, 3), rng)
    plans = sample_masks(2, 6, 0.5, rng)
    visible_idx = np.stack([p.visible for p in plans])
    masked_idx = np.stack([p.masked for p in plans])
    fusion = Tensor(rng.standard_normal((2, 4, 16)))
    visible = Tensor(rng.standard_normal((2, 3, 16)))
    assert decoder(fusion, visible, visible_idx, masked_idx).shape == (2, 3, 12)


def test_decoder_rejects_wrong_token_count():
    """Test visible plus masked must cover the decoder grid."""
    rng = np.random.default_rng(0)
    decoder = Decoder(tiny_decoder(), 16, 12, (2, 3), rng)
    with pytest.raises(DimensionError):
        decoder(Tensor(np.zeros((1, 2, 16))), Tensor(np.zeros((1, 2, 16))),
                np.array([[0, 1]]), np.array([[2, 3]]))


def test_decoder_policy_validation():
    """Test unknown decoder input policies are refused."""
    with pytest.raises(ConfigurationError):
        tiny_decoder(input_policy="everything").validate()


def test_av_mae_loss_is_sum_of_parts(source):
    """Test the total is loss_v + loss_a and both are positive."""
    model = tiny_model()
    trainer = Pretrainer(model, source, tiny_train())
    total, loss_v, loss_a = av_mae_loss(source.batch(0, 2), model, trainer.plans_for(0))
    assert total.item() == pytest.approx(loss_v.item() + loss_a.item(), rel=1e-6)
    assert loss_v.item() > 0 and loss_a.item() > 0


def test_head_only_decoder_is_constant_prediction(source):
    """Test an empty decoder stack predicts the same patch at every masked position."""
    model = tiny_model()
    model.visual_decoder.head_only = True
    plans = Pretrainer(model, source, tiny_train()).plans_for(0)
    batch = source.batch(0, 2)
    pred = model(batch.images, batch.spectrograms, *plans).pred_v.data
    np.testing.assert_allclose(pred, np.broadcast_to(pred[0, 0], pred.shape), atol=1e-6)


def _audio_branch_grads(model):
    named = dict(model.named_parameters())
    names = [n for n in named if n.startswith("audio_embed.") or n.startswith("encoder.layers.0.audio.")]
    return [named[n].grad for n in names]


def test_visual_loss_reaches_audio_branch_with_fusion(source):
    """Test d loss_v / d audio weights is nonzero when the layers fuse."""
    model = tiny_model()
    plans = Pretrainer(model, source, tiny_train()).plans_for(0)
    _, loss_v, _ = av_mae_loss(source.batch(0, 2), model, plans)
    loss_v.backward()
    grads = _audio_branch_grads(model)
    assert grads
    assert any(g is not None and np.any(g != 0) for g in grads)


def test_visual_loss_never_reaches_audio_branch_without_fusion(source):
    """Test d loss_v / d audio weights is exactly zero when nothing fuses."""
    model = tiny_model(fusion_mode="none")
    plans = Pretrainer(model, source, tiny_train()).plans_for(0)
    _, loss_v, _ = av_mae_loss(source.batch(0, 2), model, plans)
    loss_v.backward()
    grads = _audio_branch_grads(model)
    assert grads
    assert all(g is None or not np.any(g) for g in grads)


def test_plans_depend_on_seed_and_step(source):
    """Test mask plans are reproducible per step and fresh across steps."""
    trainer = Pretrainer(tiny_model(), source, tiny_train(mask_ratio_v=0.5))
    first, _ = trainer.plans_for(3)
    again, _ = trainer.plans_for(3)
    np.testing.assert_array_equal(first[0].masked, again[0].masked)
    assert len(first) == 2
    assert len(first[0].masked) == 2


def test_pretrain_writes_metrics_and_checkpoint(tmp_path, source):
    """Test a short run logs one loss record per step and saves a final checkpoint."""
    result = pretrain(source, tiny_fusion(), tiny_train(), tiny_decoder(), TINY_INPUT, output_dir=tmp_path, steps=3)
    assert result.final_step == 3
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records if r["kind"] == "loss"] == [0, 1, 2]
    assert all(np.isfinite(r["loss_total"]) for r in records)
    assert result.checkpoints == [tmp_path / "checkpoints" / "checkpoint-000003.efck"]
    data = load_checkpoint(result.checkpoints[0])
    assert data.step == 3
    assert data.optimizer.step == 3
    assert data.config["model"]["fusion_mode"] == "factorized"


def test_periodic_checkpoints(tmp_path, source):
    """Test checkpoint_every saves along the way and once at the end."""
    result = pretrain(source, tiny_fusion(), tiny_train(checkpoint_every=2), tiny_decoder(), TINY_INPUT,
                      output_dir=tmp_path)
    assert [p.name for p in result.checkpoints] == ["checkpoint-000002.efck", "checkpoint-000004.efck",
                                                    "checkpoint-000006.efck"]


def test_prefetch_matches_inline_batches(source):
    """Test the prefetching loop trains on the same batches as the inline one."""
    inline = pretrain(source, tiny_fusion(), tiny_train(prefetch=0), tiny_decoder(), TINY_INPUT, steps=2)
    prefetched = pretrain(source, tiny_fusion(), tiny_train(prefetch=2), tiny_decoder(), TINY_INPUT, steps=2)
    assert [r["loss_total"] for r in inline.history] == [r["loss_total"] for r in prefetched.history]


def test_resume_reproduces_uninterrupted_losses(tmp_path, source):
    """Test stopping, reloading and continuing matches one uninterrupted run."""
    straight = pretrain(source, tiny_fusion(), tiny_train(), tiny_decoder(), TINY_INPUT, steps=4)

    first = pretrain(source, tiny_fusion(), tiny_train(), tiny_decoder(), TINY_INPUT, output_dir=tmp_path, steps=2)
    data = load_checkpoint(first.checkpoints[-1])
    model = AudioVisualMAE.from_seed(tiny_fusion(), tiny_decoder(), TINY_INPUT, seed=99)
    trainer = Pretrainer(model, source, tiny_train(), output_dir=tmp_path)
    trainer.resume(data)
    second = trainer.run(2)

    expected = [r["loss_total"] for r in straight.history[2:]]
    resumed = [r["loss_total"] for r in second.history]
    np.testing.assert_allclose(resumed, expected, rtol=1e-6)
    assert second.final_step == 4


def test_run_stops_at_total_steps(source):
    """Test asking for more steps than remain stops at the schedule end."""
    result = pretrain(source, tiny_fusion(), tiny_train(), tiny_decoder(), TINY_INPUT, steps=100)
    assert result.final_step == tiny_train().total_steps


def test_probe_records_retrieval(source):
    """Test probe_every emits retrieval records per family and task."""
    result = pretrain(source, tiny_fusion(), tiny_train(probe_every=2), tiny_decoder(), TINY_INPUT, steps=2)
    probes = [r for r in result.history if r["kind"] == "retrieval"]
    assert {r["step"] for r in probes} == {0, 2}
    assert {r["family"] for r in probes} == {"visual", "audio", "fusion", "concat"}
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in probes)


def test_non_finite_loss_stops_training(source):
    """Test a NaN loss raises with the step number."""
    model = tiny_model()
    model.visual_embed.proj.weight.data[:] = np.nan
    trainer = Pretrainer(model, source, tiny_train())
    with pytest.raises(NonFiniteLossError) as exc_info:
        trainer.run()
    assert exc_info.value.step == 0


def test_unmasked_modality_contributes_zero_loss(source):
    """Test a modality with mask ratio 0 adds exactly 0 to the loss while the other still trains."""
    trainer = Pretrainer(tiny_model(), source, tiny_train(mask_ratio_v=0.0))
    result = trainer.run(2)
    for record in result.history:
        assert record["loss_v"] == 0.0
        assert record["loss_total"] == record["loss_a"] > 0.0
    assert trainer.optimizer.state.step == 2


def test_nothing_masked_counts_steps_without_updates(source):
    """Test with both mask ratios 0 steps are logged with zero loss and parameters stay put."""
    model = tiny_model()
    before = {name: value.copy() for name, value in model.state_dict().items()}
    trainer = Pretrainer(model, source, tiny_train(mask_ratio_v=0.0, mask_ratio_a=0.0))
    result = trainer.run(2)
    assert result.final_step == 2
    assert [(r["step"], r["loss_v"], r["loss_a"], r["loss_total"]) for r in result.history] == [
        (0, 0.0, 0.0, 0.0), (1, 0.0, 0.0, 0.0),
    ]
    assert trainer.optimizer.state.step == 0
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


class FailingSource:
    def batch(self, step, batch_size):
        if step == 1:
            raise OSError("disk gone")
        return synthetic_arrays(batch_size, 3, [0, 0, step])


def test_prefetcher_propagates_source_errors():
    """Test an error in the producer thread reaches the consumer."""
    seen = []
    with pytest.raises(OSError, match="disk gone"):
        for step, _ in BatchPrefetcher(FailingSource(), range(3), 2):
            seen.append(step)
    assert seen == [0]


def test_prefetcher_yields_in_order():
    """Test batches arrive in step order."""
    source = SyntheticAVSource(TINY_INPUT, 3, seed=1)
    steps = [step for step, _ in BatchPrefetcher(source, range(5), 2, maxsize=1)]
    assert steps == [0, 1, 2, 3, 4]

