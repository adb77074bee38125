"""Unit tests for the versioned checkpoint format."""

import numpy as np
import pytest
from conftest import tiny_model

from earlyfuse.checkpoint import (
    CHECKPOINT_MAGIC,
    CheckpointData,
    OptimizerSnapshot,
    check_architecture,
    decode_checkpoint,
    encode_checkpoint,
    import_unimodal_weights,
    inspect_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from earlyfuse.errors import ArchitectureMismatchError, CheckpointFormatError, ConfigurationError


def model_data(model, step=5):
    params = model.state_dict()
    optimizer = OptimizerSnapshot(step=step, m={k: v * 0.5 for k, v in params.items()},
                                  v={k: v * v for k, v in params.items()})
    return CheckpointData(step=step, params=params, optimizer=optimizer,
                          config={"model": {"fusion_mode": "factorized"}}, rng_state={"seed": 0, "next_step": step})


def test_round_trip_is_bit_exact(tmp_path):
    """Test every tensor, the step, config and optimizer state come back exactly."""
    data = model_data(tiny_model())
    path = save_checkpoint(tmp_path / "ck.efck", data)
    loaded = load_checkpoint(path)
    assert loaded.step == 5
    assert loaded.config == data.config
    assert loaded.rng_state == data.rng_state
    assert loaded.params.keys() == data.params.keys()
    for name in data.params:
        assert loaded.params[name].tobytes() == data.params[name].astype(np.float32).tobytes()
    assert loaded.optimizer.step == 5
    for name in data.optimizer.m:
        np.testing.assert_array_equal(loaded.optimizer.m[name], data.optimizer.m[name])
        np.testing.assert_array_equal(loaded.optimizer.v[name], data.optimizer.v[name])


def test_resave_is_byte_identical(tmp_path):
    """Test load then save reproduces the file bytes."""
    first = save_checkpoint(tmp_path / "a.efck", model_data(tiny_model()))
    second = save_checkpoint(tmp_path / "b.efck", load_checkpoint(first))
    assert first.read_bytes() == second.read_bytes()


def test_header_layout():
    """Test the blob starts with the magic and the version byte."""
    blob = encode_checkpoint(CheckpointData(step=0, params={"w": np.zeros(2)}))
    assert blob[:4] == CHECKPOINT_MAGIC
    assert blob[4] == 1


def test_without_optimizer():
    """Test a checkpoint may omit optimizer state."""
    loaded = decode_checkpoint(encode_checkpoint(CheckpointData(step=1, params={"w": np.ones((2, 3))})))
    assert loaded.optimizer is None
    assert loaded.params["w"].shape == (2, 3)


@pytest.mark.parametrize("blob", [b"", b"EFC", b"NOPE\x01", b"EFCK\x02rest", b"EFCK\x01\xff\xff\xff"])
def test_unreadable_blobs(blob):
    """Test bad magic, unsupported versions and corrupt bodies are format errors."""
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(blob)


def test_missing_file(tmp_path):
    """Test loading a missing path is a configuration error naming it."""
    with pytest.raises(ConfigurationError, match="absent"):
        load_checkpoint(tmp_path / "absent.efck")


def test_check_architecture():
    """Test a matching model passes and a different one is refused."""
    data = model_data(tiny_model())
    check_architecture(tiny_model(seed=1), data)
    with pytest.raises(ArchitectureMismatchError):
        check_architecture(tiny_model(fusion_mode="dense"), data)
    with pytest.raises(ArchitectureMismatchError):
        check_architecture(tiny_model(num_fusion_tokens=3), data)


def test_inspect_lists_tensors():
    """Test the inspection table has one row per tensor with shape and norm."""
    frame = inspect_checkpoint(CheckpointData(step=0, params={"b": np.zeros(3), "a": np.full((2, 2), 2.0)}))
    assert list(frame["name"]) == ["a", "b"]
    assert list(frame["shape"]) == ["2x2", "3"]
    assert frame.loc[0, "norm"] == pytest.approx(4.0)
    assert list(frame["numel"]) == [4, 3]


def test_import_unimodal_weights_keeps_fusion_init():
    """Test modality branches are copied while fusion parameters keep their values."""
    donor = tiny_model(seed=1, fusion_mode="none")
    target = tiny_model(seed=2)
    before = target.state_dict()
    copied = import_unimodal_weights(target, CheckpointData(step=0, params=donor.state_dict()))
    after = target.state_dict()
    assert copied > 0
    np.testing.assert_array_equal(after["visual_embed.proj.weight"], donor.state_dict()["visual_embed.proj.weight"])
    np.testing.assert_array_equal(after["encoder.layers.0.audio.attn.q.weight"],
                                  donor.state_dict()["encoder.layers.0.audio.attn.q.weight"])
    np.testing.assert_array_equal(after["encoder.agg_audio_tokens"], before["encoder.agg_audio_tokens"])
    np.testing.assert_array_equal(after["encoder.layers.0.fusion.grid.w_a.weight"],
                                  before["encoder.layers.0.fusion.grid.w_a.weight"])


def test_import_unknown_modality():
    """Test only visual and audio branches exist."""
    with pytest.raises(ConfigurationError):
        import_unimodal_weights(tiny_model(), CheckpointData(step=0, params={}), ["depth"])
