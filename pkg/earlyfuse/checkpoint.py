"""Versioned single-file checkpoints.

Layout: the magic bytes ``EFCK``, one version byte, then a serialized
``earlyfuse.Checkpoint`` protobuf message. Tensors are stored by name with
their shape and a little-endian float32 payload.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd

from . import proto
from .errors import ArchitectureMismatchError, CheckpointFormatError, ConfigurationError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EFCK"
CHECKPOINT_VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class OptimizerSnapshot:
    step: int
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class CheckpointData:
    step: int
    params: Dict[str, np.ndarray]
    optimizer: Optional[OptimizerSnapshot] = None
    config: Dict[str, Any] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION


def _tensor_records(table: Mapping[str, np.ndarray]) -> list:
    records = []
    for name in sorted(table):
        array = np.asarray(table[name])
        records.append(proto.TensorRecord(
            name=name,
            shape=list(array.shape),
            data=np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes(),
        ))
    return records


def _tensor_table(records: Iterable[Any]) -> Dict[str, np.ndarray]:
    table = {}
    for record in records:
        shape = tuple(int(d) for d in record.shape)
        expected = int(np.prod(shape, dtype=np.int64)) * _PAYLOAD_DTYPE.itemsize
        if len(record.data) != expected:
            raise CheckpointFormatError(
                f"Tensor {record.name} payload has {len(record.data)} bytes, shape {shape} needs {expected}"
            )
        if record.name in table:
            raise CheckpointFormatError(f"Duplicate tensor name {record.name}")
        table[record.name] = np.frombuffer(record.data, dtype=_PAYLOAD_DTYPE).reshape(shape).astype(np.float32)
    return table


def encode_checkpoint(data: CheckpointData) -> bytes:
    """Serialize deterministically: equal inputs give equal bytes."""
    message = proto.Checkpoint(
        format_version=data.format_version,
        step=data.step,
        config_json=json.dumps(data.config, sort_keys=True, default=str),
        rng_state_json=json.dumps(data.rng_state, sort_keys=True),
    )
    message.params.extend(_tensor_records(data.params))
    if data.optimizer is not None:
        message.optimizer.step = data.optimizer.step
        message.optimizer.m.extend(_tensor_records(data.optimizer.m))
        message.optimizer.v.extend(_tensor_records(data.optimizer.v))
    return CHECKPOINT_MAGIC + bytes([data.format_version]) + message.SerializeToString(deterministic=True)


def decode_checkpoint(blob: bytes) -> CheckpointData:
    header = len(CHECKPOINT_MAGIC) + 1
    if len(blob) < header or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("Not an earlyfuse checkpoint (bad magic)")
    version = blob[len(CHECKPOINT_MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")

    message = proto.Checkpoint()
    try:
        message.ParseFromString(blob[header:])
        config = json.loads(message.config_json) if message.config_json else {}
        rng_state = json.loads(message.rng_state_json) if message.rng_state_json else {}
    except Exception as e:
        raise CheckpointFormatError(f"Corrupt checkpoint body: {e}") from e
    if message.format_version != version:
        raise CheckpointFormatError(
            f"Header version {version} disagrees with body version {message.format_version}"
        )

    optimizer = None
    if message.HasField("optimizer"):
        optimizer = OptimizerSnapshot(
            step=message.optimizer.step,
            m=_tensor_table(message.optimizer.m),
            v=_tensor_table(message.optimizer.v),
        )
    return CheckpointData(
        step=message.step,
        params=_tensor_table(message.params),
        optimizer=optimizer,
        config=config,
        rng_state=rng_state,
        format_version=version,
    )


def save_checkpoint(path: Union[str, Path], data: CheckpointData) -> Path:
    """Write atomically through a sibling temp file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(data))
    os.replace(tmp, path)
    logger.debug(f"Wrote {len(data.params)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> CheckpointData:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Checkpoint not found: {path}", key="checkpoint")
    return decode_checkpoint(path.read_bytes())


def check_architecture(model: Any, data: CheckpointData) -> None:
    """Raise ``ArchitectureMismatchError`` unless names and shapes agree exactly."""
    own = {name: p.shape for name, p in model.named_parameters()}
    missing = sorted(set(own) - set(data.params))
    unexpected = sorted(set(data.params) - set(own))
    if missing or unexpected:
        raise ArchitectureMismatchError(
            f"Checkpoint does not match model. Missing: {missing[:5]}, unexpected: {unexpected[:5]}"
        )
    for name, shape in own.items():
        if data.params[name].shape != shape:
            raise ArchitectureMismatchError(
                f"Parameter {name} has shape {data.params[name].shape}, model expects {shape}", key=name
            )


def inspect_checkpoint(data: CheckpointData) -> pd.DataFrame:
    """One row per stored tensor: name, shape, element count and L2 norm."""
    rows = [
        {
            "name": name,
            "shape": "x".join(str(d) for d in array.shape) or "scalar",
            "numel": int(array.size),
            "norm": float(np.linalg.norm(array.astype(np.float64))),
        }
        for name, array in sorted(data.params.items())
    ]
    return pd.DataFrame(rows, columns=["name", "shape", "numel", "norm"])


_BRANCH_PREFIXES = {
    "visual": ("visual_embed.", "visual_decoder."),
    "audio": ("audio_embed.", "audio_decoder."),
}


def import_unimodal_weights(model: Any, data: CheckpointData, modalities: Iterable[str] = ("visual", "audio")) -> int:
    """Copy modality-branch weights from ``data`` into ``model``.

    Patch embeddings, decoders and the encoder's per-layer modality blocks are
    copied; fusion and aggregation parameters keep their initialization.
    Returns the number of tensors copied.
    """
    selected = {}
    for modality in modalities:
        if modality not in _BRANCH_PREFIXES:
            raise ConfigurationError(f"Unknown modality {modality!r}", key="modalities")
        prefixes = _BRANCH_PREFIXES[modality]
        encoder_marker = f".{modality}."
        for name, array in data.params.items():
            if name.startswith(prefixes) or (name.startswith("encoder.layers.") and encoder_marker in name):
                selected[name] = array

    own = dict(model.named_parameters())
    for name, array in selected.items():
        if name not in own:
            raise ArchitectureMismatchError(f"Model has no parameter {name}", key=name)
        if own[name].shape != array.shape:
            raise ArchitectureMismatchError(
                f"Parameter {name} has shape {array.shape}, model expects {own[name].shape}", key=name
            )
    model.load_state_dict(selected, strict=False)
    logger.info(f"Imported {len(selected)} unimodal tensors for {', '.join(modalities)}")
    return len(selected)
