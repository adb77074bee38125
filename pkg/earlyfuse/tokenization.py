"""Patch tokenization for images and spectrograms, plus synthetic paired data.

Patches are flattened in (row, column, channel) order within the patch, so
``patchify`` followed by ``unpatchify`` is the identity.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import CheckpointFormatError, ConfigurationError, DimensionError
from .nn import Linear, Module
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

MODALITIES = ("visual", "audio", "fusion")
RAW_TENSOR_MAGIC = b"RAWT"

Seed = Union[int, Sequence[int]]


@dataclass
class InputConfig:
    """Image and spectrogram geometry."""

    image_channels: int = 3
    image_size: int = 64
    image_patch: int = 8
    spec_bands: int = 32
    spec_frames: int = 48
    spec_patch: int = 8

    def validate(self) -> None:
        for key in ("image_channels", "image_size", "image_patch", "spec_bands", "spec_frames", "spec_patch"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"input.{key} must be positive, got {getattr(self, key)}", key=f"input.{key}")
        if self.image_size % self.image_patch:
            raise ConfigurationError(
                f"input.image_size {self.image_size} is not divisible by input.image_patch {self.image_patch}",
                key="input.image_size",
            )
        if self.spec_bands % self.spec_patch:
            raise ConfigurationError(
                f"input.spec_bands {self.spec_bands} is not divisible by input.spec_patch {self.spec_patch}",
                key="input.spec_bands",
            )

    @property
    def visual_grid(self) -> Tuple[int, int]:
        side = self.image_size // self.image_patch
        return side, side

    @property
    def audio_grid(self) -> Tuple[int, int]:
        return self.spec_bands // self.spec_patch, -(-self.spec_frames // self.spec_patch)

    @property
    def n_visual(self) -> int:
        rows, cols = self.visual_grid
        return rows * cols

    @property
    def n_audio(self) -> int:
        rows, cols = self.audio_grid
        return rows * cols

    @property
    def visual_patch_dim(self) -> int:
        return self.image_patch ** 2 * self.image_channels

    @property
    def audio_patch_dim(self) -> int:
        return self.spec_patch ** 2


@dataclass
class TokenBatch:
    """Token sequences of one modality.

    ``tokens`` hold the projected patches without positions. ``pos_embed``
    covers the full grid; ``indices`` ([B, N]) says which grid cell each
    token came from, and is ``None`` while the batch is complete.
    """

    tokens: Tensor
    modality: str
    grid: Tuple[int, int]
    patch_size: int
    patches: Optional[np.ndarray] = None
    pos_embed: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"Unknown modality {self.modality!r}")
        if self.tokens.ndim != 3:
            raise DimensionError("token_batch", self.tokens.shape, detail="expected [B, N, D]")
        if self.modality != "fusion" and self.indices is None:
            rows, cols = self.grid
            if self.n_tokens != rows * cols:
                raise DimensionError("token_batch", self.tokens.shape, self.grid, detail="N != rows * cols")
        if self.pos_embed is not None and self.pos_embed.shape != (self.grid[0] * self.grid[1], self.dim):
            raise DimensionError("token_batch", self.pos_embed.shape, self.tokens.shape, detail="positional embedding")

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def full_count(self) -> int:
        return self.grid[0] * self.grid[1]

    def positions(self) -> np.ndarray:
        """Grid index of every token, [B, N]."""
        if self.indices is not None:
            return self.indices
        return np.broadcast_to(np.arange(self.n_tokens), (self.batch_size, self.n_tokens))

    def embedded(self) -> Tensor:
        """Tokens with their positional embeddings added."""
        if self.pos_embed is None:
            return self.tokens
        if self.indices is None:
            return self.tokens + self.pos_embed
        return self.tokens + self.pos_embed[self.indices]


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)*(W/p), p*p*C]."""
    batch, channels, height, width = x.shape
    if height % patch or width % patch:
        raise ConfigurationError(f"Input of size {height}x{width} is not divisible by patch size {patch}")
    h, w = height // patch, width // patch
    x = x.reshape(batch, channels, h, patch, w, patch)
    x = np.einsum("nchpwq->nhwpqc", x)
    return np.ascontiguousarray(x.reshape(batch, h * w, patch * patch * channels))


def unpatchify(patches: np.ndarray, grid: Tuple[int, int], patch: int, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    h, w = grid
    batch, n_tokens, patch_dim = patches.shape
    if n_tokens != h * w or patch_dim != patch * patch * channels:
        raise DimensionError("unpatchify", patches.shape, (h * w, patch * patch * channels))
    x = patches.reshape(batch, h, w, patch, patch, channels)
    x = np.einsum("nhwpqc->nchpwq", x)
    return np.ascontiguousarray(x.reshape(batch, channels, h * patch, w * patch))


def pad_time(spec: np.ndarray, patch: int) -> np.ndarray:
    """Zero-pad the last (time) axis up to the next multiple of ``patch``."""
    frames = spec.shape[-1]
    padded = -(-frames // patch) * patch
    if padded == frames:
        return spec
    widths = [(0, 0)] * (spec.ndim - 1) + [(0, padded - frames)]
    return np.pad(spec, widths)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum("m,d->md", positions.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(grid: Tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2D sin-cos embedding, [rows*cols, dim], rows major.

    Half of the channels encode the row, half the column.
    """
    if dim % 4:
        raise ConfigurationError(f"Positional embedding dimension {dim} is not divisible by 4")
    rows, cols = grid
    row_pos, col_pos = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    embed = np.concatenate([_sincos_1d(dim // 2, row_pos), _sincos_1d(dim // 2, col_pos)], axis=1)
    return embed.astype(get_default_dtype())


class PatchEmbed(Module):
    """Learned linear projection of flattened patches plus a fixed sin-cos table."""

    def __init__(self, patch_dim: int, embed_dim: int, grid: Tuple[int, int], rng: np.random.Generator):
        self.patch_dim = patch_dim
        self.grid = grid
        self.proj = Linear(patch_dim, embed_dim, rng)
        self.pos_embed = sincos_pos_embed(grid, embed_dim)

    def forward(self, patches: np.ndarray) -> Tensor:
        return self.proj(Tensor(patches))


def _tokenize(patches: np.ndarray, modality: str, grid: Tuple[int, int], patch: int,
              embed: Optional[PatchEmbed]) -> TokenBatch:
    if embed is None:
        return TokenBatch(Tensor(patches), modality, grid, patch, patches=patches)
    if embed.grid != grid or embed.patch_dim != patches.shape[-1]:
        raise DimensionError("patch_embed", patches.shape, (grid[0] * grid[1], embed.patch_dim))
    return TokenBatch(embed(patches), modality, grid, patch, patches=patches, pos_embed=embed.pos_embed)


def patchify_image(image: np.ndarray, patch: int, embed: Optional[PatchEmbed] = None) -> TokenBatch:
    """Tokenize [B, C, H, W] images; without ``embed`` the projection is the identity."""
    image = np.asarray(image)
    _, _, height, width = image.shape
    if height % patch or width % patch:
        raise ConfigurationError(f"Image of size {height}x{width} is not divisible by patch size {patch}")
    patches = patchify(image, patch)
    return _tokenize(patches, "visual", (height // patch, width // patch), patch, embed)


def patchify_spectrogram(spec: np.ndarray, patch: int, embed: Optional[PatchEmbed] = None) -> TokenBatch:
    """Tokenize [B, 1, Fb, T] spectrograms, zero-padding T to a patch multiple."""
    spec = np.asarray(spec)
    bands = spec.shape[2]
    if bands % patch:
        raise ConfigurationError(f"Spectrogram with {bands} bands is not divisible by patch size {patch}")
    padded = pad_time(spec, patch)
    patches = patchify(padded, patch)
    return _tokenize(patches, "audio", (bands // patch, padded.shape[-1] // patch), patch, embed)


# synthetic paired data


@dataclass
class SyntheticAVSample:
    image: np.ndarray
    spectrogram: np.ndarray
    class_id: int
    cross_label: int
    visual_factor: int = 0
    audio_factor: int = 0


@dataclass
class AVArrays:
    """A stacked batch of paired samples."""

    images: np.ndarray
    spectrograms: np.ndarray
    class_id: np.ndarray
    cross_label: np.ndarray
    visual_factor: np.ndarray = field(default=None)
    audio_factor: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return self.images.shape[0]

    def labels(self, task: str) -> np.ndarray:
        if task not in ("class_id", "cross_label"):
            raise ConfigurationError(f"Unknown probe task {task!r}")
        return getattr(self, task)

    def samples(self) -> List[SyntheticAVSample]:
        return [
            SyntheticAVSample(
                image=self.images[i],
                spectrogram=self.spectrograms[i],
                class_id=int(self.class_id[i]),
                cross_label=int(self.cross_label[i]),
                visual_factor=int(self.visual_factor[i]) if self.visual_factor is not None else 0,
                audio_factor=int(self.audio_factor[i]) if self.audio_factor is not None else 0,
            )
            for i in range(len(self))
        ]


def synthetic_arrays(n: int, classes: int, seed: Seed, geometry: Optional[InputConfig] = None,
                     noise: float = 0.3) -> AVArrays:
    """Generate ``n`` paired samples as stacked arrays.

    The class sets a colour tint and a low-frequency blob in the image, and
    a frequency band in the spectrogram. Independently, a visual factor sets
    the orientation of an image grating and an audio factor sets the
    modulation rate of the spectrogram. ``cross_label`` is
    ``(visual_factor + audio_factor) % classes``, so neither modality alone
    says anything about it.
    """
    if classes < 2:
        raise ConfigurationError(f"Synthetic data needs at least 2 classes, got {classes}", key="data.classes")
    geometry = geometry or InputConfig()
    rng = np.random.default_rng(seed)
    class_id = rng.integers(classes, size=n)
    visual_factor = rng.integers(classes, size=n)
    audio_factor = rng.integers(classes, size=n)

    c, size = geometry.image_channels, geometry.image_size
    coords = np.linspace(0.0, 1.0, size, endpoint=False)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    phase = 2 * np.pi * np.arange(classes) / classes
    tint = np.cos(phase[:, None] + 2 * np.pi * np.arange(c)[None, :] / max(c, 1))
    centres = 0.5 + 0.25 * np.stack([np.cos(phase), np.sin(phase)], axis=1)
    blobs = np.exp(-((yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2) / 0.05)
    theta = np.pi * np.arange(classes) / classes
    gratings = np.sin(2 * np.pi * 4 * (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]))

    images = (
        0.5 * tint[class_id][:, :, None, None]
        + blobs[class_id][:, None]
        + 0.5 * gratings[visual_factor][:, None]
        + noise * rng.standard_normal((n, c, size, size))
    )

    bands, frames = geometry.spec_bands, geometry.spec_frames
    f = np.arange(bands)[:, None]
    t = np.arange(frames)[None, :]
    band_width = bands / (2.0 * classes)
    band_centre = (np.arange(classes) + 0.5) * bands / classes
    band = np.exp(-((f[None] - band_centre[:, None, None]) ** 2) / (2 * band_width ** 2))
    rates = np.arange(1, classes + 1)
    modulation = np.sin(2 * np.pi * rates[:, None, None] * t[None] / frames) * np.ones((1, bands, 1))
    spectrograms = (
        band[class_id]
        + 0.5 * modulation[audio_factor]
        + noise * rng.standard_normal((n, bands, frames))
    )[:, None]

    dtype = get_default_dtype()
    return AVArrays(
        images=images.astype(dtype),
        spectrograms=spectrograms.astype(dtype),
        class_id=class_id,
        cross_label=(visual_factor + audio_factor) % classes,
        visual_factor=visual_factor,
        audio_factor=audio_factor,
    )


def generate_synthetic_batch(n: int, classes: int, seed: Seed,
                             geometry: Optional[InputConfig] = None) -> List[SyntheticAVSample]:
    return synthetic_arrays(n, classes, seed, geometry).samples()


class SyntheticAVSource:
    """Stateless batch source: batch ``step`` depends only on the seed and step."""

    def __init__(self, geometry: InputConfig, classes: int, seed: int, noise: float = 0.3):
        self.geometry = geometry
        self.classes = classes
        self.seed = seed
        self.noise = noise

    def batch(self, step: int, batch_size: int) -> AVArrays:
        return synthetic_arrays(batch_size, self.classes, [self.seed, 0, step], self.geometry, self.noise)

    def held_out(self, n: int) -> AVArrays:
        return synthetic_arrays(n, self.classes, [self.seed, 3], self.geometry, self.noise)


class ArrayAVSource:
    """Cycles through preloaded arrays in a fixed order."""

    def __init__(self, arrays: AVArrays):
        if len(arrays) == 0:
            raise ConfigurationError("Dataset is empty", key="data.path")
        self.arrays = arrays

    def batch(self, step: int, batch_size: int) -> AVArrays:
        idx = (step * batch_size + np.arange(batch_size)) % len(self.arrays)
        a = self.arrays
        return AVArrays(
            images=a.images[idx],
            spectrograms=a.spectrograms[idx],
            class_id=a.class_id[idx],
            cross_label=a.cross_label[idx],
        )

    def held_out(self, n: int) -> AVArrays:
        return self.batch(0, min(n, len(self.arrays)))


# raw-float tensor files: b"RAWT", uint32 rank, uint32 dims, float32 data; all little-endian


def write_raw_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f4")
    header = np.array([array.ndim, *array.shape], dtype="<u4").tobytes()
    Path(path).write_bytes(RAW_TENSOR_MAGIC + header + array.tobytes())


def read_raw_tensor(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise CheckpointFormatError(f"{path}: {len(blob)} bytes is shorter than the 8-byte header")
    if blob[:4] != RAW_TENSOR_MAGIC:
        raise CheckpointFormatError(f"{path}: not a raw tensor file (bad magic)")
    rank = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    if len(blob) < 8 + 4 * rank:
        raise CheckpointFormatError(f"{path}: header declares rank {rank} but the file ends before the dims")
    shape = tuple(int(d) for d in np.frombuffer(blob, dtype="<u4", count=rank, offset=8))
    offset = 8 + 4 * rank
    expected = int(np.prod(shape)) * 4
    if len(blob) - offset != expected:
        raise CheckpointFormatError(f"{path}: payload is {len(blob) - offset} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape).astype(get_default_dtype())


def load_raw_directory(path: Union[str, Path]) -> AVArrays:
    """Load ``image/*.rawt`` and ``audio/*.rawt`` pairs matched by file stem.

    An optional ``labels.csv`` with columns ``stem, class_id[, cross_label]``
    supplies labels; missing labels are zero.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigurationError(f"Data directory {root} does not exist", key="data.path")
    image_files = {p.stem: p for p in sorted((root / "image").glob("*.rawt"))}
    audio_files = {p.stem: p for p in sorted((root / "audio").glob("*.rawt"))}
    stems = sorted(set(image_files) & set(audio_files))
    if not stems:
        raise ConfigurationError(f"No paired image/audio tensors found under {root}", key="data.path")
    unpaired = sorted(set(image_files) ^ set(audio_files))
    if unpaired:
        logger.warning(f"Skipping {len(unpaired)} unpaired tensors, e.g. {unpaired[:3]}")

    class_id = np.zeros(len(stems), dtype=np.int64)
    cross_label = np.zeros(len(stems), dtype=np.int64)
    labels_path = root / "labels.csv"
    if labels_path.exists():
        labels = pd.read_csv(labels_path, dtype={"stem": str}).set_index("stem")
        class_id = labels.reindex(stems)["class_id"].fillna(0).to_numpy(dtype=np.int64)
        if "cross_label" in labels.columns:
            cross_label = labels.reindex(stems)["cross_label"].fillna(0).to_numpy(dtype=np.int64)

    images = np.stack([read_raw_tensor(image_files[s]) for s in stems])
    spectrograms = np.stack([read_raw_tensor(audio_files[s]) for s in stems])
    if spectrograms.ndim == 3:
        spectrograms = spectrograms[:, None]
    logger.info(f"Loaded {len(stems)} paired samples from {root}")
    return AVArrays(images=images, spectrograms=spectrograms, class_id=class_id, cross_label=cross_label)
