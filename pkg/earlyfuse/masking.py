"""Random visible/masked partitions of token sequences."""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, gather_rows
from .tokenization import TokenBatch


def masked_count(n_tokens: int, ratio: float) -> int:
    """``round(ratio * n_tokens)``, halves rounded up."""
    return int(math.floor(ratio * n_tokens + 0.5))


def check_ratio(ratio: float, key: str = "mask_ratio") -> None:
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"{key} must lie in [0, 1), got {ratio}", key=key)


@dataclass(frozen=True)
class MaskPlan:
    n_tokens: int
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    def __post_init__(self):
        if len(self.visible) + len(self.masked) != self.n_tokens:
            raise DimensionError("mask_plan", self.visible.shape, self.masked.shape, detail=f"n_tokens={self.n_tokens}")
        union = np.union1d(self.visible, self.masked)
        if len(union) != self.n_tokens or (self.n_tokens and (union[0] != 0 or union[-1] != self.n_tokens - 1)):
            raise ConfigurationError("Visible and masked sets must partition the token range")


def sample_mask(n_tokens: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform random partition; ``round(ratio * n)`` tokens are masked."""
    check_ratio(ratio)
    n_masked = masked_count(n_tokens, ratio)
    order = rng.permutation(n_tokens)
    return MaskPlan(
        n_tokens=n_tokens,
        visible=np.sort(order[n_masked:]),
        masked=np.sort(order[:n_masked]),
        ratio=ratio,
    )


def sample_masks(batch_size: int, n_tokens: int, ratio: float, rng: np.random.Generator) -> List[MaskPlan]:
    """One independent plan per sample."""
    return [sample_mask(n_tokens, ratio, rng) for _ in range(batch_size)]


def stack_plans(plans: Sequence[MaskPlan]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample plans as ``(visible [B, k], masked [B, m])`` index arrays."""
    if not plans:
        raise ConfigurationError("No mask plans to stack")
    counts = {(p.n_tokens, len(p.masked)) for p in plans}
    if len(counts) != 1:
        raise DimensionError("stack_plans", *sorted(counts), detail="plans differ in size")
    visible = np.stack([p.visible for p in plans]).astype(np.intp)
    masked = np.stack([p.masked for p in plans]).astype(np.intp)
    return visible, masked


def apply_mask(batch: TokenBatch, plan: Union[MaskPlan, Sequence[MaskPlan]]) -> Tuple[TokenBatch, Tensor]:
    """Keep the visible tokens and return raw patch targets at masked positions.

    ``plan`` is either one plan shared by every sample or one plan per
    sample. Targets are ``[B, |M|, patch_dim]`` in ``M`` order; visible tokens
    carry their original grid indices so positional embeddings follow them.
    """
    plans = [plan] * batch.batch_size if isinstance(plan, MaskPlan) else list(plan)
    if len(plans) != batch.batch_size:
        raise DimensionError("apply_mask", (len(plans),), batch.tokens.shape, detail="one plan per sample")
    if any(p.n_tokens != batch.n_tokens for p in plans):
        raise DimensionError("apply_mask", (plans[0].n_tokens,), batch.tokens.shape, detail="plan token count")

    visible, masked = stack_plans(plans)
    positions = np.take_along_axis(np.asarray(batch.positions()), visible, axis=1)
    raw = batch.patches if batch.patches is not None else batch.tokens.data
    targets = Tensor(np.take_along_axis(raw, masked[:, :, None], axis=1), dtype=raw.dtype)
    kept_patches = None if batch.patches is None else np.take_along_axis(batch.patches, visible[:, :, None], axis=1)

    visible_batch = TokenBatch(
        tokens=gather_rows(batch.tokens, visible),
        modality=batch.modality,
        grid=batch.grid,
        patch_size=batch.patch_size,
        patches=kept_patches,
        pos_embed=batch.pos_embed,
        indices=positions,
    )
    return visible_batch, targets
