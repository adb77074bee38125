"""Three-branch early-fusion encoder.

Each layer holds a visual and an audio transformer block plus, on fusion
layers, a fusion branch that updates ``F`` learnable fusion tokens. The fusion
branch is one of

* ``token``: fusion tokens attend over ``[X_mm; X_v; X_a]``;
* ``dense``: fusion tokens attend over every audio-visual pair
  ``W_a X_a[i] + W_v X_v[j]``;
* ``factorized``: as ``dense``, but the pairs are formed from small sets of
  aggregation tokens that first summarize each modality.

Within a fusion layer the aggregation tokens are updated first, then the
fusion tokens, then the modality blocks, which attend to the fusion tokens of
the previous layer.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nn import MLP, Attention, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor, concat

logger = logging.getLogger(__name__)

FUSION_MODES = ("none", "token", "dense", "factorized")
FUSION_PRESETS = ("early", "mid", "late", "none")


def fusion_layers_last(depth: int, k: int) -> Tuple[int, ...]:
    """Fusion on the last ``k`` of ``depth`` layers (1-based)."""
    if not 0 <= k <= depth:
        raise ConfigurationError(f"Cannot fuse the last {k} of {depth} layers", key="model.fusion_layers")
    return tuple(range(depth - k + 1, depth + 1))


def fusion_layers_for(depth: int, preset: str) -> Tuple[int, ...]:
    """Layer sets for the early / mid / late / none placements.

    ``mid`` is the last third of the network (layers 9-12 of 12).
    """
    if preset == "early":
        return fusion_layers_last(depth, depth)
    if preset == "mid":
        return fusion_layers_last(depth, max(1, math.ceil(depth / 3)))
    if preset == "late":
        return fusion_layers_last(depth, 1)
    if preset == "none":
        return ()
    raise ConfigurationError(f"Unknown fusion preset {preset!r}; expected one of {FUSION_PRESETS}")


@dataclass
class FusionConfig:
    depth: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    attn_dim: int = 16
    num_fusion_tokens: int = 16
    num_agg_audio: int = 8
    num_agg_visual: int = 8
    mlp_ratio_modality: float = 4.0
    mlp_ratio_fusion: float = 1.0
    fusion_mode: str = "factorized"
    # None means every layer, or no layer when fusion_mode is "none"
    fusion_layers: Optional[List[int]] = None
    modality_attn_dim: Optional[int] = None

    def resolved_fusion_layers(self) -> Tuple[int, ...]:
        if self.fusion_mode == "none":
            return ()
        if self.fusion_layers is None:
            return tuple(range(1, self.depth + 1))
        return tuple(sorted(set(self.fusion_layers)))

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(
                f"model.fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}", key="model.fusion_mode"
            )
        for key in ("depth", "embed_dim", "num_heads", "attn_dim"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"model.{key} must be positive, got {getattr(self, key)}", key=f"model.{key}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"model.embed_dim {self.embed_dim} is not divisible by model.num_heads {self.num_heads}",
                key="model.embed_dim",
            )
        if self.embed_dim % 4:
            raise ConfigurationError(
                f"model.embed_dim {self.embed_dim} must be divisible by 4 for positional embeddings",
                key="model.embed_dim",
            )
        if self.mlp_ratio_modality <= 0 or self.mlp_ratio_fusion <= 0:
            raise ConfigurationError("MLP ratios must be positive", key="model.mlp_ratio_fusion")
        if self.num_fusion_tokens < 0:
            raise ConfigurationError("model.num_fusion_tokens must not be negative", key="model.num_fusion_tokens")
        if self.fusion_layers is not None:
            bad = [layer for layer in self.fusion_layers if not 1 <= layer <= self.depth]
            if bad:
                raise ConfigurationError(
                    f"model.fusion_layers {bad} outside 1..{self.depth}", key="model.fusion_layers"
                )
            if self.fusion_mode == "none" and self.fusion_layers:
                raise ConfigurationError(
                    "model.fusion_layers must be empty when model.fusion_mode is 'none'", key="model.fusion_layers"
                )
            if self.fusion_mode != "none" and not self.fusion_layers:
                raise ConfigurationError(
                    "Empty model.fusion_layers requires model.fusion_mode = 'none'", key="model.fusion_layers"
                )
        if self.fusion_mode != "none" and self.num_fusion_tokens < 1:
            raise ConfigurationError(
                f"model.num_fusion_tokens must be at least 1 with fusion_mode {self.fusion_mode!r}",
                key="model.num_fusion_tokens",
            )
        if self.fusion_mode == "factorized" and (self.num_agg_audio < 1 or self.num_agg_visual < 1):
            raise ConfigurationError(
                "Factorized fusion needs at least one aggregation token per modality", key="model.num_agg_audio"
            )


@dataclass
class FusionState:
    mm: Tensor
    agg_audio: Optional[Tensor] = None
    agg_visual: Optional[Tensor] = None


@dataclass
class EncoderOutput:
    visual: Tensor
    audio: Tensor
    fusion: Tensor
    fusion_layers: Tuple[int, ...] = field(default=())


class ModalityBlock(Module):
    """Pre-norm transformer block whose keys also include the fusion tokens."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng: np.random.Generator,
                 qk_dim: Optional[int] = None):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng, qk_dim=qk_dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio, rng)

    def forward(self, x: Tensor, fusion: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        keys = h if fusion is None else concat([h, self.norm1(fusion)], axis=1)
        x = x + self.attn(h, keys)
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(Module):
    """``Z = Q + Attn(Q, KV)``, then ``Z + MLP(Z)``, with pre-norm."""

    def __init__(self, dim: int, num_heads: int, attn_dim: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng, qk_dim=attn_dim)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio, rng)

    def forward(self, queries: Tensor, keys_values: Tensor) -> Tensor:
        z = queries + self.attn(self.norm_q(queries), self.norm_kv(keys_values))
        return z + self.mlp(self.norm_mlp(z))


class TokenFusionBlock(CrossAttentionBlock):
    def forward(self, mm: Tensor, x_v: Tensor, x_a: Tensor) -> Tensor:
        return super().forward(mm, concat([mm, x_v, x_a], axis=1))


class AggregationBlock(CrossAttentionBlock):
    """Aggregation tokens summarizing one modality by cross-attention."""


class InteractionGrid(Module):
    """All pairs ``X_a[i] W_a + X_v[j] W_v``, row ``i * n_v + j``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.w_a = Linear(dim, dim, rng, bias=False)
        self.w_v = Linear(dim, dim, rng, bias=False)

    def forward(self, x_a: Tensor, x_v: Tensor) -> Tensor:
        if x_a.ndim != 3 or x_v.ndim != 3 or x_a.shape[0] != x_v.shape[0] or x_a.shape[2] != x_v.shape[2]:
            raise DimensionError("interaction_grid", x_a.shape, x_v.shape)
        batch, n_a, dim = x_a.shape
        n_v = x_v.shape[1]
        pa = self.w_a(x_a).reshape(batch, n_a, 1, dim)
        pv = self.w_v(x_v).reshape(batch, 1, n_v, dim)
        return (pa + pv).reshape(batch, n_a * n_v, dim)


class DenseFusionBlock(Module):
    """Fusion tokens cross-attend over the materialized interaction grid."""

    def __init__(self, dim: int, num_heads: int, attn_dim: int, mlp_ratio: float, rng: np.random.Generator):
        self.grid = InteractionGrid(dim, rng)
        self.cross = CrossAttentionBlock(dim, num_heads, attn_dim, mlp_ratio, rng)

    def forward(self, mm: Tensor, x_a: Tensor, x_v: Tensor) -> Tensor:
        return self.cross(mm, self.grid(x_a, x_v))


class FactorizedFusionBlock(DenseFusionBlock):
    """Dense fusion over aggregation tokens instead of all modality tokens."""


class FusionLayer(Module):
    def __init__(self, cfg: FusionConfig, index: int, fused: bool, rng: np.random.Generator):
        d, heads = cfg.embed_dim, cfg.num_heads
        self.index = index
        self.fused = fused
        self.mode = cfg.fusion_mode if fused else "none"
        self.visual = ModalityBlock(d, heads, cfg.mlp_ratio_modality, rng, qk_dim=cfg.modality_attn_dim)
        self.audio = ModalityBlock(d, heads, cfg.mlp_ratio_modality, rng, qk_dim=cfg.modality_attn_dim)
        if self.mode == "factorized":
            self.agg_audio = AggregationBlock(d, heads, cfg.attn_dim, cfg.mlp_ratio_fusion, rng)
            self.agg_visual = AggregationBlock(d, heads, cfg.attn_dim, cfg.mlp_ratio_fusion, rng)
            self.fusion = FactorizedFusionBlock(d, heads, cfg.attn_dim, cfg.mlp_ratio_fusion, rng)
        elif self.mode == "dense":
            self.fusion = DenseFusionBlock(d, heads, cfg.attn_dim, cfg.mlp_ratio_fusion, rng)
        elif self.mode == "token":
            self.fusion = TokenFusionBlock(d, heads, cfg.attn_dim, cfg.mlp_ratio_fusion, rng)

    def forward(self, x_v: Tensor, x_a: Tensor, state: FusionState,
                identity_aggregation: bool = False) -> Tuple[Tensor, Tensor, FusionState]:
        if self.mode == "none":
            return self.visual(x_v), self.audio(x_a), state

        agg_audio, agg_visual = state.agg_audio, state.agg_visual
        if self.mode == "factorized":
            if identity_aggregation:
                agg_audio, agg_visual = x_a, x_v
            else:
                agg_audio = self.agg_audio(state.agg_audio, x_a)
                agg_visual = self.agg_visual(state.agg_visual, x_v)
            mm = self.fusion(state.mm, agg_audio, agg_visual)
        elif self.mode == "dense":
            mm = self.fusion(state.mm, x_a, x_v)
        else:
            mm = self.fusion(state.mm, x_v, x_a)

        new_v = self.visual(x_v, state.mm)
        new_a = self.audio(x_a, state.mm)
        return new_v, new_a, FusionState(mm=mm, agg_audio=agg_audio, agg_visual=agg_visual)


class FusionEncoder(Module):
    """The encoder ``f_mm``: visible visual and audio tokens in, three token sets out."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.fusion_tokens = Parameter(trunc_normal((cfg.num_fusion_tokens, d), rng))
        if cfg.fusion_mode == "factorized":
            self.agg_audio_tokens = Parameter(trunc_normal((cfg.num_agg_audio, d), rng))
            self.agg_visual_tokens = Parameter(trunc_normal((cfg.num_agg_visual, d), rng))
        fused = set(cfg.resolved_fusion_layers())
        self.layers = [FusionLayer(cfg, i, i in fused, rng) for i in range(1, cfg.depth + 1)]
        # Replaces aggregation by the raw modality tokens; used to check factorized == dense.
        self.identity_aggregation = False

    def initial_state(self, batch_size: int) -> FusionState:
        d = self.cfg.embed_dim
        state = FusionState(mm=self.fusion_tokens.broadcast_to((batch_size, self.cfg.num_fusion_tokens, d)))
        if self.cfg.fusion_mode == "factorized":
            state.agg_audio = self.agg_audio_tokens.broadcast_to((batch_size, self.cfg.num_agg_audio, d))
            state.agg_visual = self.agg_visual_tokens.broadcast_to((batch_size, self.cfg.num_agg_visual, d))
        return state

    def forward(self, x_v: Tensor, x_a: Tensor) -> EncoderOutput:
        d = self.cfg.embed_dim
        if x_v.ndim != 3 or x_a.ndim != 3 or x_v.shape[2] != d or x_a.shape[2] != d:
            raise DimensionError("encoder", x_v.shape, x_a.shape, detail=f"expected [B, N, {d}]")
        if x_v.shape[0] != x_a.shape[0]:
            raise DimensionError("encoder", x_v.shape, x_a.shape, detail="batch sizes differ")
        state = self.initial_state(x_v.shape[0])
        for layer in self.layers:
            x_v, x_a, state = layer(x_v, x_a, state, identity_aggregation=self.identity_aggregation)
        return EncoderOutput(visual=x_v, audio=x_a, fusion=state.mm, fusion_layers=self.cfg.resolved_fusion_layers())

    def unimodal_parameter_names(self, modality: str) -> List[str]:
        """Parameters of one modality branch (``visual`` or ``audio``)."""
        return [name for name, _ in self.named_parameters() if f".{modality}." in f".{name}"]


def encoder_forward(x_v: Tensor, x_a: Tensor, cfg: FusionConfig,
                    params: Union[FusionEncoder, Mapping[str, np.ndarray]]) -> EncoderOutput:
    """Run the encoder given either a built encoder or a parameter table."""
    cfg.validate()
    if isinstance(params, FusionEncoder):
        encoder = params
    else:
        encoder = FusionEncoder(cfg, np.random.default_rng(0))
        encoder.load_state_dict(params)
    return encoder(x_v, x_a)


def count_interactions(cfg: FusionConfig, n_visual: int, n_audio: int) -> int:
    """Audio-visual pairs materialized per fused layer."""
    if cfg.fusion_mode == "dense":
        return n_audio * n_visual
    if cfg.fusion_mode == "factorized":
        return cfg.num_agg_audio * cfg.num_agg_visual
    return 0
