"""Joint masked audio-visual reconstruction pretraining.

Two modality decoders reconstruct the raw patches hidden from the encoder.
The objective is the sum of the visual and audio reconstruction losses, each
the mean squared error over masked patches. Parameters are trained with
AdamW under a linear-warmup cosine schedule.
"""

import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import CheckpointData, OptimizerSnapshot, save_checkpoint
from .encoder import EncoderOutput, FusionConfig, FusionEncoder, ModalityBlock
from .errors import ConfigurationError, DimensionError, NonFiniteLossError
from .masking import MaskPlan, apply_mask, check_ratio, sample_masks, stack_plans
from .nn import LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor, concat, gather_rows, mse, scatter_rows
from .tokenization import (
    AVArrays,
    InputConfig,
    PatchEmbed,
    TokenBatch,
    patchify_image,
    patchify_spectrogram,
    sincos_pos_embed,
)

logger = logging.getLogger(__name__)

DECODER_POLICIES = ("fusion_plus_unimodal", "fusion_only")

# rng streams derived from the run seed; the data stream (0) lives in tokenization
MASK_STREAM, INIT_STREAM = 1, 2


@dataclass
class DecoderConfig:
    depth: int = 2
    embed_dim: int = 64
    num_heads: int = 4
    input_policy: str = "fusion_plus_unimodal"
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigurationError(f"decoder.depth must be at least 1, got {self.depth}", key="decoder.depth")
        if self.input_policy not in DECODER_POLICIES:
            raise ConfigurationError(
                f"decoder.input_policy must be one of {DECODER_POLICIES}, got {self.input_policy!r}",
                key="decoder.input_policy",
            )
        if self.embed_dim % self.num_heads or self.embed_dim % 4:
            raise ConfigurationError(
                f"decoder.embed_dim {self.embed_dim} must be divisible by decoder.num_heads and by 4",
                key="decoder.embed_dim",
            )


@dataclass
class TrainConfig:
    base_lr: float = 0.016
    batch_size: int = 16
    warmup_epochs: int = 1
    total_epochs: int = 10
    steps_per_epoch: int = 20
    weight_decay: float = 0.05
    mask_ratio_v: float = 0.75
    mask_ratio_a: float = 0.75
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    norm_pix_loss: bool = False
    checkpoint_every: int = 0
    log_every: int = 10
    probe_every: int = 0
    probe_samples: int = 128
    prefetch: int = 2

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be positive", key="train.batch_size")
        if self.steps_per_epoch < 1:
            raise ConfigurationError("train.steps_per_epoch must be positive", key="train.steps_per_epoch")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigurationError(
                f"train.warmup_epochs {self.warmup_epochs} must lie in [0, train.total_epochs={self.total_epochs}]",
                key="train.warmup_epochs",
            )
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("train.base_lr and train.weight_decay must not be negative", key="train.base_lr")
        check_ratio(self.mask_ratio_v, "train.mask_ratio_v")
        check_ratio(self.mask_ratio_a, "train.mask_ratio_a")
        for key in ("checkpoint_every", "log_every", "probe_every"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"train.{key} must not be negative", key=f"train.{key}")


class Decoder(Module):
    """Reconstructs one modality's masked patches.

    With ``fusion_plus_unimodal`` the sequence is the full token grid (visible
    encoder tokens and mask tokens in place, plus positions) followed by the
    fusion tokens. With ``fusion_only`` it is the mask tokens with their
    positions followed by the fusion tokens.
    """

    def __init__(self, cfg: DecoderConfig, encoder_dim: int, patch_dim: int, grid: Tuple[int, int],
                 rng: np.random.Generator):
        cfg.validate()
        self.policy = cfg.input_policy
        self.grid = grid
        self.n_tokens = grid[0] * grid[1]
        self.patch_dim = patch_dim
        self.dim = cfg.embed_dim
        self.norm_in = LayerNorm(encoder_dim)
        self.embed = Linear(encoder_dim, cfg.embed_dim, rng)
        self.mask_token = Parameter(trunc_normal((cfg.embed_dim,), rng))
        self.pos_embed = sincos_pos_embed(grid, cfg.embed_dim)
        self.blocks = [ModalityBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.head = Linear(cfg.embed_dim, patch_dim, rng)
        # Skips every layer but the head; mask tokens go straight to the head.
        self.head_only = False

    def forward(self, fusion: Tensor, visible: Tensor, visible_idx: np.ndarray, masked_idx: np.ndarray) -> Tensor:
        batch, n_masked = masked_idx.shape
        if visible_idx.shape[1] + n_masked != self.n_tokens or visible.shape[1] != visible_idx.shape[1]:
            raise DimensionError("decode", visible.shape, masked_idx.shape, detail=f"grid has {self.n_tokens} tokens")
        if n_masked == 0:
            return Tensor(np.zeros((batch, 0, self.patch_dim)), dtype=visible.dtype)

        masks = self.mask_token.broadcast_to((batch, n_masked, self.dim))
        if self.head_only:
            return self.head(masks)

        if self.policy == "fusion_plus_unimodal":
            seq = scatter_rows(self.embed(self.norm_in(visible)), visible_idx, self.n_tokens)
            seq = seq + scatter_rows(masks, masked_idx, self.n_tokens) + self.pos_embed
            targets = masked_idx
        else:
            seq = masks + self.pos_embed[masked_idx]
            targets = np.broadcast_to(np.arange(n_masked), (batch, n_masked))

        x = concat([seq, self.embed(self.norm_in(fusion))], axis=1)
        for block in self.blocks:
            x = block(x)
        return self.head(gather_rows(self.norm(x), targets))


def decode(decoder: Decoder, fusion: Tensor, visible: TokenBatch,
           plan: Union[MaskPlan, Sequence[MaskPlan]]) -> Tensor:
    """Predict raw patches at the masked positions of ``plan``, in ``M`` order."""
    plans = [plan] * visible.batch_size if isinstance(plan, MaskPlan) else list(plan)
    if any(p.n_tokens != decoder.n_tokens for p in plans):
        raise DimensionError("decode", (plans[0].n_tokens,), (decoder.n_tokens,), detail="plan does not fit decoder")
    visible_idx, masked_idx = stack_plans(plans)
    return decoder(fusion, visible.tokens, visible_idx, masked_idx)


def normalize_patches(targets: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = targets.mean(axis=-1, keepdims=True)
    var = targets.var(axis=-1, keepdims=True)
    return (targets - mean) / np.sqrt(var + eps)


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over masked tokens and patch elements."""
    if pred.shape != target.shape:
        raise DimensionError("mae_loss", pred.shape, target.shape)
    return mse(pred, target)


@dataclass
class MAEOutput:
    pred_v: Tensor
    target_v: Tensor
    pred_a: Tensor
    target_a: Tensor
    encoded: EncoderOutput


class AudioVisualMAE(Module):
    """Patch embeddings, the fusion encoder and one decoder per modality."""

    def __init__(self, fusion_cfg: FusionConfig, decoder_cfg: DecoderConfig, input_cfg: InputConfig,
                 rng: np.random.Generator):
        fusion_cfg.validate()
        decoder_cfg.validate()
        input_cfg.validate()
        self.fusion_cfg = fusion_cfg
        self.decoder_cfg = decoder_cfg
        self.input_cfg = input_cfg
        d = fusion_cfg.embed_dim
        self.visual_embed = PatchEmbed(input_cfg.visual_patch_dim, d, input_cfg.visual_grid, rng)
        self.audio_embed = PatchEmbed(input_cfg.audio_patch_dim, d, input_cfg.audio_grid, rng)
        self.encoder = FusionEncoder(fusion_cfg, rng)
        self.visual_decoder = Decoder(decoder_cfg, d, input_cfg.visual_patch_dim, input_cfg.visual_grid, rng)
        self.audio_decoder = Decoder(decoder_cfg, d, input_cfg.audio_patch_dim, input_cfg.audio_grid, rng)

    @classmethod
    def from_seed(cls, fusion_cfg: FusionConfig, decoder_cfg: DecoderConfig, input_cfg: InputConfig,
                  seed: int) -> "AudioVisualMAE":
        return cls(fusion_cfg, decoder_cfg, input_cfg, np.random.default_rng([seed, INIT_STREAM]))

    def tokenize(self, images: np.ndarray, spectrograms: np.ndarray) -> Tuple[TokenBatch, TokenBatch]:
        visual = patchify_image(images, self.input_cfg.image_patch, self.visual_embed)
        audio = patchify_spectrogram(spectrograms, self.input_cfg.spec_patch, self.audio_embed)
        return visual, audio

    def encode(self, images: np.ndarray, spectrograms: np.ndarray) -> EncoderOutput:
        """Encode complete (unmasked) inputs."""
        visual, audio = self.tokenize(images, spectrograms)
        return self.encoder(visual.embedded(), audio.embedded())

    def forward(self, images: np.ndarray, spectrograms: np.ndarray, plans_v: Sequence[MaskPlan],
                plans_a: Sequence[MaskPlan], norm_pix_loss: bool = False) -> MAEOutput:
        visual, audio = self.tokenize(images, spectrograms)
        visual_vis, target_v = apply_mask(visual, plans_v)
        audio_vis, target_a = apply_mask(audio, plans_a)
        encoded = self.encoder(visual_vis.embedded(), audio_vis.embedded())
        pred_v = decode(self.visual_decoder, encoded.fusion, TokenBatch(
            encoded.visual, "visual", visual.grid, visual.patch_size, indices=visual_vis.indices), plans_v)
        pred_a = decode(self.audio_decoder, encoded.fusion, TokenBatch(
            encoded.audio, "audio", audio.grid, audio.patch_size, indices=audio_vis.indices), plans_a)
        if norm_pix_loss:
            target_v = Tensor(normalize_patches(target_v.data), dtype=target_v.dtype)
            target_a = Tensor(normalize_patches(target_a.data), dtype=target_a.dtype)
        return MAEOutput(pred_v, target_v, pred_a, target_a, encoded)


def av_mae_loss(batch: AVArrays, model: AudioVisualMAE, plans: Tuple[Sequence[MaskPlan], Sequence[MaskPlan]],
                norm_pix_loss: bool = False) -> Tuple[Tensor, Tensor, Tensor]:
    """``(loss_v + loss_a, loss_v, loss_a)`` for one batch."""
    plans_v, plans_a = plans
    out = model(batch.images, batch.spectrograms, plans_v, plans_a, norm_pix_loss=norm_pix_loss)
    loss_v = mae_loss(out.pred_v, out.target_v)
    loss_a = mae_loss(out.pred_a, out.target_a)
    return loss_v + loss_a, loss_v, loss_a


def decay_exempt(name: str, value: np.ndarray) -> bool:
    """Biases, norm gains and learned tokens are not weight-decayed."""
    return value.ndim < 2 or name.endswith("_tokens") or name.endswith("mask_token")


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, weight_decay: float, betas: Tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
              exempt: Sequence[str] = ()) -> AdamState:
    """One AdamW update applied in place to ``params``.

    Weight decay is decoupled: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.
    Parameters whose gradient is ``None`` are left alone.
    """
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise DimensionError("adam_step", param.shape, grad.shape, detail=name)
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        if weight_decay and name not in exempt:
            update = update + weight_decay * param
        param -= (lr * update).astype(param.dtype)
    return state


class AdamW:
    """AdamW over a module's named parameters."""

    def __init__(self, module: Module, weight_decay: float = 0.05, betas: Tuple[float, float] = (0.9, 0.95),
                 eps: float = 1e-8):
        self.module = module
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()
        self.exempt = {name for name, p in module.named_parameters() if decay_exempt(name, p.data)}

    def step(self, lr: float) -> None:
        named = dict(self.module.named_parameters())
        adam_step(
            {name: p.data for name, p in named.items()},
            {name: p.grad for name, p in named.items()},
            self.state, lr, self.weight_decay, self.betas, self.eps, exempt=self.exempt,
        )

    def snapshot(self) -> OptimizerSnapshot:
        return OptimizerSnapshot(step=self.state.step, m=dict(self.state.m), v=dict(self.state.v))

    def restore(self, snapshot: OptimizerSnapshot) -> None:
        self.state = AdamState(
            step=snapshot.step,
            m={k: np.array(v) for k, v in snapshot.m.items()},
            v={k: np.array(v) for k, v in snapshot.v.items()},
        )


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr * batch_size / 256``, then cosine decay to 0."""
    peak = cfg.peak_lr
    warmup, total = cfg.warmup_steps, cfg.total_steps
    if step >= total:
        return 0.0
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class BatchPrefetcher:
    """Produces ``(step, batch)`` on a worker thread through a bounded queue.

    The producer blocks while the queue is full. Errors raised by the source
    are re-raised in the consumer.
    """

    _DONE = object()

    def __init__(self, source: Any, steps: Sequence[int], batch_size: int, maxsize: int = 2):
        self.source = source
        self.steps = list(steps)
        self.batch_size = batch_size
        self.queue: "queue.Queue" = queue.Queue(maxsize=max(1, maxsize))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)

    def _put(self, item: Any) -> bool:
        while not self._stop.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for step in self.steps:
                if not self._put((step, self.source.batch(step, self.batch_size))):
                    return
        except Exception as e:
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self) -> Iterator[Tuple[int, AVArrays]]:
        self._thread.start()
        try:
            while True:
                item = self.queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._stop.set()


@dataclass
class PretrainResult:
    model: AudioVisualMAE
    history: List[Dict[str, Any]]
    checkpoints: List[Path]
    final_step: int


class Pretrainer:
    """Runs the pretraining loop, writing metrics and checkpoints.

    Batch ``t`` and its masks depend only on the seed and ``t``, so a run
    resumed from a checkpoint reproduces the losses of an uninterrupted one.
    """

    def __init__(self, model: AudioVisualMAE, source: Any, train_cfg: TrainConfig,
                 output_dir: Optional[Union[str, Path]] = None, config_snapshot: Optional[Dict[str, Any]] = None):
        train_cfg.validate()
        self.model = model
        self.source = source
        self.cfg = train_cfg
        self.optimizer = AdamW(model, train_cfg.weight_decay, (train_cfg.beta1, train_cfg.beta2))
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.config_snapshot = config_snapshot or {}
        self.step = 0
        self.history: List[Dict[str, Any]] = []
        self.checkpoints: List[Path] = []
        self._held_out: Optional[AVArrays] = None

    @property
    def metrics_path(self) -> Optional[Path]:
        return self.output_dir / "metrics.jsonl" if self.output_dir is not None else None

    def checkpoint_path(self, step: int) -> Path:
        return self.output_dir / "checkpoints" / f"checkpoint-{step:06d}.efck"

    def plans_for(self, step: int) -> Tuple[List[MaskPlan], List[MaskPlan]]:
        rng = np.random.default_rng([self.cfg.seed, MASK_STREAM, step])
        bs, geometry = self.cfg.batch_size, self.model.input_cfg
        plans_v = sample_masks(bs, geometry.n_visual, self.cfg.mask_ratio_v, rng)
        plans_a = sample_masks(bs, geometry.n_audio, self.cfg.mask_ratio_a, rng)
        return plans_v, plans_a

    def train_step(self, step: int, batch: AVArrays) -> Dict[str, Any]:
        self.model.zero_grad()
        total, loss_v, loss_a = av_mae_loss(batch, self.model, self.plans_for(step), self.cfg.norm_pix_loss)
        if not (np.isfinite(loss_v.item()) and np.isfinite(loss_a.item())):
            raise NonFiniteLossError(step, loss_v.item(), loss_a.item())
        lr = lr_schedule(step, self.cfg)
        # nothing masked in either modality: the loss is a constant zero
        if total.requires_grad:
            total.backward()
            self.optimizer.step(lr)
        return {
            "kind": "loss",
            "step": step,
            "lr": lr,
            "loss_total": total.item(),
            "loss_v": loss_v.item(),
            "loss_a": loss_a.item(),
        }

    def _emit(self, record: Dict[str, Any]) -> None:
        self.history.append(record)
        if self.metrics_path is not None:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.metrics_path, "a") as f:
                f.write(json.dumps(record) + "\n")

    def probe(self, step: int) -> List[Dict[str, Any]]:
        """Leave-one-out retrieval accuracy per token family on a held-out set."""
        from .evaluation import available_families, extract_features, nn_retrieval

        if self._held_out is None:
            self._held_out = self.source.held_out(self.cfg.probe_samples)
        records = []
        for family in available_families(self.model.fusion_cfg):
            features = extract_features(self.model, self._held_out, family)
            for task in ("class_id", "cross_label"):
                accuracy = nn_retrieval(features, self._held_out.labels(task))
                records.append({"kind": "retrieval", "step": step, "family": family, "task": task,
                                "accuracy": accuracy})
        return records

    def save(self) -> Optional[Path]:
        if self.output_dir is None:
            return None
        path = self.checkpoint_path(self.step)
        save_checkpoint(path, CheckpointData(
            step=self.step,
            params=self.model.state_dict(),
            optimizer=self.optimizer.snapshot(),
            config=self.config_snapshot,
            rng_state={"seed": self.cfg.seed, "next_step": self.step},
        ))
        self.checkpoints.append(path)
        logger.info(f"Saved checkpoint {path}")
        return path

    def resume(self, data: CheckpointData) -> None:
        self.model.load_state_dict(data.params)
        if data.optimizer is not None:
            self.optimizer.restore(data.optimizer)
        self.step = data.step
        logger.info(f"Resumed from step {data.step}")

    def run(self, steps: Optional[int] = None) -> PretrainResult:
        end = self.cfg.total_steps if steps is None else min(self.cfg.total_steps, self.step + steps)
        schedule = range(self.step, end)
        logger.info(f"Pretraining steps {self.step}..{end - 1} "
                    f"({self.model.num_parameters()} parameters, fusion_mode={self.model.fusion_cfg.fusion_mode})")
        start_time = time.time()
        if self.cfg.probe_every and self.step == 0:
            for record in self.probe(0):
                self._emit(record)

        batches: Any = BatchPrefetcher(self.source, schedule, self.cfg.batch_size, self.cfg.prefetch) \
            if self.cfg.prefetch else ((s, self.source.batch(s, self.cfg.batch_size)) for s in schedule)
        for step, batch in batches:
            record = self.train_step(step, batch)
            self.step = step + 1
            self._emit(record)
            if self.cfg.log_every and self.step % self.cfg.log_every == 0:
                logger.info(f"step {step}: loss {record['loss_total']:.4f} "
                            f"(v {record['loss_v']:.4f}, a {record['loss_a']:.4f}) lr {record['lr']:.2e}")
            if self.cfg.probe_every and self.step % self.cfg.probe_every == 0:
                for probe_record in self.probe(self.step):
                    self._emit(probe_record)
            if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0 and self.step < end:
                self.save()

        if len(schedule):
            self.save()
        logger.info(f"Pretraining reached step {self.step} in {time.time() - start_time:.3f}s")
        return PretrainResult(self.model, self.history, self.checkpoints, self.step)


def pretrain(source: Any, fusion_cfg: FusionConfig, train_cfg: TrainConfig,
             decoder_cfg: Optional[DecoderConfig] = None, input_cfg: Optional[InputConfig] = None,
             output_dir: Optional[Union[str, Path]] = None, steps: Optional[int] = None,
             config_snapshot: Optional[Dict[str, Any]] = None) -> PretrainResult:
    """Build a model from configs and pretrain it from scratch."""
    decoder_cfg = decoder_cfg or DecoderConfig(embed_dim=fusion_cfg.embed_dim)
    input_cfg = input_cfg or InputConfig()
    train_cfg.validate()
    model = AudioVisualMAE.from_seed(fusion_cfg, decoder_cfg, input_cfg, train_cfg.seed)
    snapshot = config_snapshot or {
        "model": asdict(fusion_cfg), "decoder": asdict(decoder_cfg),
        "input": asdict(input_cfg), "train": asdict(train_cfg),
    }
    trainer = Pretrainer(model, source, train_cfg, output_dir=output_dir, config_snapshot=snapshot)
    return trainer.run(steps)
