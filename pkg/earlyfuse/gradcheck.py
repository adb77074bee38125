"""Finite-difference gradient checks for ops, blocks and a tiny full model.

Every check builds its inputs under float64 storage, reduces the output to a
scalar through a fixed random projection, and compares the analytic
gradient of every leaf with central differences (``h = 1e-5``). The error of
a leaf is ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``
measured in the max norm; large leaves are sampled at a fixed set of entries.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor, no_grad, precision

logger = logging.getLogger(__name__)

STEP = 1e-5
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3

# A check returns the scalar loss closure and the leaves to differentiate.
Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


@dataclass
class GradCheckResult:
    name: str
    group: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    duration: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def numerical_grad(loss_fn: Callable[[], Tensor], leaf: Tensor, entries: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``loss_fn`` at the flat ``entries`` of ``leaf``."""
    flat = leaf.data.reshape(-1)
    grads = np.zeros(len(entries))
    with no_grad():
        for i, entry in enumerate(entries):
            original = flat[entry]
            flat[entry] = original + h
            plus = loss_fn().item()
            flat[entry] = original - h
            minus = loss_fn().item()
            flat[entry] = original
            grads[i] = (plus - minus) / (2 * h)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale < 1e-12:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(name: str, builder: Builder, tolerance: float = OP_TOLERANCE, group: str = "ops",
                    seed: int = 0, max_entries: int = 24) -> GradCheckResult:
    start_time = time.time()
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        loss_fn, leaves = builder(rng)
        for leaf in leaves:
            leaf.grad = None
        loss = loss_fn()
        loss.backward()
        worst, n_checked = 0.0, 0
        for leaf in leaves:
            analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
            entries = np.arange(leaf.size)
            if leaf.size > max_entries:
                entries = np.sort(rng.choice(leaf.size, size=max_entries, replace=False))
            numeric = numerical_grad(loss_fn, leaf, entries)
            worst = max(worst, relative_error(analytic.reshape(-1)[entries], numeric))
            n_checked += len(entries)
    result = GradCheckResult(name, group, worst, tolerance, n_checked, time.time() - start_time)
    logger.info(f"gradcheck {name}: max rel error {worst:.2e} "
                f"({'ok' if result.passed else 'FAIL'}) in {result.duration:.3f}s")
    return result


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _projected(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """``sum(fn() * R)`` for a random ``R`` drawn once on first call."""
    holder: Dict[str, np.ndarray] = {}

    def loss() -> Tensor:
        out = fn()
        if "r" not in holder:
            holder["r"] = rng.standard_normal(out.shape)
        return (out * holder["r"]).sum()
    return loss


def _op(fn: Callable[..., Tensor], *shapes: Tuple[int, ...]) -> Builder:
    def build(rng):
        leaves = [_leaf(rng, *shape) for shape in shapes]
        return _projected(lambda: fn(*leaves), rng), leaves
    return build


def _layer_norm(rng):
    x, gain, bias = _leaf(rng, 2, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    return _projected(lambda: T.layer_norm(x, gain, bias, 1e-6), rng), [x, gain, bias]


def _mse(rng):
    pred, target = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return (lambda: T.mse(pred, target)), [pred, target]


def _gather(rng):
    x = _leaf(rng, 2, 6, 3)
    index = np.array([[4, 0, 0, 2], [1, 5, 3, 3]])
    return _projected(lambda: T.gather_rows(x, index), rng), [x]


def _scatter(rng):
    x = _leaf(rng, 2, 3, 4)
    index = np.array([[4, 0, 2], [1, 5, 3]])
    return _projected(lambda: T.scatter_rows(x, index, 6), rng), [x]


def _module_check(make: Callable[[np.random.Generator], Tuple[object, Callable[..., Tensor], List[Tensor]]]) -> Builder:
    """Differentiate w.r.t. every parameter of a module and its inputs."""
    def build(rng):
        module, call, inputs = make(rng)
        leaves = list(inputs) + module.parameters()
        return _projected(lambda: call(*inputs), rng), leaves
    return build


def _attention(rng):
    from .nn import Attention
    block = Attention(8, 2, rng, qk_dim=3)
    return block, block, [_leaf(rng, 2, 3, 8), _leaf(rng, 2, 5, 8)]


def _modality_block(rng):
    from .encoder import ModalityBlock
    block = ModalityBlock(8, 2, 2.0, rng)
    return block, block, [_leaf(rng, 2, 4, 8), _leaf(rng, 2, 3, 8)]


def _cross_attention(rng):
    from .encoder import CrossAttentionBlock
    block = CrossAttentionBlock(8, 2, 4, 1.0, rng)
    return block, block, [_leaf(rng, 2, 3, 8), _leaf(rng, 2, 6, 8)]


def _token_fusion(rng):
    from .encoder import TokenFusionBlock
    block = TokenFusionBlock(8, 2, 4, 1.0, rng)
    return block, block, [_leaf(rng, 2, 3, 8), _leaf(rng, 2, 4, 8), _leaf(rng, 2, 5, 8)]


def _dense_fusion(rng):
    from .encoder import DenseFusionBlock
    block = DenseFusionBlock(8, 2, 4, 1.0, rng)
    return block, block, [_leaf(rng, 2, 3, 8), _leaf(rng, 2, 4, 8), _leaf(rng, 2, 5, 8)]


def _factorized_layer(rng):
    from .encoder import FusionConfig, FusionEncoder
    cfg = FusionConfig(depth=1, embed_dim=8, num_heads=2, attn_dim=4, num_fusion_tokens=3,
                       num_agg_audio=2, num_agg_visual=2, mlp_ratio_modality=2.0)
    encoder = FusionEncoder(cfg, rng)

    def call(x_v, x_a):
        out = encoder(x_v, x_a)
        return T.concat([out.visual, out.audio, out.fusion], axis=1)
    return encoder, call, [_leaf(rng, 2, 5, 8), _leaf(rng, 2, 4, 8)]


def _decoder(rng):
    from .pretraining import Decoder, DecoderConfig
    decoder = Decoder(DecoderConfig(depth=1, embed_dim=8, num_heads=2), 8, 6, (2, 3), rng)
    visible_idx = np.array([[0, 2, 5], [1, 3, 4]])
    masked_idx = np.array([[1, 3, 4], [0, 2, 5]])
    fusion, visible = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 3, 8)
    return decoder, (lambda f, v: decoder(f, v, visible_idx, masked_idx)), [fusion, visible]


def _full_model(rng):
    from .encoder import FusionConfig
    from .masking import sample_masks
    from .pretraining import AudioVisualMAE, DecoderConfig, av_mae_loss
    from .tokenization import InputConfig, synthetic_arrays

    input_cfg = InputConfig(image_channels=1, image_size=8, image_patch=4, spec_bands=8, spec_frames=8, spec_patch=4)
    fusion_cfg = FusionConfig(depth=2, embed_dim=16, num_heads=2, attn_dim=4, num_fusion_tokens=2,
                              num_agg_audio=2, num_agg_visual=2)
    model = AudioVisualMAE(fusion_cfg, DecoderConfig(depth=1, embed_dim=8, num_heads=2), input_cfg, rng)
    batch = synthetic_arrays(2, 2, 0, input_cfg)
    plans = (sample_masks(2, input_cfg.n_visual, 0.5, rng), sample_masks(2, input_cfg.n_audio, 0.5, rng))
    return (lambda: av_mae_loss(batch, model, plans)[0]), model.parameters()


CHECKS: Dict[str, Tuple[str, Builder, float]] = {
    "add": ("ops", _op(lambda a, b: a + b, (3, 4), (4,)), OP_TOLERANCE),
    "mul": ("ops", _op(lambda a, b: a * b, (2, 3, 4), (3, 1)), OP_TOLERANCE),
    "matmul": ("ops", _op(lambda a, b: a @ b, (2, 3, 4), (4, 5)), OP_TOLERANCE),
    "sum": ("ops", _op(lambda x: x.sum(axis=(0, 2), keepdims=True), (2, 3, 4)), OP_TOLERANCE),
    "mean": ("ops", _op(lambda x: T.mean(x, axis=1), (2, 3, 4, 2)), OP_TOLERANCE),
    "reshape": ("ops", _op(lambda x: x.reshape(6, 4) * x.reshape(6, 4), (2, 3, 4)), OP_TOLERANCE),
    "transpose": ("ops", _op(lambda x: x.transpose(2, 0, 1), (2, 3, 4)), OP_TOLERANCE),
    "broadcast_to": ("ops", _op(lambda x: x.broadcast_to((3, 2, 4)), (2, 1)), OP_TOLERANCE),
    "concat": ("ops", _op(lambda a, b: T.concat([a, b], axis=1), (2, 3, 4), (2, 1, 4)), OP_TOLERANCE),
    "softmax": ("ops", _op(lambda x: T.softmax(x, axis=-1), (2, 3, 5)), OP_TOLERANCE),
    "layer_norm": ("ops", _layer_norm, OP_TOLERANCE),
    "gelu": ("ops", _op(T.gelu, (3, 4)), OP_TOLERANCE),
    "mse": ("ops", _mse, OP_TOLERANCE),
    "gather_rows": ("ops", _gather, OP_TOLERANCE),
    "scatter_rows": ("ops", _scatter, OP_TOLERANCE),
    "attention": ("blocks", _module_check(_attention), OP_TOLERANCE),
    "modality_block": ("blocks", _module_check(_modality_block), OP_TOLERANCE),
    "cross_attention": ("blocks", _module_check(_cross_attention), OP_TOLERANCE),
    "token_fusion": ("blocks", _module_check(_token_fusion), OP_TOLERANCE),
    "dense_fusion": ("blocks", _module_check(_dense_fusion), OP_TOLERANCE),
    "factorized_fusion": ("blocks", _module_check(_factorized_layer), OP_TOLERANCE),
    "decoder": ("blocks", _module_check(_decoder), OP_TOLERANCE),
    "full_model": ("model", _full_model, MODEL_TOLERANCE),
}

GROUPS = ("ops", "blocks", "model")


def select_checks(scopes: Optional[Sequence[str]] = None) -> List[str]:
    """Check names matching ``scopes`` (check names or group names)."""
    if not scopes:
        return list(CHECKS)
    selected = []
    for scope in scopes:
        if scope in CHECKS:
            matches = [scope]
        elif scope in GROUPS:
            matches = [name for name, (group, _, _) in CHECKS.items() if group == scope]
        else:
            raise ConfigurationError(
                f"Unknown gradcheck scope {scope!r}; expected one of {GROUPS} or {sorted(CHECKS)}",
                key="gradcheck.scope",
            )
        selected.extend(name for name in matches if name not in selected)
    return selected


def run_gradcheck(scopes: Optional[Sequence[str]] = None, seed: int = 0) -> List[GradCheckResult]:
    results = []
    for name in select_checks(scopes):
        group, builder, tolerance = CHECKS[name]
        max_entries = 4 if group == "model" else 24
        results.append(check_gradients(name, builder, tolerance, group=group, seed=seed, max_entries=max_entries))
    return results


def format_report(results: Sequence[GradCheckResult]) -> str:
    lines = [f"{'check':<20} {'group':<8} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.group:<8} {r.max_rel_error:>12.3e} {r.tolerance:>8.0e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed"
                 + (f"; failing: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
