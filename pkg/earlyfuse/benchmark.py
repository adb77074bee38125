"""Forward-pass throughput, peak memory and interaction counts per fusion mode.

Every cell times the encoder alone on deterministic random token inputs.
Peak memory is the ``tracemalloc`` high-water mark of numpy allocations made
during one forward pass, above what was live when the pass started. BLAS
thread pools are limited to ``threads`` (default 1) for the whole cell.
"""

import logging
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from threadpoolctl import threadpool_limits

from .encoder import FUSION_MODES, FusionConfig, FusionEncoder, count_interactions
from .errors import ConfigurationError
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    HAS_VISUALIZATION_DEPS = True
except ImportError:
    HAS_VISUALIZATION_DEPS = False

BENCH_COLUMNS = [
    "config_id", "fusion_mode", "n_v", "n_a", "n_agg_v", "n_agg_a", "F",
    "samples_per_sec", "peak_bytes", "interactions", "flops_estimate", "threads", "status",
]


@dataclass
class BenchConfig:
    """One benchmark cell. Token counts are given directly."""

    config_id: str = "cell"
    fusion_mode: str = "factorized"
    n_v: int = 64
    n_a: int = 24
    n_agg_v: int = 8
    n_agg_a: int = 8
    num_fusion_tokens: int = 16
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    attn_dim: int = 16
    mlp_ratio_modality: float = 4.0
    mlp_ratio_fusion: float = 1.0
    batch_size: int = 4
    warmup_iters: int = 1
    timed_iters: int = 3
    threads: int = 1
    seed: int = 0

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            depth=self.depth,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            attn_dim=self.attn_dim,
            num_fusion_tokens=self.num_fusion_tokens,
            num_agg_audio=self.n_agg_a,
            num_agg_visual=self.n_agg_v,
            mlp_ratio_modality=self.mlp_ratio_modality,
            mlp_ratio_fusion=self.mlp_ratio_fusion,
            fusion_mode=self.fusion_mode,
        )

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"Unknown fusion_mode {self.fusion_mode!r}", key="bench.fusion_mode")
        if self.timed_iters < 3:
            raise ConfigurationError(f"timed_iters must be at least 3, got {self.timed_iters}", key="bench.timed_iters")
        if self.threads < 1:
            raise ConfigurationError(f"threads must be at least 1, got {self.threads}", key="bench.threads")
        if self.warmup_iters < 0 or self.batch_size < 1 or self.n_v < 1 or self.n_a < 1:
            raise ConfigurationError(f"Invalid sizes in bench cell {self.config_id}", key="bench")
        self.fusion_config().validate()


@dataclass
class BenchReport:
    config_id: str
    fusion_mode: str
    n_v: int
    n_a: int
    n_agg_v: int
    n_agg_a: int
    F: int
    samples_per_sec: float
    peak_bytes: int
    interactions: int
    flops_estimate: int
    threads: int = 1
    status: str = "success"

    def as_row(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class InteractionCount:
    dense: int
    factorized: int
    ratio: float


def pair_counts(n_v: int, n_a: int, n_agg_v: int, n_agg_a: int) -> InteractionCount:
    """Pairs per fused layer for dense and factorized fusion, and their ratio."""
    dense = n_a * n_v
    factorized = n_agg_a * n_agg_v
    return InteractionCount(dense, factorized, dense / factorized if factorized else float("inf"))


def interaction_count(cfg: BenchConfig) -> InteractionCount:
    return pair_counts(cfg.n_v, cfg.n_a, cfg.n_agg_v, cfg.n_agg_a)


def _attention_flops(n_q: int, n_k: int, dim: int, qk_total: int) -> int:
    projections = 2 * n_q * dim * qk_total + 2 * n_k * dim * qk_total + 2 * n_k * dim * dim + 2 * n_q * dim * dim
    return projections + 2 * n_q * n_k * qk_total + 2 * n_q * n_k * dim


def _mlp_flops(n: int, dim: int, ratio: float) -> int:
    return 4 * n * dim * int(dim * ratio)


def _cross_block_flops(n_q: int, n_k: int, dim: int, qk_total: int, ratio: float) -> int:
    return _attention_flops(n_q, n_k, dim, qk_total) + _mlp_flops(n_q, dim, ratio)


def estimate_flops(cfg: BenchConfig) -> int:
    """Multiply-adds (as 2 flops) of one forward pass over a batch, from shapes alone."""
    d, fused_qk = cfg.embed_dim, cfg.num_heads * cfg.attn_dim
    f = cfg.num_fusion_tokens
    fused_layers = set(cfg.fusion_config().resolved_fusion_layers())
    total = 0
    for index in range(1, cfg.depth + 1):
        fused = index in fused_layers
        extra_keys = f if fused else 0
        for n in (cfg.n_v, cfg.n_a):
            total += _attention_flops(n, n + extra_keys, d, d) + _mlp_flops(n, d, cfg.mlp_ratio_modality)
        if not fused:
            continue
        if cfg.fusion_mode == "token":
            total += _cross_block_flops(f, f + cfg.n_v + cfg.n_a, d, fused_qk, cfg.mlp_ratio_fusion)
            continue
        if cfg.fusion_mode == "factorized":
            total += _cross_block_flops(cfg.n_agg_a, cfg.n_a, d, fused_qk, cfg.mlp_ratio_fusion)
            total += _cross_block_flops(cfg.n_agg_v, cfg.n_v, d, fused_qk, cfg.mlp_ratio_fusion)
            n_a, n_v = cfg.n_agg_a, cfg.n_agg_v
        else:
            n_a, n_v = cfg.n_a, cfg.n_v
        total += 2 * (n_a + n_v) * d * d + n_a * n_v * d
        total += _cross_block_flops(f, n_a * n_v, d, fused_qk, cfg.mlp_ratio_fusion)
    return total * cfg.batch_size


def bench_inputs(cfg: BenchConfig) -> Tuple[Tensor, Tensor]:
    rng = np.random.default_rng([cfg.seed, 7])
    x_v = Tensor(rng.standard_normal((cfg.batch_size, cfg.n_v, cfg.embed_dim)))
    x_a = Tensor(rng.standard_normal((cfg.batch_size, cfg.n_a, cfg.embed_dim)))
    return x_v, x_a


def measure_peak_bytes(fn) -> int:
    """Peak bytes allocated while ``fn`` runs, above the starting level."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        baseline, _ = tracemalloc.get_traced_memory()
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return max(0, peak - baseline)


def bench_forward(cfg: BenchConfig, encoder: Optional[FusionEncoder] = None) -> BenchReport:
    """Median forward throughput and peak transient memory for one cell."""
    cfg.validate()
    fusion_cfg = cfg.fusion_config()
    encoder = encoder or FusionEncoder(fusion_cfg, np.random.default_rng([cfg.seed, 2]))
    x_v, x_a = bench_inputs(cfg)

    def forward():
        with no_grad():
            return encoder(x_v, x_a)

    # BLAS pools capped at cfg.threads for warmup, timing and the peak pass
    with threadpool_limits(limits=cfg.threads):
        for _ in range(cfg.warmup_iters):
            forward()
        timings = []
        for _ in range(cfg.timed_iters):
            start = time.perf_counter()
            forward()
            timings.append(time.perf_counter() - start)
        peak = measure_peak_bytes(forward)
    median = statistics.median(timings)

    logger.info(f"Bench {cfg.config_id}: {cfg.batch_size / median:.2f} samples/s, peak {peak} bytes")
    return BenchReport(
        config_id=cfg.config_id,
        fusion_mode=cfg.fusion_mode,
        n_v=cfg.n_v,
        n_a=cfg.n_a,
        n_agg_v=cfg.n_agg_v,
        n_agg_a=cfg.n_agg_a,
        F=cfg.num_fusion_tokens,
        samples_per_sec=cfg.batch_size / median if median > 0 else float("inf"),
        peak_bytes=int(peak),
        interactions=count_interactions(fusion_cfg, cfg.n_v, cfg.n_a),
        flops_estimate=estimate_flops(cfg),
        threads=cfg.threads,
    )


def failed_report(cfg: BenchConfig) -> BenchReport:
    """Analytic columns only, marked failed."""
    try:
        interactions = count_interactions(cfg.fusion_config(), cfg.n_v, cfg.n_a)
        flops = estimate_flops(cfg)
    except Exception:
        interactions, flops = 0, 0
    return BenchReport(cfg.config_id, cfg.fusion_mode, cfg.n_v, cfg.n_a, cfg.n_agg_v, cfg.n_agg_a,
                       cfg.num_fusion_tokens, float("nan"), 0, interactions, flops, threads=cfg.threads, status="error")


def run_bench_cell(spec: Dict[str, Any]) -> Dict[str, Any]:
    """Grid-cell entry point: a ``BenchConfig`` dict in, a report row out."""
    return bench_forward(BenchConfig(**spec)).as_row()


def expand_grid(base: Dict[str, Any], axes: Dict[str, Sequence[Any]]) -> List[BenchConfig]:
    """Cartesian product of ``axes`` over ``base``; ids name every varied value."""
    cells = [dict(base)]
    for key, values in axes.items():
        cells = [{**cell, key: value} for cell in cells for value in values]
    prefix = base.get("config_id", "cell")
    configs = []
    for cell in cells:
        varied = "-".join(f"{key}={cell[key]}" for key in axes)
        cell["config_id"] = f"{prefix}-{varied}" if varied else prefix
        configs.append(BenchConfig(**cell))
    return configs


def sweep(cells: Sequence[BenchConfig], out_csv: Optional[Union[str, Path]] = None,
          manager: Any = None) -> List[BenchReport]:
    """Measure every cell one at a time; failures are recorded and skipped.

    Reports come back sorted by ``config_id``. With ``out_csv`` the reports
    are also written in the fixed column order.
    """
    if not cells:
        raise ConfigurationError("Benchmark grid is empty", key="bench")
    ids = [cell.config_id for cell in cells]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("Benchmark config ids must be unique", key="bench.config_id")
    from .swarm import GridCell, GridManager, GridNode

    if manager is None:
        manager = GridManager()
        manager.register_node(GridNode("local"))
    by_id = {cell.config_id: cell for cell in cells}
    for cell in cells:
        manager.add_cell(GridCell(cell.config_id, "bench", asdict(cell)))
    outcomes = manager.execute_cells()

    reports = []
    for config_id in sorted(by_id):
        outcome = outcomes[config_id]
        if outcome["status"] == "success":
            reports.append(BenchReport(**outcome["result"]))
        else:
            logger.warning(f"Bench cell {config_id} failed: {outcome.get('error')}")
            reports.append(failed_report(by_id[config_id]))
    if out_csv is not None:
        write_reports(reports, out_csv)
    return reports


def reports_frame(reports: Sequence[BenchReport]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in reports], columns=BENCH_COLUMNS)


def write_reports(reports: Sequence[BenchReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reports_frame(reports).to_csv(path, index=False)
    logger.info(f"Wrote {len(reports)} bench rows to {path}")
    return path


def mode_comparison_cells(n_v: int = 196, n_a: int = 96, embed_dim: int = 192, depth: int = 4,
                 batch_size: int = 2, **overrides: Any) -> List[BenchConfig]:
    """The no-fusion / dense / factorized comparison at one token scale."""
    base = BenchConfig(n_v=n_v, n_a=n_a, embed_dim=embed_dim, depth=depth, batch_size=batch_size,
                       num_heads=max(1, embed_dim // 64), **overrides)
    return [replace(base, config_id=f"{mode}-{n_v}x{n_a}", fusion_mode=mode) for mode in ("none", "dense", "factorized")]


def plot_sweep(reports: Sequence[BenchReport], save_path: Union[str, Path]) -> bool:
    """Throughput and peak memory against interaction count, one line per mode."""
    if not HAS_VISUALIZATION_DEPS:
        logger.error("Cannot plot sweep. Please install matplotlib: pip install earlyfuse[viz]")
        return False
    frame = reports_frame([r for r in reports if r.status == "success"])
    fig, (ax_speed, ax_mem) = plt.subplots(1, 2, figsize=(12, 5))
    for mode, group in frame.groupby("fusion_mode"):
        group = group.assign(pairs=group["n_v"] * group["n_a"]).sort_values("pairs")
        ax_speed.plot(group["pairs"], group["samples_per_sec"], marker="o", label=mode)
        ax_mem.plot(group["pairs"], group["peak_bytes"] / 2 ** 20, marker="o", label=mode)
    ax_speed.set_xlabel("n_a * n_v")
    ax_speed.set_ylabel("samples / sec")
    ax_mem.set_xlabel("n_a * n_v")
    ax_mem.set_ylabel("peak MiB")
    for ax in (ax_speed, ax_mem):
        ax.set_xscale("log")
        ax.legend()
    fig.tight_layout()
    fig.savefig(save_path)
    plt.close(fig)
    return True
