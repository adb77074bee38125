"""Command-line entry point: ``earlyfuse [--debug N] <command> ...``.

Exit codes: 0 ok, 1 runtime failure (including all bench cells failing or a
gradient check violation), 2 configuration error, 3 non-finite loss,
4 architecture mismatch.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import pandas as pd

from .benchmark import BenchConfig, expand_grid, pair_counts, plot_sweep, reports_frame, sweep
from .checkpoint import check_architecture, inspect_checkpoint, load_checkpoint
from .config import RunConfig, load_config
from .debug import DEBUG_BASIC, set_debug_level
from .errors import (
    ArchitectureMismatchError,
    ConfigurationError,
    EarlyFuseError,
    NonFiniteLossError,
)
from .evaluation import FEATURE_FAMILIES, PROBE_TASKS, ProbeResult, plot_retrieval, probe_model, probe_sets
from .gradcheck import CHECKS, GROUPS, format_report, run_gradcheck
from .pretraining import AudioVisualMAE, Pretrainer
from .tokenization import ArrayAVSource, SyntheticAVSource, load_raw_directory
from .utils.validation import reject_unknown_keys

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NON_FINITE = 3
EXIT_ARCHITECTURE = 4


def build_source(config: RunConfig) -> Any:
    if config.data.source == "raw":
        return ArrayAVSource(load_raw_directory(config.data.path))
    return SyntheticAVSource(config.input, config.data.classes, config.train.seed, config.data.noise)


def build_model(config: RunConfig) -> AudioVisualMAE:
    return AudioVisualMAE.from_seed(config.model, config.decoder, config.input, config.train.seed)


def _claim_output_dir(run_dir: Path, resuming: bool) -> None:
    if run_dir.exists() and any(run_dir.iterdir()) and not resuming:
        raise ConfigurationError(
            f"Output directory {run_dir} already exists; choose another output.run_name or pass --resume",
            key="output.run_name",
        )
    run_dir.mkdir(parents=True, exist_ok=True)


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.overrides)
    run_dir = config.output.run_dir
    _claim_output_dir(run_dir, resuming=args.resume is not None)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    model = build_model(config)
    trainer = Pretrainer(model, build_source(config), config.train, output_dir=run_dir,
                         config_snapshot=config.to_dict())
    if args.resume is not None:
        data = load_checkpoint(args.resume)
        check_architecture(model, data)
        trainer.resume(data)

    result = trainer.run(args.steps)
    losses = [r for r in result.history if r.get("kind") == "loss"]
    if losses:
        print(f"Finished at step {result.final_step}: loss {losses[-1]['loss_total']:.4f}")
    for path in result.checkpoints:
        print(f"Checkpoint: {path}")
    print(f"Metrics: {trainer.metrics_path}")
    if args.plot is not None:
        plot_retrieval(result.history, args.plot)
    return EXIT_OK


def _probe_arrays(config: RunConfig, samples: int):
    if config.data.source == "raw":
        source = ArrayAVSource(load_raw_directory(config.data.path))
        half = len(source.arrays) // 2
        if half < 1:
            raise ConfigurationError("Raw dataset needs at least two samples to probe", key="data.path")
        return source.batch(0, half), source.batch(1, half)
    return probe_sets(config.input, config.data.classes, config.train.seed, samples, samples, config.data.noise)


def cmd_probe(args: argparse.Namespace) -> int:
    data = load_checkpoint(args.checkpoint)
    if args.config is not None:
        config = load_config(args.config)
    elif data.config:
        config = RunConfig.from_dict(data.config).validate()
    else:
        raise ConfigurationError("Checkpoint carries no configuration; pass --config", key="config")

    model = build_model(config)
    check_architecture(model, data)
    model.load_state_dict(data.params)

    train, evaluation = _probe_arrays(config, args.samples)
    results = probe_model(model, train, evaluation, args.families, args.tasks, seed=config.train.seed)
    frame = _results_frame(results)
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out, index=False)
        print(f"Wrote {len(frame)} probe rows to {out}")
    else:
        print(frame.to_csv(index=False), end="")
    return EXIT_OK


def _results_frame(results: Sequence[ProbeResult]) -> pd.DataFrame:
    columns = [f.name for f in fields(ProbeResult)]
    return pd.DataFrame([asdict(r) for r in results], columns=columns)


_GRID_SECTIONS = ["base", "axes", "cells"]


def load_bench_grid(path: Path) -> List[BenchConfig]:
    """Read a grid file: ``[base]`` + ``[axes]`` tables, or ``[[cells]]``."""
    if not path.is_file():
        raise ConfigurationError(f"Grid file not found: {path}", key=str(path))
    try:
        with open(path, "rb") as f:
            table = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"Cannot parse {path}: {e}", key=str(path)) from e
    reject_unknown_keys(table, _GRID_SECTIONS)

    allowed = [f.name for f in fields(BenchConfig)]
    configs: List[BenchConfig] = []
    for i, cell in enumerate(table.get("cells", [])):
        reject_unknown_keys(cell, allowed)
        configs.append(BenchConfig(**{"config_id": f"cell{i}", **cell}))
    if "base" in table or "axes" in table:
        base, axes = table.get("base", {}), table.get("axes", {})
        reject_unknown_keys(base, allowed)
        reject_unknown_keys(axes, allowed)
        for key, values in axes.items():
            if not isinstance(values, list) or not values:
                raise ConfigurationError(f"Axis {key} must be a nonempty list", key=f"axes.{key}")
        configs.extend(expand_grid(base, axes))
    return configs


def _reduction_summary(configs: Sequence[BenchConfig]) -> List[str]:
    seen: Dict[Tuple[int, int, int, int], str] = {}
    for cfg in configs:
        if cfg.fusion_mode != "factorized":
            continue
        key = (cfg.n_v, cfg.n_a, cfg.n_agg_v, cfg.n_agg_a)
        if key not in seen:
            counts = pair_counts(*key)
            seen[key] = (f"n_v={cfg.n_v} n_a={cfg.n_a}: dense {counts.dense} pairs, "
                         f"factorized {counts.factorized} pairs, reduction {counts.ratio:.1f}x")
    return [seen[key] for key in sorted(seen)]


def cmd_bench(args: argparse.Namespace) -> int:
    configs = load_bench_grid(Path(args.grid))
    manager = None
    remote = []
    if args.nodes:
        from .swarm import GridManager, RemoteGridNode

        manager = GridManager(debug=args.debug > DEBUG_BASIC)
        for address in args.nodes:
            node = RemoteGridNode(address)
            remote.append(node)
            manager.register_node(node)
    try:
        reports = sweep(configs, args.out, manager=manager)
    finally:
        for node in remote:
            node.close()

    frame = reports_frame(reports)
    if args.out is None:
        print(frame.to_csv(index=False), end="")
    else:
        print(f"Wrote {len(frame)} bench rows to {args.out}")
    for line in _reduction_summary(configs):
        print(line)
    if args.plot is not None:
        plot_sweep(reports, args.plot)

    failed = [r.config_id for r in reports if r.status != "success"]
    if failed:
        print(f"Failed cells: {', '.join(failed)}", file=sys.stderr)
    return EXIT_FAILURE if len(failed) == len(reports) else EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck(args.scope, seed=args.seed)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_inspect(args: argparse.Namespace) -> int:
    data = load_checkpoint(args.checkpoint)
    frame = inspect_checkpoint(data)
    print(f"Checkpoint {args.checkpoint}")
    print(f"  format version: {data.format_version}")
    print(f"  step: {data.step}")
    print(f"  tensors: {len(frame)} ({int(frame['numel'].sum())} values)")
    print(f"  optimizer state: {'yes' if data.optimizer is not None else 'no'}")
    if data.config:
        model = data.config.get("model", {})
        print(f"  fusion_mode: {model.get('fusion_mode')}, depth: {model.get('depth')}")
    print()
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_worker(args: argparse.Namespace) -> int:
    from .swarm import GridNode, serve

    node = GridNode(args.node_id or f"worker-{args.port}")
    print(f"Serving grid node {node.node_id} on port {args.port}")
    serve(node, args.port, debug=args.debug > DEBUG_BASIC)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earlyfuse", description="Early-fusion audio-visual pretraining toolkit")
    parser.add_argument("--debug", type=int, default=DEBUG_BASIC, choices=range(4), metavar="N",
                        help="Debug level 0-3 (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="Pretrain a model with the masked reconstruction objective")
    p.add_argument("config", help="TOML configuration file")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="Configuration overrides")
    p.add_argument("--resume", metavar="CKPT", help="Checkpoint to resume from")
    p.add_argument("--steps", type=int, help="Run at most this many steps")
    p.add_argument("--plot", metavar="PNG", help="Save retrieval-vs-step curves (needs train.probe_every)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="Linear-probe a checkpoint's features")
    p.add_argument("checkpoint")
    p.add_argument("--families", nargs="+", choices=FEATURE_FAMILIES)
    p.add_argument("--tasks", nargs="+", choices=PROBE_TASKS, default=list(PROBE_TASKS))
    p.add_argument("--samples", type=int, default=256, help="Probe samples per split")
    p.add_argument("--out", metavar="CSV")
    p.add_argument("--config", help="Configuration to use instead of the checkpoint's own")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("bench", help="Forward-pass throughput and memory sweep")
    p.add_argument("grid", help="TOML grid file")
    p.add_argument("--out", metavar="CSV")
    p.add_argument("--nodes", nargs="+", metavar="HOST:PORT", help="Run cells on remote workers")
    p.add_argument("--plot", metavar="PNG", help="Save throughput and memory plots")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    p.add_argument("--scope", nargs="+", metavar="NAME",
                   help=f"Check names or groups ({', '.join(GROUPS)}); default all of {len(CHECKS)}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="Summarize a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("worker", help="Serve grid cells over gRPC")
    p.add_argument("--port", type=int, default=50051)
    p.add_argument("--node-id")
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    set_debug_level(args.debug)
    try:
        return args.func(args)
    except ArchitectureMismatchError as e:
        print(f"error: architecture mismatch: {e}", file=sys.stderr)
        return EXIT_ARCHITECTURE
    except ConfigurationError as e:
        print(f"error: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NON_FINITE
    except EarlyFuseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
