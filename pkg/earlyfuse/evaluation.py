"""Frozen-feature probes and the fusion ablation grid.

Features are mean-pooled final-layer tokens of one family: ``visual``,
``audio``, ``fusion`` or ``concat`` (pooled visual and audio side by side).
Two probes read them: a multinomial logistic regression trained by
full-batch gradient descent, and leave-one-out cosine nearest-neighbour
retrieval.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .encoder import FusionConfig, fusion_layers_for
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, no_grad
from .tokenization import AVArrays, InputConfig, SyntheticAVSource, synthetic_arrays

logger = logging.getLogger(__name__)

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    HAS_VISUALIZATION_DEPS = True
except ImportError:
    HAS_VISUALIZATION_DEPS = False

FEATURE_FAMILIES = ("visual", "audio", "fusion", "concat")
PROBE_TASKS = ("class_id", "cross_label")

# data streams for the probe's own train and eval sets
PROBE_TRAIN_STREAM, PROBE_EVAL_STREAM = 4, 5


@dataclass
class ProbeResult:
    feature_family: str
    task: str
    accuracy: float
    n_eval: int
    seed: int = 0
    method: str = "linear"

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


def available_families(fusion_cfg: FusionConfig) -> List[str]:
    """Families a model built from ``fusion_cfg`` can be probed on."""
    if fusion_cfg.resolved_fusion_layers():
        return list(FEATURE_FAMILIES)
    return [f for f in FEATURE_FAMILIES if f != "fusion"]


def pool_tokens(tokens: Tensor) -> np.ndarray:
    """Mean over the token axis of a ``[B, N, D]`` tensor."""
    if tokens.ndim != 3:
        raise DimensionError("pool_tokens", tokens.shape, detail="expected [B, N, D]")
    return tokens.data.mean(axis=1)


def extract_features(model: Any, batch: AVArrays, family: str, chunk_size: int = 64) -> np.ndarray:
    """Pooled ``[B, D]`` features of one token family from unmasked inputs."""
    if family not in FEATURE_FAMILIES:
        raise ConfigurationError(f"Unknown feature family {family!r}; expected one of {FEATURE_FAMILIES}",
                                 key="probe.families")
    if family not in available_families(model.fusion_cfg):
        raise ConfigurationError(
            f"Feature family {family!r} is unavailable: no layer fuses under fusion_mode "
            f"{model.fusion_cfg.fusion_mode!r}", key="probe.families",
        )
    chunks = []
    with no_grad():
        for start in range(0, len(batch), chunk_size):
            out = model.encode(batch.images[start:start + chunk_size], batch.spectrograms[start:start + chunk_size])
            if family == "concat":
                chunks.append(np.concatenate([pool_tokens(out.visual), pool_tokens(out.audio)], axis=1))
            else:
                chunks.append(pool_tokens(getattr(out, family)))
    return np.concatenate(chunks, axis=0)


def _check_labels(labels: np.ndarray, n: int, name: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError("linear_probe", labels.shape, (n,), detail=f"{name} labels vs features")
    return labels


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(features_train: np.ndarray, labels_train: np.ndarray, features_eval: np.ndarray,
                 labels_eval: np.ndarray, l2: float = 1e-4, tol: float = 1e-6,
                 max_iter: int = 5000, feature_family: str = "", task: str = "") -> ProbeResult:
    """Multinomial logistic regression on frozen features.

    Features are standardized with training statistics. Weights start at zero
    and follow full-batch gradient descent with step ``1 / L`` (``L`` the
    Lipschitz constant of the regularized loss) until the loss changes by less
    than ``tol``. The solve is deterministic, so no seed is involved.
    """
    x_train = np.asarray(features_train, dtype=np.float64)
    x_eval = np.asarray(features_eval, dtype=np.float64)
    if x_train.ndim != 2 or x_eval.ndim != 2 or x_train.shape[1] != x_eval.shape[1]:
        raise DimensionError("linear_probe", x_train.shape, x_eval.shape, detail="expected [N, D] feature matrices")
    y_train = _check_labels(labels_train, len(x_train), "train")
    y_eval = _check_labels(labels_eval, len(x_eval), "eval")
    if len(x_eval) == 0:
        raise ConfigurationError("Linear probe needs a non-empty evaluation set")

    classes = np.unique(y_train)
    if len(classes) < 2:
        raise ConfigurationError(f"Linear probe needs at least 2 classes, training labels have {len(classes)}")

    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std[std < 1e-12] = 1.0
    x_train = np.hstack([(x_train - mean) / std, np.ones((len(x_train), 1))])
    x_eval = np.hstack([(x_eval - mean) / std, np.ones((len(x_eval), 1))])

    n, k = len(x_train), len(classes)
    onehot = (y_train[:, None] == classes[None, :]).astype(np.float64)
    lipschitz = 0.5 * np.linalg.norm(x_train, 2) ** 2 / n + l2
    step = 1.0 / lipschitz
    weights = np.zeros((x_train.shape[1], k))

    prev_loss = np.inf
    for iteration in range(max_iter):
        probs = _softmax(x_train @ weights)
        loss = -np.mean(np.log(np.sum(probs * onehot, axis=1) + 1e-12)) + 0.5 * l2 * np.sum(weights[:-1] ** 2)
        if abs(prev_loss - loss) < tol:
            break
        prev_loss = loss
        grad = x_train.T @ (probs - onehot) / n
        grad[:-1] += l2 * weights[:-1]
        weights -= step * grad
    logger.debug(f"Linear probe stopped after {iteration + 1} iterations at loss {loss:.6f}")

    predicted = classes[np.argmax(x_eval @ weights, axis=1)]
    accuracy = float(np.mean(predicted == y_eval))
    return ProbeResult(feature_family, task, accuracy, len(y_eval), method="linear")


def nn_retrieval(features: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Leave-one-out cosine-similarity ``k``-NN label accuracy.

    With ``k > 1`` the majority label among the neighbours wins; ties go to
    the label of the closest tied neighbour.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.size == 0 or len(x) == 0:
        raise ConfigurationError("Retrieval needs at least one sample")
    if x.ndim != 2 or labels.shape != (len(x),):
        raise DimensionError("nn_retrieval", x.shape, labels.shape)
    if len(x) < 2:
        raise ConfigurationError("Leave-one-out retrieval needs at least two samples")
    k = min(k, len(x) - 1)

    unit = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    similarity = unit @ unit.T
    np.fill_diagonal(similarity, -np.inf)
    neighbours = np.argsort(-similarity, axis=1, kind="stable")[:, :k]

    correct = 0
    for i, row in enumerate(neighbours):
        votes = labels[row]
        values, counts = np.unique(votes, return_counts=True)
        winners = set(values[counts == counts.max()])
        predicted = next(v for v in votes if v in winners)
        correct += int(predicted == labels[i])
    return correct / len(x)


def probe_model(model: Any, train: AVArrays, evaluation: AVArrays, families: Optional[Sequence[str]] = None,
                tasks: Sequence[str] = PROBE_TASKS, seed: int = 0) -> List[ProbeResult]:
    """Linear-probe every requested (family, task) pair."""
    families = list(families) if families else available_families(model.fusion_cfg)
    results = []
    for family in families:
        f_train = extract_features(model, train, family)
        f_eval = extract_features(model, evaluation, family)
        for task in tasks:
            result = linear_probe(f_train, train.labels(task), f_eval, evaluation.labels(task),
                                  feature_family=family, task=task)
            results.append(replace(result, seed=seed))
            logger.info(f"Probe {family}/{task}: accuracy {results[-1].accuracy:.3f}")
    return results


def probe_sets(input_cfg: InputConfig, classes: int, seed: int, n_train: int, n_eval: int,
               noise: float = 0.3):
    """Fixed train/eval arrays for probing a model pretrained with ``seed``."""
    train = synthetic_arrays(n_train, classes, [seed, PROBE_TRAIN_STREAM], input_cfg, noise)
    evaluation = synthetic_arrays(n_eval, classes, [seed, PROBE_EVAL_STREAM], input_cfg, noise)
    return train, evaluation


@dataclass
class AblationSpec:
    """One grid cell: pretrain with matched budget, then probe."""

    name: str
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: Any = None
    decoder: Any = None
    input: InputConfig = field(default_factory=InputConfig)
    classes: int = 4
    n_probe_train: int = 256
    n_probe_eval: int = 256
    families: Optional[List[str]] = None
    tasks: List[str] = field(default_factory=lambda: list(PROBE_TASKS))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "fusion": asdict(self.fusion),
            "train": asdict(self.train) if self.train is not None else None,
            "decoder": asdict(self.decoder) if self.decoder is not None else None,
            "input": asdict(self.input),
            "classes": self.classes,
            "n_probe_train": self.n_probe_train,
            "n_probe_eval": self.n_probe_eval,
            "families": self.families,
            "tasks": list(self.tasks),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AblationSpec":
        from .pretraining import DecoderConfig, TrainConfig

        return cls(
            name=data["name"],
            fusion=FusionConfig(**data["fusion"]),
            train=TrainConfig(**data["train"]) if data.get("train") else None,
            decoder=DecoderConfig(**data["decoder"]) if data.get("decoder") else None,
            input=InputConfig(**data["input"]),
            classes=data.get("classes", 4),
            n_probe_train=data.get("n_probe_train", 256),
            n_probe_eval=data.get("n_probe_eval", 256),
            families=data.get("families"),
            tasks=list(data.get("tasks", PROBE_TASKS)),
        )


def run_ablation_cell(spec: AblationSpec) -> Dict[str, Any]:
    """Pretrain and probe one configuration; rows are plain dicts."""
    from .pretraining import TrainConfig, pretrain

    train_cfg = spec.train or TrainConfig()
    source = SyntheticAVSource(spec.input, spec.classes, train_cfg.seed)
    result = pretrain(source, spec.fusion, train_cfg, decoder_cfg=spec.decoder, input_cfg=spec.input)
    train, evaluation = probe_sets(spec.input, spec.classes, train_cfg.seed, spec.n_probe_train, spec.n_probe_eval)
    probes = probe_model(result.model, train, evaluation, spec.families, spec.tasks, seed=train_cfg.seed)
    losses = [r["loss_total"] for r in result.history if r.get("kind") == "loss"]
    return {
        "cell": spec.name,
        "final_loss": losses[-1] if losses else None,
        "rows": [asdict(p) for p in probes],
    }


def ablation_specs(base: AblationSpec, axis: str, values: Sequence[Any]) -> List[AblationSpec]:
    """Vary one ablation axis of ``base``, everything else held fixed.

    Axes: ``fusion_layers`` (presets early/mid/late/none, or a count of last
    layers), ``num_fusion_tokens``, ``num_agg`` (both aggregation counts),
    ``fusion_mode``, and ``seed``.
    """
    from .pretraining import TrainConfig

    specs = []
    for value in values:
        fusion = replace(base.fusion)
        train = replace(base.train) if base.train is not None else TrainConfig()
        if axis == "fusion_layers":
            layers = fusion_layers_for(fusion.depth, value) if isinstance(value, str) else \
                tuple(range(fusion.depth - int(value) + 1, fusion.depth + 1))
            if layers:
                fusion = replace(fusion, fusion_layers=list(layers))
            else:
                fusion = replace(fusion, fusion_mode="none", fusion_layers=None)
        elif axis == "num_fusion_tokens":
            fusion = replace(fusion, num_fusion_tokens=int(value))
        elif axis == "num_agg":
            fusion = replace(fusion, num_agg_audio=int(value), num_agg_visual=int(value))
        elif axis == "fusion_mode":
            fusion = replace(fusion, fusion_mode=value)
        elif axis == "seed":
            train = replace(train, seed=int(value))
        else:
            raise ConfigurationError(f"Unknown ablation axis {axis!r}", key="ablation.axis")
        specs.append(replace(base, name=f"{base.name}/{axis}={value}", fusion=fusion, train=train))
    return specs


ABLATION_COLUMNS = [
    "cell", "fusion_mode", "fusion_layers", "num_fusion_tokens", "num_agg_audio", "num_agg_visual", "seed",
    "feature_family", "task", "accuracy", "n_eval", "final_loss", "status", "error",
]


def ablation_grid(specs: Sequence[AblationSpec], manager: Any = None) -> pd.DataFrame:
    """Run every cell and return one row per (cell, family, task).

    Failed cells contribute a single row with ``status == "error"``; the grid
    carries on. ``manager`` defaults to an in-process grid.
    """
    if not specs:
        raise ConfigurationError("Ablation grid is empty", key="ablation")
    from .swarm import GridCell, GridManager, GridNode

    if manager is None:
        manager = GridManager()
        manager.register_node(GridNode("local"))
    by_name = {spec.name: spec for spec in specs}
    if len(by_name) != len(specs):
        raise ConfigurationError("Ablation cell names must be unique", key="ablation")
    for spec in specs:
        manager.add_cell(GridCell(spec.name, "ablation", spec.to_dict()))

    start_time = time.time()
    outcomes = manager.execute_cells()
    rows = []
    for name in sorted(by_name):
        spec, outcome = by_name[name], outcomes[name]
        train_seed = spec.train.seed if spec.train is not None else 0
        common = {
            "cell": name,
            "fusion_mode": spec.fusion.fusion_mode,
            "fusion_layers": json.dumps(list(spec.fusion.resolved_fusion_layers())),
            "num_fusion_tokens": spec.fusion.num_fusion_tokens,
            "num_agg_audio": spec.fusion.num_agg_audio,
            "num_agg_visual": spec.fusion.num_agg_visual,
            "seed": train_seed,
        }
        if outcome["status"] != "success":
            rows.append({**common, "status": "error", "error": outcome.get("error", "")})
            continue
        for probe in outcome["result"]["rows"]:
            rows.append({
                **common,
                "feature_family": probe["feature_family"],
                "task": probe["task"],
                "accuracy": probe["accuracy"],
                "n_eval": probe["n_eval"],
                "final_loss": outcome["result"]["final_loss"],
                "status": "success",
                "error": "",
            })
    logger.info(f"Ablation grid of {len(specs)} cells finished in {time.time() - start_time:.3f}s")
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


def retrieval_frame(history: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """Retrieval records from a metrics stream, one row per (step, family, task)."""
    rows = [r for r in history if r.get("kind") == "retrieval"]
    return pd.DataFrame(rows, columns=["step", "family", "task", "accuracy"])


def plot_retrieval(history: Sequence[Dict[str, Any]], save_path: Union[str, Path]) -> bool:
    """Retrieval accuracy against training step, one panel per task."""
    if not HAS_VISUALIZATION_DEPS:
        logger.error("Cannot plot retrieval curves. Please install matplotlib: pip install earlyfuse[viz]")
        return False
    frame = retrieval_frame(history)
    if frame.empty:
        logger.warning("No retrieval records to plot; set train.probe_every")
        return False
    tasks = sorted(frame["task"].unique())
    fig, axes = plt.subplots(1, len(tasks), figsize=(6 * len(tasks), 5), squeeze=False)
    for ax, task in zip(axes[0], tasks):
        for family, group in frame[frame["task"] == task].groupby("family"):
            group = group.sort_values("step")
            ax.plot(group["step"], group["accuracy"], marker="o", label=family)
        ax.set_title(task)
        ax.set_xlabel("step")
        ax.set_ylabel("1-NN accuracy")
        ax.set_ylim(0, 1)
        ax.legend()
    fig.tight_layout()
    fig.savefig(save_path)
    plt.close(fig)
    return True
