"""Unit tests for frozen-feature probes and the ablation grid."""

import numpy as np
import pytest
from conftest import TINY_INPUT, tiny_decoder, tiny_fusion, tiny_model, tiny_train

from earlyfuse.errors import ConfigurationError, DimensionError
from earlyfuse.evaluation import (
    ABLATION_COLUMNS,
    HAS_VISUALIZATION_DEPS,
    AblationSpec,
    ablation_grid,
    ablation_specs,
    available_families,
    extract_features,
    linear_probe,
    nn_retrieval,
    plot_retrieval,
    probe_model,
    probe_sets,
    retrieval_frame,
)
from earlyfuse.swarm import GridManager, GridNode
from earlyfuse.tokenization import synthetic_arrays


def blobs(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(3, size=n)
    centres = np.array([[4.0, 0.0], [0.0, 4.0], [-4.0, -4.0]])
    return centres[labels] + rng.standard_normal((n, 2)) * 0.3, labels


def test_linear_probe_separable():
    """Test well separated clusters are classified perfectly."""
    x_train, y_train = blobs(90, 0)
    x_eval, y_eval = blobs(60, 1)
    result = linear_probe(x_train, y_train, x_eval, y_eval, feature_family="visual", task="class_id")
    assert result.accuracy == 1.0
    assert result.n_eval == 60
    assert result.feature_family == "visual"


def test_linear_probe_is_deterministic():
    """Test equal inputs give equal accuracy."""
    x, y = blobs(40, 2)
    noisy = x + np.random.default_rng(3).standard_normal(x.shape) * 3
    first = linear_probe(noisy, y, noisy, y)
    assert first == linear_probe(noisy, y, noisy, y)


def test_linear_probe_errors():
    """Test mismatched shapes and single-class training sets are refused."""
    x, y = blobs(10, 0)
    with pytest.raises(DimensionError):
        linear_probe(x, y[:5], x, y)
    with pytest.raises(DimensionError):
        linear_probe(x, y, x[:, :1], y)
    with pytest.raises(ConfigurationError):
        linear_probe(x, np.zeros(10, dtype=int), x, y)


def test_nn_retrieval_hand_example():
    """Test leave-one-out nearest neighbours by cosine similarity."""
    features = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    assert nn_retrieval(features, np.array([0, 0, 1, 1])) == 1.0
    assert nn_retrieval(features, np.array([0, 1, 0, 1])) == 0.0


def test_nn_retrieval_majority_vote():
    """Test k neighbours vote on the label."""
    features = np.array([[1.0, 0.0], [0.99, 0.05], [0.98, 0.1], [0.0, 1.0]])
    labels = np.array([0, 0, 0, 1])
    assert nn_retrieval(features, labels, k=3) == 0.75


def test_nn_retrieval_needs_two_samples():
    """Test leave-one-out needs something to compare against."""
    with pytest.raises(ConfigurationError):
        nn_retrieval(np.ones((1, 2)), np.array([0]))


def balanced_labels(n, classes, rng):
    return rng.permutation(np.tile(np.arange(classes), n // classes))


def test_linear_probe_on_shuffled_labels_is_chance():
    """Test a probe trained and scored on shuffled labels lands within 5 points of chance."""
    x_train, _ = blobs(800, 2)
    x_eval, _ = blobs(4000, 3)
    rng = np.random.default_rng(4)
    result = linear_probe(x_train, balanced_labels(800, 4, rng), x_eval, balanced_labels(4000, 4, rng))
    assert abs(result.accuracy - 0.25) <= 0.05


def test_nn_retrieval_on_random_features_is_chance():
    """Test retrieval over Gaussian noise with 4 balanced classes scores about 0.25."""
    rng = np.random.default_rng(5)
    features = rng.standard_normal((2000, 16))
    assert abs(nn_retrieval(features, balanced_labels(2000, 4, rng)) - 0.25) <= 0.05


def test_available_families():
    """Test the fusion family disappears when nothing fuses."""
    assert available_families(tiny_fusion()) == ["visual", "audio", "fusion", "concat"]
    assert "fusion" not in available_families(tiny_fusion(fusion_mode="none"))


def test_extract_features_shapes():
    """Test pooled features are [B, D] and concat is [B, 2D]."""
    model = tiny_model()
    batch = synthetic_arrays(5, 3, 0, TINY_INPUT)
    assert extract_features(model, batch, "visual").shape == (5, 16)
    assert extract_features(model, batch, "fusion").shape == (5, 16)
    assert extract_features(model, batch, "concat").shape == (5, 32)


def test_extract_features_chunking_is_invisible():
    """Test chunked extraction matches one pass."""
    model = tiny_model()
    batch = synthetic_arrays(5, 3, 0, TINY_INPUT)
    np.testing.assert_allclose(extract_features(model, batch, "audio", chunk_size=2),
                               extract_features(model, batch, "audio"), atol=1e-6)


def test_extract_features_errors():
    """Test unknown families and the fusion family without fusion are refused."""
    batch = synthetic_arrays(2, 3, 0, TINY_INPUT)
    with pytest.raises(ConfigurationError):
        extract_features(tiny_model(), batch, "spectral")
    with pytest.raises(ConfigurationError, match="unavailable"):
        extract_features(tiny_model(fusion_mode="none"), batch, "fusion")


def test_probe_model_rows():
    """Test every family and task gets one probe result."""
    train, evaluation = probe_sets(TINY_INPUT, 3, 0, 24, 12)
    results = probe_model(tiny_model(), train, evaluation, families=["visual", "concat"], seed=7)
    assert [(r.feature_family, r.task) for r in results] == [
        ("visual", "class_id"), ("visual", "cross_label"), ("concat", "class_id"), ("concat", "cross_label"),
    ]
    assert all(r.n_eval == 12 and r.seed == 7 for r in results)


def base_spec(name="tiny"):
    return AblationSpec(name=name, fusion=tiny_fusion(), train=tiny_train(total_epochs=1),
                        decoder=tiny_decoder(), input=TINY_INPUT, classes=3, n_probe_train=12, n_probe_eval=12)


def test_ablation_specs_fusion_layers():
    """Test depth presets vary only the fused layers."""
    specs = ablation_specs(base_spec(), "fusion_layers", ["early", "late", "none"])
    assert [s.fusion.resolved_fusion_layers() for s in specs] == [(1, 2), (2,), ()]
    assert specs[2].fusion.fusion_mode == "none"
    assert specs[1].name == "tiny/fusion_layers=late"
    assert all(s.fusion.embed_dim == 16 for s in specs)


def test_ablation_specs_other_axes():
    """Test token counts and seeds vary one at a time."""
    agg = ablation_specs(base_spec(), "num_agg", [1, 4])
    assert [(s.fusion.num_agg_audio, s.fusion.num_agg_visual) for s in agg] == [(1, 1), (4, 4)]
    seeds = ablation_specs(base_spec(), "seed", [0, 1])
    assert [s.train.seed for s in seeds] == [0, 1]
    with pytest.raises(ConfigurationError):
        ablation_specs(base_spec(), "learning_rate", [1])


def test_ablation_spec_dict_round_trip():
    """Test a cell survives its wire dict."""
    spec = base_spec()
    assert AblationSpec.from_dict(spec.to_dict()) == spec


def test_ablation_grid_runs_cells():
    """Test a real two-cell grid gives one row per cell, family and task."""
    specs = ablation_specs(base_spec(), "fusion_mode", ["none", "factorized"])
    frame = ablation_grid(specs)
    assert list(frame.columns) == ABLATION_COLUMNS
    assert (frame["status"] == "success").all()
    none_rows = frame[frame["fusion_mode"] == "none"]
    assert set(none_rows["feature_family"]) == {"visual", "audio", "concat"}
    assert len(frame) == 2 * 3 + 4 * 2
    assert frame["accuracy"].between(0, 1).all()


def test_ablation_grid_records_failures():
    """Test a failing cell becomes an error row and the others still run."""
    def handler(spec):
        if spec["name"].endswith("=2"):
            raise RuntimeError("out of memory")
        return {"cell": spec["name"], "final_loss": 1.0,
                "rows": [{"feature_family": "visual", "task": "class_id", "accuracy": 0.5, "n_eval": 12}]}

    manager = GridManager()
    manager.register_node(GridNode("fake", handlers={"ablation": handler}))
    frame = ablation_grid(ablation_specs(base_spec(), "num_fusion_tokens", [1, 2, 3]), manager)
    assert list(frame["status"]) == ["success", "error", "success"]
    assert "out of memory" in frame.loc[1, "error"]


def test_ablation_grid_rejects_empty_and_duplicates():
    """Test empty grids and repeated cell names are configuration errors."""
    with pytest.raises(ConfigurationError):
        ablation_grid([])
    with pytest.raises(ConfigurationError):
        ablation_grid([base_spec("a"), base_spec("a")])


HISTORY = [
    {"kind": "loss", "step": 0, "loss_total": 1.0},
    {"kind": "retrieval", "step": 0, "family": "visual", "task": "class_id", "accuracy": 0.25},
    {"kind": "retrieval", "step": 2, "family": "visual", "task": "class_id", "accuracy": 0.5},
    {"kind": "retrieval", "step": 2, "family": "fusion", "task": "cross_label", "accuracy": 0.75},
]


def test_retrieval_frame_keeps_only_retrieval_records():
    """Test loss records are dropped from the retrieval table."""
    frame = retrieval_frame(HISTORY)
    assert list(frame.columns) == ["step", "family", "task", "accuracy"]
    assert frame["accuracy"].tolist() == [0.25, 0.5, 0.75]


@pytest.mark.skipif(not HAS_VISUALIZATION_DEPS, reason="matplotlib not installed")
def test_plot_retrieval(tmp_path):
    """Test retrieval curves are written, and nothing is written without records."""
    assert plot_retrieval(HISTORY, tmp_path / "curves.png")
    assert (tmp_path / "curves.png").exists()
    assert not plot_retrieval(HISTORY[:1], tmp_path / "empty.png")
    assert not (tmp_path / "empty.png").exists()
