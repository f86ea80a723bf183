"""Tests for losses, the optimiser, training runs and inference."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from hyperpoint.exceptions import CheckpointError, ConfigurationError, TrainingError
from hyperpoint.fuse_io import load_checkpoint, load_point_cloud, save_checkpoint, save_point_cloud
from hyperpoint.geom import SpectralNormalizer, partition_blocks
from hyperpoint.models import AblationRow, FusionKind, InputFeatures, TrainConfig
from hyperpoint.network import build_model
from hyperpoint.numcore import Tensor, backward
from hyperpoint.settings import RunConfig
from hyperpoint.synth import make_xor_scene, write_synth
from hyperpoint.train import (
    ABLATION_VARIANTS,
    CHECKPOINT_NAME,
    LOG_NAME,
    RUN_CONFIG_NAME,
    SPECTRAL_MAX_KEY,
    SPECTRAL_MIN_KEY,
    Adam,
    OptimState,
    PreparedBlock,
    Predictor,
    Trainer,
    adam_step,
    build_datasets,
    cross_entropy_loss,
    evaluate_blocks,
    inverse_frequency_weights,
    late_fusion_loss,
    prepare_blocks,
    read_training_log,
    run_ablation,
    split_blocks,
    summarize_ablation,
    train_from_config,
    variant_config,
)


TINY_RUN = {
    "data": {"num_classes": 5},
    "blocks": {"size": 30.0, "stride": 15.0, "n_points": 64},
    "model": {"stage_widths": [4, 4, 6, 6], "k": 4, "seed": 7},
    "train": {"lr": 0.01, "batch": 4, "epochs": 2, "val_fraction": 0.2},
    "fusion": {"embed_width": 4},
}


@pytest.fixture
def scene_path(tmp_path):
    """Coarse xor scene (900 points, 8 bands, labels 1-4) written as CSV."""
    return save_point_cloud(make_xor_scene(seed=0, spacing=2.0), tmp_path / "scene.csv")


@pytest.fixture
def run_config(scene_path):
    """Run configuration small enough to train in seconds."""
    document = {section: dict(values) for section, values in TINY_RUN.items()}
    document["data"]["cloud"] = str(scene_path)
    return RunConfig.from_dict(document)


@pytest.fixture(scope="module")
def xor_ablation(tmp_path_factory):
    """Held-out scores of the fusion and modality variants on the xor scene, seeds 0-2."""
    out_dir = tmp_path_factory.mktemp("xor")
    paths = write_synth("xor", out_dir, seed=0)
    variants = ["mid-cpa", "mid-classic", "no-cpa", "early", "geometry", "spectral"]
    return run_ablation(RunConfig.from_toml(paths[-1]), variants, [0, 1, 2], out_dir / "ablation")


def labelled_block(rng, block_id, bands=8, n=64):
    return PreparedBlock(
        block_id=block_id,
        center=(0.0, 0.0),
        indices=np.arange(n),
        coords=rng.uniform(-0.5, 0.5, size=(n, 3)),
        attrs=rng.uniform(size=(n, bands)),
        labels=rng.integers(1, 5, size=n),
    )


@pytest.mark.unit
class TestLosses:
    """Test the cross-entropy and late-fusion losses."""

    def test_uniform_logits(self):
        loss = cross_entropy_loss(Tensor(np.zeros((5, 4))), np.array([1, 2, 3, 1, 2]))
        assert loss.item() == pytest.approx(math.log(4.0))

    def test_ignored_points_do_not_count(self):
        logits = Tensor(np.array([[5.0, 0.0], [0.0, 5.0], [9.0, -9.0]]))
        with_ignored = cross_entropy_loss(logits, np.array([1, 1, 0]))
        alone = cross_entropy_loss(Tensor(logits.numpy()[:2]), np.array([1, 1]))
        assert with_ignored.item() == pytest.approx(alone.item())

    def test_class_weights(self):
        logits = Tensor(np.zeros((2, 3)))
        loss = cross_entropy_loss(logits, np.array([1, 2]), class_weights=np.array([0.0, 2.0, 0.0]))
        assert loss.item() == pytest.approx(math.log(3.0))

    def test_every_point_ignored(self):
        with pytest.raises(TrainingError):
            cross_entropy_loss(Tensor(np.zeros((3, 2))), np.zeros(3, dtype=int))

    def test_label_out_of_range(self):
        with pytest.raises(TrainingError):
            cross_entropy_loss(Tensor(np.zeros((2, 3))), np.array([1, 3]))

    def test_gradient_is_softmax_minus_target(self):
        logits = Tensor(np.zeros((2, 2)), requires_grad=True)
        grads = backward(cross_entropy_loss(logits, np.array([1, 1]), ignore_label=None))
        np.testing.assert_allclose(grads[logits], [[0.25, -0.25], [0.25, -0.25]])

    def test_late_fusion_loss(self):
        mixed = late_fusion_loss(Tensor(2.0), Tensor(4.0), 0.25)
        assert mixed.item() == pytest.approx(3.5)
        with pytest.raises(ConfigurationError):
            late_fusion_loss(Tensor(2.0), Tensor(4.0), 1.5)

    def test_inverse_frequency_weights(self):
        weights = inverse_frequency_weights(np.array([0, 1, 1, 1, 2]), 3)
        np.testing.assert_allclose(weights, [0.0, 0.5, 1.5])

    def test_inverse_frequency_needs_labels(self):
        with pytest.raises(TrainingError):
            inverse_frequency_weights(np.zeros(4, dtype=int), 3)


@pytest.mark.unit
class TestAdam:
    """Test the Adam update."""

    def test_first_step(self):
        """The first bias-corrected step moves each weight by lr against the gradient's sign."""
        w = Tensor(np.array([1.0]), requires_grad=True)
        optimizer = Adam({"w": w}, lr=0.001)
        optimizer.step({"w": np.array([0.5])})
        np.testing.assert_allclose(w.numpy(), [0.999], atol=1e-8)
        assert optimizer.state.step == 1

    def test_scalar_parameter(self):
        """A 0-d parameter such as the CPA gate stays a read-only 0-d array."""
        gamma = Tensor(0.0, requires_grad=True)
        params = {"gamma": gamma}
        adam_step(params, {"gamma": np.array(0.5)}, OptimState.for_params(params), lr=0.01)
        assert gamma.shape == ()
        assert gamma.numpy() == pytest.approx(-0.01)
        assert not gamma.data.flags.writeable

    def test_missing_gradient_leaves_parameter(self):
        params = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
        state = OptimState.for_params(params)
        adam_step(params, {"a": np.ones(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["b"].numpy(), [1.0, 1.0])
        assert np.all(params["a"].numpy() < 1.0)

    def test_non_finite_gradient_rejected_before_update(self):
        params = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
        state = OptimState.for_params(params)
        with pytest.raises(TrainingError):
            adam_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, lr=0.1)
        np.testing.assert_array_equal(params["a"].numpy(), [1.0, 1.0])
        assert state.step == 0

    def test_gradient_shape_mismatch(self):
        params = {"a": Tensor(np.ones(2), requires_grad=True)}
        with pytest.raises(TrainingError):
            adam_step(params, {"a": np.ones(3)}, OptimState.for_params(params), lr=0.1)


@pytest.mark.unit
class TestBlocks:
    """Test block preparation and splitting."""

    def test_split_is_disjoint_and_complete(self, rng):
        blocks = partition_blocks(rng.uniform(0, 150, size=(500, 3)), 75.0, 25.0)
        train, val = split_blocks(blocks, 0.25, seed=3)
        assert len(val) == round(0.25 * len(blocks))
        assert sorted(train + val) == list(range(len(blocks)))
        assert split_blocks(blocks, 0.25, seed=3) == (train, val)

    def test_split_needs_two_blocks(self, small_cloud):
        with pytest.raises(TrainingError):
            split_blocks(partition_blocks(small_cloud), 0.1, seed=0)

    def test_prepare_blocks_normalises(self, small_cloud):
        blocks = partition_blocks(small_cloud)
        normalizer = SpectralNormalizer.fit(small_cloud.attrs)
        prepared = prepare_blocks(small_cloud, blocks, normalizer, 32, seed=0)
        assert len(prepared) == 1
        block = prepared[0]
        assert block.coords.shape == (32, 3)
        assert np.abs(block.coords).max() <= 0.5 + 1e-12
        assert block.attrs.min() >= 0.0 and block.attrs.max() <= 1.0
        np.testing.assert_array_equal(block.labels, small_cloud.labels[block.indices])

    def test_build_datasets(self, run_config):
        train, val, normalizer, cloud = build_datasets(run_config)
        assert len(train) + len(val) == len(partition_blocks(cloud, 30.0, 15.0))
        assert normalizer.num_bands == 8
        assert not {b.block_id for b in train} & {b.block_id for b in val}


@pytest.mark.unit
class TestTrainer:
    """Test the training loop and its outputs."""

    def test_fit_writes_checkpoint_and_log(self, run_config, rng, tmp_path):
        model = build_model(run_config.model_config_for(8))
        train = [labelled_block(rng, i) for i in range(3)]
        val = [labelled_block(rng, 3)]
        normalizer = SpectralNormalizer.fit(rng.uniform(size=(10, 8)))
        trainer = Trainer(model, run_config.train_config(), tmp_path / "run", normalizer, run_config=run_config)
        result = trainer.fit(train, val)

        assert result.best_epoch in (1, 2)
        assert [r.epoch for r in result.history] == [1, 2]
        state = load_checkpoint(result.checkpoint_path)
        np.testing.assert_array_equal(state[SPECTRAL_MIN_KEY], normalizer.mins)
        np.testing.assert_array_equal(state[SPECTRAL_MAX_KEY], normalizer.maxs)

        assert Path(result.log_path).read_text().splitlines()[1] == "epoch,loss,val_miou"
        stored, records = read_training_log(result.log_path)
        assert stored == run_config
        assert [r.epoch for r in records] == [1, 2]
        for read, kept in zip(records, result.history):
            assert read.loss == pytest.approx(kept.loss)
            assert read.val_miou == pytest.approx(kept.val_miou)

    def test_fit_needs_labelled_blocks(self, run_config, rng, tmp_path):
        model = build_model(run_config.model_config_for(8))
        unlabelled = labelled_block(rng, 0).model_copy(update={"labels": np.zeros(64, dtype=int)})
        trainer = Trainer(model, TrainConfig(epochs=1), tmp_path, SpectralNormalizer.fit(np.ones((2, 8))))
        with pytest.raises(TrainingError):
            trainer.fit([unlabelled], [labelled_block(rng, 1)])

    def test_log_without_header(self, tmp_path):
        path = tmp_path / LOG_NAME
        path.write_text("epoch,loss,val_miou\n1,0.5,0.1\n")
        with pytest.raises(TrainingError):
            read_training_log(path)

    def test_train_from_config(self, run_config, tmp_path):
        out = tmp_path / "out"
        result = train_from_config(run_config, out)
        assert (out / CHECKPOINT_NAME).exists()
        assert (out / LOG_NAME).exists()
        assert RunConfig.from_json_file(out / RUN_CONFIG_NAME) == run_config
        assert 0.0 <= result.best_miou <= 1.0

    def test_late_fusion_trains(self, run_config, tmp_path):
        config = variant_config(run_config, "late", seed=1)
        result = train_from_config(config, tmp_path / "late")
        assert len(result.history) == 2


@pytest.mark.unit
class TestPredictor:
    """Test whole-scene inference."""

    def test_labels_every_point_in_order(self, run_config, scene_path, tmp_path):
        result = train_from_config(run_config, tmp_path / "run")
        predictor = Predictor.from_checkpoint(result.checkpoint_path, run_config)
        cloud = load_point_cloud(scene_path)
        prediction = predictor.predict(cloud)
        np.testing.assert_array_equal(prediction.cloud.coords, cloud.coords)
        assert prediction.cloud.labels.shape == (cloud.num_points,)
        assert prediction.cloud.labels.min() >= 0 and prediction.cloud.labels.max() < 5
        assert prediction.features.shape == (cloud.num_points, 4)

    def test_band_count_mismatch(self, small_cloud, tiny_model_config):
        predictor = Predictor(build_model(tiny_model_config), SpectralNormalizer.fit(np.ones((3, 2))))
        with pytest.raises(CheckpointError):
            predictor.predict(small_cloud)

    def test_checkpoint_without_normaliser(self, run_config, tmp_path):
        model = build_model(run_config.model_config_for(8))
        path = save_checkpoint(tmp_path / "bare.hpf", model.state_dict())
        with pytest.raises(CheckpointError):
            Predictor.from_checkpoint(path, run_config)


@pytest.mark.unit
class TestAblation:
    """Test ablation variants and the ablation driver."""

    def test_variant_overrides(self, run_config):
        late = variant_config(run_config, "late", seed=3)
        assert late.fusion.kind == FusionKind.LATE
        assert (late.model.seed, late.train.seed, late.blocks.seed) == (3, 3, 3)
        geometry = variant_config(run_config, "geometry", seed=0)
        assert geometry.model.input_features == InputFeatures.GEOMETRY
        assert geometry.model_config_for(8).spectral_width == 0

    def test_unknown_variant(self, run_config):
        with pytest.raises(ConfigurationError):
            variant_config(run_config, "mystery", seed=0)

    def test_every_variant_builds(self, run_config):
        for variant in ABLATION_VARIANTS:
            model = build_model(variant_config(run_config, variant, 0).model_config_for(8))
            assert model.num_parameters() > 0

    def test_run_ablation_writes_table(self, run_config, tmp_path):
        rows = run_ablation(run_config, ["mid-cpa", "spectral"], [0], tmp_path)
        assert [(r.variant, r.seed) for r in rows] == [("mid-cpa", 0), ("spectral", 0)]
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0].startswith("variant,seed,")
        assert len(lines) == 3

    def test_summarize(self):
        rows = [
            AblationRow(variant="a", seed=0, overall_accuracy=0.8, mean_f1=0.6, miou=0.5),
            AblationRow(variant="a", seed=1, overall_accuracy=0.6, mean_f1=0.4, miou=0.3),
            AblationRow(variant="b", seed=0, overall_accuracy=0.9, mean_f1=0.7, miou=0.6),
        ]
        summary = summarize_ablation(rows)
        assert list(summary) == ["a", "b"]
        assert summary["a"] == pytest.approx((0.7, 0.5))


@pytest.mark.slow
class TestBenchmarks:
    """End-to-end training runs on synthetic scenes."""

    def test_overfit_scene(self, tmp_path):
        """The written overfit config reaches 95% training-point accuracy inside ten minutes."""
        paths = write_synth("overfit", tmp_path, seed=0)
        config = RunConfig.from_toml(paths[-1])
        assert config.model.stage_widths == [32, 64, 128, 256]
        assert config.fusion.kind == FusionKind.MID_CPA

        started = time.perf_counter()
        result = train_from_config(config, tmp_path / "run")
        elapsed = time.perf_counter() - started

        train, _, _, _ = build_datasets(config)
        predictor = Predictor.from_checkpoint(result.checkpoint_path, config)
        assert evaluate_blocks(predictor.model, train).overall_accuracy >= 0.95
        assert elapsed < 600.0

    def test_fused_model_beats_single_modalities(self, xor_ablation):
        summary = summarize_ablation(xor_ablation)
        fused_oa = summary["mid-cpa"][0]
        assert fused_oa >= 0.90
        assert summary["geometry"][0] <= 0.70
        assert summary["spectral"][0] <= 0.70

    def test_fusion_ordering(self, xor_ablation):
        """Mean F1 over seeds: mid-cpa >= mid-classic >= early, and CPA adds at least 2 points over no-cpa."""
        mean_f1 = {variant: f1 for variant, (_, f1) in summarize_ablation(xor_ablation).items()}
        assert mean_f1["mid-cpa"] >= mean_f1["mid-classic"] >= mean_f1["early"]
        assert mean_f1["mid-cpa"] - mean_f1["no-cpa"] >= 0.02
