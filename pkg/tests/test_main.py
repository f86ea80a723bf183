"""Tests for the command-line application."""

import numpy as np
import pytest

from hyperpoint.fuse_io import load_point_cloud, load_raster, save_point_cloud, save_raster
from hyperpoint.main import ApplicationRunner, create_argument_parser, main
from hyperpoint.models import PointCloud, RasterGrid
from hyperpoint.settings import AppSettings
from hyperpoint.synth import make_xor_scene
from hyperpoint.train import ABLATION_VARIANTS, RUN_CONFIG_NAME


TINY_TOML = """
[data]
cloud = "scene.csv"
num_classes = 5

[blocks]
size = 30.0
stride = 15.0
n_points = 64

[model]
stage_widths = [4, 4, 6, 6]
k = 4
seed = 7

[train]
lr = 0.01
batch = 4
epochs = 1
val_fraction = 0.2

[fusion]
embed_width = 4
"""


def write_cloud(path, coords, labels=None):
    coords = np.asarray(coords, dtype=np.float64)
    cloud = PointCloud(coords=coords, attrs=np.zeros((len(coords), 0)), labels=labels)
    return save_point_cloud(cloud, path)


@pytest.fixture
def rasters(tmp_path, small_grid, spectral_raster):
    """A two-band spectral raster, a one-band raster and an integer label raster on the same grid."""
    save_raster(spectral_raster, tmp_path / "spec.asc")
    save_raster(RasterGrid.from_spec(small_grid, np.full((3, 4), 7.0)), tmp_path / "nir.asc")
    save_raster(RasterGrid.from_spec(small_grid, np.arange(12, dtype=np.int64).reshape(3, 4)),
                tmp_path / "labels.asc")
    return tmp_path


class TestArgumentParser:
    """Test argument parsing."""

    def test_ablate_defaults(self):
        args = create_argument_parser().parse_args(["ablate", "--config", "run.toml", "--out-dir", "out"])
        assert args.seeds == [0, 1, 2]
        assert args.variants == list(ABLATION_VARIANTS)

    def test_raster_repeats(self):
        args = create_argument_parser().parse_args(
            ["fuse", "--cloud", "c.csv", "--raster", "a.asc", "--raster", "b.asc", "--out", "f.csv"])
        assert args.raster == ["a.asc", "b.asc"]
        assert args.labels is None

    def test_command_required(self):
        with pytest.raises(SystemExit) as exc_info:
            create_argument_parser().parse_args([])
        assert exc_info.value.code == 2


@pytest.mark.integration
class TestCommands:
    """Test each subcommand end to end."""

    def test_synth(self, tmp_path, capsys):
        main(["synth", "--variant", "xor", "--out-dir", str(tmp_path), "--seed", "1"])
        assert (tmp_path / "xor.toml").exists()
        assert "SYNTHETIC SCENE - XOR" in capsys.readouterr().out

    def test_fuse_without_labels(self, rasters, caplog, capsys):
        cloud = write_cloud(rasters / "cloud.csv", [[0.5, 0.5, 1.0], [2.5, 1.5, 2.0], [3.5, 2.5, 0.0]])
        out = rasters / "fused.csv"
        main(["fuse", "--cloud", str(cloud), "--raster", str(rasters / "spec.asc"),
              "--raster", str(rasters / "nir.asc"), "--out", str(out)])

        fused = load_point_cloud(out)
        assert fused.band_names == ["band_0", "band_1", "band_2"]
        np.testing.assert_array_equal(fused.attrs, [[0.0, 0.0, 7.0], [6.0, -6.0, 7.0], [11.0, -11.0, 7.0]])
        assert fused.labels is None
        assert "fused cloud is unlabeled" in caplog.text
        assert "FUSED POINT CLOUD" in capsys.readouterr().out

    def test_fuse_with_labels(self, rasters):
        cloud = write_cloud(rasters / "cloud.csv", [[0.5, 0.5, 1.0], [2.5, 1.5, 2.0], [3.5, 2.5, 0.0]])
        out = rasters / "fused.csv"
        main(["fuse", "--cloud", str(cloud), "--raster", str(rasters / "nir.asc"),
              "--labels", str(rasters / "labels.asc"), "--out", str(out)])
        np.testing.assert_array_equal(load_point_cloud(out).labels, [0, 6, 11])

    def test_fuse_without_overlap(self, rasters, capsys):
        cloud = write_cloud(rasters / "far.csv", [[500.0, 500.0, 0.0], [501.0, 500.0, 0.0]])
        with pytest.raises(SystemExit) as exc_info:
            main(["fuse", "--cloud", str(cloud), "--raster", str(rasters / "nir.asc"),
                  "--out", str(rasters / "fused.csv")])
        assert exc_info.value.code == 1
        assert "does not overlap" in capsys.readouterr().err

    def test_fuse_with_misnamed_band_file(self, rasters, capsys):
        cloud = write_cloud(rasters / "cloud.csv", [[0.5, 0.5, 1.0]])
        (rasters / "spec_bnir.asc").write_text((rasters / "spec_b0.asc").read_text())
        with pytest.raises(SystemExit) as exc_info:
            main(["fuse", "--cloud", str(cloud), "--raster", str(rasters / "spec.asc"),
                  "--out", str(rasters / "fused.csv")])
        assert exc_info.value.code == 1
        assert "error: Band file name 'spec_bnir.asc'" in capsys.readouterr().err

    def test_project(self, rasters, capsys):
        pred = write_cloud(rasters / "pred.csv", [[0.5, 0.5, 0.0], [0.6, 0.4, 5.0], [2.5, 1.5, 0.0]],
                           labels=np.array([1, 8, 1]))
        out = rasters / "map.asc"
        main(["project", "--pred-cloud", str(pred), "--grid", str(rasters / "nir.asc"), "--out", str(out)])

        projected = load_raster(out)
        assert projected.values[0, 0, 0] == 8
        assert projected.values[0, 1, 2] == 1
        assert int((~projected.nodata_pixels()).sum()) == 2
        assert "2 labelled pixels" in capsys.readouterr().out

    def test_eval_3d(self, tmp_path, capsys):
        coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]
        pred = write_cloud(tmp_path / "pred.csv", coords, labels=np.array([1, 2, 2, 2]))
        gt = write_cloud(tmp_path / "gt.csv", coords, labels=np.array([1, 1, 2, 2]))
        main(["eval", "--pred", str(pred), "--gt", str(gt)])

        output = capsys.readouterr().out
        assert "EVALUATION (3D)" in output
        assert "OA 0.7500" in output
        assert (tmp_path / "pred.scores.csv").exists()

    def test_eval_2d(self, rasters, capsys):
        out = rasters / "scores.csv"
        main(["eval", "--pred", str(rasters / "labels.asc"), "--gt", str(rasters / "labels.asc"),
              "--raster", "--out", str(out)])
        assert "OA 1.0000" in capsys.readouterr().out
        assert out.exists()

    def test_eval_needs_labels(self, tmp_path, capsys):
        coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
        pred = write_cloud(tmp_path / "pred.csv", coords)
        gt = write_cloud(tmp_path / "gt.csv", coords, labels=np.array([1, 2]))
        with pytest.raises(SystemExit) as exc_info:
            main(["eval", "--pred", str(pred), "--gt", str(gt)])
        assert exc_info.value.code == 1
        assert "label column" in capsys.readouterr().err

    def test_train_predict_export(self, tmp_path, capsys):
        save_point_cloud(make_xor_scene(seed=0, spacing=2.0), tmp_path / "scene.csv")
        config = tmp_path / "run.toml"
        config.write_text(TINY_TOML)
        run_dir = tmp_path / "run"

        main(["train", "--config", str(config), "--out-dir", str(run_dir)])
        assert "TRAINING SUMMARY" in capsys.readouterr().out
        assert (run_dir / RUN_CONFIG_NAME).exists()

        checkpoint = str(run_dir / "best.hpf")
        main(["predict", "--checkpoint", checkpoint, "--cloud", str(tmp_path / "scene.csv"),
              "--out", str(tmp_path / "pred.csv"), "--colorized", str(tmp_path / "pred.ply")])
        predicted = load_point_cloud(tmp_path / "pred.csv")
        assert predicted.num_points == 900
        assert predicted.labels is not None
        assert (tmp_path / "pred.ply").exists()

        main(["export-features", "--checkpoint", checkpoint, "--cloud", str(tmp_path / "scene.csv"),
              "--out", str(tmp_path / "features.csv"), "--config", str(config)])
        assert "Exported 900 x 4 features" in capsys.readouterr().out

    def test_predict_without_config(self, tmp_path, capsys):
        (tmp_path / "best.hpf").write_bytes(b"HPF1")
        with pytest.raises(SystemExit) as exc_info:
            main(["predict", "--checkpoint", str(tmp_path / "best.hpf"), "--cloud", "c.csv",
                  "--out", str(tmp_path / "p.csv")])
        assert exc_info.value.code == 1
        assert RUN_CONFIG_NAME in capsys.readouterr().err


class TestApplicationRunner:
    """Test runner behaviour that does not go through argument parsing."""

    def test_ground_map_from_settings(self, tmp_path):
        path = tmp_path / "ground.toml"
        path.write_text('[classes]\n1 = { name = "grass", ground = true }\n')
        runner = ApplicationRunner(AppSettings(_env_file=None, default_ground_map=str(path)))
        assert runner._ground_map(None).flags == {1: True}

    def test_packaged_ground_map(self):
        runner = ApplicationRunner(AppSettings(_env_file=None))
        ground_map = runner._ground_map(None)
        assert len(ground_map.flags) == 21
        assert ground_map.is_ground(1)
        assert not ground_map.is_ground(8)
