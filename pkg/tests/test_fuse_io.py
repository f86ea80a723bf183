"""Tests for file formats and 2D/3D bridging."""

import numpy as np
import pytest

from hyperpoint.exceptions import CheckpointError, ConfigurationError, DataFormatError, EvaluationError
from hyperpoint.fuse_io import (
    CHECKPOINT_MAGIC,
    PALETTE,
    attach_spectra,
    band_paths,
    infer_format,
    load_checkpoint,
    load_point_cloud,
    load_raster,
    project_labels_3d_to_2d,
    read_grid_spec,
    save_checkpoint,
    save_colorized_ply,
    save_feature_table,
    save_point_cloud,
    save_raster,
    transfer_labels_2d_to_3d,
)
from hyperpoint.models import CloudFormat, GridSpec, GroundClassMap, PointCloud, RasterGrid

PLY_HEADER = (
    "ply\n"
    "format ascii 1.0\n"
    "comment written by hand\n"
    "element vertex {count}\n"
    "property double x\n"
    "property double y\n"
    "property double z\n"
    "property float nir\n"
    "property int label\n"
    "end_header\n"
)

GROUND_MAP = GroundClassMap(flags={0: True, 1: True, 2: False, 3: False})


def brute_nearest_pixel(spec, xy):
    centers = spec.pixel_centers()
    d2 = ((centers - xy) ** 2).sum(axis=1)
    return int(np.lexsort((np.arange(len(centers)), d2))[0])


def brute_projection(cloud, spec, ground_map):
    out = np.full(spec.width * spec.height, int(spec.nodata), dtype=np.int64)
    col, row = spec.pixel_of(cloud.coords[:, :2])
    pixel = np.where(col >= 0, row * spec.width + col, -1)
    ground = np.array([ground_map.is_ground(c) for c in cloud.labels])
    centers = spec.pixel_centers()
    for p in range(out.size):
        members = np.flatnonzero(pixel == p)
        if members.size == 0:
            continue
        upper = [i for i in members if not ground[i]]
        if upper:
            best = max(upper, key=lambda i: (cloud.coords[i, 2], -i))
            out[p] = cloud.labels[best]
        elif ground.any():
            candidates = np.flatnonzero(ground)
            d2 = ((cloud.coords[candidates, :2] - centers[p]) ** 2).sum(axis=1)
            out[p] = cloud.labels[candidates[np.lexsort((candidates, d2))[0]]]
    return out


@pytest.mark.unit
class TestPointCloudFiles:
    """Test CSV and PLY cloud files."""

    @pytest.mark.parametrize("suffix", [".csv", ".ply"])
    def test_round_trip_is_exact(self, tmp_path, small_cloud, suffix):
        path = save_point_cloud(small_cloud, tmp_path / f"cloud{suffix}")
        loaded = load_point_cloud(path, num_classes=3)
        np.testing.assert_array_equal(loaded.coords, small_cloud.coords)
        np.testing.assert_array_equal(loaded.attrs, small_cloud.attrs)
        np.testing.assert_array_equal(loaded.labels, small_cloud.labels)
        assert loaded.band_names == small_cloud.band_names

    def test_unlabeled_cloud(self, tmp_path):
        cloud = PointCloud(coords=np.zeros((3, 3)), attrs=np.ones((3, 1)))
        loaded = load_point_cloud(save_point_cloud(cloud, tmp_path / "c.csv"))
        assert loaded.labels is None
        assert loaded.num_bands == 1

    def test_csv_header_is_unquoted(self, tmp_path, small_cloud):
        path = save_point_cloud(small_cloud, tmp_path / "cloud.csv")
        assert path.read_text().splitlines()[0] == "x,y,z,band_0,band_1,band_2,band_3,label"

    def test_ply_with_comments_and_spacing(self, tmp_path):
        path = tmp_path / "hand.ply"
        path.write_text(PLY_HEADER.format(count=2) + "0 0 0  0.5 1\n1.5   2 3 0.25 2\n")
        cloud = load_point_cloud(path)
        np.testing.assert_array_equal(cloud.coords, [[0, 0, 0], [1.5, 2, 3]])
        np.testing.assert_array_equal(cloud.attrs[:, 0], [0.5, 0.25])
        np.testing.assert_array_equal(cloud.labels, [1, 2])
        assert cloud.band_names == ["nir"]

    def test_ply_bad_vertex_reports_line(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text(PLY_HEADER.format(count=2) + "0 0 0 0.5 1\n1 abc 1 0.5 1\n")
        with pytest.raises(DataFormatError) as exc_info:
            load_point_cloud(path)
        assert exc_info.value.line == 12

    def test_ply_short_body(self, tmp_path):
        path = tmp_path / "short.ply"
        path.write_text(PLY_HEADER.format(count=3) + "0 0 0 0.5 1\n")
        with pytest.raises(DataFormatError) as exc_info:
            load_point_cloud(path)
        assert "declares 3 vertices" in str(exc_info.value)

    def test_ply_zero_vertices(self, tmp_path):
        path = tmp_path / "empty.ply"
        path.write_text(PLY_HEADER.format(count=0))
        with pytest.raises(DataFormatError):
            load_point_cloud(path)

    def test_ply_binary_rejected(self, tmp_path):
        path = tmp_path / "bin.ply"
        path.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(DataFormatError) as exc_info:
            load_point_cloud(path)
        assert exc_info.value.line == 2

    def test_csv_bad_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,z,label\n0,0,0,1\n1,2,3\n")
        with pytest.raises(DataFormatError) as exc_info:
            load_point_cloud(path)
        assert exc_info.value.line == 3
        assert exc_info.value.path == str(path)

    def test_missing_coordinates(self, tmp_path):
        path = tmp_path / "noz.csv"
        path.write_text("x,y,label\n0,0,1\n")
        with pytest.raises(DataFormatError) as exc_info:
            load_point_cloud(path)
        assert "'z'" in str(exc_info.value)

    def test_label_outside_classes(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("x,y,z,label\n0,0,0,1\n0,0,1,7\n")
        with pytest.raises(DataFormatError):
            load_point_cloud(path, num_classes=3)

    def test_unknown_suffix(self):
        with pytest.raises(DataFormatError):
            infer_format("cloud.las")
        assert infer_format("cloud.las", CloudFormat.CSV) == CloudFormat.CSV

    def test_colorized_ply(self, tmp_path, small_cloud):
        path = save_colorized_ply(small_cloud, tmp_path / "colors.ply")
        loaded = load_point_cloud(path)
        assert loaded.band_names == ["red", "green", "blue"]
        np.testing.assert_array_equal(loaded.attrs, PALETTE[small_cloud.labels])

    def test_feature_table(self, tmp_path, rng):
        features = rng.normal(size=(5, 3))
        path = save_feature_table(features, tmp_path / "features.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "f0,f1,f2"
        assert len(lines) == 6


@pytest.mark.unit
class TestRasterFiles:
    """Test ESRI ASCII grids."""

    def test_single_band_round_trip(self, tmp_path, small_grid):
        values = np.arange(12, dtype=np.int64).reshape(1, 3, 4)
        raster = RasterGrid.from_spec(small_grid, values)
        save_raster(raster, tmp_path / "labels.asc")
        loaded = load_raster(tmp_path / "labels.asc")
        assert loaded.is_label
        assert loaded.spec == small_grid
        np.testing.assert_array_equal(loaded.values, values)

    def test_north_row_written_first(self, tmp_path, small_grid):
        values = np.arange(12, dtype=np.int64).reshape(1, 3, 4)
        save_raster(RasterGrid.from_spec(small_grid, values), tmp_path / "r.asc")
        lines = (tmp_path / "r.asc").read_text().splitlines()
        assert lines[6] == "8 9 10 11"

    def test_multi_band_files(self, tmp_path, spectral_raster):
        written = save_raster(spectral_raster, tmp_path / "spec.asc")
        assert written == band_paths(tmp_path / "spec.asc", 2)
        assert [p.name for p in written] == ["spec_b0.asc", "spec_b1.asc"]
        loaded = load_raster(tmp_path / "spec.asc")
        assert loaded.bands == 2
        np.testing.assert_array_equal(loaded.values, spectral_raster.values)
        assert read_grid_spec(tmp_path / "spec.asc") == spectral_raster.spec

    def test_value_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.asc"
        path.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3\n")
        with pytest.raises(DataFormatError):
            load_raster(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.asc"
        path.write_text("ncols 2\nrows 2\n")
        with pytest.raises(DataFormatError) as exc_info:
            load_raster(path)
        assert exc_info.value.line == 2

    def test_missing_raster(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_raster(tmp_path / "absent.asc")

    def test_band_file_without_index(self, tmp_path, spectral_raster):
        save_raster(spectral_raster, tmp_path / "spec.asc")
        (tmp_path / "spec_bx.asc").write_text((tmp_path / "spec_b0.asc").read_text())
        with pytest.raises(DataFormatError) as exc_info:
            load_raster(tmp_path / "spec.asc")
        assert "spec_bx.asc" in str(exc_info.value)

    def test_band_files_with_gap(self, tmp_path, spectral_raster):
        save_raster(spectral_raster, tmp_path / "spec.asc")
        (tmp_path / "spec_b1.asc").rename(tmp_path / "spec_b2.asc")
        with pytest.raises(DataFormatError) as exc_info:
            load_raster(tmp_path / "spec.asc")
        assert "[0, 2]" in str(exc_info.value)


@pytest.mark.unit
class TestCheckpoints:
    """Test the HPF1 container."""

    def test_round_trip(self, tmp_path, rng):
        params = {"a.weight": rng.normal(size=(3, 4)), "a.bias": rng.normal(size=4), "gamma": np.array(0.5)}
        path = save_checkpoint(tmp_path / "m.hpf", params)
        assert path.read_bytes()[:4] == CHECKPOINT_MAGIC
        loaded = load_checkpoint(path)
        assert list(loaded) == list(params)
        for name, value in params.items():
            np.testing.assert_array_equal(loaded[name], value)
            assert loaded[name].shape == np.shape(value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.hpf"
        path.write_bytes(b"XXXX")
        with pytest.raises(CheckpointError) as exc_info:
            load_checkpoint(path)
        assert "magic" in str(exc_info.value)

    def test_truncated(self, tmp_path, rng):
        path = save_checkpoint(tmp_path / "m.hpf", {"w": rng.normal(size=(4, 4))})
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CheckpointError) as exc_info:
            load_checkpoint(path)
        assert "truncated" in str(exc_info.value)


@pytest.mark.unit
class TestAttachSpectra:
    """Test nearest-pixel spectral attachment."""

    def test_nearest_pixel_center(self, spectral_raster):
        cloud = PointCloud(coords=[[0.4, 0.6, 1.0], [3.9, 2.1, 0.0]], attrs=np.zeros((2, 0)))
        fused = attach_spectra(cloud, spectral_raster)
        np.testing.assert_array_equal(fused.attrs, [[0.0, 0.0], [11.0, -11.0]])
        assert fused.band_names == ["band_0", "band_1"]

    def test_bands_append_in_order(self, spectral_raster):
        cloud = PointCloud(coords=[[1.5, 0.5, 0.0]], attrs=[[7.0]], band_names=["lidar_intensity"])
        fused = attach_spectra(attach_spectra(cloud, spectral_raster), spectral_raster)
        np.testing.assert_array_equal(fused.attrs, [[7.0, 1.0, -1.0, 1.0, -1.0]])
        assert fused.band_names[0] == "lidar_intensity"
        assert len(set(fused.band_names)) == 5

    def test_nodata_flagged(self, small_grid, caplog):
        values = np.ones((1, 3, 4))
        values[0, 0, 0] = small_grid.nodata
        raster = RasterGrid.from_spec(small_grid, values)
        cloud = PointCloud(coords=[[0.5, 0.5, 0.0], [2.5, 2.5, 0.0]], attrs=np.zeros((2, 0)))
        fused = attach_spectra(cloud, raster)
        np.testing.assert_array_equal(fused.nodata_mask, [True, False])
        assert fused.attrs[0, 0] == small_grid.nodata
        assert "nodata" in caplog.text

    def test_matches_brute_force(self):
        for trial in range(20):
            rng = np.random.default_rng(500 + trial)
            spec = GridSpec(origin_xy=(float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5))),
                            cell=float(rng.uniform(0.5, 2.0)), width=int(rng.integers(1, 12)),
                            height=int(rng.integers(1, 12)))
            raster = RasterGrid.from_spec(spec, rng.normal(size=(3, spec.height, spec.width)))
            lo = np.array(spec.origin_xy) - 2.0
            hi = lo + 4.0 + spec.cell * np.array([spec.width, spec.height])
            coords = np.column_stack([rng.uniform(lo, hi, size=(100, 2)), rng.uniform(0, 5, size=100)])
            fused = attach_spectra(PointCloud(coords=coords, attrs=np.zeros((100, 0))), raster)
            flat = raster.flat_bands()
            for i in range(100):
                np.testing.assert_array_equal(fused.attrs[i], flat[brute_nearest_pixel(spec, coords[i, :2])])


@pytest.mark.unit
class TestLabelBridging:
    """Test 2D to 3D label transfer and the two-stage projection."""

    def test_transfer_labels(self, small_grid):
        values = np.arange(12, dtype=np.int64).reshape(1, 3, 4)
        values[0, 2, 3] = int(small_grid.nodata)
        labels = RasterGrid.from_spec(small_grid, values)
        cloud = PointCloud(coords=[[0.2, 0.2, 5.0], [1.5, 1.5, 0.0], [3.5, 2.5, 1.0]],
                           attrs=np.zeros((3, 0)), ignore_label=0)
        labelled = transfer_labels_2d_to_3d(cloud, labels)
        np.testing.assert_array_equal(labelled.labels, [0, 5, 0])

    def test_transfer_needs_label_raster(self, spectral_raster, small_cloud):
        with pytest.raises(DataFormatError):
            transfer_labels_2d_to_3d(small_cloud, spectral_raster)

    def test_highest_non_ground_wins(self, small_grid):
        cloud = PointCloud(
            coords=[[0.5, 0.5, 0.0], [0.4, 0.4, 3.0], [0.6, 0.6, 8.0], [2.5, 1.5, 0.0]],
            attrs=np.zeros((4, 0)),
            labels=[1, 2, 3, 1],
        )
        raster = project_labels_3d_to_2d(cloud, small_grid, GROUND_MAP)
        flat = raster.values[0].reshape(-1)
        assert flat[0] == 3
        assert flat[1 * 4 + 2] == 1
        assert flat[2 * 4 + 3] == int(small_grid.nodata)

    def test_equal_height_prefers_lower_index(self, small_grid):
        cloud = PointCloud(coords=[[0.3, 0.3, 4.0], [0.7, 0.7, 4.0]], attrs=np.zeros((2, 0)), labels=[3, 2])
        raster = project_labels_3d_to_2d(cloud, small_grid, GROUND_MAP)
        assert raster.values[0, 0, 0] == 3

    def test_single_class_cloud(self, small_grid, tmp_path):
        """A single-class cloud renders a single-class raster over covered pixels."""
        rng = np.random.default_rng(3)
        coords = np.column_stack([rng.uniform(0, 4, 200), rng.uniform(0, 3, 200), rng.uniform(0, 1, 200)])
        cloud = PointCloud(coords=coords, attrs=np.zeros((200, 0)), labels=np.ones(200, dtype=int))
        raster = project_labels_3d_to_2d(cloud, small_grid, GROUND_MAP)
        covered = raster.values[0] != int(small_grid.nodata)
        assert covered.any()
        assert np.all(raster.values[0][covered] == 1)

    def test_unknown_class_rejected(self, small_grid):
        cloud = PointCloud(coords=[[0.5, 0.5, 0.0]], attrs=np.zeros((1, 0)), labels=[9])
        with pytest.raises(ConfigurationError):
            project_labels_3d_to_2d(cloud, small_grid, GROUND_MAP)

    def test_needs_labels(self, small_grid):
        cloud = PointCloud(coords=[[0.5, 0.5, 0.0]], attrs=np.zeros((1, 0)))
        with pytest.raises(EvaluationError):
            project_labels_3d_to_2d(cloud, small_grid, GROUND_MAP)

    def test_matches_brute_force(self):
        for trial in range(20):
            rng = np.random.default_rng(900 + trial)
            spec = GridSpec(origin_xy=(0.0, 0.0), cell=1.0, width=int(rng.integers(2, 8)),
                            height=int(rng.integers(2, 8)))
            n = int(rng.integers(5, 80))
            coords = np.column_stack([rng.uniform(-1, spec.width + 1, n), rng.uniform(-1, spec.height + 1, n),
                                      rng.uniform(0, 10, n)])
            labels = rng.integers(0, 4, n)
            cloud = PointCloud(coords=coords, attrs=np.zeros((n, 0)), labels=labels)
            raster = project_labels_3d_to_2d(cloud, spec, GROUND_MAP)
            np.testing.assert_array_equal(raster.values[0].reshape(-1), brute_projection(cloud, spec, GROUND_MAP))


@pytest.mark.unit
class TestGroundClassMap:
    """Test the packaged ground map."""

    def test_default_map(self):
        ground_map = GroundClassMap.default()
        assert len(ground_map.flags) == 21
        assert ground_map.is_ground(0)
        assert not ground_map.is_ground(8)

    def test_from_toml(self, tmp_path):
        path = tmp_path / "map.toml"
        path.write_text('[classes]\n1 = { name = "grass", ground = true }\n2 = { name = "roof", ground = false }\n')
        ground_map = GroundClassMap.from_toml(path)
        assert ground_map.names == {1: "grass", 2: "roof"}
        np.testing.assert_array_equal(ground_map.ground_mask(np.array([2, 1, 2])), [False, True, False])

    def test_bad_entry(self, tmp_path):
        path = tmp_path / "map.toml"
        path.write_text("[classes]\nroad = { ground = true }\n")
        with pytest.raises(ConfigurationError):
            GroundClassMap.from_toml(path)
