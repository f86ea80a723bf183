"""Main application entry point for the hyperpoint toolkit."""

import sys
import logging
import argparse
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from hyperpoint.exceptions import ConfigurationError, DataFormatError, EvaluationError, HyperPointError
from hyperpoint.fuse_io import (
    attach_spectra,
    load_point_cloud,
    load_raster,
    project_labels_3d_to_2d,
    read_grid_spec,
    save_colorized_ply,
    save_feature_table,
    save_point_cloud,
    save_raster,
    transfer_labels_2d_to_3d,
)
from hyperpoint.metrics import evaluate_2d, evaluate_labels, format_scores_table, save_scores_csv
from hyperpoint.models import GroundClassMap, PointCloud, RasterGrid, Scores
from hyperpoint.settings import AppSettings, RunConfig, settings
from hyperpoint.synth import SYNTH_VARIANTS, write_synth
from hyperpoint.train import (
    ABLATION_VARIANTS,
    RUN_CONFIG_NAME,
    PredictionResult,
    Predictor,
    run_ablation,
    summarize_ablation,
    train_from_config,
)

logger = logging.getLogger(__name__)


class ApplicationRunner:
    """One method per subcommand; each is a thin wrapper over the library operations."""

    def __init__(self, app_settings: AppSettings = settings):
        self.settings = app_settings

    @staticmethod
    def _banner(title: str) -> None:
        print("\n" + "=" * 60)
        print(title)
        print("=" * 60)

    # Data preparation

    def run_synth(self, variant: str, out_dir: str, seed: int = 0) -> List[Path]:
        """Write a synthetic scene and its training config."""
        paths = write_synth(variant, out_dir, seed)
        self._banner(f"SYNTHETIC SCENE - {variant.upper()}")
        for path in paths:
            print(f"  {path}")
        return paths

    def run_fuse(self, cloud_path: str, raster_paths: Sequence[str], out: str,
                 labels_path: Optional[str] = None) -> PointCloud:
        """Attach every raster's bands to the cloud, then transfer labels if a label raster is given."""
        cloud = load_point_cloud(cloud_path)
        for raster_path in raster_paths:
            raster = load_raster(raster_path)
            self._check_overlap(cloud, raster, raster_path)
            cloud = attach_spectra(cloud, raster)
            logger.info(f"Attached {raster.bands} bands from {raster_path}")
        if labels_path:
            label_raster = load_raster(labels_path)
            self._check_overlap(cloud, label_raster, labels_path)
            cloud = transfer_labels_2d_to_3d(cloud, label_raster)
        else:
            logger.warning("No label raster given; the fused cloud is unlabeled")
        save_point_cloud(cloud, out)
        self._show_band_summary(cloud, out)
        return cloud

    @staticmethod
    def _check_overlap(cloud: PointCloud, raster: RasterGrid, source: str) -> None:
        col, _ = raster.spec.pixel_of(cloud.coords[:, :2])
        outside = int((col < 0).sum())
        if outside == cloud.num_points:
            raise DataFormatError("Raster does not overlap the point cloud; check the coordinate frames",
                                  path=str(source))
        if outside:
            logger.warning(f"{outside} points lie outside {source} and take the nearest edge pixel")

    def _show_band_summary(self, cloud: PointCloud, out: str) -> None:
        self._banner("FUSED POINT CLOUD")
        print(f"Points: {cloud.num_points}   Bands: {cloud.num_bands}   Labeled: {cloud.has_labels}")
        for i, name in enumerate(cloud.band_names):
            band = cloud.attrs[:, i]
            print(f"  {name:<16} min {band.min():>10.4f}  max {band.max():>10.4f}  mean {band.mean():>10.4f}")
        if cloud.nodata_mask is not None and cloud.nodata_mask.any():
            print(f"  {int(cloud.nodata_mask.sum())} points on nodata pixels")
        print(f"Written to {out}")

    # Training and inference

    def run_train(self, config_path: str, out_dir: str) -> None:
        run_config = RunConfig.from_toml(config_path)
        result = train_from_config(run_config, out_dir)
        self._banner("TRAINING SUMMARY")
        print(f"Epochs: {len(result.history)}")
        print(f"Best epoch: {result.best_epoch}   val mIoU: {result.best_miou:.4f}")
        print(f"Checkpoint: {result.checkpoint_path}")
        print(f"Log: {result.log_path}")

    @staticmethod
    def _run_config_for(checkpoint: str, config_path: Optional[str]) -> RunConfig:
        """The TOML config if given, else the ``run_config.json`` saved next to the checkpoint."""
        if config_path:
            return RunConfig.from_toml(config_path)
        sibling = Path(checkpoint).parent / RUN_CONFIG_NAME
        if not sibling.exists():
            raise ConfigurationError(f"No --config given and no {RUN_CONFIG_NAME} next to {checkpoint}")
        return RunConfig.from_json_file(sibling)

    def _predict(self, checkpoint: str, cloud_path: str, config_path: Optional[str]) -> PredictionResult:
        run_config = self._run_config_for(checkpoint, config_path)
        predictor = Predictor.from_checkpoint(checkpoint, run_config)
        cloud = load_point_cloud(cloud_path, ignore_label=run_config.data.ignore_label)
        return predictor.predict(cloud)

    def run_predict(self, checkpoint: str, cloud_path: str, out: str, config_path: Optional[str] = None,
                    colorized: Optional[str] = None) -> PointCloud:
        predicted = self._predict(checkpoint, cloud_path, config_path).cloud
        save_point_cloud(predicted, out)
        if colorized:
            save_colorized_ply(predicted, colorized)
        labels, counts = np.unique(predicted.labels, return_counts=True)
        self._banner("PREDICTION")
        print(f"Points: {predicted.num_points}")
        for label, count in zip(labels, counts):
            print(f"  class {label}: {count}")
        print(f"Written to {out}")
        return predicted

    def run_export_features(self, checkpoint: str, cloud_path: str, out: str,
                            config_path: Optional[str] = None) -> np.ndarray:
        """Penultimate-layer features, one row per input point in input order."""
        features = self._predict(checkpoint, cloud_path, config_path).features
        save_feature_table(features, out)
        print(f"Exported {features.shape[0]} x {features.shape[1]} features to {out}")
        return features

    # 2D products and evaluation

    def _ground_map(self, path: Optional[str]) -> GroundClassMap:
        chosen = path or self.settings.default_ground_map
        return GroundClassMap.from_toml(chosen) if chosen else GroundClassMap.default()

    def run_project(self, pred_cloud: str, grid_path: str, out: str,
                    ground_map_path: Optional[str] = None) -> RasterGrid:
        cloud = load_point_cloud(pred_cloud)
        raster = project_labels_3d_to_2d(cloud, read_grid_spec(grid_path), self._ground_map(ground_map_path))
        save_raster(raster, out)
        labelled = int((~raster.nodata_pixels()).sum())
        print(f"Projected {cloud.num_points} points onto {labelled} labelled pixels; written to {out}")
        return raster

    def run_eval(self, pred: str, gt: str, raster: bool = False, out: Optional[str] = None,
                 num_classes: Optional[int] = None, ignore_label: int = 0) -> Scores:
        if raster:
            result = evaluate_2d(load_raster(pred), load_raster(gt), num_classes)
        else:
            pred_cloud, gt_cloud = load_point_cloud(pred), load_point_cloud(gt)
            if pred_cloud.labels is None or gt_cloud.labels is None:
                raise EvaluationError("Both clouds need a label column")
            if num_classes is None:
                num_classes = int(max(pred_cloud.labels.max(), gt_cloud.labels.max())) + 1
            result = evaluate_labels(pred_cloud.labels, gt_cloud.labels, num_classes, ignore_label)
        self._banner("EVALUATION (2D)" if raster else "EVALUATION (3D)")
        print(format_scores_table(result))
        csv_path = Path(out) if out else Path(pred).with_suffix(".scores.csv")
        save_scores_csv(result, csv_path)
        print(f"Scores written to {csv_path}")
        return result

    # Ablations

    def run_ablate(self, config_path: str, variants: Sequence[str], seeds: Sequence[int], out_dir: str) -> None:
        rows = run_ablation(RunConfig.from_toml(config_path), variants, seeds, out_dir)
        self._banner("ABLATION SUMMARY")
        print(f"{'variant':<16}{'OA':>10}{'mean F1':>10}")
        for variant, (oa, mean_f1) in summarize_ablation(rows).items():
            print(f"{variant:<16}{oa:>10.4f}{mean_f1:>10.4f}")
        print(f"Per-seed rows written to {Path(out_dir) / 'ablation.csv'}")


def create_argument_parser() -> argparse.ArgumentParser:
    """Create and configure argument parser."""
    parser = argparse.ArgumentParser(prog="hyperpoint",
                                     description="Lidar and spectral point cloud fusion and segmentation")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Write a synthetic labelled scene and its config")
    synth.add_argument("--variant", choices=list(SYNTH_VARIANTS), required=True)
    synth.add_argument("--out-dir", required=True)
    synth.add_argument("--seed", type=int, default=0)

    fuse = commands.add_parser("fuse", help="Attach raster bands (and labels) to a point cloud")
    fuse.add_argument("--cloud", required=True, help="Input cloud (CSV or ASCII PLY)")
    fuse.add_argument("--raster", action="append", required=True,
                      help="Spectral raster; repeat for several, bands are appended in argument order")
    fuse.add_argument("--labels", help="Single-band label raster")
    fuse.add_argument("--out", required=True)

    train = commands.add_parser("train", help="Train a network from a TOML config")
    train.add_argument("--config", required=True)
    train.add_argument("--out-dir", required=True)

    for name, help_text in (("predict", "Label a point cloud with a trained checkpoint"),
                            ("export-features", "Write penultimate-layer features per point")):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--checkpoint", required=True)
        sub.add_argument("--cloud", required=True)
        sub.add_argument("--out", required=True)
        sub.add_argument("--config", help=f"Run config TOML; defaults to {RUN_CONFIG_NAME} next to the checkpoint")
        if name == "predict":
            sub.add_argument("--colorized", help="Also write a per-class colored PLY here")

    project = commands.add_parser("project", help="Project predicted point labels onto a raster grid")
    project.add_argument("--pred-cloud", required=True)
    project.add_argument("--grid", required=True, help="Reference raster whose grid is used")
    project.add_argument("--ground-map", help="Ground class map TOML (default: packaged DFC2018 map)")
    project.add_argument("--out", required=True)

    evaluate = commands.add_parser("eval", help="Score predicted labels against ground truth")
    evaluate.add_argument("--pred", required=True)
    evaluate.add_argument("--gt", required=True)
    evaluate.add_argument("--raster", action="store_true", help="Compare label rasters instead of clouds")
    evaluate.add_argument("--out", help="Scores CSV (default: next to --pred)")
    evaluate.add_argument("--num-classes", type=int)
    evaluate.add_argument("--ignore-label", type=int, default=0)

    ablate = commands.add_parser("ablate", help="Train and score fusion / input variants over seeds")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS),
                        choices=list(ABLATION_VARIANTS))
    ablate.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ablate.add_argument("--out-dir", required=True)
    return parser


def dispatch(runner: ApplicationRunner, args: argparse.Namespace) -> None:
    if args.command == "synth":
        runner.run_synth(args.variant, args.out_dir, args.seed)
    elif args.command == "fuse":
        runner.run_fuse(args.cloud, args.raster, args.out, args.labels)
    elif args.command == "train":
        runner.run_train(args.config, args.out_dir)
    elif args.command == "predict":
        runner.run_predict(args.checkpoint, args.cloud, args.out, args.config, args.colorized)
    elif args.command == "export-features":
        runner.run_export_features(args.checkpoint, args.cloud, args.out, args.config)
    elif args.command == "project":
        runner.run_project(args.pred_cloud, args.grid, args.out, args.ground_map)
    elif args.command == "eval":
        runner.run_eval(args.pred, args.gt, args.raster, args.out, args.num_classes, args.ignore_label)
    elif args.command == "ablate":
        runner.run_ablate(args.config, args.variants, args.seeds, args.out_dir)


def main(argv: Optional[List[str]] = None) -> None:
    """Main application entry point."""
    parser = create_argument_parser()
    args = parser.parse_args(argv)

    try:
        dispatch(ApplicationRunner(settings), args)
    except HyperPointError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        sys.exit(1)
    except KeyboardInterrupt:
        print("\nApplication interrupted by user")
        sys.exit(130)


if __name__ == "__main__":
    main()
