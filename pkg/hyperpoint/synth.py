"""Synthetic labelled scenes for desk-scale training runs.

``overfit`` is a 100 x 100 m scene with a ground plane, a box building and a
spheroid tree crown, each with its own spectral signature. ``xor`` is a grid
of flat tiles whose class depends jointly on tile height and on which half of
the spectrum dominates, so neither modality alone separates the classes.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from hyperpoint.exceptions import ConfigurationError
from hyperpoint.fuse_io import save_point_cloud
from hyperpoint.models import PointCloud

logger = logging.getLogger(__name__)

NUM_BANDS = 8
NOISE_SIGMA = 0.05
SCENE_SIZE = 100.0
OVERFIT_EPOCHS = 40
XOR_EPOCHS = 50

GROUND, BUILDING, TREE = 1, 2, 3
OVERFIT_CLASSES = 4

# tile classes: 1 low/band-A, 2 low/band-B, 3 high/band-A, 4 high/band-B
XOR_LAYOUT = np.array([
    [1, 2, 3, 4],
    [3, 4, 1, 2],
    [4, 3, 2, 1],
    [2, 1, 4, 3],
])
XOR_CLASSES = 5
XOR_TILE = 15.0
XOR_HIGH = 5.0

CLASS_SPECTRA: Dict[int, np.ndarray] = {
    GROUND: np.array([0.20, 0.25, 0.30, 0.45, 0.55, 0.50, 0.40, 0.35]),
    BUILDING: np.array([0.60, 0.60, 0.62, 0.58, 0.55, 0.57, 0.60, 0.62]),
    TREE: np.array([0.05, 0.10, 0.08, 0.20, 0.70, 0.80, 0.75, 0.65]),
}
BAND_A = np.array([0.8, 0.8, 0.8, 0.8, 0.2, 0.2, 0.2, 0.2])
BAND_B = BAND_A[::-1].copy()

BAND_NAMES = [f"band_{i}" for i in range(NUM_BANDS)]


def _spectra(rng: np.random.Generator, means: np.ndarray) -> np.ndarray:
    return means + rng.normal(0.0, NOISE_SIGMA, size=means.shape)


def _grid(lo: float, hi: float, spacing: float) -> np.ndarray:
    return np.arange(lo + spacing / 2, hi, spacing)


def make_overfit_scene(seed: int = 0, spacing: float = 0.75) -> PointCloud:
    """Ground, building and tree points with class-specific spectra (labels 1, 2, 3)."""
    rng = np.random.default_rng(seed)
    xs = _grid(0.0, SCENE_SIZE, spacing)
    gx, gy = np.meshgrid(xs, xs)
    gx, gy = gx.reshape(-1), gy.reshape(-1)

    b_lo, b_hi, b_height = np.array([10.0, 40.0]), np.array([32.0, 62.0]), 10.0
    under_building = ((gx >= b_lo[0]) & (gx <= b_hi[0]) & (gy >= b_lo[1]) & (gy <= b_hi[1]))
    ground = np.column_stack([gx[~under_building], gy[~under_building],
                              rng.normal(0.0, 0.05, size=int((~under_building).sum()))])

    rx = _grid(b_lo[0], b_hi[0], spacing)
    ry = _grid(b_lo[1], b_hi[1], spacing)
    roof_x, roof_y = np.meshgrid(rx, ry)
    roof = np.column_stack([roof_x.reshape(-1), roof_y.reshape(-1), np.full(roof_x.size, b_height)])
    heights = _grid(0.0, b_height, spacing)
    walls = []
    for x in (b_lo[0], b_hi[0]):
        wy, wz = np.meshgrid(ry, heights)
        walls.append(np.column_stack([np.full(wy.size, x), wy.reshape(-1), wz.reshape(-1)]))
    for y in (b_lo[1], b_hi[1]):
        wx, wz = np.meshgrid(rx, heights)
        walls.append(np.column_stack([wx.reshape(-1), np.full(wx.size, y), wz.reshape(-1)]))
    building = np.vstack([roof] + walls)

    centre, radii = np.array([55.0, 20.0, 9.0]), np.array([8.0, 8.0, 5.0])
    directions = rng.normal(size=(2000, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    tree = centre + directions * radii * rng.uniform(0.85, 1.0, size=(2000, 1))

    coords = np.vstack([ground, building, tree])
    labels = np.concatenate([np.full(len(ground), GROUND), np.full(len(building), BUILDING),
                             np.full(len(tree), TREE)])
    attrs = np.vstack([_spectra(rng, np.tile(CLASS_SPECTRA[c], (int((labels == c).sum()), 1)))
                       for c in (GROUND, BUILDING, TREE)])
    logger.info(f"Generated overfit scene with {len(coords)} points")
    return PointCloud(coords=coords, attrs=attrs, labels=labels, band_names=BAND_NAMES,
                      num_classes=OVERFIT_CLASSES)


def make_xor_scene(seed: int = 0, layout: Optional[np.ndarray] = None, spacing: float = 0.5) -> PointCloud:
    """Tiles whose class combines height (low/high) and spectral shape (band-A/band-B)."""
    rng = np.random.default_rng(seed)
    layout = XOR_LAYOUT if layout is None else np.asarray(layout)
    rows, cols = layout.shape
    xs = _grid(0.0, cols * XOR_TILE, spacing)
    ys = _grid(0.0, rows * XOR_TILE, spacing)
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.reshape(-1), gy.reshape(-1)
    col = np.minimum((gx // XOR_TILE).astype(int), cols - 1)
    row = np.minimum((gy // XOR_TILE).astype(int), rows - 1)
    labels = layout[row, col]
    high = labels >= 3
    band_a = (labels == 1) | (labels == 3)
    z = np.where(high, XOR_HIGH, 0.0) + rng.normal(0.0, 0.05, size=gx.size)
    coords = np.column_stack([gx, gy, z])
    means = np.where(band_a[:, np.newaxis], BAND_A, BAND_B)
    attrs = _spectra(rng, means)
    logger.info(f"Generated xor scene with {len(coords)} points")
    return PointCloud(coords=coords, attrs=attrs, labels=labels, band_names=BAND_NAMES,
                      num_classes=XOR_CLASSES)


def shuffled_layout(seed: int) -> np.ndarray:
    """Row and column permutation of the tile layout, for a held-out scene."""
    rng = np.random.default_rng(seed)
    return XOR_LAYOUT[rng.permutation(XOR_LAYOUT.shape[0])][:, rng.permutation(XOR_LAYOUT.shape[1])]


def nearest_centroid_accuracy(train_feats: np.ndarray, train_labels: np.ndarray,
                              test_feats: np.ndarray, test_labels: np.ndarray) -> float:
    """Accuracy of assigning each test point the class of the nearest training centroid."""
    classes = np.unique(train_labels)
    centroids = np.stack([train_feats[train_labels == c].mean(axis=0) for c in classes])
    d = ((test_feats[:, np.newaxis, :] - centroids[np.newaxis]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == test_labels).mean())


def _config_text(cloud: str, num_classes: int, seed: int, epochs: int,
                 val_cloud: Optional[str] = None) -> str:
    val_line = f'val_cloud = "{val_cloud}"\n' if val_cloud else ""
    return (
        "[data]\n"
        f'cloud = "{cloud}"\n'
        f"{val_line}"
        f"num_classes = {num_classes}\n"
        "ignore_label = 0\n\n"
        "[blocks]\n"
        "size = 75.0\n"
        "stride = 25.0\n"
        "n_points = 4096\n"
        f"seed = {seed}\n\n"
        "[model]\n"
        "stage_widths = [32, 64, 128, 256]\n"
        "k = 16\n"
        f"seed = {seed}\n\n"
        "[train]\n"
        "lr = 0.001\n"
        "batch = 16\n"
        f"epochs = {epochs}\n"
        f"seed = {seed}\n\n"
        "[fusion]\n"
        'kind = "mid-cpa"\n\n'
        "[eval]\n"
        "cell = 0.5\n"
    )


def write_synth(variant: str, out_dir: Union[str, Path], seed: int = 0) -> List[Path]:
    """Write the scene file(s) and a ready-to-train TOML config; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if variant == "overfit":
        scene = save_point_cloud(make_overfit_scene(seed), out_dir / "overfit.csv")
        config = out_dir / "overfit.toml"
        config.write_text(_config_text(scene.name, OVERFIT_CLASSES, seed, OVERFIT_EPOCHS), encoding="utf-8")
        return [scene, config]
    if variant == "xor":
        train = save_point_cloud(make_xor_scene(seed), out_dir / "xor_train.csv")
        test = save_point_cloud(make_xor_scene(seed + 1, shuffled_layout(seed)), out_dir / "xor_test.csv")
        config = out_dir / "xor.toml"
        text = _config_text(train.name, XOR_CLASSES, seed, XOR_EPOCHS, val_cloud=test.name)
        config.write_text(text, encoding="utf-8")
        return [train, test, config]
    raise ConfigurationError(f"Unknown synthetic variant {variant!r}; available: {list(SYNTH_VARIANTS)}")


SYNTH_VARIANTS: Sequence[str] = ("overfit", "xor")
