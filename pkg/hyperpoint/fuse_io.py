"""File formats and the 2D/3D bridging procedures.

Clouds are read and written as CSV or ASCII PLY, rasters as ESRI ASCII grids
(one file per band) and model parameters as an ``HPF1`` container. Spectra and
labels move between rasters and points by nearest pixel centre in XY.
"""

import io
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pyarrow as pa
import pyarrow.csv as pv

from hyperpoint.exceptions import CheckpointError, DataFormatError, EvaluationError
from hyperpoint.geom import KdTree
from hyperpoint.models import CloudFormat, GridSpec, GroundClassMap, PointCloud, RasterGrid

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

COORD_COLUMNS = ("x", "y", "z")
LABEL_COLUMN = "label"
CHECKPOINT_MAGIC = b"HPF1"
# unquoted header and fields
CSV_WRITE_OPTIONS = pv.WriteOptions(quoting_style="none", quoting_header="none")

# one colour per DFC2018 class, reused cyclically beyond 21 classes
PALETTE = np.array([
    [0, 0, 0], [50, 205, 50], [0, 128, 0], [107, 142, 35], [34, 139, 34],
    [139, 69, 19], [0, 0, 255], [210, 180, 140], [255, 0, 0], [178, 34, 34],
    [128, 128, 128], [255, 165, 0], [160, 82, 45], [105, 105, 105], [220, 220, 220],
    [255, 255, 0], [70, 130, 180], [255, 0, 255], [0, 255, 255], [255, 192, 203],
    [75, 0, 130],
], dtype=np.int64)


def infer_format(path: PathLike, fmt: Optional[CloudFormat] = None) -> CloudFormat:
    if fmt is not None:
        return CloudFormat(fmt)
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return CloudFormat.PLY
    if suffix in (".csv", ".txt"):
        return CloudFormat.CSV
    raise DataFormatError(f"Cannot infer cloud format from suffix {suffix!r}", path=str(path))


# Point clouds

def _locate_bad_row(lines: Sequence[str], n_fields: int, delimiter: Optional[str],
                    first_line: int) -> Optional[int]:
    """1-based file line of the first data row with the wrong field count or a non-number."""
    for offset, line in enumerate(lines):
        if not line.strip():
            continue
        fields = line.split(delimiter) if delimiter else line.split()
        if len(fields) != n_fields:
            return first_line + offset
        for field in fields:
            try:
                float(field)
            except ValueError:
                return first_line + offset
    return None


def _table_to_cloud(table: pa.Table, path: str, num_classes: Optional[int],
                    ignore_label: int) -> PointCloud:
    names = table.column_names
    missing = [c for c in COORD_COLUMNS if c not in names]
    if missing:
        raise DataFormatError(f"Missing coordinate columns {missing}", path=path)
    if table.num_rows == 0:
        raise DataFormatError("Point cloud is empty", path=path)
    for name in names:
        column = table.column(name)
        if column.null_count:
            row = int(np.flatnonzero(column.is_null().to_numpy(zero_copy_only=False))[0])
            raise DataFormatError(f"Empty value in column {name!r} at row {row}", path=path)
    coords = np.column_stack([table.column(c).to_numpy() for c in COORD_COLUMNS])
    bands = [c for c in names if c not in COORD_COLUMNS and c != LABEL_COLUMN]
    if bands:
        attrs = np.column_stack([table.column(c).to_numpy() for c in bands])
    else:
        attrs = np.zeros((table.num_rows, 0))
    labels = table.column(LABEL_COLUMN).to_numpy() if LABEL_COLUMN in names else None
    try:
        return PointCloud(coords=coords, attrs=attrs, labels=labels, band_names=bands,
                          num_classes=num_classes, ignore_label=ignore_label)
    except ValueError as e:
        raise DataFormatError(f"Invalid point cloud: {e}", path=path) from e


def _column_types(names: Sequence[str]) -> Dict[str, pa.DataType]:
    return {name: (pa.int64() if name == LABEL_COLUMN else pa.float64()) for name in names}


def _read_csv_cloud(path: Path, num_classes, ignore_label) -> PointCloud:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataFormatError(f"Cannot read {path}: {e}", path=str(path)) from e
    lines = text.splitlines()
    if not lines:
        raise DataFormatError("Point cloud is empty", path=str(path))
    header = [h.strip() for h in lines[0].split(",")]
    try:
        table = pv.read_csv(
            io.BytesIO(text.encode("utf-8")),
            parse_options=pv.ParseOptions(delimiter=","),
            convert_options=pv.ConvertOptions(column_types=_column_types(header)),
        )
    except pa.ArrowInvalid as e:
        line = _locate_bad_row(lines[1:], len(header), ",", first_line=2)
        logger.error(f"Malformed CSV cloud {path} at line {line}: {e}")
        raise DataFormatError(f"Malformed row at line {line}", path=str(path), line=line) from e
    return _table_to_cloud(table, str(path), num_classes, ignore_label)


def _read_ply_cloud(path: Path, num_classes, ignore_label) -> PointCloud:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataFormatError(f"Cannot read {path}: {e}", path=str(path)) from e
    if not lines or lines[0].strip() != "ply":
        raise DataFormatError("Missing 'ply' magic line", path=str(path), line=1)

    vertex_count = None
    properties: List[str] = []
    in_vertex = False
    end = None
    for number, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise DataFormatError(f"Only ASCII PLY is supported, got {raw!r}",
                                      path=str(path), line=number)
        elif parts[0] == "element":
            in_vertex = len(parts) == 3 and parts[1] == "vertex"
            if in_vertex:
                vertex_count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise DataFormatError("List properties on vertices are not supported",
                                      path=str(path), line=number)
            properties.append(parts[-1])
        elif parts[0] == "end_header":
            end = number
            break
    if end is None or vertex_count is None:
        raise DataFormatError("PLY header has no vertex element or no end_header", path=str(path))
    if vertex_count == 0:
        raise DataFormatError("Point cloud is empty", path=str(path))

    body = lines[end:end + vertex_count]
    if len(body) < vertex_count:
        raise DataFormatError(f"PLY declares {vertex_count} vertices, file holds {len(body)}",
                              path=str(path), line=end + len(body) + 1)
    normalized = "\n".join(" ".join(line.split()) for line in body) + "\n"
    try:
        table = pv.read_csv(
            io.BytesIO(normalized.encode("utf-8")),
            read_options=pv.ReadOptions(column_names=properties),
            parse_options=pv.ParseOptions(delimiter=" "),
            convert_options=pv.ConvertOptions(column_types=_column_types(properties)),
        )
    except pa.ArrowInvalid as e:
        line = _locate_bad_row(body, len(properties), None, first_line=end + 1)
        logger.error(f"Malformed PLY body {path} at line {line}: {e}")
        raise DataFormatError(f"Malformed vertex at line {line}", path=str(path), line=line) from e
    return _table_to_cloud(table, str(path), num_classes, ignore_label)


def load_point_cloud(path: PathLike, fmt: Optional[CloudFormat] = None,
                     num_classes: Optional[int] = None, ignore_label: int = 0) -> PointCloud:
    """Read a cloud; ``x,y,z`` are required, ``label`` is optional, every other column is a band."""
    path = Path(path)
    fmt = infer_format(path, fmt)
    if not path.exists():
        raise DataFormatError(f"No such file: {path}", path=str(path))
    reader = _read_ply_cloud if fmt == CloudFormat.PLY else _read_csv_cloud
    cloud = reader(path, num_classes, ignore_label)
    logger.info(f"Loaded {cloud.num_points} points with {cloud.num_bands} bands from {path}")
    return cloud


def _cloud_table(cloud: PointCloud) -> pa.Table:
    columns = {name: pa.array(cloud.coords[:, i]) for i, name in enumerate(COORD_COLUMNS)}
    for i, name in enumerate(cloud.band_names):
        columns[name] = pa.array(cloud.attrs[:, i])
    if cloud.labels is not None:
        columns[LABEL_COLUMN] = pa.array(cloud.labels, type=pa.int64())
    return pa.table(columns)


def _ply_header(count: int, properties: Sequence[str]) -> str:
    lines = ["ply", "format ascii 1.0", f"element vertex {count}"]
    lines.extend(properties)
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def _write_ply(path: Path, table: pa.Table, properties: Sequence[str]) -> None:
    with open(path, "wb") as f:
        f.write(_ply_header(table.num_rows, properties).encode("utf-8"))
        pv.write_csv(table, f, write_options=pv.WriteOptions(
            include_header=False, delimiter=" ", quoting_style="none"))


def save_point_cloud(cloud: PointCloud, path: PathLike, fmt: Optional[CloudFormat] = None) -> Path:
    """Write a cloud so that ``load_point_cloud`` returns bit-identical arrays."""
    path = Path(path)
    fmt = infer_format(path, fmt)
    table = _cloud_table(cloud)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        if fmt == CloudFormat.CSV:
            pv.write_csv(table, str(path), write_options=CSV_WRITE_OPTIONS)
        else:
            properties = [f"property double {name}" for name in COORD_COLUMNS + tuple(cloud.band_names)]
            if cloud.labels is not None:
                properties.append(f"property int {LABEL_COLUMN}")
            _write_ply(path, table, properties)
    except (OSError, pa.ArrowException) as e:
        logger.error(f"Failed to write {path}: {e}")
        raise DataFormatError(f"Cannot write {path}: {e}", path=str(path)) from e
    logger.info(f"Wrote {cloud.num_points} points to {path}")
    return path


def save_colorized_ply(cloud: PointCloud, path: PathLike) -> Path:
    """Write XYZ plus a fixed per-class RGB colour, for external viewers."""
    if cloud.labels is None:
        raise DataFormatError("Colorized output needs labels", path=str(path))
    path = Path(path)
    colors = PALETTE[cloud.labels % len(PALETTE)]
    columns = {name: pa.array(cloud.coords[:, i]) for i, name in enumerate(COORD_COLUMNS)}
    for i, channel in enumerate(("red", "green", "blue")):
        columns[channel] = pa.array(colors[:, i])
    columns[LABEL_COLUMN] = pa.array(cloud.labels)
    properties = [f"property double {c}" for c in COORD_COLUMNS]
    properties += [f"property uchar {c}" for c in ("red", "green", "blue")]
    properties.append(f"property int {LABEL_COLUMN}")
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_ply(path, pa.table(columns), properties)
    return path


def save_feature_table(features: np.ndarray, path: PathLike) -> Path:
    """Per-point feature rows ``f0..f{d-1}`` as CSV, in the given row order."""
    path = Path(path)
    columns = {f"f{i}": pa.array(features[:, i]) for i in range(features.shape[1])}
    path.parent.mkdir(parents=True, exist_ok=True)
    pv.write_csv(pa.table(columns), str(path), write_options=CSV_WRITE_OPTIONS)
    return path


# ESRI ASCII rasters

RASTER_HEADER = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")


def _format_number(value: float, integer: bool) -> str:
    return str(int(value)) if integer else repr(float(value))


def band_paths(path: PathLike, bands: int) -> List[Path]:
    """Files holding each band: ``path`` itself for one band, ``{stem}_b{i}{suffix}`` otherwise."""
    path = Path(path)
    if bands == 1:
        return [path]
    return [path.with_name(f"{path.stem}_b{i}{path.suffix}") for i in range(bands)]


def save_raster(raster: RasterGrid, path: PathLike) -> List[Path]:
    """Write each band as an ESRI ASCII grid, north row first."""
    integer = np.issubdtype(raster.values.dtype, np.integer)
    written = []
    for band, band_path in enumerate(band_paths(path, raster.bands)):
        header = [
            f"ncols {raster.width}",
            f"nrows {raster.height}",
            f"xllcorner {repr(float(raster.origin_xy[0]))}",
            f"yllcorner {repr(float(raster.origin_xy[1]))}",
            f"cellsize {repr(float(raster.cell))}",
            f"NODATA_value {_format_number(raster.nodata, integer)}",
        ]
        rows = raster.values[band][::-1]
        body = [" ".join(_format_number(v, integer) for v in row) for row in rows]
        band_path.parent.mkdir(parents=True, exist_ok=True)
        try:
            band_path.write_text("\n".join(header + body) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataFormatError(f"Cannot write {band_path}: {e}", path=str(band_path)) from e
        written.append(band_path)
    logger.info(f"Wrote {raster.bands}-band raster {raster.width}x{raster.height} to {path}")
    return written


def _parse_values(tokens: Sequence[str]) -> np.ndarray:
    try:
        return np.array(tokens, dtype=np.int64)
    except ValueError:
        return np.array(tokens, dtype=np.float64)


def _read_band(path: Path) -> RasterGrid:
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as e:
        raise DataFormatError(f"Cannot read raster {path}: {e}", path=str(path)) from e
    header: Dict[str, str] = {}
    for number, key in enumerate(RASTER_HEADER, start=1):
        parts = lines[number - 1].split() if number <= len(lines) else []
        if len(parts) != 2 or parts[0].lower() != key.lower():
            raise DataFormatError(f"Expected header field {key}", path=str(path), line=number)
        header[key] = parts[1]
    try:
        width, height = int(header["ncols"]), int(header["nrows"])
        origin = (float(header["xllcorner"]), float(header["yllcorner"]))
        cell = float(header["cellsize"])
    except ValueError as e:
        raise DataFormatError(f"Bad raster header: {e}", path=str(path)) from e

    tokens = " ".join(lines[len(RASTER_HEADER):]).split()
    if len(tokens) != width * height:
        raise DataFormatError(
            f"Raster declares {width}x{height} cells but holds {len(tokens)} values", path=str(path))
    try:
        values = _parse_values(tokens)
        nodata_token = header["NODATA_value"]
        nodata = float(int(nodata_token)) if values.dtype == np.int64 else float(nodata_token)
    except ValueError as e:
        raise DataFormatError(f"Non-numeric raster value: {e}", path=str(path)) from e
    grid = values.reshape(height, width)[::-1].copy()
    return RasterGrid(origin_xy=origin, cell=cell, width=width, height=height,
                      values=grid[np.newaxis], nodata=nodata)


def _band_index(path: Path) -> int:
    try:
        return int(path.stem.rsplit("_b", 1)[1])
    except ValueError as e:
        raise DataFormatError(f"Band file name {path.name!r} has no integer band index", path=str(path)) from e


def load_raster(path: PathLike) -> RasterGrid:
    """Read a single-band grid, or all ``{stem}_b{i}`` band files when ``path`` itself is absent."""
    path = Path(path)
    if path.exists():
        paths = [path]
    else:
        paths = sorted(path.parent.glob(f"{path.stem}_b*{path.suffix}"), key=_band_index)
        if not paths:
            raise DataFormatError(f"No raster at {path}", path=str(path))
        indices = [_band_index(p) for p in paths]
        if indices != list(range(len(paths))):
            raise DataFormatError(f"Band files are not numbered 0..{len(paths) - 1}: {indices}",
                                  path=str(path))
    bands = [_read_band(p) for p in paths]
    first = bands[0]
    for other, p in zip(bands[1:], paths[1:]):
        if other.spec != first.spec:
            raise DataFormatError("Band files disagree on grid geometry", path=str(p))
    values = np.concatenate([b.values for b in bands], axis=0)
    return RasterGrid.from_spec(first.spec, values)


def read_grid_spec(path: PathLike) -> GridSpec:
    """Grid geometry of an existing raster, used as the target of a projection."""
    return load_raster(path).spec


# Checkpoints

def save_checkpoint(path: PathLike, params: Mapping[str, np.ndarray]) -> Path:
    """Write named float64 tensors in the ``HPF1`` container."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC]
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.astype("<f8").tobytes(order="C"))
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Saved {len(params)} tensors to {path}")
    return path


def load_checkpoint(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    """Read every tensor of an ``HPF1`` container, in file order."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an HPF1 checkpoint (bad magic)")

    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 4

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise CheckpointError(f"{path} is truncated at byte {offset}")
        chunk = data[offset:offset + size]
        offset += size
        return chunk

    while offset < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: tensor name is not UTF-8") from e
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        params[name] = values.reshape(shape)
    return params


# 2D <-> 3D bridging

def _nearest_pixels(grid: GridSpec, xy: np.ndarray) -> np.ndarray:
    tree = KdTree(grid.pixel_centers())
    return tree.query(xy, 1).indices[:, 0]


def attach_spectra(cloud: PointCloud, raster: RasterGrid,
                   band_names: Optional[Sequence[str]] = None) -> PointCloud:
    """Append the bands of the pixel whose centre is nearest each point in XY.

    Points whose pixel holds nodata receive the nodata value and are flagged in
    ``nodata_mask``.
    """
    pixel = _nearest_pixels(raster.spec, cloud.coords[:, :2])
    values = raster.flat_bands()[pixel].astype(np.float64)
    flagged = raster.nodata_pixels()[pixel]
    if flagged.any():
        logger.warning(f"{int(flagged.sum())} points fall on nodata pixels")
    offset = cloud.num_bands
    names = list(band_names) if band_names else [f"band_{offset + i}" for i in range(raster.bands)]
    previous = cloud.nodata_mask if cloud.nodata_mask is not None else np.zeros(cloud.num_points, bool)
    return PointCloud(
        coords=cloud.coords,
        attrs=np.hstack([cloud.attrs, values]),
        labels=cloud.labels,
        ignore_label=cloud.ignore_label,
        band_names=list(cloud.band_names) + names,
        num_classes=cloud.num_classes,
        nodata_mask=previous | flagged,
    )


def transfer_labels_2d_to_3d(cloud: PointCloud, label_raster: RasterGrid) -> PointCloud:
    """Label each point with its nearest pixel's class (nadir view); nodata gives ignore_label."""
    if not label_raster.is_label:
        raise DataFormatError("Label raster must have a single integer band")
    pixel = _nearest_pixels(label_raster.spec, cloud.coords[:, :2])
    flat = label_raster.values[0].reshape(-1)
    labels = flat[pixel].astype(np.int64)
    labels[flat[pixel] == label_raster.nodata] = cloud.ignore_label
    return cloud.with_labels(labels)


def project_labels_3d_to_2d(cloud: PointCloud, grid: GridSpec,
                            ground_map: GroundClassMap) -> RasterGrid:
    """Render point labels onto ``grid`` in two passes.

    Occupied pixels first take the label of the nearest ground-class point in
    XY. Any pixel holding a non-ground point is then overwritten by its
    highest non-ground point (lower index on equal height). Empty pixels stay
    nodata.
    """
    if cloud.labels is None:
        raise EvaluationError("Projection needs a labelled cloud")
    ground_map.validate_classes(cloud.labels, cloud.num_classes)
    labels = cloud.labels
    is_ground = ground_map.ground_mask(labels)

    col, row = grid.pixel_of(cloud.coords[:, :2])
    inside = col >= 0
    pixel = np.where(inside, row * grid.width + col, -1)
    out = np.full(grid.width * grid.height, int(grid.nodata), dtype=np.int64)

    occupied = np.unique(pixel[inside])
    ground_idx = np.flatnonzero(is_ground)
    if occupied.size and ground_idx.size:
        tree = KdTree(cloud.coords[ground_idx, :2])
        nearest = tree.query(grid.pixel_centers()[occupied], 1).indices[:, 0]
        out[occupied] = labels[ground_idx[nearest]]

    upper = np.flatnonzero(~is_ground & inside)
    if upper.size:
        order = np.lexsort((upper, -cloud.coords[upper, 2], pixel[upper]))
        ranked = upper[order]
        first_pixels, first = np.unique(pixel[ranked], return_index=True)
        out[first_pixels] = labels[ranked[first]]

    logger.info(f"Projected {cloud.num_points} points onto {occupied.size} of "
                f"{grid.width * grid.height} pixels")
    return RasterGrid.from_spec(grid, out.reshape(grid.height, grid.width)[np.newaxis])
