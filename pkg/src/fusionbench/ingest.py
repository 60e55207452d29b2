"""Raster ingestion: read aligned multimodal GeoTIFFs, gridify them into
fixed-size tiles, and label grid cells from feature-point coordinates.

Conventions used throughout:

* A mosaic's ``origin`` is the (easting, northing) of its northwest corner,
  matching the GeoTIFF tiepoint of a north-up raster. Pixel row 0 is the
  northernmost row.
* Grid cell (0, 0) sits at the grid origin; rows increase southward and
  columns increase eastward, in step with pixel order.
* Cells are half-open boxes: a point on a shared edge belongs to the cell
  for which that edge is the low (origin-side) edge, so every point maps to
  exactly one cell.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile
from scipy import ndimage

logger = logging.getLogger(__name__)

MODALITIES = ("thermal", "rgb", "lidar")
MODALITY_BANDS = {"thermal": 1, "rgb": 3, "lidar": 1}

CLASS_NAMES = ("empty", "midden", "mound", "water")
FEATURE_CLASSES = ("midden", "mound", "water")
LABEL_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}

# GeoTIFF geotransform tags
_TAG_MODEL_PIXEL_SCALE = 33550
_TAG_MODEL_TIEPOINT = 33922
_TAG_GDAL_NODATA = 42113

# Geographic extents must agree to this many meters to count as aligned.
EXTENT_TOL_M = 1e-6


@dataclass(frozen=True)
class RasterMosaic:
    """One modality's georeferenced raster.

    ``pixels`` has shape (bands, height, width) with no-data already filled
    by the band mean; ``valid`` marks which pixels carried real data.
    """

    modality: str
    resolution_m: float
    origin: tuple[float, float]  # (easting, northing) of the NW corner
    pixels: np.ndarray
    valid: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be (bands, h, w), got shape {self.pixels.shape}")
        expected = MODALITY_BANDS[self.modality]
        if self.pixels.shape[0] != expected:
            raise ValueError(
                f"{self.modality} mosaic must have {expected} band(s), got {self.pixels.shape[0]}"
            )
        if self.resolution_m <= 0:
            raise ValueError("resolution_m must be positive")
        if self.height == 0 or self.width == 0:
            raise ValueError("mosaic must have nonzero height and width")
        if self.valid is None:
            object.__setattr__(self, "valid", np.ones(self.pixels.shape[1:], dtype=bool))

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def width_m(self) -> float:
        return self.width * self.resolution_m

    @property
    def height_m(self) -> float:
        return self.height * self.resolution_m

    def extent(self) -> tuple[float, float, float, float]:
        """(east_min, east_max, north_min, north_max) in meters."""
        e0, n1 = self.origin
        return (e0, e0 + self.width_m, n1 - self.height_m, n1)


@dataclass(frozen=True)
class FeaturePoint:
    """A labeled feature location in mosaic coordinates (meters)."""

    class_label: str
    position: tuple[float, float]  # (easting, northing)

    def __post_init__(self):
        if self.class_label not in FEATURE_CLASSES:
            raise ValueError(f"unknown feature class {self.class_label!r}")


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned square grid anchored at its NW corner."""

    n_rows: int
    n_cols: int
    cell_size_m: float = 20.0
    origin: tuple[float, float] = (0.0, 0.0)  # (easting, northing) of NW corner

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid must have at least one row and one column")
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")

    @classmethod
    def cover(cls, mosaic: RasterMosaic, cell_size_m: float = 20.0) -> "GridSpec":
        """Largest grid of whole cells anchored at the mosaic origin.

        Trailing partial cells (extent not divisible by the cell size) are
        dropped rather than padded.
        """
        n_rows = int(mosaic.height_m / cell_size_m + 1e-9)
        n_cols = int(mosaic.width_m / cell_size_m + 1e-9)
        if n_rows < 1 or n_cols < 1:
            raise ValueError("mosaic smaller than one grid cell")
        return cls(n_rows=n_rows, n_cols=n_cols, cell_size_m=cell_size_m, origin=mosaic.origin)

    def extent(self) -> tuple[float, float, float, float]:
        e0, n1 = self.origin
        return (
            e0,
            e0 + self.n_cols * self.cell_size_m,
            n1 - self.n_rows * self.cell_size_m,
            n1,
        )

    def cell_of(self, easting: float, northing: float) -> tuple[int, int] | None:
        """Cell containing the point, or None if outside the grid.

        Both axes are half-open toward increasing cell index: the west and
        north edges of a cell are inclusive, the east and south edges belong
        to the neighbor.
        """
        e0, n1 = self.origin
        col = math.floor((easting - e0) / self.cell_size_m)
        row = math.floor((n1 - northing) / self.cell_size_m)
        # A point exactly on the grid's north edge has row == 0 via floor(0);
        # on the south/east outer edges it falls out of range.
        if 0 <= row < self.n_rows and 0 <= col < self.n_cols:
            return (row, col)
        return None

    def contains(self, easting: float, northing: float) -> bool:
        return self.cell_of(easting, northing) is not None


@dataclass(frozen=True)
class TileSample:
    """Three co-registered tiles for one grid cell plus its class label."""

    cell: tuple[int, int]
    label: int
    thermal: np.ndarray  # (1, s, s)
    rgb: np.ndarray      # (3, S, S)
    lidar: np.ndarray    # (1, s2, s2)

    def __post_init__(self):
        if not 0 <= self.label < len(CLASS_NAMES):
            raise ValueError(f"label must be in [0, {len(CLASS_NAMES)}), got {self.label}")
        for name in MODALITIES:
            tile = self.tile(name)
            if tile.ndim != 3 or tile.shape[0] != MODALITY_BANDS[name]:
                raise ValueError(f"{name} tile has bad shape {tile.shape}")
            if tile.shape[1] != tile.shape[2]:
                raise ValueError(f"{name} tile must be square, got {tile.shape}")

    def tile(self, modality: str) -> np.ndarray:
        return getattr(self, modality)

    @property
    def label_name(self) -> str:
        return CLASS_NAMES[self.label]


def load_mosaic(path: str | Path, modality: str) -> RasterMosaic:
    """Read a georeferenced GeoTIFF into a RasterMosaic.

    The file must carry ModelPixelScale and ModelTiepoint tags. NaN pixels
    (and any value equal to the GDAL nodata tag) are treated as no-data:
    they are recorded in the validity mask and filled with the band mean so
    downstream tiling sees finite values.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    with tifffile.TiffFile(path) as tif:
        page = tif.pages[0]
        data = tif.asarray()
        scale_tag = page.tags.get(_TAG_MODEL_PIXEL_SCALE)
        tie_tag = page.tags.get(_TAG_MODEL_TIEPOINT)
        nodata_tag = page.tags.get(_TAG_GDAL_NODATA)
        if scale_tag is None or tie_tag is None:
            raise ValueError(f"{path}: missing georeferencing (pixel scale / tiepoint tags)")
        scale = tuple(scale_tag.value)
        tie = tuple(tie_tag.value)
        nodata_raw = None if nodata_tag is None else str(nodata_tag.value)
    sx, sy = scale[0], scale[1]
    if abs(sx - sy) > 1e-12 * max(sx, sy):
        raise ValueError(f"{path}: non-square pixels ({sx} x {sy}) are not supported")
    if tuple(tie[:3]) != (0.0, 0.0, 0.0):
        raise ValueError(f"{path}: tiepoint must anchor pixel (0, 0)")
    origin = (float(tie[3]), float(tie[4]))

    if data.ndim == 2:
        data = data[None]
    data = np.ascontiguousarray(data, dtype=np.float32)
    expected = MODALITY_BANDS[modality]
    if data.shape[0] != expected:
        raise ValueError(
            f"{path}: band count {data.shape[0]} does not match "
            f"modality {modality!r} (expected {expected})"
        )

    invalid = np.isnan(data)
    if nodata_raw is not None:
        try:
            nodata = float(nodata_raw.strip())
        except ValueError:
            nodata = None
        if nodata is not None and not math.isnan(nodata):
            invalid |= data == nodata
    valid = ~invalid.any(axis=0)
    if invalid.any():
        for b in range(data.shape[0]):
            bad = invalid[b]
            if bad.all():
                raise ValueError(f"{path}: band {b} has no valid pixels")
            data[b][bad] = data[b][~bad].mean()
        logger.warning("%s: filled %d no-data pixels with band means", path, int((~valid).sum()))

    return RasterMosaic(
        modality=modality, resolution_m=float(sx), origin=origin, pixels=data, valid=valid
    )


def write_mosaic(mosaic: RasterMosaic, path: str | Path) -> None:
    """Write a RasterMosaic as a GeoTIFF with geotransform tags."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    res = mosaic.resolution_m
    e0, n1 = mosaic.origin
    extratags = [
        (_TAG_MODEL_PIXEL_SCALE, "d", 3, (res, res, 0.0), True),
        (_TAG_MODEL_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, e0, n1, 0.0), True),
    ]
    data = mosaic.pixels.astype(np.float32)
    if data.shape[0] == 1:
        tifffile.imwrite(path, data[0], photometric="minisblack", extratags=extratags)
    else:
        tifffile.imwrite(
            path, data, photometric="minisblack", planarconfig="separate", extratags=extratags
        )


def load_points(
    path: str | Path, extent: tuple[float, float, float, float] | None = None
) -> tuple[list[FeaturePoint], int]:
    """Read feature points from a ``class,easting,northing`` CSV.

    If ``extent`` is given (east_min, east_max, north_min, north_max),
    points outside it are dropped; the count of rejected points is returned
    and logged. The CSV coordinates must already be in the rasters' CRS.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"points file not found: {path}")
    points: list[FeaturePoint] = []
    n_rejected = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"class", "easting", "northing"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: header must contain columns class,easting,northing")
        for row in reader:
            p = FeaturePoint(
                class_label=row["class"].strip(),
                position=(float(row["easting"]), float(row["northing"])),
            )
            if extent is not None:
                e, n = p.position
                e_min, e_max, n_min, n_max = extent
                if not (e_min <= e < e_max and n_min < n <= n_max):
                    n_rejected += 1
                    continue
            points.append(p)
    if n_rejected:
        logger.warning("%s: rejected %d points outside the mosaic extent", path, n_rejected)
    return points, n_rejected


def write_points_csv(points: list[FeaturePoint], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "easting", "northing"])
        for p in points:
            writer.writerow([p.class_label, repr(p.position[0]), repr(p.position[1])])


def _pixels_per_cell(cell_size_m: float, resolution_m: float) -> int:
    """Tile side length in pixels; errors unless the ratio is integral."""
    ratio = cell_size_m / resolution_m
    side = round(ratio)
    if side < 1 or abs(ratio - side) > 1e-9 * ratio:
        raise ValueError(
            f"cell size {cell_size_m} m is not an integer multiple of the "
            f"{resolution_m} m/px resolution; tiles would be misaligned"
        )
    return side


def _pixel_offset(grid: GridSpec, mosaic: RasterMosaic) -> tuple[int, int]:
    """Pixel offset of the grid origin inside the mosaic (row, col)."""
    de = (grid.origin[0] - mosaic.origin[0]) / mosaic.resolution_m
    dn = (mosaic.origin[1] - grid.origin[1]) / mosaic.resolution_m
    off_col, off_row = round(de), round(dn)
    if abs(de - off_col) > 1e-9 * max(1.0, abs(de)) or abs(dn - off_row) > 1e-9 * max(1.0, abs(dn)):
        raise ValueError("grid origin does not fall on a pixel boundary of the mosaic")
    return off_row, off_col


def gridify(mosaic: RasterMosaic, grid: GridSpec) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Cut the mosaic into one square tile per grid cell, row-major order.

    Tiles partition the retained pixel area exactly; the grid extent must
    lie within the mosaic and align with its pixel lattice.
    """
    side = _pixels_per_cell(grid.cell_size_m, mosaic.resolution_m)
    off_row, off_col = _pixel_offset(grid, mosaic)
    if off_row < 0 or off_col < 0:
        raise ValueError("grid origin lies outside the mosaic")
    if off_row + grid.n_rows * side > mosaic.height or off_col + grid.n_cols * side > mosaic.width:
        raise ValueError(
            f"grid extent ({grid.n_rows}x{grid.n_cols} cells of {side} px) "
            f"exceeds mosaic size {mosaic.height}x{mosaic.width}"
        )
    tiles = []
    for r in range(grid.n_rows):
        for c in range(grid.n_cols):
            y0 = off_row + r * side
            x0 = off_col + c * side
            tile = mosaic.pixels[:, y0 : y0 + side, x0 : x0 + side].copy()
            tiles.append(((r, c), tile))
    return tiles


def assign_labels(grid: GridSpec, points: list[FeaturePoint]) -> dict[tuple[int, int], int]:
    """Map every grid cell to a class label.

    Cells containing at least one feature point take that feature's class;
    all other cells are labeled empty. A point outside the grid violates the
    caller contract and raises; a cell containing points of two different
    classes raises rather than silently picking one.
    """
    labels = {(r, c): LABEL_INDEX["empty"] for r in range(grid.n_rows) for c in range(grid.n_cols)}
    conflicts = []
    for p in points:
        cell = grid.cell_of(*p.position)
        if cell is None:
            raise ValueError(f"feature point at {p.position} lies outside the grid extent")
        new = LABEL_INDEX[p.class_label]
        old = labels[cell]
        if old != LABEL_INDEX["empty"] and old != new:
            conflicts.append((cell, CLASS_NAMES[old], p.class_label))
        labels[cell] = new
    if conflicts:
        listing = "; ".join(f"cell {c}: {a} vs {b}" for c, a, b in conflicts)
        raise ValueError(f"cells contain points of conflicting classes: {listing}")
    return labels


def resample_bicubic(tile: np.ndarray, factor: int) -> np.ndarray:
    """Upsample a (1, h, w) tile by an integer factor with cubic interpolation."""
    if tile.ndim != 3 or tile.shape[0] != 1:
        raise ValueError(f"expected a (1, h, w) tile, got shape {tile.shape}")
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return tile.copy()
    out = ndimage.zoom(
        tile[0].astype(np.float64), factor, order=3, mode="reflect", grid_mode=True
    )
    expected = (tile.shape[1] * factor, tile.shape[2] * factor)
    if out.shape != expected:
        raise AssertionError(f"resampled shape {out.shape} != expected {expected}")
    return out[None].astype(tile.dtype)


def check_aligned(mosaics: dict[str, RasterMosaic]) -> None:
    """Verify all mosaics share one geographic extent within EXTENT_TOL_M."""
    items = list(mosaics.values())
    ref = items[0]
    for m in items[1:]:
        if (
            abs(m.origin[0] - ref.origin[0]) > EXTENT_TOL_M
            or abs(m.origin[1] - ref.origin[1]) > EXTENT_TOL_M
            or abs(m.width_m - ref.width_m) > EXTENT_TOL_M
            or abs(m.height_m - ref.height_m) > EXTENT_TOL_M
        ):
            raise ValueError(
                f"{m.modality} mosaic extent {m.extent()} does not match "
                f"{ref.modality} extent {ref.extent()}"
            )


def collect_samples(
    mosaics: dict[str, RasterMosaic],
    grid: GridSpec,
    points: list[FeaturePoint],
) -> tuple[list[TileSample], int]:
    """Tile all three mosaics on a shared grid and attach cell labels.

    Points falling outside the grid (e.g. in dropped trailing cells) are
    discarded with a warning count, mirroring the load-time extent filter.
    Returns (samples in row-major cell order, number of dropped points).
    """
    missing = [name for name in MODALITIES if name not in mosaics]
    if missing:
        raise ValueError(f"missing modalities: {missing}")
    check_aligned(mosaics)

    kept = [p for p in points if grid.contains(*p.position)]
    n_dropped = len(points) - len(kept)
    if n_dropped:
        logger.warning("dropped %d feature points outside the grid extent", n_dropped)
    labels = assign_labels(grid, kept)

    tiles = {name: gridify(mosaics[name], grid) for name in MODALITIES}
    sides = {
        name: _pixels_per_cell(grid.cell_size_m, mosaics[name].resolution_m)
        for name in MODALITIES
    }
    samples = []
    for i, (cell, thermal_tile) in enumerate(tiles["thermal"]):
        rgb_cell, rgb_tile = tiles["rgb"][i]
        lidar_cell, lidar_tile = tiles["lidar"][i]
        if rgb_cell != cell or lidar_cell != cell:
            raise AssertionError("modality tile orderings diverged")
        for name, tile in (("thermal", thermal_tile), ("rgb", rgb_tile), ("lidar", lidar_tile)):
            s = sides[name]
            if tile.shape[1:] != (s, s):
                raise ValueError(f"cell {cell}: {name} tile shape {tile.shape[1:]} != ({s}, {s})")
        samples.append(
            TileSample(cell=cell, label=labels[cell], thermal=thermal_tile, rgb=rgb_tile, lidar=lidar_tile)
        )
    return samples, n_dropped
