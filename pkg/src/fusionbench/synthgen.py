"""Synthetic aligned multimodal scenes with planted class signatures.

Each class leaves its mark in the modality where the real phenomenon is
most visible: middens as thermal hotspots, mounds as LiDAR elevation
bumps, water as a cool, blue river strip. Backgrounds are zero-mean
correlated noise, so a feature's amplitude is directly in noise-std units.
Everything is a pure function of the scene spec, including its seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .ingest import (
    FeaturePoint,
    GridSpec,
    RasterMosaic,
    write_mosaic,
    write_points_csv,
)

logger = logging.getLogger(__name__)

# spatial correlation length of the background noise, meters
_NOISE_CORR_M = 1.0
# blob width as a fraction of the cell side
_BUMP_SIGMA_FRAC = 1.0 / 6.0
_RIDGE_SIGMA_FRAC = 1.0 / 5.0


@dataclass(frozen=True)
class SceneSpec:
    n_rows: int
    n_cols: int
    cell_size_m: float = 20.0
    res_thermal: float = 0.5
    res_rgb: float = 0.05
    res_lidar: float = 0.1
    n_midden: int = 0
    n_mound: int = 0
    n_water: int = 0  # number of river strips
    water_strip_cells: int = 3
    midden_amp: float = 3.0
    mound_height: float = 3.0
    water_blue_shift: float = 2.0
    water_cool: float = 2.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("scene needs at least one grid cell")
        if min(self.n_midden, self.n_mound, self.n_water) < 0:
            raise ValueError("feature counts cannot be negative")
        if self.water_strip_cells < 1:
            raise ValueError("water strips must cover at least one cell")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        for res in (self.res_thermal, self.res_rgb, self.res_lidar):
            side = self.cell_size_m / res
            if abs(side - round(side)) > 1e-9 * side:
                raise ValueError(
                    f"resolution {res} m does not divide the {self.cell_size_m} m cell"
                )
        needed = self.n_midden + self.n_mound + self.n_water * self.water_strip_cells
        if needed > self.n_rows * self.n_cols:
            raise ValueError(
                f"{needed} feature cells do not fit a {self.n_rows}x{self.n_cols} grid"
            )

    @property
    def origin(self) -> tuple[float, float]:
        return (0.0, self.n_rows * self.cell_size_m)

    def grid(self) -> GridSpec:
        return GridSpec(
            n_rows=self.n_rows,
            n_cols=self.n_cols,
            cell_size_m=self.cell_size_m,
            origin=self.origin,
        )


def difficulty_dial(spec: SceneSpec, level: float) -> SceneSpec:
    """Scale every class signature by (1 - level).

    Level 0 keeps the spec's amplitudes; level 1 silences the signatures
    entirely, leaving pure background, so any classifier should fall to
    chance. Placement, counts, and the seed are untouched.
    """
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"difficulty level must be in [0, 1], got {level}")
    k = 1.0 - level
    return replace(
        spec,
        midden_amp=spec.midden_amp * k,
        mound_height=spec.mound_height * k,
        water_blue_shift=spec.water_blue_shift * k,
        water_cool=spec.water_cool * k,
    )


def _place_features(spec: SceneSpec, rng: np.random.Generator):
    """Choose distinct cells for every feature instance.

    Returns (strips, single_cells) where strips is a list of cell runs (one
    per water instance) and single_cells maps class name to cell lists.
    """
    free = {(r, c) for r in range(spec.n_rows) for c in range(spec.n_cols)}
    strips: list[list[tuple[int, int]]] = []
    max_attempts = 200 * max(spec.n_water, 1)
    attempts = 0
    while len(strips) < spec.n_water:
        if attempts >= max_attempts:
            raise ValueError(
                "could not place all water strips; scene too crowded for "
                f"{spec.n_water} strips of {spec.water_strip_cells} cells"
            )
        attempts += 1
        horizontal = bool(rng.integers(0, 2))
        length = spec.water_strip_cells
        if horizontal:
            if spec.n_cols < length:
                horizontal = False
        if not horizontal and spec.n_rows < length:
            if spec.n_cols < length:
                raise ValueError("water strip longer than both grid dimensions")
            horizontal = True
        if horizontal:
            r = int(rng.integers(0, spec.n_rows))
            c0 = int(rng.integers(0, spec.n_cols - length + 1))
            run = [(r, c0 + i) for i in range(length)]
        else:
            r0 = int(rng.integers(0, spec.n_rows - length + 1))
            c = int(rng.integers(0, spec.n_cols))
            run = [(r0 + i, c) for i in range(length)]
        if all(cell in free for cell in run):
            strips.append(run)
            free.difference_update(run)

    single_cells: dict[str, list[tuple[int, int]]] = {}
    for name, count in (("midden", spec.n_midden), ("mound", spec.n_mound)):
        pool = sorted(free)
        idx = rng.choice(len(pool), size=count, replace=False)
        chosen = [pool[i] for i in idx]
        free.difference_update(chosen)
        single_cells[name] = chosen
    return strips, single_cells


def _background(shape, res: float, noise_std: float, rng: np.random.Generator):
    """Zero-mean noise with ~1 m spatial correlation, rescaled to noise_std."""
    white = rng.normal(size=shape)
    sigma_px = _NOISE_CORR_M / res
    smooth = ndimage.gaussian_filter(white, sigma=(0, sigma_px, sigma_px))
    smooth *= noise_std / smooth.std()
    return smooth


def _cell_window(cell, side):
    r, c = cell
    return slice(r * side, (r + 1) * side), slice(c * side, (c + 1) * side)


def _bump(side: int) -> np.ndarray:
    """Radial Gaussian of peak 1 centered in a side x side cell window."""
    sigma = side * _BUMP_SIGMA_FRAC
    coords = np.arange(side) - (side - 1) / 2.0
    g = np.exp(-(coords**2) / (2 * sigma**2))
    return np.outer(g, g)


def _ridge(side: int, horizontal: bool) -> np.ndarray:
    """Gaussian band crossing the full cell along one axis."""
    sigma = side * _RIDGE_SIGMA_FRAC
    coords = np.arange(side) - (side - 1) / 2.0
    profile = np.exp(-(coords**2) / (2 * sigma**2))
    if horizontal:
        return np.tile(profile[:, None], (1, side))
    return np.tile(profile[None, :], (side, 1))


def generate_scene(spec: SceneSpec) -> tuple[dict[str, RasterMosaic], list[FeaturePoint]]:
    """Build the three aligned mosaics and the ground-truth feature points.

    Every planted signature is confined to its own cell's pixel window, so
    cells outside the returned feature points carry pure background. One
    feature point is emitted per covered cell, at the cell center.
    """
    rng = np.random.default_rng(spec.seed)
    strips, single_cells = _place_features(spec, rng)

    sides = {
        "thermal": round(spec.cell_size_m / spec.res_thermal),
        "rgb": round(spec.cell_size_m / spec.res_rgb),
        "lidar": round(spec.cell_size_m / spec.res_lidar),
    }
    resolutions = {"thermal": spec.res_thermal, "rgb": spec.res_rgb, "lidar": spec.res_lidar}
    bands = {"thermal": 1, "rgb": 3, "lidar": 1}
    pixels = {
        name: _background(
            (bands[name], spec.n_rows * sides[name], spec.n_cols * sides[name]),
            resolutions[name],
            spec.noise_std,
            rng,
        )
        for name in ("thermal", "rgb", "lidar")
    }

    for cell in single_cells["midden"]:
        ys, xs = _cell_window(cell, sides["thermal"])
        pixels["thermal"][0, ys, xs] += spec.midden_amp * _bump(sides["thermal"])
    for cell in single_cells["mound"]:
        ys, xs = _cell_window(cell, sides["lidar"])
        pixels["lidar"][0, ys, xs] += spec.mound_height * _bump(sides["lidar"])
    for run in strips:
        horizontal = len(run) == 1 or run[0][0] == run[1][0]
        for cell in run:
            ys, xs = _cell_window(cell, sides["thermal"])
            band = _ridge(sides["thermal"], horizontal)
            pixels["thermal"][0, ys, xs] -= spec.water_cool * band
            ys, xs = _cell_window(cell, sides["rgb"])
            pixels["rgb"][2, ys, xs] += spec.water_blue_shift * _ridge(sides["rgb"], horizontal)

    mosaics = {
        name: RasterMosaic(
            modality=name,
            resolution_m=resolutions[name],
            origin=spec.origin,
            pixels=pixels[name].astype(np.float32),
        )
        for name in ("thermal", "rgb", "lidar")
    }

    points = []
    half = spec.cell_size_m / 2.0
    e0, n1 = spec.origin
    def center(cell):
        r, c = cell
        return (e0 + c * spec.cell_size_m + half, n1 - r * spec.cell_size_m - half)

    for cell in single_cells["midden"]:
        points.append(FeaturePoint("midden", center(cell)))
    for cell in single_cells["mound"]:
        points.append(FeaturePoint("mound", center(cell)))
    for run in strips:
        for cell in run:
            points.append(FeaturePoint("water", center(cell)))
    logger.info(
        "generated %dx%d scene: %d middens, %d mounds, %d water cells",
        spec.n_rows, spec.n_cols, spec.n_midden, spec.n_mound,
        sum(len(r) for r in strips),
    )
    return mosaics, points


def save_scene(
    mosaics: dict[str, RasterMosaic],
    points: list[FeaturePoint],
    out_dir: str | Path,
) -> dict[str, Path]:
    """Write the mosaics and points in the formats the ingest module reads."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, mosaic in mosaics.items():
        paths[name] = out_dir / f"{name}.tif"
        write_mosaic(mosaic, paths[name])
    paths["points"] = out_dir / "points.csv"
    write_points_csv(points, paths["points"])
    return paths
