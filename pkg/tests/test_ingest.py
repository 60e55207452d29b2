import math

import numpy as np
import pytest

from fusionbench.ingest import (
    CLASS_NAMES,
    LABEL_INDEX,
    FeaturePoint,
    GridSpec,
    RasterMosaic,
    assign_labels,
    check_aligned,
    collect_samples,
    gridify,
    load_mosaic,
    load_points,
    resample_bicubic,
    write_mosaic,
    write_points_csv,
)


def make_mosaic(modality="thermal", res=0.5, origin=(100.0, 500.0), h=80, w=120, seed=0):
    bands = {"thermal": 1, "rgb": 3, "lidar": 1}[modality]
    rng = np.random.default_rng(seed)
    pixels = rng.normal(size=(bands, h, w)).astype(np.float32)
    return RasterMosaic(modality=modality, resolution_m=res, origin=origin, pixels=pixels)


def test_geotiff_roundtrip(tmp_path):
    for modality, res, shape in [("thermal", 0.5, (1, 40, 60)), ("rgb", 0.05, (3, 400, 600))]:
        m = make_mosaic(modality, res=res, h=shape[1], w=shape[2])
        path = tmp_path / f"{modality}.tif"
        write_mosaic(m, path)
        back = load_mosaic(path, modality)
        assert back.pixels.shape == shape
        np.testing.assert_array_equal(back.pixels, m.pixels)
        assert back.origin == m.origin
        assert back.resolution_m == pytest.approx(res)
        assert back.valid.all()


def test_nodata_filled_with_band_mean(tmp_path):
    m = make_mosaic("thermal", h=10, w=10)
    pixels = m.pixels.copy()
    pixels[0, 2, 3] = np.nan
    pixels[0, 7, 1] = np.nan
    holed = RasterMosaic("thermal", m.resolution_m, m.origin, pixels)
    path = tmp_path / "holed.tif"
    write_mosaic(holed, path)
    back = load_mosaic(path, "thermal")
    assert not back.valid[2, 3] and not back.valid[7, 1]
    assert back.valid.sum() == 98
    good = np.isfinite(pixels[0])
    expected_fill = pixels[0][good].mean()
    assert back.pixels[0, 2, 3] == pytest.approx(expected_fill, rel=1e-6)
    assert np.isfinite(back.pixels).all()


def test_load_mosaic_band_count_mismatch(tmp_path):
    m = make_mosaic("thermal")
    path = tmp_path / "t.tif"
    write_mosaic(m, path)
    with pytest.raises(ValueError, match="band count"):
        load_mosaic(path, "rgb")


def test_load_mosaic_requires_geotags(tmp_path):
    import tifffile

    path = tmp_path / "plain.tif"
    tifffile.imwrite(path, np.zeros((8, 8), dtype=np.float32))
    with pytest.raises(ValueError, match="georeferencing"):
        load_mosaic(path, "thermal")


def test_mosaic_band_validation():
    with pytest.raises(ValueError):
        RasterMosaic("rgb", 0.05, (0, 0), np.zeros((1, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        RasterMosaic("thermal", -1.0, (0, 0), np.zeros((1, 4, 4), dtype=np.float32))


def test_points_csv_roundtrip(tmp_path):
    pts = [
        FeaturePoint("midden", (12.5, 340.25)),
        FeaturePoint("water", (800.0, 20.0)),
        FeaturePoint("mound", (0.1, 0.2)),
    ]
    path = tmp_path / "pts.csv"
    write_points_csv(pts, path)
    back, n_rej = load_points(path)
    assert n_rej == 0
    assert back == pts


def test_load_points_extent_filter(tmp_path):
    pts = [
        FeaturePoint("midden", (5.0, 95.0)),     # inside
        FeaturePoint("water", (150.0, 95.0)),    # east of extent
        FeaturePoint("mound", (5.0, 101.0)),     # north of extent
        FeaturePoint("midden", (0.0, 100.0)),    # NW corner, inclusive
        FeaturePoint("water", (100.0, 50.0)),    # east edge, exclusive
    ]
    path = tmp_path / "pts.csv"
    write_points_csv(pts, path)
    kept, n_rej = load_points(path, extent=(0.0, 100.0, 0.0, 100.0))
    assert n_rej == 3
    assert [p.class_label for p in kept] == ["midden", "midden"]


# --- grid geometry ---


def brute_force_cell(grid, easting, northing):
    """Independent point-in-cell check: scan every cell's half-open box."""
    e0, n1 = grid.origin
    s = grid.cell_size_m
    hits = []
    for r in range(grid.n_rows):
        for c in range(grid.n_cols):
            east_lo, east_hi = e0 + c * s, e0 + (c + 1) * s
            # distance south of the grid's north edge
            d_lo, d_hi = r * s, (r + 1) * s
            d = n1 - northing
            if east_lo <= easting < east_hi and d_lo <= d < d_hi:
                hits.append((r, c))
    assert len(hits) <= 1, f"point in {len(hits)} cells"
    return hits[0] if hits else None


def test_cell_of_matches_brute_force():
    grid = GridSpec(n_rows=4, n_cols=5, cell_size_m=20.0, origin=(300.0, 900.0))
    rng = np.random.default_rng(42)
    # random interior points plus every cell corner and edge midpoint
    probes = [(300.0 + x, 900.0 - y) for x, y in rng.uniform(-10, 130, size=(200, 2))]
    for r in range(5):
        for c in range(6):
            e, n = 300.0 + c * 20.0, 900.0 - r * 20.0
            probes += [(e, n), (e + 10.0, n), (e, n - 10.0)]
    for e, n in probes:
        assert grid.cell_of(e, n) == brute_force_cell(grid, e, n), (e, n)


def test_cell_edges_half_open():
    grid = GridSpec(n_rows=2, n_cols=2, cell_size_m=10.0, origin=(0.0, 20.0))
    assert grid.cell_of(0.0, 20.0) == (0, 0)        # NW corner of the grid
    assert grid.cell_of(10.0, 20.0) == (0, 1)       # shared vertical edge -> east cell
    assert grid.cell_of(5.0, 10.0) == (1, 0)        # shared horizontal edge -> south cell
    assert grid.cell_of(20.0, 15.0) is None         # east outer edge excluded
    assert grid.cell_of(5.0, 0.0) is None           # south outer edge excluded
    assert grid.cell_of(19.999999, 0.0000001) == (1, 1)


def test_grid_cover_drops_partial_cells():
    m = make_mosaic("thermal", res=0.5, h=90, w=130)  # 45 m x 65 m
    grid = GridSpec.cover(m, cell_size_m=20.0)
    assert (grid.n_rows, grid.n_cols) == (2, 3)
    assert grid.origin == m.origin


def test_gridify_partitions_pixels():
    m = make_mosaic("rgb", res=0.05, h=120, w=200, seed=3)  # 6 m x 10 m
    grid = GridSpec.cover(m, cell_size_m=2.0)
    tiles = gridify(m, grid)
    assert len(tiles) == grid.n_rows * grid.n_cols == 15
    side = 40
    rebuilt = np.zeros_like(m.pixels)
    for (r, c), tile in tiles:
        assert tile.shape == (3, side, side)
        rebuilt[:, r * side : (r + 1) * side, c * side : (c + 1) * side] = tile
    np.testing.assert_array_equal(rebuilt, m.pixels)


def test_gridify_rejects_misaligned_cell_size():
    m = make_mosaic("thermal", res=0.5, h=80, w=80)
    with pytest.raises(ValueError, match="not an integer multiple"):
        gridify(m, GridSpec(n_rows=2, n_cols=2, cell_size_m=7.3, origin=m.origin))


def test_gridify_rejects_grid_larger_than_mosaic():
    m = make_mosaic("thermal", res=0.5, h=80, w=80)  # 40 m x 40 m
    with pytest.raises(ValueError, match="exceeds mosaic"):
        gridify(m, GridSpec(n_rows=3, n_cols=2, cell_size_m=20.0, origin=m.origin))


def test_gridify_with_offset_grid():
    m = make_mosaic("thermal", res=0.5, origin=(100.0, 500.0), h=100, w=100)
    grid = GridSpec(n_rows=2, n_cols=2, cell_size_m=20.0, origin=(105.0, 495.0))
    tiles = gridify(m, grid)
    (cell0, tile0) = tiles[0]
    assert cell0 == (0, 0)
    np.testing.assert_array_equal(tile0, m.pixels[:, 10:50, 10:50])


# --- labeling ---


def test_assign_labels_default_empty():
    grid = GridSpec(n_rows=3, n_cols=3, cell_size_m=20.0, origin=(0.0, 60.0))
    labels = assign_labels(grid, [])
    assert len(labels) == 9
    assert set(labels.values()) == {LABEL_INDEX["empty"]}


def test_assign_labels_places_classes():
    grid = GridSpec(n_rows=3, n_cols=3, cell_size_m=20.0, origin=(0.0, 60.0))
    pts = [
        FeaturePoint("midden", (5.0, 55.0)),    # cell (0, 0)
        FeaturePoint("water", (45.0, 15.0)),    # cell (2, 2)
        FeaturePoint("mound", (25.0, 35.0)),    # cell (1, 1)
        FeaturePoint("mound", (30.0, 30.0)),    # same cell, same class: fine
    ]
    labels = assign_labels(grid, pts)
    assert labels[(0, 0)] == LABEL_INDEX["midden"]
    assert labels[(2, 2)] == LABEL_INDEX["water"]
    assert labels[(1, 1)] == LABEL_INDEX["mound"]
    assert labels[(0, 1)] == LABEL_INDEX["empty"]
    n_empty = sum(1 for v in labels.values() if v == LABEL_INDEX["empty"])
    assert n_empty == 6


def test_assign_labels_conflicting_classes_raise():
    grid = GridSpec(n_rows=1, n_cols=1, cell_size_m=20.0, origin=(0.0, 20.0))
    pts = [FeaturePoint("midden", (5.0, 5.0)), FeaturePoint("water", (6.0, 6.0))]
    with pytest.raises(ValueError, match="conflicting"):
        assign_labels(grid, pts)


def test_assign_labels_outside_grid_raises():
    grid = GridSpec(n_rows=1, n_cols=1, cell_size_m=20.0, origin=(0.0, 20.0))
    with pytest.raises(ValueError, match="outside"):
        assign_labels(grid, [FeaturePoint("midden", (25.0, 5.0))])


# --- resampling ---


def test_resample_shapes_and_factor_one():
    tile = np.random.default_rng(1).normal(size=(1, 8, 8)).astype(np.float32)
    out = resample_bicubic(tile, 5)
    assert out.shape == (1, 40, 40)
    assert out.dtype == tile.dtype
    same = resample_bicubic(tile, 1)
    np.testing.assert_array_equal(same, tile)
    assert same is not tile


def test_resample_constant_is_exact():
    tile = np.full((1, 8, 8), 3.25, dtype=np.float32)
    out = resample_bicubic(tile, 10)
    np.testing.assert_allclose(out, 3.25, atol=1e-6)


def test_resample_preserves_mean():
    tile = np.random.default_rng(7).normal(size=(1, 15, 15)).astype(np.float32)
    out = resample_bicubic(tile, 3)
    assert abs(out.mean() - tile.astype(np.float64).mean()) < 1e-6


def test_resample_linear_ramp_interior():
    # Cubic interpolation reproduces a linear field away from the borders.
    # Output pixel centers sit at (i + 0.5) / f - 0.5 in input pixel coords.
    h = w = 16
    f = 4
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tile = (2.0 * xx + 3.0 * yy)[None]
    out = resample_bicubic(tile, f)[0]
    xo = (np.arange(w * f) + 0.5) / f - 0.5
    yo = (np.arange(h * f) + 0.5) / f - 0.5
    expected = 2.0 * xo[None, :] + 3.0 * yo[:, None]
    q = h * f // 4
    err = np.abs(out - expected)[q:-q, q:-q]
    assert err.max() < 0.01


def test_resample_rejects_bad_inputs():
    with pytest.raises(ValueError):
        resample_bicubic(np.zeros((3, 8, 8)), 2)
    with pytest.raises(ValueError):
        resample_bicubic(np.zeros((1, 8, 8)), 0)
    with pytest.raises(ValueError):
        resample_bicubic(np.zeros((1, 8, 8)), 2.5)


# --- full assembly ---


def aligned_mosaics(origin=(1000.0, 2000.0), rows_m=60, cols_m=80, seed=0):
    mosaics = {}
    for i, (name, res) in enumerate([("thermal", 0.5), ("rgb", 0.05), ("lidar", 0.1)]):
        h, w = int(rows_m / res), int(cols_m / res)
        mosaics[name] = make_mosaic(name, res=res, origin=origin, h=h, w=w, seed=seed + i)
    return mosaics


def test_check_aligned_rejects_extent_mismatch():
    mosaics = aligned_mosaics()
    off = mosaics["lidar"]
    mosaics["lidar"] = RasterMosaic("lidar", off.resolution_m, (off.origin[0] + 1.0, off.origin[1]), off.pixels)
    with pytest.raises(ValueError, match="does not match"):
        check_aligned(mosaics)


def test_collect_samples_end_to_end():
    origin = (1000.0, 2000.0)
    mosaics = aligned_mosaics(origin=origin)
    grid = GridSpec.cover(mosaics["thermal"], cell_size_m=20.0)
    assert (grid.n_rows, grid.n_cols) == (3, 4)
    pts = [
        FeaturePoint("midden", (1010.0, 1990.0)),   # cell (0, 0)
        FeaturePoint("water", (1070.0, 1950.0)),    # cell (2, 3)
        FeaturePoint("mound", (1500.0, 1990.0)),    # beyond the grid: dropped
    ]
    samples, n_dropped = collect_samples(mosaics, grid, pts)
    assert n_dropped == 1
    assert len(samples) == 12
    assert samples[0].cell == (0, 0)
    assert [s.cell for s in samples] == [(r, c) for r in range(3) for c in range(4)]

    by_cell = {s.cell: s for s in samples}
    assert by_cell[(0, 0)].label_name == "midden"
    assert by_cell[(2, 3)].label_name == "water"
    assert by_cell[(1, 2)].label_name == "empty"

    s = samples[0]
    assert s.thermal.shape == (1, 40, 40)
    assert s.rgb.shape == (3, 400, 400)
    assert s.lidar.shape == (1, 200, 200)
    # tile content must be the matching window of each mosaic
    np.testing.assert_array_equal(s.thermal, mosaics["thermal"].pixels[:, :40, :40])
    np.testing.assert_array_equal(s.rgb, mosaics["rgb"].pixels[:, :400, :400])
    np.testing.assert_array_equal(s.lidar, mosaics["lidar"].pixels[:, :200, :200])


def test_collect_samples_requires_all_modalities():
    mosaics = aligned_mosaics()
    del mosaics["lidar"]
    grid = GridSpec(n_rows=1, n_cols=1, cell_size_m=20.0, origin=(1000.0, 2000.0))
    with pytest.raises(ValueError, match="missing modalities"):
        collect_samples(mosaics, grid, [])


def test_class_names_order():
    assert CLASS_NAMES == ("empty", "midden", "mound", "water")
    assert LABEL_INDEX["empty"] == 0 and LABEL_INDEX["water"] == 3
