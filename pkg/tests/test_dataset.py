from collections import Counter

import numpy as np
import pytest

from fusionbench.dataset import (
    BandStats,
    RebalancePlan,
    SplitSpec,
    class_counts,
    denormalize,
    fit_stats,
    load_samples,
    load_stats,
    normalize,
    rebalance,
    save_samples,
    save_stats,
    split,
    write_split_manifest,
)
from fusionbench.ingest import CLASS_NAMES, LABEL_INDEX, TileSample

_rng = np.random.default_rng(99)


def make_sample(cell, label, fill=None):
    def tile(bands, side):
        if fill is not None:
            return np.full((bands, side, side), fill, dtype=np.float32)
        return _rng.normal(size=(bands, side, side)).astype(np.float32)

    return TileSample(cell=cell, label=label, thermal=tile(1, 4), rgb=tile(3, 8), lidar=tile(1, 4))


def samples_in_cols(cols, label=0):
    return [make_sample((r, c), label) for c in cols for r in range(2)]


# --- splitting ---


def test_split_default_boundaries():
    samples = samples_in_cols([49, 50, 58, 59, 80])
    train, val, test = split(samples)
    assert {s.cell[1] for s in train} == {49}
    assert {s.cell[1] for s in val} == {50, 58}
    assert {s.cell[1] for s in test} == {59, 80}


def test_split_empty_input():
    assert split([]) == ([], [], [])


def test_split_single_column():
    samples = samples_in_cols([55])
    train, val, test = split(samples)
    assert (len(train), len(val), len(test)) == (0, len(samples), 0)


def test_split_is_partition():
    spec = SplitSpec(train_cols=(0, 5), val_cols=(5, 7), test_cols=(7, 10))
    samples = samples_in_cols(range(10))
    train, val, test = split(samples, spec)
    assert len(train) + len(val) + len(test) == len(samples)
    cells = [s.cell for s in train] + [s.cell for s in val] + [s.cell for s in test]
    assert len(set(cells)) == len(cells)
    assert max(s.cell[1] for s in train) < min(s.cell[1] for s in val)
    assert max(s.cell[1] for s in val) < min(s.cell[1] for s in test)


def test_split_unassigned_column_errors():
    spec = SplitSpec(train_cols=(0, 3), val_cols=(3, 4), test_cols=(4, 6))
    with pytest.raises(ValueError, match="no split range"):
        split(samples_in_cols([7]), spec)


def test_split_spec_rejects_overlap():
    with pytest.raises(ValueError, match="overlap"):
        SplitSpec(train_cols=(0, 5), val_cols=(4, 8), test_cols=(8, 10))
    with pytest.raises(ValueError, match="empty or inverted"):
        SplitSpec(train_cols=(5, 5), val_cols=(5, 8), test_cols=(8, 10))


# --- rebalancing ---


def imbalanced_train(counts):
    samples = []
    cell_id = 0
    for name, n in counts.items():
        for _ in range(n):
            samples.append(make_sample((0, cell_id), LABEL_INDEX[name]))
            cell_id += 1
    return samples


def test_rebalance_hits_target_exactly():
    train = imbalanced_train({"empty": 3000, "midden": 20, "mound": 88, "water": 30})
    out = rebalance(train, RebalancePlan(target_per_class=88), seed=0)
    assert class_counts(out) == {name: 88 for name in CLASS_NAMES}
    assert len(out) == 4 * 88


def test_rebalance_identity_when_at_target():
    train = imbalanced_train({"empty": 10, "midden": 3, "mound": 5, "water": 7})
    out = rebalance(train, RebalancePlan(target_per_class=5), seed=1)
    mound_in = [s for s in train if s.label_name == "mound"]
    mound_out = [s for s in out if s.label_name == "mound"]
    assert mound_out == mound_in


def test_rebalance_oversampling_covers_all_originals():
    train = imbalanced_train({"empty": 200, "midden": 20, "mound": 88, "water": 30})
    midden_cells = {s.cell for s in train if s.label_name == "midden"}
    for seed in range(5):
        out = rebalance(train, RebalancePlan(target_per_class=88), seed=seed)
        sampled = Counter(s.cell for s in out if s.label_name == "midden")
        assert set(sampled) == midden_cells
        assert all(v >= 1 for v in sampled.values())
        assert sum(sampled.values()) == 88


def test_rebalance_undersampling_has_no_duplicates():
    train = imbalanced_train({"empty": 300, "midden": 90, "mound": 90, "water": 90})
    out = rebalance(train, RebalancePlan(target_per_class=88), seed=3)
    for name in CLASS_NAMES:
        cells = [s.cell for s in out if s.label_name == name]
        assert len(cells) == len(set(cells)) == 88


def test_rebalance_deterministic():
    train = imbalanced_train({"empty": 500, "midden": 12, "mound": 40, "water": 18})
    a = rebalance(train, seed=7)
    b = rebalance(train, seed=7)
    assert [s.cell for s in a] == [s.cell for s in b]
    c = rebalance(train, seed=8)
    assert [s.cell for s in a] != [s.cell for s in c]


def test_rebalance_missing_class_errors():
    train = imbalanced_train({"empty": 100, "midden": 5, "water": 5})
    with pytest.raises(ValueError, match="mound"):
        rebalance(train)


# --- statistics and normalization ---


def test_fit_stats_two_valued_band():
    pix = np.zeros((1, 4, 4), dtype=np.float32)
    pix[0, :2, :] = 2.0  # half 0, half 2
    s = make_sample((0, 0), 0)
    s = TileSample(cell=s.cell, label=s.label, thermal=pix, rgb=s.rgb, lidar=s.lidar)
    stats = fit_stats([s])
    assert stats.means["thermal"][0] == pytest.approx(1.0, abs=1e-12)
    assert stats.stds["thermal"][0] == pytest.approx(1.0, abs=1e-12)


def test_fit_stats_constant_band_errors():
    with pytest.raises(ValueError, match="zero variance"):
        fit_stats([make_sample((0, 0), 0, fill=5.0)])


def test_fit_stats_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        fit_stats([])


def test_fit_stats_ignores_duplicates():
    base = [make_sample((0, c), 0) for c in range(4)]
    stats_once = fit_stats(base)
    stats_dup = fit_stats(base + base[:2] * 10)
    assert stats_once == stats_dup


def test_normalize_identity_stats():
    s = make_sample((0, 0), 1)
    stats = BandStats(
        means={"thermal": (0.0,), "rgb": (0.0, 0.0, 0.0), "lidar": (0.0,)},
        stds={"thermal": (1.0,), "rgb": (1.0, 1.0, 1.0), "lidar": (1.0,)},
    )
    out = normalize(s, stats)
    np.testing.assert_allclose(out.rgb, s.rgb, atol=1e-7)
    assert out.label == s.label and out.cell == s.cell


def test_normalize_two_pixel_example():
    # tiles must be square, so lay the two values [2, 4] out as 2x2 columns
    rgb = np.stack([np.array([[2.0, 4.0], [2.0, 4.0]], dtype=np.float32)] * 3)
    s = TileSample(
        cell=(0, 0),
        label=0,
        thermal=np.array([[[2.0, 4.0], [2.0, 4.0]]], dtype=np.float32),
        rgb=rgb,
        lidar=np.array([[[2.0, 4.0], [2.0, 4.0]]], dtype=np.float32),
    )
    stats = BandStats(
        means={"thermal": (3.0,), "rgb": (3.0, 3.0, 3.0), "lidar": (3.0,)},
        stds={"thermal": (1.0,), "rgb": (1.0, 1.0, 1.0), "lidar": (1.0,)},
    )
    out = normalize(s, stats)
    np.testing.assert_array_equal(out.thermal[0], [[-1.0, 1.0], [-1.0, 1.0]])
    np.testing.assert_array_equal(out.rgb[1], [[-1.0, 1.0], [-1.0, 1.0]])


def test_normalize_constant_band_at_mean_gives_zeros():
    s = make_sample((0, 0), 0, fill=7.5)
    stats = BandStats(
        means={"thermal": (7.5,), "rgb": (7.5, 7.5, 7.5), "lidar": (7.5,)},
        stds={"thermal": (2.0,), "rgb": (2.0, 2.0, 2.0), "lidar": (2.0,)},
    )
    out = normalize(s, stats)
    assert not out.thermal.any() and not out.rgb.any() and not out.lidar.any()


def test_normalized_training_set_is_standardized():
    train = [make_sample((0, c), c % 4) for c in range(12)]
    stats = fit_stats(train)
    normed = [normalize(s, stats) for s in train]
    for name in ("thermal", "rgb", "lidar"):
        pixels = np.concatenate([s.tile(name).astype(np.float64) for s in normed], axis=1)
        for b in range(pixels.shape[0]):
            assert abs(pixels[b].mean()) < 1e-6
            assert abs(pixels[b].std() - 1.0) < 1e-4


def test_denormalize_roundtrip():
    train = [make_sample((0, c), 0) for c in range(6)]
    stats = fit_stats(train)
    s = train[3]
    back = denormalize(normalize(s, stats), stats)
    np.testing.assert_allclose(back.rgb, s.rgb, atol=1e-5)
    np.testing.assert_allclose(back.thermal, s.thermal, atol=1e-5)
    np.testing.assert_allclose(back.lidar, s.lidar, atol=1e-5)


def test_band_stats_rejects_nonpositive_std():
    with pytest.raises(ValueError, match="non-positive"):
        BandStats(
            means={"thermal": (0.0,), "rgb": (0.0, 0.0, 0.0), "lidar": (0.0,)},
            stds={"thermal": (0.0,), "rgb": (1.0, 1.0, 1.0), "lidar": (1.0,)},
        )


# --- persistence ---


def test_stats_roundtrip(tmp_path):
    stats = fit_stats([make_sample((0, c), 0) for c in range(3)])
    path = tmp_path / "stats.json"
    save_stats(stats, path)
    assert load_stats(path) == stats


def test_split_manifest_lines(tmp_path):
    import json

    samples = samples_in_cols([10, 52, 70], label=2)
    train, val, test = split(samples)
    path = tmp_path / "manifest.jsonl"
    write_split_manifest({"train": train, "val": val, "test": test}, path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == len(samples)
    assert {r["split"] for r in recs} == {"train", "val", "test"}
    assert all(r["label"] == "mound" for r in recs)
    assert recs[0]["cell"] == [0, 10]


def test_sample_archive_roundtrip(tmp_path):
    samples = [make_sample((r, c), (r + c) % 4) for r in range(2) for c in range(3)]
    path = tmp_path / "tiles.npz"
    save_samples(samples, path)
    back = load_samples(path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.cell == b.cell and a.label == b.label
        np.testing.assert_array_equal(a.thermal, b.thermal)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.lidar, b.lidar)
