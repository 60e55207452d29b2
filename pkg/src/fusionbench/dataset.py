"""Spatial splitting, class rebalancing, and band normalization.

The split is by grid column so that train/val/test tiles never interleave
spatially. Band statistics come from the training split only and are applied
identically everywhere.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import CLASS_NAMES, MODALITIES, MODALITY_BANDS, TileSample

logger = logging.getLogger(__name__)

ColRange = tuple[int, int]  # half-open [lo, hi) range of grid columns


@dataclass(frozen=True)
class SplitSpec:
    """Column ranges for the train/val/test partition (half-open)."""

    train_cols: ColRange = (0, 50)
    val_cols: ColRange = (50, 59)
    test_cols: ColRange = (59, 81)

    def __post_init__(self):
        ranges = [self.train_cols, self.val_cols, self.test_cols]
        for lo, hi in ranges:
            if lo >= hi:
                raise ValueError(f"empty or inverted column range ({lo}, {hi})")
        for i in range(len(ranges)):
            for j in range(i + 1, len(ranges)):
                a, b = ranges[i], ranges[j]
                if a[0] < b[1] and b[0] < a[1]:
                    raise ValueError(f"column ranges {a} and {b} overlap")

    def split_of(self, col: int) -> str:
        for name, (lo, hi) in zip(
            ("train", "val", "test"), (self.train_cols, self.val_cols, self.test_cols)
        ):
            if lo <= col < hi:
                return name
        raise ValueError(f"grid column {col} falls in no split range")


@dataclass(frozen=True)
class RebalancePlan:
    target_per_class: int = 88

    def __post_init__(self):
        if self.target_per_class < 1:
            raise ValueError("target_per_class must be positive")


@dataclass(frozen=True)
class BandStats:
    """Per-band pixel mean/std for each modality, fitted on training tiles."""

    means: dict[str, tuple[float, ...]]
    stds: dict[str, tuple[float, ...]]

    def __post_init__(self):
        for name in MODALITIES:
            if name not in self.means or name not in self.stds:
                raise ValueError(f"stats missing modality {name!r}")
            if len(self.means[name]) != MODALITY_BANDS[name]:
                raise ValueError(f"{name}: expected {MODALITY_BANDS[name]} band means")
            if len(self.stds[name]) != MODALITY_BANDS[name]:
                raise ValueError(f"{name}: expected {MODALITY_BANDS[name]} band stds")
            for s in self.stds[name]:
                if not (np.isfinite(s) and s > 0):
                    raise ValueError(f"{name}: non-positive band std {s}")


def split(
    samples: list[TileSample], spec: SplitSpec | None = None
) -> tuple[list[TileSample], list[TileSample], list[TileSample]]:
    """Partition samples into (train, val, test) by grid column."""
    spec = spec or SplitSpec()
    out = {"train": [], "val": [], "test": []}
    for s in samples:
        out[spec.split_of(s.cell[1])].append(s)
    return out["train"], out["val"], out["test"]


def rebalance(
    train_samples: list[TileSample], plan: RebalancePlan | None = None, seed: int = 0
) -> list[TileSample]:
    """Resample the training split to an equal per-class count.

    Over-represented classes are drawn without replacement; under-represented
    classes keep every original once and fill the remainder with uniform
    draws with replacement. A class already at target passes through as-is.
    Output is grouped by class in label order; shuffling is left to training.
    """
    plan = plan or RebalancePlan()
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[TileSample]] = {i: [] for i in range(len(CLASS_NAMES))}
    for s in train_samples:
        by_class[s.label].append(s)
    empty_classes = [CLASS_NAMES[i] for i, group in by_class.items() if not group]
    if empty_classes:
        raise ValueError(f"cannot rebalance: no training samples for {empty_classes}")

    target = plan.target_per_class
    out: list[TileSample] = []
    for label in range(len(CLASS_NAMES)):
        group = by_class[label]
        n = len(group)
        if n == target:
            chosen = list(group)
        elif n > target:
            idx = rng.choice(n, size=target, replace=False)
            chosen = [group[i] for i in idx]
        else:
            fill = rng.integers(0, n, size=target - n)
            chosen = list(group) + [group[i] for i in fill]
        out.extend(chosen)
    return out


def class_counts(samples: list[TileSample]) -> dict[str, int]:
    counts = {name: 0 for name in CLASS_NAMES}
    for s in samples:
        counts[s.label_name] += 1
    return counts


def fit_stats(train_samples: list[TileSample]) -> BandStats:
    """Per-band pixel mean and population std over unique training tiles.

    Duplicates introduced by rebalancing are ignored (dedup by cell) so that
    oversampled classes do not skew the statistics. Two-pass computation in
    float64 keeps the variance numerically exact for constant bands.
    """
    if not train_samples:
        raise ValueError("cannot fit statistics on an empty training set")
    seen: set[tuple[int, int]] = set()
    unique = []
    for s in train_samples:
        if s.cell not in seen:
            seen.add(s.cell)
            unique.append(s)

    means, stds = {}, {}
    for name in MODALITIES:
        bands = MODALITY_BANDS[name]
        total = np.zeros(bands)
        count = 0
        for s in unique:
            t = s.tile(name).astype(np.float64)
            total += t.sum(axis=(1, 2))
            count += t.shape[1] * t.shape[2]
        mean = total / count
        sq = np.zeros(bands)
        for s in unique:
            t = s.tile(name).astype(np.float64)
            sq += ((t - mean[:, None, None]) ** 2).sum(axis=(1, 2))
        std = np.sqrt(sq / count)
        for b, sd in enumerate(std):
            if not sd > 0:
                raise ValueError(f"{name} band {b} has zero variance; cannot normalize")
        means[name] = tuple(float(v) for v in mean)
        stds[name] = tuple(float(v) for v in std)
    return BandStats(means=means, stds=stds)


def _apply(tile: np.ndarray, mean: tuple, std: tuple, inverse: bool) -> np.ndarray:
    if tile.shape[0] != len(mean):
        raise ValueError(f"tile has {tile.shape[0]} bands, stats have {len(mean)}")
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    x = tile.astype(np.float64)
    out = x * s + m if inverse else (x - m) / s
    return out.astype(np.float32)


def normalize(sample: TileSample, stats: BandStats) -> TileSample:
    """Map each band to zero mean / unit std under the fitted statistics."""
    return TileSample(
        cell=sample.cell,
        label=sample.label,
        thermal=_apply(sample.thermal, stats.means["thermal"], stats.stds["thermal"], False),
        rgb=_apply(sample.rgb, stats.means["rgb"], stats.stds["rgb"], False),
        lidar=_apply(sample.lidar, stats.means["lidar"], stats.stds["lidar"], False),
    )


def denormalize(sample: TileSample, stats: BandStats) -> TileSample:
    return TileSample(
        cell=sample.cell,
        label=sample.label,
        thermal=_apply(sample.thermal, stats.means["thermal"], stats.stds["thermal"], True),
        rgb=_apply(sample.rgb, stats.means["rgb"], stats.stds["rgb"], True),
        lidar=_apply(sample.lidar, stats.means["lidar"], stats.stds["lidar"], True),
    )


def save_stats(stats: BandStats, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "means": {k: list(v) for k, v in stats.means.items()},
        "stds": {k: list(v) for k, v in stats.stds.items()},
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")


def load_stats(path: str | Path) -> BandStats:
    payload = json.loads(Path(path).read_text())
    return BandStats(
        means={k: tuple(v) for k, v in payload["means"].items()},
        stds={k: tuple(v) for k, v in payload["stds"].items()},
    )


def write_split_manifest(
    splits: dict[str, list[TileSample]], path: str | Path
) -> None:
    """One JSON record per tile: cell, split name, class label."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for name in ("train", "val", "test"):
            for s in splits.get(name, []):
                rec = {"cell": list(s.cell), "split": name, "label": s.label_name}
                fh.write(json.dumps(rec) + "\n")


def save_samples(samples: list[TileSample], path: str | Path) -> None:
    """Store a sample list as a compressed npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ValueError("refusing to save an empty sample archive")
    arrays = {
        "cells": np.array([s.cell for s in samples], dtype=np.int64),
        "labels": np.array([s.label for s in samples], dtype=np.int64),
    }
    for name in MODALITIES:
        arrays[name] = np.stack([s.tile(name) for s in samples]).astype(np.float32)
    np.savez_compressed(path, **arrays)


def load_samples(path: str | Path) -> list[TileSample]:
    with np.load(path) as data:
        cells = data["cells"]
        labels = data["labels"]
        tiles = {name: data[name] for name in MODALITIES}
    samples = []
    for i in range(len(labels)):
        samples.append(
            TileSample(
                cell=(int(cells[i, 0]), int(cells[i, 1])),
                label=int(labels[i]),
                thermal=tiles["thermal"][i],
                rgb=tiles["rgb"][i],
                lidar=tiles["lidar"][i],
            )
        )
    return samples
