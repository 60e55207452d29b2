"""Command-line pipeline: synth -> prepare -> train -> evaluate (+ tune-lr).

All commands read one YAML config with sections for paths, grid, split,
rebalance, model, train, and scene; flags override the config. Unknown keys
anywhere in the file are rejected so typos fail loudly instead of silently
falling back to defaults.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import click
import numpy as np
import yaml

from .dataset import (
    RebalancePlan,
    SplitSpec,
    fit_stats,
    load_samples,
    load_stats,
    rebalance,
    save_samples,
    save_stats,
    split,
    write_split_manifest,
)
from .evaluation import collect_gates, evaluate_model, emit_report, gating_table
from .ingest import GridSpec, MODALITIES, collect_samples, load_mosaic, load_points
from .models import (
    BackboneSpec,
    FusionModelSpec,
    STRATEGIES,
    load_checkpoint,
)
from .synthgen import SceneSpec, difficulty_dial, generate_scene, save_scene
from .training import (
    COMPLETE_MARKER,
    ExperimentData,
    TrainConfig,
    run_experiment,
    tune_lr,
)

logger = logging.getLogger(__name__)

WEIGHTS_ENV_VAR = "FUSIONBENCH_PRETRAINED"


@dataclass(frozen=True)
class PathsConfig:
    rasters: dict[str, Path]
    points: Path
    out: Path
    pretrained_weights: Path | None = None


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig
    cell_size_m: float
    split: SplitSpec
    plan: RebalancePlan
    model: FusionModelSpec
    train: TrainConfig
    scene: SceneSpec | None


def _reject_unknown(section: dict, allowed: set[str], name: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ValueError(f"unknown keys in config section {name!r}: {unknown}")


def _parse_range(value, name: str) -> tuple[int, int]:
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        raise ValueError(f"{name} must be a two-element [lo, hi) list")
    return int(value[0]), int(value[1])


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate the YAML run configuration."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping of sections")
    _reject_unknown(
        raw, {"paths", "grid", "split", "rebalance", "model", "train", "scene"}, "top level"
    )

    paths_raw = raw.get("paths")
    if not isinstance(paths_raw, dict):
        raise ValueError("config needs a 'paths' section")
    _reject_unknown(paths_raw, {"rasters", "points", "out", "pretrained_weights"}, "paths")
    rasters_raw = paths_raw.get("rasters", {})
    _reject_unknown(rasters_raw, set(MODALITIES), "paths.rasters")
    missing = [m for m in MODALITIES if m not in rasters_raw]
    if missing:
        raise ValueError(f"paths.rasters must name all modalities; missing {missing}")
    base = path.parent
    def _resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    paths = PathsConfig(
        rasters={m: _resolve(rasters_raw[m]) for m in MODALITIES},
        points=_resolve(paths_raw["points"]),
        out=_resolve(paths_raw["out"]),
        pretrained_weights=(
            _resolve(paths_raw["pretrained_weights"])
            if paths_raw.get("pretrained_weights")
            else None
        ),
    )

    grid_raw = raw.get("grid", {})
    _reject_unknown(grid_raw, {"cell_size_m"}, "grid")
    cell_size_m = float(grid_raw.get("cell_size_m", 20.0))

    split_raw = raw.get("split", {})
    _reject_unknown(split_raw, {"train_cols", "val_cols", "test_cols"}, "split")
    split_kwargs = {
        key: _parse_range(split_raw[key], f"split.{key}")
        for key in ("train_cols", "val_cols", "test_cols")
        if key in split_raw
    }
    split_spec = SplitSpec(**split_kwargs)

    reb_raw = raw.get("rebalance", {})
    _reject_unknown(reb_raw, {"target_per_class"}, "rebalance")
    plan = RebalancePlan(**{k: int(v) for k, v in reb_raw.items()})

    model_raw = dict(raw.get("model", {}))
    _reject_unknown(
        model_raw,
        {"strategy", "backbone", "num_classes", "per_modality_feature_dim",
         "gate_hidden_dim", "detach_gate_input"},
        "model",
    )
    backbone_raw = dict(model_raw.pop("backbone", {}))
    _reject_unknown(
        backbone_raw, {"family", "pretrained", "feature_dim", "weights_path"}, "model.backbone"
    )
    backbone = BackboneSpec(**backbone_raw)
    model_spec = FusionModelSpec(
        strategy=model_raw.pop("strategy", "late"), backbone=backbone, **model_raw
    )

    train_raw = raw.get("train", {})
    _reject_unknown(
        train_raw,
        {"batch_size", "learning_rate", "patience_epochs", "max_epochs", "n_trials"},
        "train",
    )
    train_cfg = TrainConfig(**train_raw)

    scene = None
    if "scene" in raw:
        scene_raw = raw["scene"]
        _reject_unknown(scene_raw, set(SceneSpec.__dataclass_fields__), "scene")
        scene = SceneSpec(**scene_raw)

    return RunConfig(
        paths=paths, cell_size_m=cell_size_m, split=split_spec,
        plan=plan, model=model_spec, train=train_cfg, scene=scene,
    )


def _resolve_weights(cfg: RunConfig, spec: FusionModelSpec) -> FusionModelSpec:
    """Fill the backbone weights path from config or environment when the
    paper-scale pretrained backbone is requested."""
    if not (spec.backbone.family == "paper_resnet50" and spec.backbone.pretrained):
        return spec
    if spec.backbone.weights_path:
        return spec
    env = os.environ.get(WEIGHTS_ENV_VAR)
    weights = env or (str(cfg.paths.pretrained_weights) if cfg.paths.pretrained_weights else None)
    if not weights:
        raise ValueError(
            "pretrained backbone requested but no weights file configured; "
            f"set paths.pretrained_weights or {WEIGHTS_ENV_VAR}"
        )
    return replace(spec, backbone=replace(spec.backbone, weights_path=weights))


def _prepared_dir(cfg: RunConfig) -> Path:
    return cfg.paths.out / "prepared"


def _load_prepared(cfg: RunConfig):
    prep = _prepared_dir(cfg)
    manifest = prep / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(
            f"no prepared dataset under {prep}; run the prepare command first"
        )
    return (
        load_samples(prep / "train.npz"),
        load_samples(prep / "val.npz"),
        load_samples(prep / "test.npz"),
        load_stats(prep / "stats.json"),
    )


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="debug-level logging")
def main(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _fail(exc: Exception):
    raise click.ClickException(str(exc))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="override the scene seed")
@click.option("--level", type=float, default=0.0, help="difficulty in [0, 1]")
@click.option("--out", type=click.Path(), default=None,
              help="write scene files here instead of the configured raster paths")
def synth(config_path, seed, level, out):
    """Generate a synthetic scene (three rasters plus a points CSV)."""
    try:
        cfg = load_config(config_path)
        if cfg.scene is None:
            raise ValueError("config has no 'scene' section")
        spec = cfg.scene if seed is None else replace(cfg.scene, seed=seed)
        spec = difficulty_dial(spec, level)
        mosaics, points = generate_scene(spec)
        if out is not None:
            paths = save_scene(mosaics, points, out)
        else:
            from .ingest import write_mosaic, write_points_csv

            paths = {}
            for name, mosaic in mosaics.items():
                write_mosaic(mosaic, cfg.paths.rasters[name])
                paths[name] = cfg.paths.rasters[name]
            write_points_csv(points, cfg.paths.points)
            paths["points"] = cfg.paths.points
    except (ValueError, OSError) as exc:
        _fail(exc)
    for name, p in paths.items():
        click.echo(f"{name}: {p}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def prepare(config_path):
    """Tile the rasters, split spatially, and fit band statistics."""
    try:
        cfg = load_config(config_path)
        mosaics = {m: load_mosaic(cfg.paths.rasters[m], m) for m in MODALITIES}
        ref = mosaics["thermal"]
        points, _ = load_points(cfg.paths.points, extent=ref.extent())
        grid = GridSpec.cover(ref, cell_size_m=cfg.cell_size_m)
        samples, _ = collect_samples(mosaics, grid, points)
        train, val, test = split(samples, cfg.split)
        if not train or not val or not test:
            raise ValueError(
                "a split is empty; check split column ranges against the grid "
                f"({grid.n_rows}x{grid.n_cols} cells)"
            )
        # fail here, not at train time, if the train split cannot be rebalanced
        rebalance(train, cfg.plan, seed=0)
        stats = fit_stats(train)

        prep = _prepared_dir(cfg)
        prep.mkdir(parents=True, exist_ok=True)
        save_samples(train, prep / "train.npz")
        save_samples(val, prep / "val.npz")
        save_samples(test, prep / "test.npz")
        save_stats(stats, prep / "stats.json")
        # manifest written last: its presence marks the directory complete
        write_split_manifest(
            {"train": train, "val": val, "test": test}, prep / "manifest.jsonl"
        )
    except (ValueError, OSError) as exc:
        _fail(exc)
    click.echo(
        f"prepared {len(train)}/{len(val)}/{len(test)} train/val/test tiles under {prep}"
    )


def _parse_trial_range(value: str) -> list[int]:
    try:
        lo, hi = value.split(":")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise ValueError(f"--trial-range must look like A:B, got {value!r}")
    if lo < 0 or hi <= lo:
        raise ValueError(f"--trial-range needs 0 <= A < B, got {value!r}")
    return list(range(lo, hi))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(STRATEGIES), default=None,
              help="fusion strategy (defaults to the config's model.strategy)")
@click.option("--trials", type=int, default=None, help="train trials 0..N-1")
@click.option("--trial-range", default=None, help="train trials A..B-1 (for schedulers)")
@click.option("--out", type=click.Path(), default=None, help="override the output root")
def train(config_path, strategy, trials, trial_range, out):
    """Run (or resume) the seeded training trials for one strategy."""
    try:
        cfg = load_config(config_path)
        train_samples, val_samples, _, stats = _load_prepared(cfg)
        spec = cfg.model if strategy is None else replace(cfg.model, strategy=strategy)
        spec = _resolve_weights(cfg, spec)
        train_cfg = cfg.train if trials is None else replace(cfg.train, n_trials=trials)
        indices = _parse_trial_range(trial_range) if trial_range else None
        data = ExperimentData(
            train=train_samples, val=val_samples, stats=stats, plan=cfg.plan
        )
        out_root = Path(out) if out else cfg.paths.out
        results = run_experiment(spec, data, train_cfg, out_root, trial_indices=indices)
    except (ValueError, OSError) as exc:
        _fail(exc)
    for r in results:
        click.echo(
            f"trial {r.trial_index}: best val AUC {r.best_val_auc:.4f} "
            f"at epoch {r.best_epoch} (stopped {r.stopped_epoch})"
        )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="override the output root")
def evaluate(config_path, out):
    """Evaluate completed trials on the test split and write the report."""
    try:
        cfg = load_config(config_path)
        _, _, test_samples, _ = _load_prepared(cfg)
        out_root = Path(out) if out else cfg.paths.out
        labels = np.array([s.label for s in test_samples])

        metrics: dict[str, list[dict]] = {}
        moe_gates = []
        for strategy in STRATEGIES:
            root = out_root / "trials" / strategy
            if not root.exists():
                continue
            tdirs = sorted(
                (d for d in root.glob("trial_*") if (d / COMPLETE_MARKER).exists()),
                key=lambda d: int(d.name.split("_")[1]),
            )
            if not tdirs:
                continue
            metrics[strategy] = []
            for tdir in tdirs:
                model, _, stats = load_checkpoint(tdir / "checkpoint.pt")
                m = evaluate_model(model, test_samples, stats=stats)
                (tdir / "test_metrics.json").write_text(json.dumps(m, indent=2) + "\n")
                metrics[strategy].append(m)
                if strategy == "moe":
                    moe_gates.append(collect_gates(model, test_samples, stats=stats))
                logger.info("%s %s: test AUC %.4f", strategy, tdir.name, m["auc"])
        gating = gating_table(moe_gates, labels) if moe_gates else None
        created = emit_report(metrics, out_root / "report", gating=gating)
    except (ValueError, OSError) as exc:
        _fail(exc)
    for p in created:
        click.echo(str(p))


@main.command("tune-lr")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(STRATEGIES), default=None)
@click.option("--trials", type=int, default=1, help="trials per learning rate")
@click.option("--out", type=click.Path(), default=None, help="override the output root")
def tune_lr_cmd(config_path, strategy, trials, out):
    """Sweep the learning-rate grid and rank rates by validation AUC."""
    try:
        cfg = load_config(config_path)
        train_samples, val_samples, _, stats = _load_prepared(cfg)
        spec = cfg.model if strategy is None else replace(cfg.model, strategy=strategy)
        spec = _resolve_weights(cfg, spec)
        data = ExperimentData(
            train=train_samples, val=val_samples, stats=stats, plan=cfg.plan
        )
        out_root = Path(out) if out else cfg.paths.out
        report = tune_lr(
            spec, data, cfg.train, n_trials=trials,
            out_path=out_root / f"tune_lr_{spec.strategy}.json",
        )
    except (ValueError, OSError) as exc:
        _fail(exc)
    for rate, auc in report["rates"].items():
        click.echo(f"lr {rate}: mean best val AUC {auc:.4f}")
    click.echo(f"best rate: {report['best_rate']:g}")


if __name__ == "__main__":
    main()
