"""Seeded multi-trial training with AUC-patience early stopping.

Each trial is fully determined by its index: trial ``i`` seeds model
initialization, training-set rebalancing, and batch shuffling with ``i``.
Validation AUC is computed every epoch with the same macro one-vs-rest
definition used for final reporting; training stops once the AUC has been
strictly below the running best for more than ``patience_epochs``
consecutive epochs, and the best-epoch weights are what survive.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import BandStats, RebalancePlan, normalize, rebalance
from .evaluation import auc_macro
from .ingest import TileSample
from .models import (
    FusionModelSpec,
    ModelOutput,
    assemble_inputs,
    build_model,
    labels_tensor,
    predict_scores,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

STRATEGY_LR = {"early": 1e-3, "late": 1e-3, "moe": 1e-4}
LR_GRID = (0.1, 0.01, 0.001, 0.0001, 0.00001)
LOSS_FLOOR = 1e-12

COMPLETE_MARKER = "COMPLETE"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float | None = None  # None = per-strategy default
    patience_epochs: int = 10
    max_epochs: int = 200
    n_trials: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be at least 1")
        if self.max_epochs < 1 or self.n_trials < 1:
            raise ValueError("max_epochs and n_trials must be positive")

    def lr_for(self, strategy: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return STRATEGY_LR[strategy]


@dataclass
class TrialResult:
    trial_index: int
    history: list[dict]  # one {"epoch", "train_loss", "val_auc"} per epoch
    best_epoch: int  # 1-based
    best_val_auc: float
    stopped_epoch: int
    n_loss_clamped: int = 0
    checkpoint_path: str | None = None
    test_metrics: dict | None = None


@dataclass
class ExperimentData:
    """Inputs shared by all trials of one experiment.

    ``train`` is the raw (imbalanced, unnormalized) training split; each
    trial rebalances it with its own seed. ``stats`` must be fitted on that
    same training split.
    """

    train: list[TileSample]
    val: list[TileSample]
    stats: BandStats
    plan: RebalancePlan = field(default_factory=RebalancePlan)


class AucEarlyStopper:
    """Patience counter over validation AUC with strict improvement.

    An epoch improves only when its AUC is strictly greater than the running
    best; ties neither move the best nor reset the counter. Stopping fires
    once more than ``patience`` consecutive epochs have failed to improve.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.n_below = 0

    def update(self, auc: float) -> bool:
        """Record the next epoch's AUC; True if it improved the best."""
        self.epoch += 1
        if auc > self.best:
            self.best = auc
            self.best_epoch = self.epoch
            self.n_below = 0
            return True
        self.n_below += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.n_below > self.patience


def compute_loss(
    strategy: str, output: ModelOutput, labels: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Training loss for one batch.

    Early/late fusion: cross-entropy over raw scores. Mixture of experts:
    negative log of the mixture probability assigned to the true class,
    with probabilities floored at 1e-12 before the log; the number of
    floored entries is returned for reporting.
    """
    scores = output.class_scores
    if labels.numel() and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise ValueError("labels out of range for the score matrix")
    if strategy in ("early", "late"):
        return F.cross_entropy(scores, labels), 0
    if strategy != "moe":
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    p_true = scores.gather(1, labels.unsqueeze(1)).squeeze(1)
    n_clamped = int((p_true < LOSS_FLOOR).sum().item())
    return -p_true.clamp_min(LOSS_FLOOR).log().mean(), n_clamped


def _batch_indices(n: int, batch_size: int, generator: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train_trial(
    model,
    train_samples: list[TileSample],
    val_samples: list[TileSample],
    config: TrainConfig,
    trial_index: int,
    out_dir: str | Path | None = None,
    stats: BandStats | None = None,
) -> TrialResult:
    """Train one model on already-normalized samples for one seeded trial.

    The caller constructs (and seeds) the model; this function owns batch
    shuffling, the epoch loop, early stopping, and best-weight restoration.
    When ``out_dir`` is given, the best checkpoint, per-epoch history, and a
    completion marker are written there (``stats`` then required, since the
    checkpoint archives them).
    """
    if out_dir is not None and stats is None:
        raise ValueError("writing a checkpoint requires the band statistics")
    strategy = model.spec.strategy
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_for(strategy))
    stopper = AucEarlyStopper(config.patience_epochs)
    shuffler = torch.Generator().manual_seed(trial_index)
    val_labels = np.array([s.label for s in val_samples])

    history: list[dict] = []
    best_state = None
    n_clamped_total = 0
    t0 = time.monotonic()
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        loss_sum, n_seen = 0.0, 0
        for idx in _batch_indices(len(train_samples), config.batch_size, shuffler):
            chunk = [train_samples[i] for i in idx.tolist()]
            inputs = assemble_inputs(chunk, strategy)
            labels = labels_tensor(chunk)
            optimizer.zero_grad()
            loss, n_clamped = compute_loss(strategy, model(inputs), labels)
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(chunk)
            n_seen += len(chunk)
            n_clamped_total += n_clamped

        val_scores, _ = predict_scores(model, val_samples, batch_size=config.batch_size)
        val_auc = auc_macro(val_scores, val_labels)
        history.append(
            {"epoch": epoch, "train_loss": loss_sum / n_seen, "val_auc": val_auc}
        )
        if stopper.update(val_auc):
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if stopper.should_stop:
            break

    logger.info(
        "trial %d (%s): %d epochs in %.1fs, best val AUC %.4f at epoch %d",
        trial_index, strategy, stopper.epoch, time.monotonic() - t0,
        stopper.best, stopper.best_epoch,
    )
    model.load_state_dict(best_state)
    model.eval()

    result = TrialResult(
        trial_index=trial_index,
        history=history,
        best_epoch=stopper.best_epoch,
        best_val_auc=stopper.best,
        stopped_epoch=stopper.epoch,
        n_loss_clamped=n_clamped_total,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "checkpoint.pt"
        save_checkpoint(model, model.spec, stats, ckpt)
        result.checkpoint_path = str(ckpt)
        _write_trial_files(result, out_dir)
    return result


def _write_trial_files(result: TrialResult, out_dir: Path) -> None:
    with open(out_dir / "history.jsonl", "w") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec) + "\n")
    summary = {
        "trial_index": result.trial_index,
        "best_epoch": result.best_epoch,
        "best_val_auc": result.best_val_auc,
        "stopped_epoch": result.stopped_epoch,
        "n_loss_clamped": result.n_loss_clamped,
        "checkpoint_path": result.checkpoint_path,
    }
    (out_dir / "result.json").write_text(json.dumps(summary, indent=2) + "\n")
    # the marker goes last so its presence implies every other file is final
    (out_dir / COMPLETE_MARKER).write_text(time.strftime("%Y-%m-%dT%H:%M:%S\n"))


def load_trial_result(trial_dir: str | Path) -> TrialResult:
    trial_dir = Path(trial_dir)
    summary = json.loads((trial_dir / "result.json").read_text())
    history = [
        json.loads(line)
        for line in (trial_dir / "history.jsonl").read_text().splitlines()
    ]
    return TrialResult(
        trial_index=summary["trial_index"],
        history=history,
        best_epoch=summary["best_epoch"],
        best_val_auc=summary["best_val_auc"],
        stopped_epoch=summary["stopped_epoch"],
        n_loss_clamped=summary.get("n_loss_clamped", 0),
        checkpoint_path=summary.get("checkpoint_path"),
    )


def trial_dir(out_root: str | Path, strategy: str, trial_index: int) -> Path:
    return Path(out_root) / "trials" / strategy / f"trial_{trial_index}"


def run_experiment(
    spec: FusionModelSpec,
    data: ExperimentData,
    config: TrainConfig,
    out_root: str | Path,
    trial_indices: list[int] | None = None,
) -> list[TrialResult]:
    """Run (or resume) the seeded trials of one strategy.

    Trials whose directory already carries a completion marker are loaded
    instead of retrained, so an interrupted run picks up where it stopped.
    """
    if trial_indices is None:
        trial_indices = list(range(config.n_trials))
    norm_train = [normalize(s, data.stats) for s in data.train]
    norm_val = [normalize(s, data.stats) for s in data.val]

    results = []
    for trial in trial_indices:
        tdir = trial_dir(out_root, spec.strategy, trial)
        if (tdir / COMPLETE_MARKER).exists():
            logger.info("trial %d (%s): already complete, skipping", trial, spec.strategy)
            results.append(load_trial_result(tdir))
            continue
        torch.manual_seed(trial)
        model = build_model(spec)
        train_set = rebalance(norm_train, data.plan, seed=trial)
        results.append(
            train_trial(
                model, train_set, norm_val, config, trial,
                out_dir=tdir, stats=data.stats,
            )
        )
    return results


def tune_lr(
    spec: FusionModelSpec,
    data: ExperimentData,
    config: TrainConfig,
    grid: tuple[float, ...] = LR_GRID,
    n_trials: int = 1,
    out_path: str | Path | None = None,
) -> dict:
    """Sweep learning rates and rank them by mean best validation AUC.

    Each rate gets ``n_trials`` seeded trials (seeds 0..n-1, same policy as
    experiments); nothing is checkpointed. Returns the per-rate AUCs and the
    best rate; optionally writes the same as JSON.
    """
    norm_train = [normalize(s, data.stats) for s in data.train]
    norm_val = [normalize(s, data.stats) for s in data.val]
    per_rate = {}
    for lr in grid:
        cfg = replace(config, learning_rate=lr)
        aucs = []
        for trial in range(n_trials):
            torch.manual_seed(trial)
            model = build_model(spec)
            train_set = rebalance(norm_train, data.plan, seed=trial)
            res = train_trial(model, train_set, norm_val, cfg, trial)
            aucs.append(res.best_val_auc)
        per_rate[lr] = float(np.mean(aucs))
        logger.info("lr %.0e: mean best val AUC %.4f", lr, per_rate[lr])
    best_rate = max(per_rate, key=per_rate.get)
    report = {
        "strategy": spec.strategy,
        "rates": {f"{lr:g}": auc for lr, auc in per_rate.items()},
        "best_rate": best_rate,
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2) + "\n")
    return report
