"""Metrics across trials: macro AUC, per-class precision/recall, the
gating-weight table, and the report files.

AUC here always means unweighted macro one-vs-rest ROC AUC over softmax
probability scores, with tied scores contributing half a concordant pair
(the Mann-Whitney convention). That definition is stamped into the header
of every metrics file this module writes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import stats as sstats

from .ingest import CLASS_NAMES, FEATURE_CLASSES, MODALITIES, TileSample

logger = logging.getLogger(__name__)

AUC_DEFINITION = (
    "unweighted macro one-vs-rest ROC AUC over softmax scores; ties count 1/2"
)


class PrecisionRecall(NamedTuple):
    precision: float
    recall: float
    precision_defined: bool = True
    recall_defined: bool = True


@dataclass
class ClassMetrics:
    """Mean and 2-SE aggregates over trials for one strategy."""

    n_trials: int
    auc: tuple[float, float]  # (mean, 2*SE)
    precision: dict[str, tuple[float, float]]
    recall: dict[str, tuple[float, float]]


@dataclass
class GatingReport:
    """Per-modality gating weights pooled over (test image, trial) pairs,
    one column per feature class."""

    mean: dict[str, dict[str, float]]  # modality -> class -> mean
    two_se: dict[str, dict[str, float]]
    n_pooled: dict[str, int]  # class -> pooled sample count
    se_defined: dict[str, bool]


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based ROC AUC for one class; ties get average ranks."""
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    ranks = sstats.rankdata(scores)
    r_pos = ranks[positive].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_macro(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of one-vs-rest AUCs over the classes present.

    Classes with no positive example are skipped with a warning; fewer than
    two distinct labels leave no rankable pair at all and raise.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(
            f"scores {scores.shape} and labels {labels.shape} do not line up"
        )
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("AUC needs at least two distinct labels")
    per_class = []
    skipped = []
    for c in range(scores.shape[1]):
        positive = labels == c
        if not positive.any():
            skipped.append(c)
            continue
        per_class.append(_binary_auc(scores[:, c], positive))
    if skipped:
        names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c) for c in skipped]
        logger.warning("AUC skipping absent classes: %s", names)
    return float(np.mean(per_class))


def precision_recall(
    predictions: np.ndarray, labels: np.ndarray, cls: int
) -> PrecisionRecall:
    """Precision and recall of argmax predictions for one class.

    An empty denominator (class never predicted, or absent from labels)
    yields 0 with the corresponding ``*_defined`` flag cleared.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    tp = int(((predictions == cls) & (labels == cls)).sum())
    fp = int(((predictions == cls) & (labels != cls)).sum())
    fn = int(((predictions != cls) & (labels == cls)).sum())
    p_def, r_def = tp + fp > 0, tp + fn > 0
    return PrecisionRecall(
        precision=tp / (tp + fp) if p_def else 0.0,
        recall=tp / (tp + fn) if r_def else 0.0,
        precision_defined=p_def,
        recall_defined=r_def,
    )


def mean_two_se(values) -> tuple[float, float]:
    """Mean and two standard errors (sample std / sqrt(n)) of a sequence."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 2:
        raise ValueError("standard error needs at least two values")
    se = arr.std(ddof=1) / np.sqrt(arr.size)
    return float(arr.mean()), float(2.0 * se)


def evaluate_model(model, samples: list[TileSample], stats=None, batch_size: int = 64) -> dict:
    """Test metrics for one trained model: macro AUC plus per-class
    precision/recall from argmax predictions."""
    from .models import predict_scores

    scores, _ = predict_scores(model, samples, stats=stats, batch_size=batch_size)
    labels = np.array([s.label for s in samples])
    preds = scores.argmax(axis=1)
    out = {"auc": auc_macro(scores, labels), "precision": {}, "recall": {}}
    for c, name in enumerate(CLASS_NAMES):
        pr = precision_recall(preds, labels, c)
        out["precision"][name] = pr.precision
        out["recall"][name] = pr.recall
    return out


def aggregate_trials(trial_metrics: list[dict]) -> ClassMetrics:
    """Combine per-trial metric dicts into mean ± 2·SE summaries."""
    if len(trial_metrics) < 2:
        raise ValueError("aggregation needs at least two trials")
    return ClassMetrics(
        n_trials=len(trial_metrics),
        auc=mean_two_se(m["auc"] for m in trial_metrics),
        precision={
            name: mean_two_se(m["precision"][name] for m in trial_metrics)
            for name in CLASS_NAMES
        },
        recall={
            name: mean_two_se(m["recall"][name] for m in trial_metrics)
            for name in CLASS_NAMES
        },
    )


def collect_gates(model, samples: list[TileSample], stats=None, batch_size: int = 64):
    """Gating vectors for every sample, validated to lie on the simplex."""
    from .models import predict_scores

    _, gates = predict_scores(model, samples, stats=stats, batch_size=batch_size)
    if gates is None:
        raise ValueError("model emits no gating weights (not a mixture of experts)")
    sums = gates.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise AssertionError("gating vectors left the simplex before pooling")
    return gates


def gating_table(gates_by_trial: list[np.ndarray], labels: np.ndarray) -> GatingReport:
    """Pool per-(image, trial) gating vectors into the modality × class table.

    ``gates_by_trial`` holds one (n_images, 3) array per trial, all over the
    same test images; only feature-class images enter the table.
    """
    labels = np.asarray(labels)
    mean: dict[str, dict[str, float]] = {m: {} for m in MODALITIES}
    two_se: dict[str, dict[str, float]] = {m: {} for m in MODALITIES}
    n_pooled: dict[str, int] = {}
    se_defined: dict[str, bool] = {}
    for name in FEATURE_CLASSES:
        cls = CLASS_NAMES.index(name)
        mask = labels == cls
        pooled = np.concatenate([g[mask] for g in gates_by_trial], axis=0)
        n = pooled.shape[0]
        if n == 0:
            raise ValueError(f"no test images of class {name!r} to pool")
        n_pooled[name] = n
        se_defined[name] = n >= 2
        for j, modality in enumerate(MODALITIES):
            col = pooled[:, j]
            mean[modality][name] = float(col.mean())
            if n >= 2:
                two_se[modality][name] = float(2.0 * col.std(ddof=1) / np.sqrt(n))
            else:
                two_se[modality][name] = 0.0
    return GatingReport(mean=mean, two_se=two_se, n_pooled=n_pooled, se_defined=se_defined)


def format_gating_table(report: GatingReport) -> str:
    """Plain-text aligned table of gating weights, one row per modality."""
    classes = list(FEATURE_CLASSES)
    width = 14
    header = "modality".ljust(10) + "".join(c.rjust(width) for c in classes)
    lines = [header]
    for modality in MODALITIES:
        cells = []
        for name in classes:
            m = report.mean[modality][name]
            s = report.two_se[modality][name]
            cells.append(f"{m:.2f} ± {s:.2f}".rjust(width))
        lines.append(modality.ljust(10) + "".join(cells))
    notes = ", ".join(f"{name}: n={report.n_pooled[name]}" for name in classes)
    flagged = [name for name in classes if not report.se_defined[name]]
    if flagged:
        notes += f"; SE undefined (single sample) for {flagged}, shown as 0"
    lines.append(f"pooled (image, trial) counts -- {notes}")
    return "\n".join(lines) + "\n"


def write_metrics_records(
    trial_metrics: dict[str, list[dict]], path: str | Path
) -> None:
    """Line-delimited metric records, one per (strategy, trial, metric, class),
    preceded by a header record naming the AUC definition."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": "metrics-v1", "auc_definition": AUC_DEFINITION}) + "\n")
        for strategy, trials in trial_metrics.items():
            for i, m in enumerate(trials):
                rows = [
                    {"strategy": strategy, "trial": i, "metric": "auc",
                     "class": "macro", "value": m["auc"]},
                ]
                for name in CLASS_NAMES:
                    rows.append({"strategy": strategy, "trial": i, "metric": "precision",
                                 "class": name, "value": m["precision"][name]})
                    rows.append({"strategy": strategy, "trial": i, "metric": "recall",
                                 "class": name, "value": m["recall"][name]})
                for rec in rows:
                    fh.write(json.dumps(rec) + "\n")


def _plot_overall(aggregates: dict[str, ClassMetrics], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    strategies = list(aggregates)
    means = [aggregates[s].auc[0] for s in strategies]
    errs = [aggregates[s].auc[1] for s in strategies]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(strategies, means, yerr=errs, capsize=4, color="#4878b0")
    ax.set_ylabel("macro one-vs-rest AUC")
    ax.set_ylim(0, 1)
    ax.set_title("Test AUC by fusion strategy (mean ± 2 SE)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_class(aggregates: dict[str, ClassMetrics], cls: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    strategies = list(aggregates)
    x = np.arange(len(strategies))
    w = 0.35
    fig, ax = plt.subplots(figsize=(5, 4))
    for k, metric in enumerate(("precision", "recall")):
        vals = [getattr(aggregates[s], metric)[cls][0] for s in strategies]
        errs = [getattr(aggregates[s], metric)[cls][1] for s in strategies]
        ax.bar(x + (k - 0.5) * w, vals, w, yerr=errs, capsize=4, label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels(strategies)
    ax.set_ylim(0, 1)
    ax.set_title(f"{cls} (mean ± 2 SE)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def emit_report(
    trial_metrics: dict[str, list[dict]],
    out_dir: str | Path,
    gating: GatingReport | None = None,
) -> list[Path]:
    """Write the metrics file, the five bar plots (macro plus one per
    class), and the gating table when mixture-of-experts gates were pooled.

    Returns the created paths. Refuses to write anything when no strategy
    has completed trials.
    """
    trial_metrics = {s: t for s, t in trial_metrics.items() if t}
    if not trial_metrics:
        raise ValueError("no completed trials to report")
    # aggregate before touching the filesystem so errors leave nothing behind
    aggregates = {s: aggregate_trials(t) for s, t in trial_metrics.items()}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    created = []
    metrics_path = out_dir / "metrics.jsonl"
    write_metrics_records(trial_metrics, metrics_path)
    created.append(metrics_path)

    overall = out_dir / "overall.png"
    _plot_overall(aggregates, overall)
    created.append(overall)
    for name in CLASS_NAMES:
        p = out_dir / f"class_{name}.png"
        _plot_class(aggregates, name, p)
        created.append(p)

    if gating is not None:
        table_path = out_dir / "gating_table.txt"
        table_path.write_text(format_gating_table(gating))
        created.append(table_path)
    return created
