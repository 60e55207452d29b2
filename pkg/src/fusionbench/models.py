"""Fusion architectures over a shared convolutional backbone.

Three strategies are provided:

* ``early``: one backbone whose first convolution is widened to accept the
  five stacked bands (RGB + thermal + LiDAR, all resampled to a common
  resolution).
* ``late``: one backbone per modality, each reduced to a 256-d feature
  vector; the concatenated 768-d vector feeds a single affine classifier.
* ``moe``: the late-fusion extractors become experts, each with its own
  softmax head over the classes; a gating network over the concatenated
  features produces a weight per modality and the prediction is the gated
  mixture of the expert distributions.

Pretrained first layers expect RGB input, so channel counts other than 3
are handled by ``adapt_first_layer``, which recombines the RGB filters in a
way that preserves each filter's total weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import BandStats, normalize
from .ingest import MODALITIES, MODALITY_BANDS, TileSample, resample_bicubic

logger = logging.getLogger(__name__)

STRATEGIES = ("early", "late", "moe")
BACKBONE_FAMILIES = ("paper_resnet50", "tiny_cnn")

# order of the stacked bands consumed by early fusion; RGB leads so the
# pretrained RGB filters line up with real color data
EARLY_BAND_ORDER = ("rgb", "thermal", "lidar")
EARLY_CHANNELS = 5

CHECKPOINT_HEADER = "fusionbench-ckpt-v1"


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "paper_resnet50"
    pretrained: bool = True
    feature_dim: int = 2048
    weights_path: str | None = None

    def __post_init__(self):
        if self.family not in BACKBONE_FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}")
        if self.pretrained and self.family != "paper_resnet50":
            raise ValueError("pretrained weights are only available for paper_resnet50")
        if self.family == "paper_resnet50" and self.feature_dim != 2048:
            raise ValueError("paper_resnet50 always has feature_dim 2048")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")


@dataclass(frozen=True)
class FusionModelSpec:
    strategy: str
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    num_classes: int = 4
    per_modality_feature_dim: int = 256
    gate_hidden_dim: int = 256
    detach_gate_input: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.per_modality_feature_dim < 1 or self.gate_hidden_dim < 1:
            raise ValueError("feature and gate hidden dims must be positive")


@dataclass
class ModelOutput:
    """Per-batch model outputs.

    ``class_scores`` are raw logits for early/late fusion and mixture
    probabilities for moe. ``expert_probs`` (B, 3, C) and ``gate_weights``
    (B, 3) are populated only by moe.
    """

    class_scores: torch.Tensor
    expert_probs: torch.Tensor | None = None
    gate_weights: torch.Tensor | None = None


def adapt_first_layer(weights: np.ndarray | torch.Tensor, target_channels: int):
    """Re-derive first-conv weights for a non-RGB channel count.

    Channels beyond the three RGB sources (or all channels, when fewer than
    three are requested) take the mean of the RGB filters; everything is
    rescaled by 3/target so each filter's total weight is unchanged and the
    layer's response to a channel-constant input is preserved.
    """
    is_torch = isinstance(weights, torch.Tensor)
    w = weights.detach().cpu().numpy() if is_torch else np.asarray(weights)
    if w.ndim != 4 or w.shape[1] != 3:
        raise ValueError(f"expected weights shaped (filters, 3, k, k), got {w.shape}")
    if int(target_channels) != target_channels or target_channels < 1:
        raise ValueError(f"target_channels must be a positive integer, got {target_channels}")
    c = int(target_channels)
    mean = w.mean(axis=1, keepdims=True)
    if c >= 3:
        parts = [w] + [mean] * (c - 3)
    else:
        parts = [mean] * c
    out = np.concatenate(parts, axis=1) * (3.0 / c)
    out = out.astype(w.dtype)
    if is_torch:
        return torch.from_numpy(out).to(weights.device, weights.dtype)
    return out


class TinyCNN(nn.Module):
    """Small three-block convnet for desk-scale runs and gradient checks.

    Mirrors the backbone interface of the paper-scale network: an RGB first
    conv named ``conv1`` and a final affine ``fc``, so first-layer
    adaptation and head replacement work identically.
    """

    def __init__(self, feature_dim: int = 64, out_dim: int = 4):
        super().__init__()
        mid = max(feature_dim // 4, 8)
        self.conv1 = nn.Conv2d(3, mid, kernel_size=3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, 2 * mid, kernel_size=3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(2 * mid)
        self.conv3 = nn.Conv2d(2 * mid, feature_dim, kernel_size=3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(feature_dim)
        self.pool = nn.MaxPool2d(2)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(feature_dim, out_dim)

    def forward(self, x):
        x = self.pool(F.relu(self.bn1(self.conv1(x))))
        x = self.pool(F.relu(self.bn2(self.conv2(x))))
        x = F.relu(self.bn3(self.conv3(x)))
        x = self.avgpool(x).flatten(1)
        return self.fc(x)


def _load_resnet50(pretrained: bool, weights_path: str | None) -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    if pretrained:
        if not weights_path:
            raise ValueError(
                "pretrained paper_resnet50 needs a local weights_path; "
                "this package never downloads weights on its own"
            )
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    return net


def make_backbone(spec: BackboneSpec, in_channels: int, out_dim: int) -> nn.Module:
    """Build a backbone, adapt its first conv to ``in_channels``, and give
    it a fresh ``out_dim``-wide final affine layer."""
    if spec.family == "paper_resnet50":
        net = _load_resnet50(spec.pretrained, spec.weights_path)
    else:
        net = TinyCNN(feature_dim=spec.feature_dim)
    if in_channels != 3:
        old = net.conv1
        new = nn.Conv2d(
            in_channels,
            old.out_channels,
            kernel_size=old.kernel_size,
            stride=old.stride,
            padding=old.padding,
            bias=old.bias is not None,
        )
        with torch.no_grad():
            new.weight.copy_(adapt_first_layer(old.weight, in_channels))
            if old.bias is not None:
                new.bias.copy_(old.bias)
        net.conv1 = new
    net.fc = nn.Linear(net.fc.in_features, out_dim)
    return net


def _check_batch(x: torch.Tensor, name: str, bands: int) -> None:
    if x.ndim != 4 or x.shape[1] != bands:
        raise ValueError(
            f"{name} batch must have shape (B, {bands}, H, W), got {tuple(x.shape)}"
        )


def _check_modal_batch(batch: dict[str, torch.Tensor]) -> None:
    missing = [m for m in MODALITIES if m not in batch]
    if missing:
        raise ValueError(f"batch is missing modalities: {missing}")
    sizes = set()
    for name in MODALITIES:
        _check_batch(batch[name], name, MODALITY_BANDS[name])
        sizes.add(batch[name].shape[0])
    if len(sizes) != 1:
        raise ValueError(f"modalities disagree on batch size: {sorted(sizes)}")


def combine_experts(gate_weights: torch.Tensor, expert_probs: torch.Tensor) -> torch.Tensor:
    """Convex mixture of expert class distributions.

    gate_weights (B, M) rows on the simplex; expert_probs (B, M, C) rows of
    per-expert distributions; returns (B, C).
    """
    if gate_weights.ndim != 2 or expert_probs.ndim != 3:
        raise ValueError("expected gate (B, M) and expert probs (B, M, C)")
    if gate_weights.shape != expert_probs.shape[:2]:
        raise ValueError(
            f"gate shape {tuple(gate_weights.shape)} does not match "
            f"experts {tuple(expert_probs.shape[:2])}"
        )
    return (gate_weights.unsqueeze(-1) * expert_probs).sum(dim=1)


class EarlyFusion(nn.Module):
    """Single backbone over the five-band stack."""

    def __init__(self, spec: FusionModelSpec):
        super().__init__()
        if spec.strategy != "early":
            raise ValueError(f"spec.strategy must be 'early', got {spec.strategy!r}")
        self.spec = spec
        self.backbone = make_backbone(spec.backbone, EARLY_CHANNELS, spec.num_classes)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        _check_batch(x, "early-fusion", EARLY_CHANNELS)
        return ModelOutput(class_scores=self.backbone(x))


class LateFusion(nn.Module):
    """Per-modality extractors, concatenated features, one affine classifier."""

    def __init__(self, spec: FusionModelSpec):
        super().__init__()
        if spec.strategy != "late":
            raise ValueError(f"spec.strategy must be 'late', got {spec.strategy!r}")
        self.spec = spec
        d = spec.per_modality_feature_dim
        self.extractors = nn.ModuleDict(
            {m: make_backbone(spec.backbone, MODALITY_BANDS[m], d) for m in MODALITIES}
        )
        self.classifier = nn.Linear(len(MODALITIES) * d, spec.num_classes)

    def forward(self, batch: dict[str, torch.Tensor]) -> ModelOutput:
        _check_modal_batch(batch)
        feats = torch.cat([self.extractors[m](batch[m]) for m in MODALITIES], dim=1)
        return ModelOutput(class_scores=self.classifier(feats))


class MixtureOfExperts(nn.Module):
    """Modality experts with softmax heads, mixed by a learned gate.

    The gate consumes the concatenated 768-d features (optionally detached)
    and emits one normalized weight per modality; the model's output is the
    gated average of the expert class distributions.
    """

    def __init__(self, spec: FusionModelSpec):
        super().__init__()
        if spec.strategy != "moe":
            raise ValueError(f"spec.strategy must be 'moe', got {spec.strategy!r}")
        self.spec = spec
        d = spec.per_modality_feature_dim
        self.extractors = nn.ModuleDict(
            {m: make_backbone(spec.backbone, MODALITY_BANDS[m], d) for m in MODALITIES}
        )
        self.expert_heads = nn.ModuleDict(
            {m: nn.Linear(d, spec.num_classes) for m in MODALITIES}
        )
        self.gate = nn.Sequential(
            nn.Linear(len(MODALITIES) * d, spec.gate_hidden_dim),
            nn.ReLU(),
            nn.Linear(spec.gate_hidden_dim, len(MODALITIES)),
        )

    def forward(self, batch: dict[str, torch.Tensor]) -> ModelOutput:
        _check_modal_batch(batch)
        feats = [self.extractors[m](batch[m]) for m in MODALITIES]
        cat = torch.cat(feats, dim=1)
        gate_in = cat.detach() if self.spec.detach_gate_input else cat
        gate_weights = F.softmax(self.gate(gate_in), dim=1)
        expert_probs = torch.stack(
            [F.softmax(self.expert_heads[m](f), dim=1) for m, f in zip(MODALITIES, feats)],
            dim=1,
        )
        mixture = combine_experts(gate_weights, expert_probs)
        return ModelOutput(
            class_scores=mixture, expert_probs=expert_probs, gate_weights=gate_weights
        )


def build_early(spec: FusionModelSpec) -> EarlyFusion:
    return EarlyFusion(spec)


def build_late(spec: FusionModelSpec) -> LateFusion:
    return LateFusion(spec)


def build_moe(spec: FusionModelSpec) -> MixtureOfExperts:
    return MixtureOfExperts(spec)


def build_model(spec: FusionModelSpec) -> nn.Module:
    return {"early": build_early, "late": build_late, "moe": build_moe}[spec.strategy](spec)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _stack_early(samples: list[TileSample]) -> torch.Tensor:
    """Resample every band to the RGB grid and stack RGB, thermal, LiDAR."""
    target = samples[0].rgb.shape[1]
    rows = []
    for s in samples:
        bands = [s.rgb.astype(np.float32)]
        for name in ("thermal", "lidar"):
            tile = s.tile(name)
            side = tile.shape[1]
            if target % side:
                raise ValueError(
                    f"{name} tile side {side} does not divide the rgb side {target}"
                )
            bands.append(resample_bicubic(tile.astype(np.float32), target // side))
        rows.append(np.concatenate(bands, axis=0))
    return torch.from_numpy(np.stack(rows))


def assemble_inputs(
    samples: list[TileSample],
    strategy: str,
    stats: BandStats | None = None,
) -> torch.Tensor | dict[str, torch.Tensor]:
    """Turn tile samples into model-ready tensors for one strategy.

    Normalization (when stats are given) happens at native resolution,
    before any resampling. Early fusion gets a single five-band tensor in
    ``EARLY_BAND_ORDER``; late/moe get one tensor per modality.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    if not samples:
        raise ValueError("cannot assemble an empty batch")
    if stats is not None:
        samples = [normalize(s, stats) for s in samples]
    if strategy == "early":
        return _stack_early(samples)
    return {
        name: torch.from_numpy(
            np.stack([s.tile(name) for s in samples]).astype(np.float32)
        )
        for name in MODALITIES
    }


def labels_tensor(samples: list[TileSample]) -> torch.Tensor:
    return torch.tensor([s.label for s in samples], dtype=torch.long)


def predict_scores(
    model: nn.Module,
    samples: list[TileSample],
    stats: BandStats | None = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-class probability scores (and moe gating weights) for a sample set.

    Early/late logits go through a softmax so every strategy reports scores
    on the same probability scale; moe outputs are mixtures already. Returns
    (scores (N, C), gates (N, 3) or None) as numpy arrays.
    """
    strategy = model.spec.strategy
    model.eval()
    probs, gates = [], []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            out = model(assemble_inputs(chunk, strategy, stats))
            p = out.class_scores if strategy == "moe" else F.softmax(out.class_scores, dim=1)
            probs.append(p.numpy())
            if out.gate_weights is not None:
                gates.append(out.gate_weights.numpy())
    scores = np.concatenate(probs)
    return scores, (np.concatenate(gates) if gates else None)


def spec_to_dict(spec: FusionModelSpec) -> dict:
    return {
        "strategy": spec.strategy,
        "backbone": {
            "family": spec.backbone.family,
            "pretrained": spec.backbone.pretrained,
            "feature_dim": spec.backbone.feature_dim,
            "weights_path": spec.backbone.weights_path,
        },
        "num_classes": spec.num_classes,
        "per_modality_feature_dim": spec.per_modality_feature_dim,
        "gate_hidden_dim": spec.gate_hidden_dim,
        "detach_gate_input": spec.detach_gate_input,
    }


def spec_from_dict(payload: dict) -> FusionModelSpec:
    backbone = BackboneSpec(**payload["backbone"])
    return FusionModelSpec(
        strategy=payload["strategy"],
        backbone=backbone,
        num_classes=payload["num_classes"],
        per_modality_feature_dim=payload["per_modality_feature_dim"],
        gate_hidden_dim=payload["gate_hidden_dim"],
        detach_gate_input=payload.get("detach_gate_input", False),
    )


def save_checkpoint(
    model: nn.Module, spec: FusionModelSpec, stats: BandStats, path: str | Path
) -> None:
    """Write weights plus the model spec and band statistics as one archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "header": CHECKPOINT_HEADER,
        "spec": spec_to_dict(spec),
        "stats": {
            "means": {k: list(v) for k, v in stats.means.items()},
            "stds": {k: list(v) for k, v in stats.stds.items()},
        },
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[nn.Module, FusionModelSpec, BandStats]:
    """Rebuild a model from an archive written by ``save_checkpoint``.

    The backbone is constructed without pretrained weights (the archive's
    state dict supplies them), so loading never needs the original weights
    file; the returned spec still records the training-time configuration.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    header = payload.get("header")
    if header != CHECKPOINT_HEADER:
        raise ValueError(f"not a recognized checkpoint (header {header!r})")
    spec = spec_from_dict(payload["spec"])
    build_dict = spec_to_dict(spec)
    build_dict["backbone"]["pretrained"] = False
    build_dict["backbone"]["weights_path"] = None
    model = build_model(spec_from_dict(build_dict))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    stats = BandStats(
        means={k: tuple(v) for k, v in payload["stats"]["means"].items()},
        stds={k: tuple(v) for k, v in payload["stats"]["stds"].items()},
    )
    return model, spec, stats
