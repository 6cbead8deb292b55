"""Backbone registry, feature extraction, and the projection head.

Every backbone exposes ``forward_features`` (penultimate activations) and a
final ``classifier`` linear layer whose weight columns act as the category
centers. The registry covers small CIFAR-style ResNets, a compact VGG, wide
ResNets, and tiny plain convnets sized for CPU-scale experiments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import ImageBatch
from .errors import ContractViolation, UnsupportedArchitectureError
from .losses import FeatureBatch

CHECKPOINT_VERSION = 1


@dataclass
class ModelOutputs:
    """One forward pass: penultimate features, logits, and the center view.

    ``centers`` is a live ``[K, C]`` view of the classifier weight; mutating
    it (or backpropagating into it) touches the classifier itself.
    """

    features: FeatureBatch
    logits: torch.Tensor
    centers: torch.Tensor


class Backbone(nn.Module):
    """Feature extractor plus a linear classifier head."""

    def __init__(self, feature_dim: int, num_classes: int, classifier_bias: bool = True):
        super().__init__()
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.classifier = nn.Linear(feature_dim, num_classes, bias=classifier_bias)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.forward_features(x))


class ConvNet(Backbone):
    """Plain conv-BN-ReLU stack with GAP; the smallest desk-scale backbones."""

    def __init__(self, widths, num_classes, in_channels=3, classifier_bias=True,
                 strides=None):
        super().__init__(widths[-1], num_classes, classifier_bias)
        if strides is None:
            strides = [1] + [2] * (len(widths) - 1)
        layers = []
        prev = in_channels
        for w, stride in zip(widths, strides):
            layers += [
                nn.Conv2d(prev, w, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ]
            prev = w
        self.body = nn.Sequential(*layers)

    def forward_features(self, x):
        out = self.body(x)
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CifarResNet(Backbone):
    """Three-stage residual net for 32x32 inputs; depth = 6n + 2."""

    def __init__(self, blocks_per_stage, num_classes, classifier_bias=True, width=16):
        super().__init__(width * 4, num_classes, classifier_bias)
        self.conv1 = nn.Conv2d(3, width, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.in_ch = width
        self.stage1 = self._stage(width, blocks_per_stage, 1)
        self.stage2 = self._stage(width * 2, blocks_per_stage, 2)
        self.stage3 = self._stage(width * 4, blocks_per_stage, 2)

    def _stage(self, out_ch, num_blocks, first_stride):
        strides = [first_stride] + [1] * (num_blocks - 1)
        blocks = []
        for s in strides:
            blocks.append(BasicBlock(self.in_ch, out_ch, s))
            self.in_ch = out_ch
        return nn.Sequential(*blocks)

    def forward_features(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.stage3(self.stage2(self.stage1(out)))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


class WideBlock(nn.Module):
    """Pre-activation residual block used by the wide ResNets."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        skip = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv2(F.relu(self.bn2(self.conv1(out))))
        return out + skip


class WideResNet(Backbone):
    def __init__(self, depth, widen_factor, num_classes, classifier_bias=True):
        if (depth - 4) % 6 != 0:
            raise ContractViolation("wide resnet depth must be 6n + 4")
        n = (depth - 4) // 6
        widths = [16, 16 * widen_factor, 32 * widen_factor, 64 * widen_factor]
        super().__init__(widths[3], num_classes, classifier_bias)
        self.conv1 = nn.Conv2d(3, widths[0], 3, stride=1, padding=1, bias=False)
        self.in_ch = widths[0]
        self.stage1 = self._stage(widths[1], n, 1)
        self.stage2 = self._stage(widths[2], n, 2)
        self.stage3 = self._stage(widths[3], n, 2)
        self.bn_final = nn.BatchNorm2d(widths[3])

    def _stage(self, out_ch, num_blocks, first_stride):
        strides = [first_stride] + [1] * (num_blocks - 1)
        blocks = []
        for s in strides:
            blocks.append(WideBlock(self.in_ch, out_ch, s))
            self.in_ch = out_ch
        return nn.Sequential(*blocks)

    def forward_features(self, x):
        out = self.stage3(self.stage2(self.stage1(self.conv1(x))))
        out = F.relu(self.bn_final(out))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


class VggSmall(Backbone):
    """Compact VGG-style stack: conv pairs with max-pooling between stages."""

    def __init__(self, num_classes, classifier_bias=True):
        widths = (32, 64, 128)
        super().__init__(widths[-1], num_classes, classifier_bias)
        layers = []
        prev = 3
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.Conv2d(w, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = w
        self.body = nn.Sequential(*layers)

    def forward_features(self, x):
        return F.adaptive_avg_pool2d(self.body(x), 1).flatten(1)


BACKBONES = {
    "convnet_tiny": lambda c, bias: ConvNet((8, 16, 32), c, classifier_bias=bias),
    "convnet_small": lambda c, bias: ConvNet((16, 32, 64), c, classifier_bias=bias),
    "convnet_medium": lambda c, bias: ConvNet((32, 64, 128), c, classifier_bias=bias),
    # same 32-wide features as convnet_tiny, so teacher/student centers align
    "convnet_deep32": lambda c, bias: ConvNet(
        (16, 16, 32, 32, 32), c, classifier_bias=bias, strides=(1, 2, 2, 1, 1)
    ),
    "resnet8": lambda c, bias: CifarResNet(1, c, classifier_bias=bias),
    "resnet14": lambda c, bias: CifarResNet(2, c, classifier_bias=bias),
    "resnet20": lambda c, bias: CifarResNet(3, c, classifier_bias=bias),
    "resnet32": lambda c, bias: CifarResNet(5, c, classifier_bias=bias),
    "vgg_small": lambda c, bias: VggSmall(c, classifier_bias=bias),
    "wrn_16_2": lambda c, bias: WideResNet(16, 2, c, classifier_bias=bias),
    "wrn_40_2": lambda c, bias: WideResNet(40, 2, c, classifier_bias=bias),
}


def build_backbone(
    name: str,
    num_classes: int,
    classifier_bias: bool = True,
    seed: int | None = None,
) -> Backbone:
    """Instantiate a registered backbone, optionally with seeded init."""
    if name not in BACKBONES:
        raise ContractViolation(f"unknown backbone {name!r}; known: {sorted(BACKBONES)}")
    if num_classes < 1:
        raise ContractViolation("num_classes must be >= 1")
    if seed is None:
        model = BACKBONES[name](num_classes, classifier_bias)
    else:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = BACKBONES[name](num_classes, classifier_bias)
    model.backbone_name = name
    return model


def forward_with_features(model: Backbone, batch: ImageBatch) -> ModelOutputs:
    """Run one forward pass returning features, logits, and the center view."""
    if batch.pixels.ndim != 4:
        raise ContractViolation(f"expected [R, C, H, W] pixels, got {batch.pixels.ndim}D")
    feats = model.forward_features(batch.pixels)
    logits = model.classifier(feats)
    return ModelOutputs(
        features=FeatureBatch(
            values=feats,
            rotation_index=batch.rotation_index,
            source_sample=batch.source_sample,
        ),
        logits=logits,
        centers=category_centers(model),
    )


def category_centers(model: nn.Module) -> torch.Tensor:
    """Live ``[K, C]`` view of the classifier weight; column c is class c's center."""
    head = getattr(model, "classifier", None)
    if not isinstance(head, nn.Linear):
        raise UnsupportedArchitectureError(
            "model has no final linear classifier exposing category centers"
        )
    return head.weight.t()


class ProjectionHead(nn.Module):
    """One-hidden-layer perceptron mapping student features to teacher width.

    Hidden width defaults to twice the output dimension. ``activation`` may
    be "relu" (default) or "identity" for a purely linear path.
    """

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden_dim: int | None = None,
        activation: str = "relu",
    ):
        super().__init__()
        if activation not in ("relu", "identity"):
            raise ContractViolation(f"unknown activation {activation!r}")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden_dim = hidden_dim if hidden_dim is not None else 2 * output_dim
        self.fc1 = nn.Linear(input_dim, self.hidden_dim)
        self.fc2 = nn.Linear(self.hidden_dim, output_dim)
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.fc1(x)
        if self.activation == "relu":
            h = F.relu(h)
        return self.fc2(h)


def project(head: ProjectionHead, student_features: FeatureBatch) -> FeatureBatch:
    """Map a student feature batch through the projection head."""
    if student_features.feature_dim != head.input_dim:
        raise ContractViolation(
            f"projection head expects dim {head.input_dim}, "
            f"got {student_features.feature_dim}"
        )
    return student_features.replace_values(head(student_features.values))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(
    path,
    model: Backbone,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    """Write a named-tensor archive with a versioned manifest."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "backbone": getattr(model, "backbone_name", None),
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
        "classifier_bias": model.classifier.bias is not None,
        "step": int(step),
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"manifest": manifest, "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> tuple[Backbone, dict]:
    """Rebuild a backbone from a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise ContractViolation(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    manifest = payload["manifest"]
    if manifest.get("version", 0) > CHECKPOINT_VERSION:
        # Newer manifests stay loadable as long as the fields below exist.
        import logging

        logging.getLogger(__name__).warning(
            "checkpoint manifest version %s is newer than %s",
            manifest.get("version"), CHECKPOINT_VERSION,
        )
    model = build_backbone(
        manifest["backbone"],
        manifest["num_classes"],
        classifier_bias=manifest.get("classifier_bias", True),
    )
    model.load_state_dict(payload["state_dict"])
    return model, manifest
