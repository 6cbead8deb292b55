"""Dataset ingestion, synthetic fixtures, batching, and the transfer protocol.

On-disk format (documented byte-for-byte in the README): a dataset lives at
``<root>/<name>/`` with a ``meta.json`` declaring ``num_classes``,
``image_size`` and ``channels``, plus one ``<split>.bin`` per split. Each
record is ``1 + channels * image_size**2`` bytes: a single label byte
followed by the image in channel-major (C, H, W) order, one byte per pixel.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import preprocess
from .errors import ContractViolation, IngestionError
from .models import Backbone, load_checkpoint

SPLITS = ("train", "val", "test")


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from a mixed tuple of ints and strings."""
    h = 0
    for part in parts:
        if isinstance(part, str):
            part = zlib.crc32(part.encode())
        h = (h * 6364136223846793005 + int(part) + 1442695040888963407) % (1 << 63)
    return h & 0x7FFFFFFF


@dataclass
class DatasetSpec:
    """Pointer to one split of an on-disk dataset."""

    name: str
    root: str
    split: str
    image_size: int
    num_classes: int
    channels: int = 3
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)


@dataclass
class SyntheticSpec:
    """Deterministic class-conditional image generator.

    Each class gets a smooth random pattern; a sample is the pattern at random
    amplitude plus pixel noise. A ``hard_fraction`` of samples additionally
    receives clutter from another class's pattern and doubled noise, giving
    the dataset a controllable easy/hard difficulty structure.
    """

    num_classes: int = 10
    per_class: int = 100
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    hard_fraction: float = 0.3
    contrast: float = 0.25
    clutter_strength: float = 1.0
    noise_std: float = 0.08
    val_per_class: int = 20
    test_per_class: int = 20


@dataclass
class SplitData:
    """One split held in memory: uint8 pixels plus integer labels."""

    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]

    def record_hashes(self) -> set:
        """Per-record content hashes, used to check split disjointness."""
        arr = self.images.numpy()
        labs = self.labels.numpy()
        return {
            hashlib.sha1(bytes([labs[i]]) + arr[i].tobytes()).hexdigest()
            for i in range(arr.shape[0])
        }


@dataclass
class DatasetBundle:
    """All three splits plus the normalization statistics they share."""

    name: str
    num_classes: int
    image_size: int
    channels: int
    mean: tuple
    std: tuple
    train: SplitData
    val: SplitData
    test: SplitData

    def split(self, name: str) -> SplitData:
        if name not in SPLITS:
            raise ContractViolation(f"unknown split {name!r}")
        return getattr(self, name)


def load_dataset(spec: DatasetSpec) -> SplitData:
    """Read one binary split, validating layout and label range."""
    base = Path(spec.root) / spec.name
    meta_path = base / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        for key, expected in (
            ("num_classes", spec.num_classes),
            ("image_size", spec.image_size),
            ("channels", spec.channels),
        ):
            if meta.get(key) != expected:
                raise IngestionError(
                    f"{meta_path}: {key}={meta.get(key)} does not match spec {expected}"
                )
    path = base / f"{spec.split}.bin"
    if not path.exists():
        raise IngestionError(f"missing dataset file: {path}")
    record = 1 + spec.channels * spec.image_size * spec.image_size
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record != 0:
        raise IngestionError(
            f"{path}: size {raw.size} is not a multiple of the {record}-byte record"
        )
    raw = raw.reshape(-1, record)
    labels = torch.from_numpy(raw[:, 0].astype(np.int64))
    if labels.numel() and labels.max() >= spec.num_classes:
        raise IngestionError(
            f"{path}: label {int(labels.max())} out of range for {spec.num_classes} classes"
        )
    images = torch.from_numpy(
        raw[:, 1:].reshape(-1, spec.channels, spec.image_size, spec.image_size).copy()
    )
    return SplitData(images=images, labels=labels)


def write_split(path, split: SplitData) -> None:
    """Write a split in the documented binary record layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = split.images.numpy().astype(np.uint8)
    labs = split.labels.numpy().astype(np.uint8)
    records = np.concatenate([labs[:, None], arr.reshape(arr.shape[0], -1)], axis=1)
    records.tofile(path)


def write_bundle(root, bundle: DatasetBundle) -> Path:
    """Persist a bundle as meta.json plus one .bin per split."""
    base = Path(root) / bundle.name
    base.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_classes": bundle.num_classes,
        "image_size": bundle.image_size,
        "channels": bundle.channels,
        "mean": list(bundle.mean),
        "std": list(bundle.std),
    }
    (base / "meta.json").write_text(json.dumps(meta, indent=2))
    for name in SPLITS:
        write_split(base / f"{name}.bin", bundle.split(name))
    return base


def load_bundle(root, name: str, mean=None, std=None) -> DatasetBundle:
    """Load all three splits of an on-disk dataset using its meta.json."""
    base = Path(root) / name
    meta_path = base / "meta.json"
    if not meta_path.exists():
        raise IngestionError(f"missing dataset metadata: {meta_path}")
    meta = json.loads(meta_path.read_text())
    spec = DatasetSpec(
        name=name,
        root=str(root),
        split="train",
        image_size=meta["image_size"],
        num_classes=meta["num_classes"],
        channels=meta["channels"],
    )
    splits = {s: load_dataset(replace(spec, split=s)) for s in SPLITS}
    return DatasetBundle(
        name=name,
        num_classes=meta["num_classes"],
        image_size=meta["image_size"],
        channels=meta["channels"],
        mean=tuple(mean if mean is not None else meta.get("mean", (0.5,) * meta["channels"])),
        std=tuple(std if std is not None else meta.get("std", (0.25,) * meta["channels"])),
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
    )


def _smooth_patterns(rng, num_classes, channels, size):
    low = rng.standard_normal((num_classes, channels, size // 4, size // 4))
    pat = F.interpolate(
        torch.from_numpy(low.astype(np.float32)),
        size=(size, size), mode="bilinear", align_corners=False,
    )
    scale = pat.flatten(1).std(dim=1).clamp_min(1e-6).view(-1, 1, 1, 1)
    return pat / scale


def _synthesize_split(spec: SyntheticSpec, patterns, rng, per_class: int) -> SplitData:
    images, labels = [], []
    for c in range(spec.num_classes):
        for _ in range(per_class):
            amp = rng.uniform(0.8, 1.2) * spec.contrast
            x = 0.5 + amp * patterns[c]
            noise_std = spec.noise_std
            if rng.uniform() < spec.hard_fraction:
                other = int(rng.integers(spec.num_classes - 1))
                other = other + 1 if other >= c else other
                mix = rng.uniform(0.7, 1.1) * spec.clutter_strength * spec.contrast
                x = x + mix * patterns[other]
                noise_std = 2.0 * noise_std
            x = x + noise_std * torch.from_numpy(
                rng.standard_normal(x.shape).astype(np.float32)
            )
            images.append((x.clamp(0, 1) * 255).round().to(torch.uint8))
            labels.append(c)
    order = torch.from_numpy(rng.permutation(len(images)))
    return SplitData(
        images=torch.stack(images)[order],
        labels=torch.tensor(labels, dtype=torch.long)[order],
    )


def generate_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    """Generate a deterministic in-memory dataset with disjoint splits."""
    rng = np.random.default_rng(spec.seed)
    patterns = _smooth_patterns(rng, spec.num_classes, spec.channels, spec.image_size)
    train = _synthesize_split(spec, patterns, rng, spec.per_class)
    val = _synthesize_split(spec, patterns, rng, spec.val_per_class)
    test = _synthesize_split(spec, patterns, rng, spec.test_per_class)
    return DatasetBundle(
        name=f"synthetic-{spec.seed}",
        num_classes=spec.num_classes,
        image_size=spec.image_size,
        channels=spec.channels,
        mean=(0.5,) * spec.channels,
        std=(0.25,) * spec.channels,
        train=train,
        val=val,
        test=test,
    )


def batch_indices(num_samples: int, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled batch order for one epoch."""
    gen = torch.Generator().manual_seed(derive_seed(seed, "order", epoch))
    order = torch.randperm(num_samples, generator=gen)
    return [order[i:i + batch_size] for i in range(0, num_samples, batch_size)]


def extract_features(
    model: Backbone,
    split: SplitData,
    mean,
    std,
    batch_size: int = 256,
) -> torch.Tensor:
    """Penultimate-layer features of a split (eval mode, normalization only)."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(split), batch_size):
            pixels = split.images[start:start + batch_size]
            labels = split.labels[start:start + batch_size]
            batch = preprocess(pixels, labels, 0.0, mean, std, rng_seed=0)
            chunks.append(model.forward_features(batch.pixels))
    return torch.cat(chunks)


@dataclass
class TransferResult:
    """Outcome of the frozen-backbone transfer protocol."""

    test_top1: float
    train_top1: float
    head: torch.nn.Linear = field(repr=False, default=None)


def transfer_protocol(
    student_checkpoint,
    target_dataset: DatasetBundle,
    epochs: int = 60,
    lr: float = 0.1,
    lr_milestones=(30, 45),
    lr_decay: float = 0.1,
    batch_size: int = 64,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    seed: int = 0,
) -> TransferResult:
    """Retrain only a fresh linear head on a frozen backbone.

    The backbone (loaded from a checkpoint path or passed as a module) is
    frozen in eval mode and used purely as a feature extractor, so its
    parameters and outputs are bit-identical before and after. Returns top-1
    accuracy on the target test split (plus train accuracy of the head).
    """
    if isinstance(student_checkpoint, Backbone):
        model = student_checkpoint
    else:
        model, _ = load_checkpoint(student_checkpoint)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    feats_train = extract_features(model, target_dataset.train, target_dataset.mean, target_dataset.std)
    feats_test = extract_features(model, target_dataset.test, target_dataset.mean, target_dataset.std)
    y_train = target_dataset.train.labels
    y_test = target_dataset.test.labels

    gen_seed = derive_seed(seed, "transfer-head")
    with torch.random.fork_rng():
        torch.manual_seed(gen_seed)
        head = torch.nn.Linear(model.feature_dim, target_dataset.num_classes)
    opt = torch.optim.SGD(
        head.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay
    )
    n = feats_train.shape[0]
    for epoch in range(epochs):
        factor = lr_decay ** sum(1 for m in lr_milestones if epoch >= m)
        for group in opt.param_groups:
            group["lr"] = lr * factor
        for idx in batch_indices(n, batch_size, seed, epoch):
            opt.zero_grad()
            loss = F.cross_entropy(head(feats_train[idx]), y_train[idx])
            loss.backward()
            opt.step()

    with torch.no_grad():
        train_top1 = (head(feats_train).argmax(1) == y_train).double().mean() * 100
        test_top1 = (head(feats_test).argmax(1) == y_test).double().mean() * 100
    return TransferResult(
        test_top1=float(test_top1), train_top1=float(train_top1), head=head
    )
