"""Teacher pretraining, the distillation loop, and evaluation.

The distillation loop runs, per mini-batch: preprocess, rotation expansion
(when a rotation-consuming loss is active), teacher forward without
gradients, student forward, the four loss terms, difficulty scores and
learning weights, the weighted total, then one optimizer step on the student
and projection-head parameters only. The threshold grows once per epoch.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .augment import expand_rotations, preprocess
from .data import DatasetBundle, SplitData, batch_indices, derive_seed
from .errors import ContractViolation, NumericError
from .losses import (
    LossWeights,
    PerSampleTerms,
    center_alignment_loss,
    center_contrast_per_sample,
    cross_entropy_per_sample,
    feature_alignment_per_sample,
    kd_loss_per_sample,
    total_pckd_loss,
)
from .models import (
    Backbone,
    ProjectionHead,
    build_backbone,
    category_centers,
    forward_with_features,
    load_checkpoint,
    project,
    save_checkpoint,
)
from .preview import SchedulerConfig, assign_weights, threshold

logger = logging.getLogger(__name__)

LOG_SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    """Everything a run needs: loss weights, schedule, optimizer, seeds."""

    loss_weights: LossWeights = field(default_factory=LossWeights)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = (150, 180, 210)
    lr_decay: float = 0.1
    epochs: int = 240
    batch_size: int = 64
    seed: int = 0
    flip_prob: float = 0.5
    preview_applies_to: tuple = ("kd", "cc")
    normalize_contrast: bool = True
    deterministic: bool = True
    eval_every: int = 1

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ContractViolation(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be >= 1")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ContractViolation("lr_milestones must be sorted ascending")
        if not 0 <= self.flip_prob <= 1:
            raise ContractViolation("flip_prob must be in [0, 1]")
        self.loss_weights.validate()
        self.scheduler.validate()
        return self


@dataclass
class RunLog:
    """Per-step loss breakdowns plus per-epoch schedule and accuracy records."""

    meta: dict = field(default_factory=dict)
    step_records: list = field(default_factory=list)
    epoch_records: list = field(default_factory=list)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write(json.dumps({"kind": "meta", "schema_version": LOG_SCHEMA_VERSION,
                                 **self.meta}) + "\n")
            by_epoch: dict = {}
            for rec in self.step_records:
                by_epoch.setdefault(rec["epoch"], []).append(rec)
            for erec in self.epoch_records:
                for rec in by_epoch.pop(erec["epoch"], []):
                    fh.write(json.dumps({"kind": "step", **rec}) + "\n")
                fh.write(json.dumps({"kind": "epoch", **erec}) + "\n")
            for recs in by_epoch.values():
                for rec in recs:
                    fh.write(json.dumps({"kind": "step", **rec}) + "\n")

    @staticmethod
    def load(path) -> "RunLog":
        log = RunLog()
        with Path(path).open() as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("kind")
                if kind == "meta":
                    rec.pop("schema_version", None)
                    log.meta = rec
                elif kind == "step":
                    log.step_records.append(rec)
                elif kind == "epoch":
                    log.epoch_records.append(rec)
        log.step_records.sort(key=lambda r: r["step"])
        log.epoch_records.sort(key=lambda r: r["epoch"])
        return log


@dataclass
class PretrainResult:
    model: Backbone
    run_log: RunLog
    final_val_top1: float
    best_val_top1: float


@dataclass
class DistillResult:
    student: Backbone
    projection_head: ProjectionHead | None
    run_log: RunLog
    final_val_top1: float
    best_val_top1: float
    best_epoch: int
    best_state: dict = field(repr=False, default=None)


def configure_determinism(deterministic: bool, seed: int) -> None:
    """Seed global RNG; in deterministic mode pin to one thread and stable ops."""
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Piecewise-constant rate: decayed once at each passed milestone."""
    return config.lr * config.lr_decay ** sum(1 for m in config.lr_milestones if epoch >= m)


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def evaluate(model: Backbone, split: SplitData, mean, std, batch_size: int = 256):
    """Top-1 and top-5 accuracy (percent) with normalization only."""
    model.eval()
    hits1 = hits5 = total = 0
    with torch.no_grad():
        for start in range(0, len(split), batch_size):
            pixels = split.images[start:start + batch_size]
            labels = split.labels[start:start + batch_size]
            batch = preprocess(pixels, labels, 0.0, mean, std, rng_seed=0)
            logits = model(batch.pixels)
            k = min(5, logits.shape[1])
            topk = logits.topk(k, dim=1).indices
            hits1 += (topk[:, 0] == labels).sum().item()
            hits5 += (topk == labels.view(-1, 1)).any(dim=1).sum().item()
            total += labels.numel()
    return 100.0 * hits1 / total, 100.0 * hits5 / total


def pretrain_teacher(
    backbone_name: str,
    config: TrainConfig,
    data: DatasetBundle,
    checkpoint_path=None,
) -> PretrainResult:
    """Standard cross-entropy training of a (future) teacher."""
    config.validate()
    configure_determinism(config.deterministic, derive_seed(config.seed, "global"))
    model = build_backbone(
        backbone_name, data.num_classes, seed=derive_seed(config.seed, "teacher")
    )
    opt = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    log = RunLog(meta={
        "command": "pretrain", "backbone": backbone_name, "seed": config.seed,
        "epochs": config.epochs, "policy": "none",
    })
    best_val, step = -1.0, 0
    val_top1 = 0.0
    for epoch in range(config.epochs):
        tic = time.monotonic()
        lr = lr_at_epoch(config, epoch)
        _set_lr(opt, lr)
        model.train()
        for bi, idx in enumerate(batch_indices(len(data.train), config.batch_size,
                                               config.seed, epoch)):
            if idx.numel() == 1:
                continue  # BatchNorm cannot normalize a single-row batch
            batch = preprocess(
                data.train.images[idx], data.train.labels[idx], config.flip_prob,
                data.mean, data.std, derive_seed(config.seed, "aug", epoch, bi),
            )
            ce = F.cross_entropy(model(batch.pixels), batch.labels)
            opt.zero_grad()
            ce.backward()
            opt.step()
            ce_val = float(ce.detach())
            log.step_records.append({
                "step": step, "epoch": epoch, "lr": lr, "ce": ce_val,
                "kd": 0.0, "fa": 0.0, "ca": 0.0, "cc": 0.0, "cc_t": 0.0, "cc_s": 0.0,
                "total": ce_val, "mean_v": 1.0,
            })
            step += 1
        train_top1, _ = evaluate(model, data.train, data.mean, data.std)
        val_top1, _ = evaluate(model, data.val, data.mean, data.std)
        best_val = max(best_val, val_top1)
        log.epoch_records.append({
            "epoch": epoch, "lam": 1.0, "mean_v": 1.0, "frac_easy": 1.0,
            "train_top1": train_top1, "val_top1": val_top1,
            "wall_time": time.monotonic() - tic,
        })
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, step=step)
    return PretrainResult(model=model, run_log=log,
                          final_val_top1=val_top1, best_val_top1=best_val)


def distill(
    teacher,
    student_spec: str,
    config: TrainConfig,
    data: DatasetBundle,
) -> DistillResult:
    """Distill a student from a frozen teacher with the full weighted objective."""
    config.validate()
    teacher_model = teacher if isinstance(teacher, Backbone) else load_checkpoint(teacher)[0]
    if teacher_model.num_classes != data.num_classes:
        raise ContractViolation(
            f"teacher has {teacher_model.num_classes} classes, dataset has {data.num_classes}"
        )
    configure_determinism(config.deterministic, derive_seed(config.seed, "global"))
    teacher_model.eval()
    for p in teacher_model.parameters():
        p.requires_grad_(False)

    student = build_backbone(
        student_spec, data.num_classes, seed=derive_seed(config.seed, "student")
    )
    w = config.loss_weights
    heterogeneous = student.feature_dim != teacher_model.feature_dim
    beta_ca = w.beta_ca
    if beta_ca > 0 and heterogeneous:
        logger.warning(
            "teacher/student classifier shapes differ; forcing center-alignment weight to 0"
        )
        beta_ca = 0.0
    weights = LossWeights(alpha=w.alpha, beta_cc=w.beta_cc, beta_fa=w.beta_fa,
                          beta_ca=beta_ca, tau_kd=w.tau_kd, tau_cc=w.tau_cc)
    needs_fa = weights.beta_fa > 0
    needs_cc = weights.beta_cc > 0
    needs_rotations = needs_fa or needs_cc
    needs_head = needs_fa or (needs_cc and heterogeneous)
    head = None
    if needs_head:
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(config.seed, "head"))
            head = ProjectionHead(student.feature_dim, teacher_model.feature_dim)

    params = list(student.parameters()) + (list(head.parameters()) if head else [])
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    applies_to = frozenset(config.preview_applies_to)
    log = RunLog(meta={
        "command": "distill", "student": student_spec,
        "teacher": getattr(teacher_model, "backbone_name", "?"),
        "seed": config.seed, "epochs": config.epochs,
        "policy": config.scheduler.policy, "epsilon": config.scheduler.epsilon,
        "preview_applies_to": sorted(applies_to),
        "loss_weights": asdict(weights),
    })
    best_val, best_epoch, best_state = -1.0, -1, None
    val_top1, step = 0.0, 0
    for epoch in range(config.epochs):
        tic = time.monotonic()
        lr = lr_at_epoch(config, epoch)
        _set_lr(opt, lr)
        student.train()
        if head is not None:
            head.train()
        lam = threshold(epoch, config.scheduler.epsilon)
        sum_v = sum_easy = num_seen = 0.0
        for bi, idx in enumerate(batch_indices(len(data.train), config.batch_size,
                                               config.seed, epoch)):
            if idx.numel() == 1:
                continue  # BatchNorm cannot normalize a single-row batch
            base = preprocess(
                data.train.images[idx], data.train.labels[idx], config.flip_prob,
                data.mean, data.std, derive_seed(config.seed, "aug", epoch, bi),
            )
            batch = expand_rotations(base) if needs_rotations else base
            record = _distill_step(
                teacher_model, student, head, batch, base.labels, weights,
                config, applies_to, epoch, heterogeneous,
                needs_fa, needs_cc, opt,
            )
            record.update({"step": step, "epoch": epoch, "lr": lr})
            log.step_records.append(record)
            n = base.labels.numel()
            sum_v += record["mean_v"] * n
            sum_easy += record["frac_easy"] * n
            num_seen += n
            step += 1
        if epoch % config.eval_every == 0 or epoch == config.epochs - 1:
            train_top1, _ = evaluate(student, data.train, data.mean, data.std)
            val_top1, _ = evaluate(student, data.val, data.mean, data.std)
        if val_top1 > best_val:
            best_val, best_epoch = val_top1, epoch
            best_state = {
                "student": copy.deepcopy(student.state_dict()),
                "head": copy.deepcopy(head.state_dict()) if head else None,
            }
        log.epoch_records.append({
            "epoch": epoch, "lam": lam,
            "mean_v": sum_v / max(num_seen, 1), "frac_easy": sum_easy / max(num_seen, 1),
            "train_top1": train_top1, "val_top1": val_top1,
            "wall_time": time.monotonic() - tic,
        })
    return DistillResult(
        student=student, projection_head=head, run_log=log,
        final_val_top1=val_top1, best_val_top1=best_val,
        best_epoch=best_epoch, best_state=best_state,
    )


def _distill_step(
    teacher_model, student, head, batch, labels, weights, config,
    applies_to, epoch, heterogeneous, needs_fa, needs_cc, opt,
) -> dict:
    """One optimizer step; returns the loss-breakdown record."""
    partial: dict = {}
    try:
        with torch.no_grad():
            t_out = forward_with_features(teacher_model, batch)
        s_out = forward_with_features(student, batch)
        j0 = batch.rotation_index == 0
        s_logits0, t_logits0 = s_out.logits[j0], t_out.logits[j0]

        ce_vec = cross_entropy_per_sample(s_logits0, labels)
        partial["ce"] = float(ce_vec.detach().mean())
        kd_vec = kd_loss_per_sample(s_logits0, t_logits0, weights.tau_kd)
        partial["kd"] = float(kd_vec.detach().mean())

        s_proj = None
        if needs_fa or (needs_cc and heterogeneous):
            s_proj = project(head, s_out.features)
        if needs_fa:
            fa_vec = feature_alignment_per_sample(s_proj, t_out.features)
        else:
            fa_vec = torch.zeros_like(ce_vec)
        partial["fa"] = float(fa_vec.detach().mean())

        if needs_cc:
            contrast_feats = s_proj if heterogeneous else s_out.features
            cc_t_vec = center_contrast_per_sample(
                contrast_feats, t_out.centers, labels, weights.tau_cc,
                normalize=config.normalize_contrast, detach_centers=True,
            )
            cc_s_vec = center_contrast_per_sample(
                s_out.features, s_out.centers, labels, weights.tau_cc,
                normalize=config.normalize_contrast, detach_centers=False,
            )
            cc_vec = cc_t_vec + cc_s_vec
        else:
            cc_t_vec = cc_s_vec = cc_vec = torch.zeros_like(ce_vec)
        partial["cc"] = float(cc_vec.detach().mean())

        if weights.beta_ca > 0:
            ca = center_alignment_loss(category_centers(student), t_out.centers)
        else:
            ca = torch.zeros(())
        partial["ca"] = float(ca.detach())

        p_true = None
        if config.scheduler.policy == "focal":
            p_true = F.softmax(s_logits0.detach(), dim=1).gather(
                1, labels.view(-1, 1)
            ).squeeze(1)
        sw = assign_weights(config.scheduler, epoch, ce_vec, true_class_probs=p_true)

        terms = PerSampleTerms(kd=kd_vec, cc=cc_vec, ce=ce_vec, fa=fa_vec, ca=ca)
        total, breakdown = total_pckd_loss(terms, sw, weights, applies_to)
        if not torch.isfinite(total):
            raise NumericError("total loss is not finite")

        opt.zero_grad()
        total.backward()
        opt.step()
    except NumericError as err:
        raise NumericError(
            f"non-finite loss at epoch {epoch}: {err}; "
            f"term breakdown so far: {json.dumps(partial)}"
        ) from err

    n = labels.numel()
    breakdown.update({
        "cc_t": float(cc_t_vec.detach().mean()), "cc_s": float(cc_s_vec.detach().mean()),
        "fa_raw": float(fa_vec.detach().sum()), "cc_raw": float(cc_vec.detach().sum()),
        "mean_v": sw.mean_weight, "frac_easy": sw.frac_easy, "lam": sw.lam,
        "batch_size": n,
    })
    return breakdown
