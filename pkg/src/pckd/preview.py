"""Per-sample difficulty scores and dynamic learning weights.

The preview policy keeps every sample but down-weights the hard ones
(difficulty above the epoch threshold) instead of discarding them; the
threshold grows geometrically with the epoch so hard samples are phased in.
Curriculum filtering and focal weighting are provided as ablation baselines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from .errors import ContractViolation, DegenerateBatchError, NumericError

logger = logging.getLogger(__name__)

POLICIES = ("preview", "curriculum", "focal", "none")
THRESHOLD_CAP = 1e18


@dataclass
class SchedulerConfig:
    """Weighting policy selection and its parameters."""

    epsilon: float = 0.05
    policy: str = "preview"
    focal_gamma: float = 2.0

    def validate(self) -> "SchedulerConfig":
        if self.policy not in POLICIES:
            raise ContractViolation(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if not self.epsilon > 0:
            raise ContractViolation(f"epsilon must be > 0, got {self.epsilon}")
        if self.focal_gamma < 0:
            raise ContractViolation(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        return self


@dataclass
class SampleWeights:
    """Difficulty scores and learning weights for one batch."""

    gamma: torch.Tensor
    v: torch.Tensor
    lam: float
    epoch: int

    @property
    def mean_weight(self) -> float:
        return float(self.v.mean())

    @property
    def frac_easy(self) -> float:
        return float((self.gamma <= self.lam).to(torch.float64).mean())


def difficulty_scores(per_sample_ce: torch.Tensor) -> torch.Tensor:
    """Normalize per-sample cross-entropy by the batch mean.

    Returns ``ce_i / mean(ce)`` as float64, detached from autodiff; the batch
    mean of the result is 1 by construction. Raises
    :class:`DegenerateBatchError` when every CE is zero (all samples
    mastered); callers fall back to all-ones with a warning.
    """
    if per_sample_ce.ndim != 1 or per_sample_ce.numel() == 0:
        raise ContractViolation("per-sample CE must be a non-empty vector")
    ce = per_sample_ce.detach().to(torch.float64)
    if not torch.isfinite(ce).all():
        raise NumericError("per-sample CE contains NaN or Inf")
    if (ce < 0).any():
        raise ContractViolation("per-sample CE must be >= 0")
    mean = ce.mean()
    if mean == 0:
        raise DegenerateBatchError("all-zero CE batch: difficulty is undefined")
    return ce / mean


def threshold(epoch: int, epsilon: float) -> float:
    """Easy/hard threshold ``(1 + epsilon) ** epoch``; 1.0 at epoch 0.

    Saturates at a large finite cap instead of overflowing.
    """
    if epoch < 0:
        raise ContractViolation(f"epoch must be >= 0, got {epoch}")
    if not epsilon > 0:
        raise ContractViolation(f"epsilon must be > 0, got {epsilon}")
    try:
        lam = (1.0 + epsilon) ** epoch
    except OverflowError:
        lam = math.inf
    if lam > THRESHOLD_CAP:
        logger.warning(
            "threshold (1+%g)^%d overflows; saturating at %g", epsilon, epoch, THRESHOLD_CAP
        )
        return THRESHOLD_CAP
    return lam


def preview_weights(gamma: torch.Tensor, lam: float) -> torch.Tensor:
    """Weight 1 for easy samples, ``exp(-gamma^2)`` for hard ones.

    A sample is easy when its difficulty is at most the threshold. Since the
    threshold never drops below 1, every hard-sample weight is below
    ``exp(-1) = 0.367``; all outputs lie in (0, 1].
    """
    _check_gamma_lambda(gamma, lam)
    g = gamma.to(torch.float64)
    return torch.where(g <= lam, torch.ones_like(g), torch.exp(-g * g))


def curriculum_weights(gamma: torch.Tensor, lam: float) -> torch.Tensor:
    """Classic self-paced filtering: hard samples get weight 0."""
    _check_gamma_lambda(gamma, lam)
    g = gamma.to(torch.float64)
    return (g <= lam).to(torch.float64)


def focal_weights(student_probs_true_class: torch.Tensor, focal_gamma: float) -> torch.Tensor:
    """Hard-example emphasis ``(1 - p)^gamma`` (the opposite trend to preview)."""
    p = student_probs_true_class.detach().to(torch.float64)
    if not torch.isfinite(p).all():
        raise NumericError("true-class probabilities contain NaN or Inf")
    if (p < 0).any() or (p > 1).any():
        raise ContractViolation("true-class probabilities must lie in [0, 1]")
    if focal_gamma < 0:
        raise ContractViolation(f"focal_gamma must be >= 0, got {focal_gamma}")
    return (1.0 - p) ** focal_gamma


def all_easy_epoch(max_gamma: float, epsilon: float) -> int:
    """First epoch at which a sample of the given difficulty counts as easy."""
    if max_gamma <= 1.0:
        return 0
    return math.ceil(math.log(max_gamma) / math.log1p(epsilon))


def assign_weights(
    scheduler: SchedulerConfig,
    epoch: int,
    per_sample_ce: torch.Tensor,
    true_class_probs: torch.Tensor | None = None,
) -> SampleWeights:
    """Compute the batch's difficulty scores and policy weights for an epoch.

    Degenerate all-zero-CE batches fall back to difficulty 1 for every sample
    (everything mastered, full weight) with a logged warning.
    """
    scheduler.validate()
    lam = threshold(epoch, scheduler.epsilon)
    try:
        gamma = difficulty_scores(per_sample_ce)
    except DegenerateBatchError:
        logger.warning("all-zero CE batch at epoch %d; treating every sample as easy", epoch)
        gamma = torch.ones(per_sample_ce.shape[0], dtype=torch.float64)
    if scheduler.policy == "preview":
        v = preview_weights(gamma, lam)
    elif scheduler.policy == "curriculum":
        v = curriculum_weights(gamma, lam)
    elif scheduler.policy == "focal":
        if true_class_probs is None:
            raise ContractViolation("focal policy needs true-class probabilities")
        v = focal_weights(true_class_probs, scheduler.focal_gamma)
    else:
        v = torch.ones_like(gamma)
    return SampleWeights(gamma=gamma, v=v, lam=lam, epoch=epoch)


def mean_weight_trace(run_log) -> list[tuple[int, float]]:
    """Extract the (epoch, mean weight) series from a run log.

    Accepts anything with an ``epoch_records`` attribute or an iterable of
    mappings carrying ``epoch`` and ``mean_v`` keys. Empty logs yield an
    empty list.
    """
    records = getattr(run_log, "epoch_records", run_log)
    trace = []
    for rec in records:
        epoch = rec["epoch"] if isinstance(rec, dict) else rec.epoch
        mean_v = rec["mean_v"] if isinstance(rec, dict) else rec.mean_v
        trace.append((int(epoch), float(mean_v)))
    return trace


def _check_gamma_lambda(gamma: torch.Tensor, lam: float) -> None:
    if not torch.isfinite(gamma).all():
        raise NumericError("difficulty scores contain NaN or Inf")
    if lam < 1.0:
        raise ContractViolation(f"threshold must be >= 1, got {lam}")
