"""The four distillation loss terms and their weighted composition.

All losses are pure functions of tensors. Teacher-side inputs are treated as
constants (detached internally), so no gradient can ever reach teacher
parameters. Row-indexed terms (feature alignment, center contrast) reduce by
summing all rows and dividing by the number of original samples B, so each
sample contributes the sum over its rotation copies and the trade-off weights
stay meaningful across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ContractViolation, NumericError

PREVIEW_DEFAULT_TARGETS = frozenset({"kd", "cc"})
LOSS_TERM_NAMES = ("kd", "cc", "ce", "fa", "ca")


@dataclass
class FeatureBatch:
    """Per-row feature vectors with rotation/sample provenance.

    ``values`` is ``[R, K]``. ``source_sample`` maps each row to its original
    sample index in 0..B-1; ``rotation_index`` is the view index j in 0..3.
    Rows of the same source sample share one label.
    """

    values: torch.Tensor
    rotation_index: torch.Tensor
    source_sample: torch.Tensor

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @property
    def num_samples(self) -> int:
        return int(self.source_sample.max().item()) + 1 if self.num_rows else 0

    @property
    def feature_dim(self) -> int:
        return self.values.shape[1]

    @staticmethod
    def plain(values: torch.Tensor) -> "FeatureBatch":
        n = values.shape[0]
        return FeatureBatch(
            values=values,
            rotation_index=torch.zeros(n, dtype=torch.long),
            source_sample=torch.arange(n, dtype=torch.long),
        )

    def replace_values(self, values: torch.Tensor) -> "FeatureBatch":
        return FeatureBatch(values, self.rotation_index, self.source_sample)


@dataclass
class LossWeights:
    """Trade-off weights and temperatures of the full objective.

    Defaults follow the reference recipe: alpha = 1, beta_ca = 1,
    beta_fa = 20, beta_cc = 0.05 (0.02 for very small students). beta_ca must
    be set to 0 when teacher and student classifier shapes differ.
    """

    alpha: float = 1.0
    beta_cc: float = 0.05
    beta_fa: float = 20.0
    beta_ca: float = 1.0
    tau_kd: float = 4.0
    tau_cc: float = 0.1

    def validate(self) -> "LossWeights":
        for name in ("alpha", "beta_cc", "beta_fa", "beta_ca"):
            value = getattr(self, name)
            if not (value >= 0 and value == value and value != float("inf")):
                raise ContractViolation(f"{name} must be finite and >= 0, got {value}")
        for name in ("tau_kd", "tau_cc"):
            value = getattr(self, name)
            if not (value > 0 and value != float("inf")):
                raise ContractViolation(f"{name} must be finite and > 0, got {value}")
        return self


def _require_finite(tensor: torch.Tensor, name: str) -> None:
    if not torch.isfinite(tensor).all():
        raise NumericError(f"{name} contains NaN or Inf")


def _normalize_rows(rows: torch.Tensor, name: str) -> torch.Tensor:
    norms = rows.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NumericError(f"{name} has a zero-norm row; normalization is undefined")
    return rows / norms


def kd_loss_per_sample(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    tau_kd: float,
) -> torch.Tensor:
    """Per-sample KL divergence between softened teacher and student outputs.

    Returns ``KL(softmax(z_t / tau) || softmax(z_s / tau))`` for each sample.
    The teacher side is a constant; gradients flow only to ``student_logits``.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ContractViolation(
            f"logit shapes differ: {tuple(student_logits.shape)} vs "
            f"{tuple(teacher_logits.shape)}"
        )
    if tau_kd <= 0:
        raise ContractViolation(f"tau_kd must be > 0, got {tau_kd}")
    _require_finite(student_logits, "student logits")
    _require_finite(teacher_logits, "teacher logits")
    teacher_logits = teacher_logits.detach()
    log_p_t = F.log_softmax(teacher_logits / tau_kd, dim=-1)
    log_p_s = F.log_softmax(student_logits / tau_kd, dim=-1)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=-1)


def kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    tau_kd: float,
) -> torch.Tensor:
    """Mean over samples of the softened KL divergence."""
    return kd_loss_per_sample(student_logits, teacher_logits, tau_kd).mean()


def feature_alignment_rows(
    student_features_projected: torch.Tensor,
    teacher_features: torch.Tensor,
) -> torch.Tensor:
    """Per-row squared distance between L2-normalized feature vectors.

    Both inputs are ``[R, K]`` (the projection head has already mapped the
    student feature into the teacher's dimension). Each row contributes
    ``||s_hat - t_hat||^2`` in [0, 4]; the teacher side is detached.
    """
    if student_features_projected.shape != teacher_features.shape:
        raise ContractViolation(
            f"feature shapes differ: {tuple(student_features_projected.shape)} vs "
            f"{tuple(teacher_features.shape)}"
        )
    _require_finite(student_features_projected, "student features")
    _require_finite(teacher_features, "teacher features")
    s_hat = _normalize_rows(student_features_projected, "student feature batch")
    t_hat = _normalize_rows(teacher_features.detach(), "teacher feature batch")
    return (s_hat - t_hat).pow(2).sum(dim=-1)


def feature_alignment_per_sample(
    student_features_projected: FeatureBatch,
    teacher_features: FeatureBatch,
) -> torch.Tensor:
    """Row distances summed over each sample's rotation copies, shape [B]."""
    rows = feature_alignment_rows(student_features_projected.values, teacher_features.values)
    return _reduce_rows_per_sample(rows, student_features_projected.source_sample)


def feature_alignment_loss(
    student_features_projected: FeatureBatch,
    teacher_features: FeatureBatch,
) -> torch.Tensor:
    """Sum of row distances divided by the number of original samples."""
    return feature_alignment_per_sample(student_features_projected, teacher_features).mean()


def center_alignment_loss(
    student_centers: torch.Tensor,
    teacher_centers: torch.Tensor,
) -> torch.Tensor:
    """Squared Frobenius distance between the two classifier weight matrices.

    Gradients flow to the student centers only. Callers must use weight 0
    instead of calling this when the center shapes differ.
    """
    if student_centers.shape != teacher_centers.shape:
        raise ContractViolation(
            f"center shapes differ: {tuple(student_centers.shape)} vs "
            f"{tuple(teacher_centers.shape)}; heterogeneous pairs must set beta_ca = 0"
        )
    _require_finite(student_centers, "student centers")
    _require_finite(teacher_centers, "teacher centers")
    return (teacher_centers.detach() - student_centers).pow(2).sum()


def center_contrast_rows(
    features: torch.Tensor,
    centers: torch.Tensor,
    row_labels: torch.Tensor,
    tau_cc: float,
    normalize: bool = True,
    detach_centers: bool = False,
) -> torch.Tensor:
    """Per-row contrast of a feature against the category centers.

    Each row contributes ``-log(exp(s_y / tau) / sum_{c != y} exp(s_c / tau))``
    where ``s_c`` is the cosine similarity (``normalize=True``, default) or the
    raw dot product between the feature and center column c. The ground-truth
    class is excluded from the denominator, so the value may be negative.
    """
    if tau_cc <= 0:
        raise ContractViolation(f"tau_cc must be > 0, got {tau_cc}")
    if features.shape[1] != centers.shape[0]:
        raise ContractViolation(
            f"feature dim {features.shape[1]} does not match center rows {centers.shape[0]}"
        )
    num_classes = centers.shape[1]
    if num_classes < 2:
        raise ContractViolation("center contrast needs >= 2 classes (empty denominator)")
    if row_labels.min() < 0 or row_labels.max() >= num_classes:
        raise ContractViolation("row label out of range")
    _require_finite(features, "features")
    _require_finite(centers, "centers")
    if detach_centers:
        centers = centers.detach()
    if normalize:
        feats = _normalize_rows(features, "feature batch")
        cents = _normalize_rows(centers.t(), "center matrix").t()
    else:
        feats, cents = features, centers
    sims = feats @ cents / tau_cc
    positive = sims.gather(1, row_labels.view(-1, 1)).squeeze(1)
    masked = sims.masked_fill(
        F.one_hot(row_labels, num_classes).to(torch.bool), float("-inf")
    )
    return masked.logsumexp(dim=1) - positive


def center_contrast_per_sample(
    student_features: FeatureBatch,
    centers: torch.Tensor,
    labels: torch.Tensor,
    tau_cc: float,
    normalize: bool = True,
    detach_centers: bool = False,
) -> torch.Tensor:
    """Row contrast terms summed over each sample's rotation copies, shape [B]."""
    row_labels = labels[student_features.source_sample]
    rows = center_contrast_rows(
        student_features.values, centers, row_labels, tau_cc,
        normalize=normalize, detach_centers=detach_centers,
    )
    return _reduce_rows_per_sample(rows, student_features.source_sample)


def center_contrast_loss(
    student_features: FeatureBatch,
    centers: torch.Tensor,
    labels: torch.Tensor,
    tau_cc: float,
    normalize: bool = True,
    detach_centers: bool = False,
) -> torch.Tensor:
    """Sum of row contrast terms divided by the number of original samples.

    The full objective evaluates this twice, once against the (frozen) teacher
    centers and once against the student's own centers, and sums the results.
    """
    return center_contrast_per_sample(
        student_features, centers, labels, tau_cc,
        normalize=normalize, detach_centers=detach_centers,
    ).mean()


def cross_entropy_per_sample(
    student_logits: torch.Tensor,
    labels: torch.Tensor,
) -> torch.Tensor:
    """Per-sample softmax cross-entropy over the original (j = 0) samples."""
    if student_logits.shape[0] != labels.shape[0]:
        raise ContractViolation(
            f"got {student_logits.shape[0]} logit rows for {labels.shape[0]} labels"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= student_logits.shape[1]):
        raise ContractViolation("label out of range")
    _require_finite(student_logits, "student logits")
    return F.cross_entropy(student_logits, labels, reduction="none")


def cross_entropy_loss(student_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    return cross_entropy_per_sample(student_logits, labels).mean()


@dataclass
class PerSampleTerms:
    """Loss terms entering the total objective.

    ``kd`` and ``cc`` must be per-sample vectors [B] so the preview weight can
    scale them; ``cc`` is the rotation-summed teacher + student contrast.
    ``ce`` and ``fa`` may be per-sample vectors or already-reduced scalars
    (vectors are required if the preview weight is applied to them). ``ca``
    is always a scalar.
    """

    kd: torch.Tensor
    cc: torch.Tensor
    ce: torch.Tensor
    fa: torch.Tensor
    ca: torch.Tensor


def _as_weight_vector(sample_weights, batch_size: int) -> torch.Tensor:
    v = getattr(sample_weights, "v", sample_weights)
    v = torch.as_tensor(v)
    if v.ndim != 1 or v.shape[0] != batch_size:
        raise ContractViolation(
            f"sample weight vector has length {tuple(v.shape)}, expected [{batch_size}]"
        )
    _require_finite(v, "sample weights")
    return v


def _weighted_mean(term: torch.Tensor, v: torch.Tensor, weighted: bool, name: str):
    """Reduce a term to (possibly preview-weighted) mean plus its plain mean."""
    if term.ndim == 0:
        if weighted:
            raise ContractViolation(
                f"preview weight applies to '{name}' but only a reduced scalar was given"
            )
        return term, term
    if term.shape[0] != v.shape[0]:
        raise ContractViolation(f"per-sample '{name}' has length {term.shape[0]}")
    plain = term.mean()
    return ((v.to(term.dtype) * term).mean() if weighted else plain), plain


def total_pckd_loss(
    per_sample_terms: PerSampleTerms,
    sample_weights,
    loss_weights: LossWeights,
    preview_applies_to: frozenset = PREVIEW_DEFAULT_TARGETS,
):
    """Compose the total objective from its terms.

    Computes ``mean_i(alpha * v_i * KD_i + beta_cc * v_i * CC_i + CE_i +
    beta_fa * FA_i) + beta_ca * CA`` where the preview weight ``v_i``
    multiplies exactly the terms named in ``preview_applies_to`` (default KD
    and CC, the classification losses). With all v_i = 1 the result is the
    unweighted composition. Returns ``(total, breakdown)`` where breakdown
    maps each term name to its unweighted reduced value plus the weighted
    contributions, for logging.
    """
    unknown = set(preview_applies_to) - set(LOSS_TERM_NAMES)
    if unknown:
        raise ContractViolation(f"unknown preview targets: {sorted(unknown)}")
    w = loss_weights.validate()
    terms = per_sample_terms
    if terms.kd.ndim != 1 or terms.cc.ndim != 1:
        raise ContractViolation("kd and cc terms must be unreduced per-sample vectors")
    batch_size = terms.kd.shape[0]
    v = _as_weight_vector(sample_weights, batch_size)

    kd_term, kd_plain = _weighted_mean(terms.kd, v, "kd" in preview_applies_to, "kd")
    cc_term, cc_plain = _weighted_mean(terms.cc, v, "cc" in preview_applies_to, "cc")
    ce_term, ce_plain = _weighted_mean(terms.ce, v, "ce" in preview_applies_to, "ce")
    fa_term, fa_plain = _weighted_mean(terms.fa, v, "fa" in preview_applies_to, "fa")
    ca = torch.as_tensor(terms.ca)
    _require_finite(ca, "ca term")
    # CA has no per-sample structure; weighting it uses the mean preview weight.
    ca_term = ca * v.mean().to(ca.dtype) if "ca" in preview_applies_to else ca

    # The scalar composition happens in float64 so the logged breakdown
    # recomposes the logged total exactly; gradients are unaffected.
    total = (
        w.alpha * kd_term.double()
        + w.beta_cc * cc_term.double()
        + ce_term.double()
        + w.beta_fa * fa_term.double()
        + w.beta_ca * ca_term.double()
    )
    def as_float(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    breakdown = {
        "kd": as_float(kd_plain),
        "cc": as_float(cc_plain),
        "ce": as_float(ce_plain),
        "fa": as_float(fa_plain),
        "ca": as_float(ca),
        "kd_weighted": as_float(w.alpha * kd_term.double()),
        "cc_weighted": as_float(w.beta_cc * cc_term.double()),
        "ce_weighted": as_float(ce_term.double()),
        "fa_weighted": as_float(w.beta_fa * fa_term.double()),
        "ca_weighted": as_float(w.beta_ca * ca_term.double()),
        "total": as_float(total),
    }
    return total, breakdown


def _reduce_rows_per_sample(rows: torch.Tensor, source_sample: torch.Tensor) -> torch.Tensor:
    num_samples = int(source_sample.max().item()) + 1
    out = rows.new_zeros(num_samples)
    return out.index_add(0, source_sample, rows)
