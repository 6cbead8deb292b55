"""Preview-weighted category-contrastive knowledge distillation toolkit."""

from .augment import ImageBatch, expand_rotations, preprocess, rotate90
from .data import (
    DatasetBundle,
    DatasetSpec,
    SyntheticSpec,
    generate_synthetic,
    load_bundle,
    load_dataset,
    transfer_protocol,
)
from .losses import (
    FeatureBatch,
    LossWeights,
    PerSampleTerms,
    center_alignment_loss,
    center_contrast_loss,
    cross_entropy_loss,
    feature_alignment_loss,
    kd_loss,
    total_pckd_loss,
)
from .models import (
    ProjectionHead,
    build_backbone,
    category_centers,
    forward_with_features,
    load_checkpoint,
    project,
    save_checkpoint,
)
from .preview import (
    SampleWeights,
    SchedulerConfig,
    curriculum_weights,
    difficulty_scores,
    focal_weights,
    mean_weight_trace,
    preview_weights,
    threshold,
)
from .train import DistillResult, RunLog, TrainConfig, distill, evaluate, pretrain_teacher

__version__ = "0.1.0"
