"""Batch preprocessing and rotation-quadruple expansion.

Every training sample is expanded into four copies (the original plus its
90/180/270-degree rotations) so the contrastive losses see additional views
of the same image. Rotation happens after flipping and normalization, so all
four copies share one photometric realization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractViolation, NumericError

NUM_ROTATIONS = 4


@dataclass
class ImageBatch:
    """A batch of normalized images with per-row provenance.

    ``pixels`` is ``[R, C_ch, H, W]``. For an unexpanded batch R equals the
    number of samples B; after :func:`expand_rotations` R = 4B and
    ``rotation_index`` / ``source_sample`` record which view each row is.
    """

    pixels: torch.Tensor
    labels: torch.Tensor
    rotation_index: torch.Tensor
    source_sample: torch.Tensor

    @property
    def num_rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def num_samples(self) -> int:
        """Number of original (j = 0) samples in the batch."""
        return int(self.source_sample.max().item()) + 1 if self.num_rows else 0

    @staticmethod
    def plain(pixels: torch.Tensor, labels: torch.Tensor) -> "ImageBatch":
        """Wrap an unexpanded batch; every row is its own source with j = 0."""
        n = pixels.shape[0]
        return ImageBatch(
            pixels=pixels,
            labels=labels,
            rotation_index=torch.zeros(n, dtype=torch.long),
            source_sample=torch.arange(n, dtype=torch.long),
        )


def rotate90(image: torch.Tensor, k: int) -> torch.Tensor:
    """Rotate a square image by 90k degrees via index permutation (bit-exact).

    ``image`` is ``[..., H, W]`` with H == W; ``k`` must be in {0, 1, 2, 3}.
    """
    if k not in (0, 1, 2, 3):
        raise ContractViolation(f"rotation index must be in 0..3, got {k}")
    h, w = image.shape[-2], image.shape[-1]
    if h != w:
        raise ContractViolation(f"rotation requires a square image, got {h}x{w}")
    if k == 0:
        return image.clone()
    return torch.rot90(image, k, dims=(-2, -1)).contiguous()


def expand_rotations(batch: ImageBatch) -> ImageBatch:
    """Expand each sample into its four rotation copies.

    Output rows are ordered sample-major: for input rows 0..B-1 the output is
    (0,j=0..3), (1,j=0..3), ... Labels are replicated; j = 0 rows are the
    inputs bit-exact.
    """
    if (batch.rotation_index != 0).any():
        raise ContractViolation("batch is already rotation-expanded")
    b = batch.num_rows
    views = torch.stack([rotate90(batch.pixels, k) for k in range(NUM_ROTATIONS)], dim=1)
    pixels = views.reshape(b * NUM_ROTATIONS, *batch.pixels.shape[1:])
    return ImageBatch(
        pixels=pixels,
        labels=batch.labels.repeat_interleave(NUM_ROTATIONS),
        rotation_index=torch.arange(NUM_ROTATIONS).repeat(b),
        source_sample=torch.arange(b).repeat_interleave(NUM_ROTATIONS),
    )


def preprocess(
    pixels: torch.Tensor,
    labels: torch.Tensor,
    flip_prob: float,
    mean,
    std,
    rng_seed: int,
) -> ImageBatch:
    """Flip-and-normalize a raw pixel batch into an :class:`ImageBatch`.

    ``pixels`` is ``[B, C_ch, H, W]``, uint8 in 0..255 or float already in
    [0, 1]. Each image is horizontally flipped with probability ``flip_prob``
    (deterministic given ``rng_seed``) and then normalized channelwise with
    ``mean``/``std`` expressed on the 0..1 scale.
    """
    mean_t = torch.as_tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    std_t = torch.as_tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    if (std_t <= 0).any():
        raise ContractViolation("normalization std entries must be > 0")
    if pixels.dtype == torch.uint8:
        x = pixels.to(torch.float32) / 255.0
    else:
        x = pixels.to(torch.float32)
    if not torch.isfinite(x).all():
        raise NumericError("preprocess received non-finite pixels")

    if flip_prob > 0:
        gen = torch.Generator().manual_seed(rng_seed)
        flip = torch.rand(x.shape[0], generator=gen) < flip_prob
        if flip.any():
            x = x.clone()
            x[flip] = torch.flip(x[flip], dims=(-1,))
    x = (x - mean_t) / std_t
    return ImageBatch.plain(x, labels.to(torch.long))
