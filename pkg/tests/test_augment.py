import pytest
import torch

from pckd.augment import ImageBatch, expand_rotations, preprocess, rotate90
from pckd.errors import ContractViolation


class TestRotate90:
    def test_identity_at_k_zero(self):
        img = torch.randn(3, 8, 8)
        assert torch.equal(rotate90(img, 0), img)

    def test_four_turns_recover_original_bit_exact(self):
        gen = torch.Generator().manual_seed(30)
        for _ in range(50):
            img = torch.randint(0, 256, (3, 16, 16), generator=gen, dtype=torch.uint8)
            out = img
            for _ in range(4):
                out = rotate90(out, 1)
            assert torch.equal(out, img)

    def test_two_by_two_permutation(self):
        # [[a, b], [c, d]] rotated 180 degrees becomes [[d, c], [b, a]]
        img = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        want = torch.tensor([[[4.0, 3.0], [2.0, 1.0]]])
        assert torch.equal(rotate90(img, 2), want)

    def test_pixel_multiset_preserved(self):
        img = torch.randn(3, 6, 6)
        for k in range(4):
            rotated = rotate90(img, k)
            assert torch.equal(rotated.flatten().sort().values,
                               img.flatten().sort().values)

    def test_non_square_rejected(self):
        with pytest.raises(ContractViolation, match="square"):
            rotate90(torch.zeros(3, 4, 5), 1)

    def test_bad_k_rejected(self):
        with pytest.raises(ContractViolation):
            rotate90(torch.zeros(3, 4, 4), 4)


class TestExpandRotations:
    def _batch(self, b=2, size=4):
        return ImageBatch.plain(torch.randn(b, 3, size, size),
                                torch.arange(b) % 3)

    def test_row_count_and_rotation_pattern(self):
        out = expand_rotations(self._batch(b=2))
        assert out.num_rows == 8
        assert out.rotation_index.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
        assert out.source_sample.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]

    def test_j0_rows_equal_inputs_bit_exact(self):
        batch = self._batch(b=5)
        out = expand_rotations(batch)
        j0 = out.rotation_index == 0
        assert torch.equal(out.pixels[j0], batch.pixels)
        assert torch.equal(out.labels[j0], batch.labels)

    def test_label_multiset_quadrupled(self):
        batch = self._batch(b=6)
        out = expand_rotations(batch)
        for c in batch.labels.unique():
            assert (out.labels == c).sum() == 4 * (batch.labels == c).sum()

    def test_double_expansion_rejected(self):
        with pytest.raises(ContractViolation):
            expand_rotations(expand_rotations(self._batch()))


class TestPreprocess:
    def test_no_flips_at_zero_probability(self):
        pixels = torch.randint(0, 256, (4, 3, 8, 8), dtype=torch.uint8)
        out = preprocess(pixels, torch.zeros(4, dtype=torch.long), 0.0,
                         mean=(0.0,) * 3, std=(1.0,) * 3, rng_seed=7)
        assert torch.equal(out.pixels, pixels.float() / 255.0)

    def test_identity_normalization(self):
        pixels = torch.rand(3, 3, 6, 6)
        out = preprocess(pixels, torch.zeros(3, dtype=torch.long), 0.0,
                         mean=(0.0,) * 3, std=(1.0,) * 3, rng_seed=0)
        assert torch.allclose(out.pixels, pixels)

    def test_channelwise_normalization(self):
        pixels = torch.full((1, 2, 2, 2), 0.5)
        out = preprocess(pixels, torch.zeros(1, dtype=torch.long), 0.0,
                         mean=(0.5, 0.25), std=(0.5, 0.25), rng_seed=0)
        assert torch.allclose(out.pixels[0, 0], torch.zeros(2, 2))
        assert torch.allclose(out.pixels[0, 1], torch.ones(2, 2))

    def test_deterministic_given_seed(self):
        pixels = torch.randint(0, 256, (16, 3, 8, 8), dtype=torch.uint8)
        labels = torch.zeros(16, dtype=torch.long)
        a = preprocess(pixels, labels, 0.5, (0.5,) * 3, (0.25,) * 3, rng_seed=123)
        b = preprocess(pixels, labels, 0.5, (0.5,) * 3, (0.25,) * 3, rng_seed=123)
        assert torch.equal(a.pixels, b.pixels)
        c = preprocess(pixels, labels, 0.5, (0.5,) * 3, (0.25,) * 3, rng_seed=124)
        assert not torch.equal(a.pixels, c.pixels)

    def test_zero_std_rejected(self):
        with pytest.raises(ContractViolation):
            preprocess(torch.rand(1, 3, 4, 4), torch.zeros(1, dtype=torch.long),
                       0.0, (0.5,) * 3, (0.5, 0.0, 0.5), rng_seed=0)

    def test_rotation_after_normalization_shares_photometrics(self):
        # all four copies of a sample must be rotations of the same realization
        pixels = torch.randint(0, 256, (8, 3, 8, 8), dtype=torch.uint8)
        labels = torch.zeros(8, dtype=torch.long)
        base = preprocess(pixels, labels, 0.5, (0.5,) * 3, (0.25,) * 3, rng_seed=5)
        out = expand_rotations(base)
        for i in range(8):
            rows = out.pixels[out.source_sample == i]
            for j in range(4):
                assert torch.equal(rotate90(base.pixels[i], j), rows[j])
