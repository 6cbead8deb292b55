import math

import pytest
import torch

from pckd.errors import ContractViolation, DegenerateBatchError
from pckd.preview import (
    SchedulerConfig,
    all_easy_epoch,
    assign_weights,
    curriculum_weights,
    difficulty_scores,
    focal_weights,
    mean_weight_trace,
    preview_weights,
    threshold,
)

# Hand-evaluated: 1.05**14 and exp(-1.5**2)
THRESHOLD_14 = 1.9799315994393987
PREVIEW_HARD_15 = 0.10539922456186433
E_INV = 0.36787944117144233


class TestDifficultyScores:
    def test_uniform_batch(self):
        gamma = difficulty_scores(torch.tensor([1.0, 1.0, 1.0]))
        assert torch.allclose(gamma, torch.ones(3, dtype=torch.float64))

    def test_hand_arithmetic(self):
        gamma = difficulty_scores(torch.tensor([2.0, 1.0, 1.0]))
        assert torch.allclose(gamma, torch.tensor([1.5, 0.75, 0.75], dtype=torch.float64))

    def test_mean_is_one_by_construction(self):
        gen = torch.Generator().manual_seed(20)
        for _ in range(50):
            ce = torch.rand(int(torch.randint(1, 65, (1,), generator=gen)),
                            generator=gen) * 5 + 1e-3
            assert abs(float(difficulty_scores(ce).mean()) - 1.0) <= 1e-9

    def test_detached_from_autograd(self):
        ce = torch.rand(4, requires_grad=True) + 0.1
        assert not difficulty_scores(ce).requires_grad

    def test_all_zero_batch_raises(self):
        with pytest.raises(DegenerateBatchError):
            difficulty_scores(torch.zeros(3))

    def test_negative_ce_rejected(self):
        with pytest.raises(ContractViolation):
            difficulty_scores(torch.tensor([-0.1, 1.0]))


class TestThreshold:
    def test_epoch_zero_is_one(self):
        for eps in (0.001, 0.05, 2.0):
            assert threshold(0, eps) == 1.0

    def test_hand_power(self):
        assert threshold(14, 0.05) == pytest.approx(THRESHOLD_14, abs=1e-12)

    def test_strictly_increasing(self):
        values = [threshold(t, 0.05) for t in range(30)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_overflow_saturates(self, caplog):
        with caplog.at_level("WARNING"):
            lam = threshold(10**6, 0.5)
        assert lam == pytest.approx(1e18)
        assert math.isfinite(lam)
        assert "saturating" in caplog.text

    def test_bad_args(self):
        with pytest.raises(ContractViolation):
            threshold(-1, 0.05)
        with pytest.raises(ContractViolation):
            threshold(3, 0.0)


class TestPreviewWeights:
    def test_boundary_is_easy(self):
        v = preview_weights(torch.tensor([0.5, 1.0]), 1.0)
        assert torch.allclose(v, torch.ones(2, dtype=torch.float64))

    def test_hard_sample_value(self):
        v = preview_weights(torch.tensor([1.5]), 1.0)
        assert float(v) == pytest.approx(PREVIEW_HARD_15, abs=1e-12)

    def test_hard_samples_below_e_inverse(self):
        gen = torch.Generator().manual_seed(21)
        for _ in range(50):
            lam = 1.0 + float(torch.rand(1, generator=gen)) * 3
            gamma = lam + torch.rand(16, generator=gen).double() * 5 + 1e-9
            v = preview_weights(gamma, lam)
            assert (v < E_INV).all()
            assert (v > 0).all()

    def test_outputs_in_unit_interval(self):
        gamma = torch.rand(64).double() * 6
        v = preview_weights(gamma, 1.3)
        assert (v > 0).all() and (v <= 1).all()

    def test_discontinuity_at_threshold(self):
        lam = 1.5
        below = float(preview_weights(torch.tensor([lam - 1e-9], dtype=torch.float64), lam))
        above = float(preview_weights(torch.tensor([lam + 1e-9], dtype=torch.float64), lam))
        assert below == 1.0
        assert above == pytest.approx(math.exp(-lam * lam), rel=1e-6)

    def test_nondecreasing_in_lambda(self):
        gamma = torch.rand(32).double() * 4
        lams = [1.0, 1.2, 1.7, 2.5, 4.0, 8.0]
        prev = preview_weights(gamma, lams[0])
        for lam in lams[1:]:
            cur = preview_weights(gamma, lam)
            assert (cur >= prev - 1e-15).all()
            prev = cur

    def test_lambda_below_one_rejected(self):
        with pytest.raises(ContractViolation):
            preview_weights(torch.ones(2), 0.5)


class TestCurriculumWeights:
    def test_hard_samples_dropped(self):
        v = curriculum_weights(torch.tensor([0.5, 2.0]), 1.0)
        assert v.tolist() == [1.0, 0.0]

    def test_all_easy(self):
        assert (curriculum_weights(torch.rand(8), 1.0) == 1).all()

    def test_large_lambda_limit(self):
        assert (curriculum_weights(torch.rand(8) * 100, 1e12) == 1).all()

    def test_never_exceeds_preview(self):
        gen = torch.Generator().manual_seed(22)
        for _ in range(50):
            gamma = torch.rand(32, generator=gen).double() * 5
            lam = 1.0 + float(torch.rand(1, generator=gen)) * 4
            assert (curriculum_weights(gamma, lam) <= preview_weights(gamma, lam)).all()


class TestFocalWeights:
    def test_endpoints(self):
        assert float(focal_weights(torch.tensor([1.0]), 2.0)) == 0.0
        assert float(focal_weights(torch.tensor([0.0]), 2.0)) == 1.0

    def test_hand_power(self):
        assert float(focal_weights(torch.tensor([0.5]), 2.0)) == pytest.approx(0.25)

    def test_probability_range_checked(self):
        with pytest.raises(ContractViolation):
            focal_weights(torch.tensor([1.5]), 2.0)


class TestAllEasyEpoch:
    def test_reached_exactly(self):
        gen = torch.Generator().manual_seed(23)
        for _ in range(30):
            gamma = 1.0 + torch.rand(16, generator=gen).double() * 7
            eps = 0.05 + float(torch.rand(1, generator=gen)) * 0.4
            t_star = all_easy_epoch(float(gamma.max()), eps)
            assert (preview_weights(gamma, threshold(t_star, eps)) == 1).all()
            if t_star > 0:
                v_before = preview_weights(gamma, threshold(t_star - 1, eps))
                assert (v_before < 1).any()

    def test_already_easy(self):
        assert all_easy_epoch(0.9, 0.05) == 0


class TestAssignWeights:
    def test_policies(self):
        ce = torch.tensor([0.1, 0.5, 3.0])
        for policy in ("preview", "curriculum", "none"):
            sw = assign_weights(SchedulerConfig(policy=policy, epsilon=0.05), 0, ce)
            assert sw.lam == 1.0
            assert sw.v.shape == (3,)
        sw = assign_weights(SchedulerConfig(policy="none"), 0, ce)
        assert (sw.v == 1).all()

    def test_focal_needs_probs(self):
        cfg = SchedulerConfig(policy="focal")
        with pytest.raises(ContractViolation):
            assign_weights(cfg, 0, torch.tensor([1.0]))
        sw = assign_weights(cfg, 0, torch.tensor([1.0]),
                            true_class_probs=torch.tensor([0.5]))
        assert float(sw.v) == pytest.approx(0.25)

    def test_degenerate_batch_falls_back_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            sw = assign_weights(SchedulerConfig(), 0, torch.zeros(4))
        assert (sw.gamma == 1).all()
        assert (sw.v == 1).all()
        assert "all-zero" in caplog.text


class TestMeanWeightTrace:
    def test_empty_log(self):
        assert mean_weight_trace([]) == []

    def test_single_epoch_arithmetic(self):
        trace = mean_weight_trace([{"epoch": 0, "mean_v": 0.55}])
        assert trace == [(0, 0.55)]

    def test_reads_epoch_records_attribute(self):
        class Log:
            epoch_records = [
                {"epoch": 0, "mean_v": 0.4},
                {"epoch": 1, "mean_v": 1.0},
            ]

        assert mean_weight_trace(Log()) == [(0, 0.4), (1, 1.0)]
