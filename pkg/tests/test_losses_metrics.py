import numpy as np
import pytest

from semsplat.losses import (
    LossBreakdown,
    LossConfig,
    feature_dist_loss,
    feature_dist_loss_grad,
    render_loss,
    seg_ce_loss,
    seg_ce_loss_grad,
    total_loss,
)
from semsplat.metrics import psnr, seg_scores, ssim


class TestRenderLoss:
    def test_identical_inputs_zero(self):
        img = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
        mask = np.ones((8, 8))
        out = render_loss(img, img, mask, mask)
        assert out.mse == 0.0 and out.mask == 0.0 and out.total == 0.0
        assert out.perceptual is None

    def test_constant_offset_mse(self):
        a = np.zeros((8, 8, 3))
        b = np.full((8, 8, 3), 0.1)
        out = render_loss(a, b, np.zeros((8, 8)), np.zeros((8, 8)))
        assert out.mse == pytest.approx(0.01, abs=1e-12)

    def test_unit_stub_weighting(self):
        # unit mse/mask/perceptual with the default weights -> 1 + 1 + 0.1
        a = np.zeros((4, 4, 3))
        b = np.ones((4, 4, 3))
        cfg = LossConfig(perceptual_distance=lambda x, y: 1.0)
        out = render_loss(a, b, np.zeros((4, 4)), np.ones((4, 4)), cfg)
        assert out.mse == 1.0 and out.mask == 1.0 and out.perceptual == 1.0
        assert out.total == pytest.approx(2.1, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            render_loss(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)),
                        np.zeros((4, 4)), np.zeros((4, 4)))

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(lambda_mask=-0.1)


class TestFeatureDistLoss:
    def test_identical_is_zero(self):
        f = np.random.default_rng(1).standard_normal((6, 6, 4))
        assert feature_dist_loss(f, f) == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_is_two(self):
        f = np.random.default_rng(2).standard_normal((6, 6, 4))
        assert feature_dist_loss(f, -f) == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_is_one(self):
        f = np.zeros((4, 4, 2))
        g = np.zeros((4, 4, 2))
        f[:, :, 0] = 1.0
        g[:, :, 1] = 1.0
        assert feature_dist_loss(f, g) == pytest.approx(1.0, abs=1e-12)

    def test_zero_norm_contributes_neutral(self):
        f = np.zeros((1, 2, 2))
        g = np.zeros((1, 2, 2))
        f[0, 0] = (1.0, 0.0)
        g[0, 0] = (1.0, 0.0)  # pixel 0 aligned, pixel 1 zero-norm both sides
        assert feature_dist_loss(f, g) == pytest.approx(0.5, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        f = rng.standard_normal((5, 5, 3))
        g = rng.standard_normal((5, 5, 3))
        scales = rng.uniform(0.1, 10.0, (5, 5, 1))
        assert feature_dist_loss(f * scales, g) == pytest.approx(
            feature_dist_loss(f, g), abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((3, 3, 4))
        g = rng.standard_normal((3, 3, 4))
        loss, grad = feature_dist_loss_grad(f, g)
        eps = 1e-6
        for idx in ((0, 0, 0), (1, 2, 3), (2, 1, 1)):
            fp = f.copy()
            fp[idx] += eps
            fm = f.copy()
            fm[idx] -= eps
            fd = (feature_dist_loss(fp, g) - feature_dist_loss(fm, g)) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, abs=1e-8)

    def test_zero_norm_gradient_is_zero(self):
        f = np.zeros((2, 2, 3))
        g = np.ones((2, 2, 3))
        _, grad = feature_dist_loss_grad(f, g)
        assert np.count_nonzero(grad) == 0


class TestSegCE:
    def test_saturated_correct_is_tiny(self):
        logits = np.full((4, 4, 28), -20.0)
        labels = np.full((4, 4), 5, dtype=np.int64)
        logits[:, :, 5] = 20.0
        assert seg_ce_loss(logits, labels) < 1e-8

    def test_uniform_logits_ln28(self):
        logits = np.zeros((6, 6, 28))
        labels = np.random.default_rng(0).integers(0, 28, (6, 6))
        assert seg_ce_loss(logits, labels) == pytest.approx(np.log(28.0), abs=1e-6)

    def test_all_ignored_is_zero(self):
        logits = np.zeros((4, 4, 28))
        labels = np.full((4, 4), 255, dtype=np.int64)
        assert seg_ce_loss(logits, labels, ignore_id=255) == 0.0

    def test_out_of_range_label(self):
        logits = np.zeros((2, 2, 28))
        labels = np.full((2, 2), 28, dtype=np.int64)
        with pytest.raises(ValueError, match="range"):
            seg_ce_loss(logits, labels)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((3, 3, 28))
        labels = rng.integers(0, 28, (3, 3))
        loss, grad = seg_ce_loss_grad(logits, labels)
        eps = 1e-6
        for idx in ((0, 0, 3), (1, 1, 0), (2, 2, 27)):
            lp = logits.copy()
            lp[idx] += eps
            lm = logits.copy()
            lm[idx] -= eps
            fd = (seg_ce_loss(lp, labels) - seg_ce_loss(lm, labels)) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, abs=1e-8)


class TestTotalLoss:
    def test_empty_seg_block(self):
        parts = [LossBreakdown(mse=1.0, total=1.0), LossBreakdown(mse=3.0, total=3.0)]
        out = total_loss(parts, [0.2, 0.4], [], LossConfig())
        assert out.total == pytest.approx(2.0 + 0.5 * 0.3)
        assert out.ce == 0.0

    def test_all_zero(self):
        out = total_loss([LossBreakdown()], [], [])
        assert out.total == 0.0

    def test_mean_of_render_terms(self):
        parts = [LossBreakdown(total=1.0), LossBreakdown(total=3.0)]
        out = total_loss(parts, [], [], LossConfig(lambda_seg=0.0))
        assert out.total == pytest.approx(2.0)

    def test_homogeneous_in_lambda_dist(self):
        parts = [LossBreakdown(total=0.5)]
        base = total_loss(parts, [0.8], [0.3], LossConfig(lambda_dist=0.5))
        doubled = total_loss(parts, [0.8], [0.3], LossConfig(lambda_dist=1.0))
        assert doubled.total - doubled.ce * 1.0 - 0.5 == pytest.approx(
            2 * (base.total - base.ce * 1.0 - 0.5), abs=1e-12)

    def test_requires_render_view(self):
        with pytest.raises(ValueError):
            total_loss([], [], [])


class TestMetrics:
    def test_psnr_identical_clamped(self):
        img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        assert psnr(img, img) == 100.0

    def test_psnr_constant_offset(self):
        a = np.zeros((16, 16))
        b = np.full((16, 16), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-6)

    def test_psnr_strictly_decreasing_in_mse(self):
        a = np.zeros((8, 8))
        values = [psnr(a, np.full((8, 8), off)) for off in (0.05, 0.1, 0.2)]
        assert values[0] > values[1] > values[2]

    def test_ssim_self_is_one(self):
        img = np.random.default_rng(1).uniform(0, 1, (24, 24, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_ssim_detects_noise(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0.2, 0.8, (24, 24))
        noisy = np.clip(img + 0.2 * rng.standard_normal(img.shape), 0, 1)
        assert ssim(img, noisy) < 0.9

    def test_ssim_too_small_raises(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_seg_scores_identity(self):
        labels = np.random.default_rng(3).integers(0, 28, (16, 16))
        miou, macc = seg_scores(labels, labels)
        assert miou == 1.0 and macc == 1.0

    def test_seg_scores_disjoint(self):
        pred = np.full((8, 8), 3, dtype=np.int64)
        gt = np.full((8, 8), 7, dtype=np.int64)
        miou, macc = seg_scores(pred, gt)
        assert miou == 0.0 and macc == 0.0

    def test_seg_scores_absent_classes_excluded(self):
        gt = np.zeros((8, 8), dtype=np.int64)
        gt[:4] = 3
        pred = gt.copy()
        pred[0, 0] = 5  # class 5 absent from gt: hurts class-3 IoU only
        miou, macc = seg_scores(pred, gt)
        assert 0.9 < miou < 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
