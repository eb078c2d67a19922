"""Image-quality and segmentation metrics: PSNR, SSIM, mIoU, mAcc."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .core import NUM_CLASSES

PSNR_CLAMP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / mse), clamped to 100 dB for near-identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CLAMP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _window_means(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", view, window)


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), valid region only.

    Multi-channel inputs average the per-channel scores.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError("images must be at least 11x11 for SSIM")
    window = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _window_means(x, window)
        mu_y = _window_means(y, window)
        var_x = _window_means(x * x, window) - mu_x * mu_x
        var_y = _window_means(y * y, window) - mu_y * mu_y
        cov = _window_means(x * y, window) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def seg_scores(pred_labels: np.ndarray, gt_labels: np.ndarray,
               num_classes: int = NUM_CLASSES) -> Tuple[float, float]:
    """(mIoU, mAcc) averaged over the classes present in the ground truth."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    ious = []
    accs = []
    for cls in range(num_classes):
        gt_cls = gt == cls
        n_gt = int(gt_cls.sum())
        if n_gt == 0:
            continue
        pred_cls = pred == cls
        inter = int(np.logical_and(pred_cls, gt_cls).sum())
        union = int(np.logical_or(pred_cls, gt_cls).sum())
        ious.append(inter / union)
        accs.append(inter / n_gt)
    if not ious:
        raise ValueError("ground truth contains no classes in range")
    return float(np.mean(ious)), float(np.mean(accs))
