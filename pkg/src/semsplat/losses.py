"""Multi-task training objective.

The render loss is MSE plus a weighted mask term and an optional
externally supplied perceptual distance; the semantic field trains with a
cosine feature-distillation term and per-view cross entropy over the
28-way taxonomy.  The total objective averages render+distillation terms
over the supervised render views and adds the weighted mean cross-entropy
block over the labeled views.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .core import NUM_CLASSES


@dataclass(frozen=True)
class LossConfig:
    """Objective weights; perceptual_distance is a dependency-injected callable.

    k_v / k_s record the intended render/segmentation view counts; when left
    None the counts are inferred from the supplied per-view terms.
    """

    lambda_mask: float = 1.0
    lambda_perceptual: float = 0.1
    lambda_dist: float = 0.5
    lambda_seg: float = 1.0
    perceptual_distance: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    k_v: Optional[int] = None
    k_s: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("lambda_mask", "lambda_perceptual", "lambda_dist", "lambda_seg"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossBreakdown:
    """Component values of the objective; perceptual is None when no callable is configured."""

    mse: float = 0.0
    mask: float = 0.0
    perceptual: Optional[float] = None
    dist: float = 0.0
    ce: float = 0.0
    total: float = 0.0


def render_loss(pred_img: np.ndarray, gt_img: np.ndarray,
                pred_mask: np.ndarray, gt_mask: np.ndarray,
                cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Per-view render loss: mse + lambda_mask * mask (+ lambda_p * perceptual)."""
    pred_img = np.asarray(pred_img, dtype=np.float64)
    gt_img = np.asarray(gt_img, dtype=np.float64)
    pred_mask = np.asarray(pred_mask, dtype=np.float64)
    gt_mask = np.asarray(gt_mask, dtype=np.float64)
    if pred_img.shape != gt_img.shape:
        raise ValueError("image shapes do not match")
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("mask shapes do not match")
    mse = float(np.mean((pred_img - gt_img) ** 2))
    mask = float(np.mean((pred_mask - gt_mask) ** 2))
    perceptual: Optional[float] = None
    total = mse + cfg.lambda_mask * mask
    if cfg.perceptual_distance is not None:
        perceptual = float(cfg.perceptual_distance(pred_img, gt_img))
        total += cfg.lambda_perceptual * perceptual
    return LossBreakdown(mse=mse, mask=mask, perceptual=perceptual, total=total)


def _cosine_terms(pred: np.ndarray, target: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("feature map shapes do not match")
    pn = np.linalg.norm(pred, axis=-1)
    tn = np.linalg.norm(target, axis=-1)
    valid = (pn > 0.0) & (tn > 0.0)
    dot = np.einsum("...d,...d->...", pred, target)
    cos = np.zeros_like(pn)
    np.divide(dot, pn * tn, out=cos, where=valid)
    return pred, target, pn, tn, valid, cos


def feature_dist_loss(pred_features: np.ndarray, target_features: np.ndarray) -> float:
    """Mean over pixels of 1 - cosine similarity.

    A zero-norm vector on either side contributes the neutral value 1 and
    stays in the count.
    """
    *_, valid, cos = _cosine_terms(pred_features, target_features)
    per_pixel = np.where(valid, 1.0 - cos, 1.0)
    return float(np.mean(per_pixel))


def feature_dist_loss_grad(pred_features: np.ndarray, target_features: np.ndarray
                           ) -> Tuple[float, np.ndarray]:
    """feature_dist_loss plus its gradient w.r.t. the predicted features."""
    pred, target, pn, tn, valid, cos = _cosine_terms(pred_features, target_features)
    per_pixel = np.where(valid, 1.0 - cos, 1.0)
    count = per_pixel.size
    safe_pn = np.where(valid, pn, 1.0)
    safe_tn = np.where(valid, tn, 1.0)
    # d(1 - cos)/dpred = cos * pred/|pred|^2 - target/(|pred| |target|)
    grad = (cos / (safe_pn * safe_pn))[..., None] * pred \
        - target / (safe_pn * safe_tn)[..., None]
    grad = np.where(valid[..., None], grad, 0.0) / count
    return float(np.mean(per_pixel)), grad


def seg_ce_loss(logits: np.ndarray, labels: np.ndarray,
                ignore_id: Optional[int] = None) -> float:
    """Mean per-pixel softmax cross entropy; 0 when every pixel is ignored."""
    loss, _ = _ce_core(logits, labels, ignore_id, want_grad=False)
    return loss


def seg_ce_loss_grad(logits: np.ndarray, labels: np.ndarray,
                     ignore_id: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """seg_ce_loss plus its gradient w.r.t. the logits."""
    return _ce_core(logits, labels, ignore_id, want_grad=True)


def _ce_core(logits, labels, ignore_id, want_grad):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 3 or logits.shape[2] != NUM_CLASSES:
        raise ValueError(f"logits must be (H, W, {NUM_CLASSES})")
    if labels.shape != logits.shape[:2]:
        raise ValueError("label map shape does not match logits")
    valid = np.ones(labels.shape, dtype=bool) if ignore_id is None else labels != ignore_id
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= NUM_CLASSES):
        raise ValueError("label out of range 0..27")
    count = int(valid.sum())
    grad = np.zeros_like(logits) if want_grad else None
    if count == 0:
        return 0.0, grad
    shifted = logits - logits.max(axis=2, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=2))
    safe_labels = np.where(valid, labels, 0)
    true_logit = np.take_along_axis(shifted, safe_labels[:, :, None], axis=2)[:, :, 0]
    per_pixel = np.where(valid, log_z - true_logit, 0.0)
    loss = float(per_pixel.sum() / count)
    if want_grad:
        probs = np.exp(shifted - log_z[:, :, None])
        onehot = np.zeros_like(logits)
        np.put_along_axis(onehot, safe_labels[:, :, None], 1.0, axis=2)
        grad = np.where(valid[:, :, None], (probs - onehot) / count, 0.0)
    return loss, grad


def total_loss(render_terms: Sequence[LossBreakdown],
               dist_terms: Sequence[float],
               ce_terms: Sequence[float],
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Combine per-view terms into the full objective.

    total = mean_i(render_i) + lambda_dist * mean_i(dist_i)
          + lambda_seg * mean_j(ce_j), with empty blocks contributing 0.
    """
    if len(render_terms) < 1:
        raise ValueError("at least one render view is required (k_v >= 1)")
    mean_render = float(np.mean([t.total for t in render_terms]))
    mean_dist = float(np.mean(dist_terms)) if len(dist_terms) else 0.0
    mean_ce = float(np.mean(ce_terms)) if len(ce_terms) else 0.0
    perceptuals = [t.perceptual for t in render_terms if t.perceptual is not None]
    return LossBreakdown(
        mse=float(np.mean([t.mse for t in render_terms])),
        mask=float(np.mean([t.mask for t in render_terms])),
        perceptual=float(np.mean(perceptuals)) if perceptuals else None,
        dist=mean_dist,
        ce=mean_ce,
        total=mean_render + cfg.lambda_dist * mean_dist + cfg.lambda_seg * mean_ce,
    )
