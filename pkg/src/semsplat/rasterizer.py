"""Forward multi-channel rendering of a Gaussian cloud.

`render` composites color, semantic features, depth, alpha and normals
tile by tile over a single global front-to-back depth sort;
`render_reference` is the brute-force per-pixel oracle (no tiling, no
early stop) used to validate it.  Both honor the per-fragment alpha
cutoff, clamp fragment opacity at 0.99 and break depth ties by primitive
index, so their outputs agree to floating-point accuracy whenever the
early stop is disabled.

The depth channel is the unnormalized blend sum(d_i * w_i); divide by
alpha for expected depth.  Normals are the rotated minimum-scale axis of
each primitive, flipped toward the camera.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import _kernels
from .camera import LOW_PASS_FLOOR, Camera, projection_jacobian
from .core import (
    MAX_FEATURE_DIM,
    NUM_CLASSES,
    GaussianCloud,
    quaternion_to_matrix,
    sh_basis,
)


@dataclass(frozen=True)
class RenderSettings:
    """Knobs of the rasterization pass.

    feature_dim is the rendered feature width d_r (defaults to the cloud's
    d_f); feature_projection optionally maps stored features to render
    space with a d_r x d_f matrix (identity when omitted and d_r == d_f).
    alpha_cutoff discards fragments below it and early_stop terminates a
    pixel once transmittance falls under it (0 disables).
    """

    background: tuple = (0.0, 0.0, 0.0)
    feature_dim: Optional[int] = None
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    early_stop: float = 1e-4
    feature_projection: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        bg = tuple(float(b) for b in self.background)
        if len(bg) != 3 or any(b < 0.0 or b > 1.0 for b in bg):
            raise ValueError("background must be three values in [0, 1]")
        object.__setattr__(self, "background", bg)
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.feature_dim is not None and self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1 when set")
        if self.feature_projection is not None:
            proj = np.ascontiguousarray(np.asarray(self.feature_projection, dtype=np.float64))
            if proj.ndim != 2:
                raise ValueError("feature_projection must be a 2D matrix")
            object.__setattr__(self, "feature_projection", proj)


@dataclass
class RenderOutput:
    """Multi-channel rasterization result.

    color (H, W, 3) in [0, 1]; depth (H, W) >= 0; alpha (H, W) in [0, 1];
    normal (H, W, 3); feature (H, W, d_r); label_logits optional (H, W, 28).
    """

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    normal: np.ndarray
    feature: np.ndarray
    label_logits: Optional[np.ndarray] = None


def _resolve_feature_space(cloud: GaussianCloud, settings: RenderSettings) -> Tuple[int, Optional[np.ndarray]]:
    """Rendered feature width d_r <= d_f <= 1024 and the optional projection."""
    d_f = cloud.feature_dim
    if d_f > MAX_FEATURE_DIM:
        raise ValueError(f"feature dim {d_f} exceeds {MAX_FEATURE_DIM}")
    proj = settings.feature_projection
    if proj is not None:
        if proj.shape[1] != d_f:
            raise ValueError(f"feature_projection maps {proj.shape[1]} dims, cloud has {d_f}")
        d_r = proj.shape[0]
        if d_r > d_f:
            raise ValueError("rendered feature dim cannot exceed the stored dim")
        if settings.feature_dim is not None and settings.feature_dim != d_r:
            raise ValueError("feature_dim and feature_projection disagree")
        return d_r, proj
    d_r = d_f if settings.feature_dim is None else settings.feature_dim
    if d_r != d_f:
        raise ValueError("feature_dim != cloud feature dim requires a feature_projection")
    return d_r, None


@dataclass
class _Prepared:
    """Per-view preprocessing shared by the forward pass and its adjoint.

    Arrays are restricted to visible primitives and sorted front-to-back by
    camera-frame depth (stable, so depth ties break by primitive index).
    """

    indices: np.ndarray      # (M,) original primitive ids, sorted
    x_cam: np.ndarray        # (M, 3)
    mean2d: np.ndarray       # (M, 2)
    cov2d: np.ndarray        # (M, 3) packed upper triangle (A, B, C)
    conic: np.ndarray        # (M, 3) packed inverse covariance
    opacity: np.ndarray      # (M,)
    payload: np.ndarray      # (M, 3 + d_r + 1 + 3)
    bbox: np.ndarray         # (M, 4) inclusive pixel bounds
    rot: np.ndarray          # (M, 3, 3) primitive rotations
    view_dir: np.ndarray     # (M, 3) unit camera->primitive directions
    view_dist: np.ndarray    # (M,)
    basis: np.ndarray        # (M, 16) SH basis at view_dir
    color_raw: np.ndarray    # (M, 3) pre-clamp colors
    axis_index: np.ndarray   # (M,) argmin-scale axis per primitive
    axis_sign: np.ndarray    # (M,) +-1 camera-facing flip
    d_r: int
    projection: Optional[np.ndarray]


def _prepare(cloud: GaussianCloud, camera: Camera, settings: RenderSettings) -> Optional[_Prepared]:
    """Project, shade and sort the visible primitives; None when nothing is visible."""
    d_r, proj = _resolve_feature_space(cloud, settings)
    if cloud.count == 0:
        return None

    x_cam = cloud.positions @ camera.R.T + camera.t
    visible = x_cam[:, 2] > 1e-8
    if settings.alpha_cutoff > 0.0:
        visible &= cloud.opacities >= settings.alpha_cutoff
    idx = np.flatnonzero(visible)
    if idx.size == 0:
        return None
    x_cam = x_cam[idx]
    order = np.argsort(x_cam[:, 2], kind="stable")
    idx = idx[order]
    x_cam = x_cam[order]
    z = x_cam[:, 2]

    mean2d = np.stack([
        camera.fx * x_cam[:, 0] / z + camera.cx,
        camera.fy * x_cam[:, 1] / z + camera.cy,
    ], axis=1)

    quats = cloud.rotations[idx]
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate rotation: zero-norm quaternion")
    rot = quaternion_to_matrix(quats / norms[:, None])
    scales = cloud.scales[idx]
    cov3d = np.einsum("mij,mj,mkj->mik", rot, scales * scales, rot)

    J = projection_jacobian(camera, x_cam)
    W = J @ camera.R
    cov2d_full = np.einsum("mij,mjk,mlk->mil", W, cov3d, W)
    a = cov2d_full[:, 0, 0] + LOW_PASS_FLOOR
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + LOW_PASS_FLOOR
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    opacity = cloud.opacities[idx]

    # Conservative per-fragment bounding box: outside it the fragment alpha
    # is guaranteed below the cutoff, which keeps tile culling exact.
    h, w = camera.height, camera.width
    if settings.alpha_cutoff > 0.0:
        tau2 = 2.0 * np.log(np.maximum(opacity, 1e-300) / settings.alpha_cutoff)
        tau2 = np.maximum(tau2, 0.0)
        rx = np.sqrt(tau2 * a) + 1.0
        ry = np.sqrt(tau2 * c) + 1.0
        u0 = np.floor(mean2d[:, 0] - rx - 0.5).astype(np.int64)
        u1 = np.ceil(mean2d[:, 0] + rx - 0.5).astype(np.int64)
        v0 = np.floor(mean2d[:, 1] - ry - 0.5).astype(np.int64)
        v1 = np.ceil(mean2d[:, 1] + ry - 0.5).astype(np.int64)
    else:
        u0 = np.zeros(idx.size, dtype=np.int64)
        u1 = np.full(idx.size, w - 1, dtype=np.int64)
        v0 = np.zeros(idx.size, dtype=np.int64)
        v1 = np.full(idx.size, h - 1, dtype=np.int64)
    on_screen = (u1 >= 0) & (u0 <= w - 1) & (v1 >= 0) & (v0 <= h - 1)
    bbox = np.stack([np.clip(u0, 0, w - 1), np.clip(u1, 0, w - 1),
                     np.clip(v0, 0, h - 1), np.clip(v1, 0, h - 1)], axis=1)

    if not np.all(on_screen):
        keep = np.flatnonzero(on_screen)
        idx, x_cam, z = idx[keep], x_cam[keep], z[keep]
        mean2d, conic, opacity, bbox = mean2d[keep], conic[keep], opacity[keep], bbox[keep]
        rot, scales = rot[keep], scales[keep]
        a, b, c = a[keep], b[keep], c[keep]
        if idx.size == 0:
            return None

    center = camera.center()
    dirs = cloud.positions[idx] - center
    dist = np.linalg.norm(dirs, axis=1)
    dist = np.maximum(dist, 1e-12)
    view_dir = dirs / dist[:, None]
    basis = sh_basis(view_dir)
    color_raw = 0.5 + np.einsum("mk,mkc->mc", basis, cloud.sh_coeffs[idx])
    color = np.clip(color_raw, 0.0, 1.0)

    axis_index = np.argmin(scales, axis=1)
    axis = rot[np.arange(idx.size), :, axis_index]
    facing = np.einsum("mi,mi->m", axis, center - cloud.positions[idx])
    axis_sign = np.where(facing < 0.0, -1.0, 1.0)
    normal = axis * axis_sign[:, None]

    feats = cloud.features[idx]
    if proj is not None:
        feats = feats @ proj.T

    payload = np.concatenate([color, feats, z[:, None], normal], axis=1)

    return _Prepared(
        indices=idx,
        x_cam=np.ascontiguousarray(x_cam),
        mean2d=np.ascontiguousarray(mean2d),
        cov2d=np.ascontiguousarray(np.stack([a, b, c], axis=1)),
        conic=np.ascontiguousarray(conic),
        opacity=np.ascontiguousarray(opacity),
        payload=np.ascontiguousarray(payload),
        bbox=np.ascontiguousarray(bbox),
        rot=rot,
        view_dir=view_dir,
        view_dist=dist,
        basis=basis,
        color_raw=color_raw,
        axis_index=axis_index,
        axis_sign=axis_sign,
        d_r=d_r,
        projection=proj,
    )


def _assemble(payload_sum: np.ndarray, trans: np.ndarray, d_r: int,
              settings: RenderSettings) -> RenderOutput:
    bg = np.asarray(settings.background, dtype=np.float64)
    color = payload_sum[:, :, 0:3] + trans[:, :, None] * bg
    feature = payload_sum[:, :, 3:3 + d_r]
    depth = payload_sum[:, :, 3 + d_r]
    normal = payload_sum[:, :, 4 + d_r:7 + d_r]
    return RenderOutput(color=color, depth=depth, alpha=1.0 - trans,
                        normal=normal, feature=feature)


def render(cloud: GaussianCloud, camera: Camera,
           settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Rasterize the cloud through the tile-based compositing kernel.

    Output is deterministic for fixed inputs, independent of tile size and
    worker count.  An empty (or fully culled) cloud yields the background
    with zero alpha.
    """
    prep = _prepare(cloud, camera, settings)
    h, w = camera.height, camera.width
    d_r = prep.d_r if prep is not None else _resolve_feature_space(cloud, settings)[0]
    payload_sum = np.zeros((h, w, 7 + d_r), dtype=np.float64)
    trans = np.ones((h, w), dtype=np.float64)
    if prep is not None:
        _kernels.composite_forward(
            prep.mean2d, prep.conic, prep.opacity, prep.payload, prep.bbox,
            settings.tile_size, settings.alpha_cutoff, settings.early_stop,
            payload_sum, trans,
        )
    return _assemble(payload_sum, trans, d_r, settings)


def render_reference(cloud: GaussianCloud, camera: Camera,
                     settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Brute-force oracle: every fragment evaluated at every pixel.

    No tiling, no bounding boxes, early stop disabled; same contract as
    `render` otherwise (alpha cutoff and the 0.99 fragment clamp included).
    """
    prep = _prepare(cloud, camera, settings)
    h, w = camera.height, camera.width
    d_r = prep.d_r if prep is not None else _resolve_feature_space(cloud, settings)[0]
    payload_sum = np.zeros((h, w, 7 + d_r), dtype=np.float64)
    trans = np.ones((h, w), dtype=np.float64)
    if prep is not None:
        xs = np.arange(w, dtype=np.float64) + 0.5
        ys = np.arange(h, dtype=np.float64) + 0.5
        for g in range(prep.mean2d.shape[0]):
            dx = xs[None, :] - prep.mean2d[g, 0]
            dy = ys[:, None] - prep.mean2d[g, 1]
            power = -0.5 * (prep.conic[g, 0] * dx * dx
                            + 2.0 * prep.conic[g, 1] * dx * dy
                            + prep.conic[g, 2] * dy * dy)
            alpha = np.minimum(prep.opacity[g] * np.exp(power), 0.99)
            alpha[alpha < settings.alpha_cutoff] = 0.0
            weight = alpha * trans
            payload_sum += weight[:, :, None] * prep.payload[g]
            trans = trans * (1.0 - alpha)
    return _assemble(payload_sum, trans, d_r, settings)


def composite_fragments(fragments) -> Tuple[np.ndarray, float]:
    """Blend an ordered front-to-back list of (alpha, payload vector).

    Returns (sum_i payload_i * alpha_i * T_i, T_n) with
    T_i = prod_{j<i} (1 - alpha_j).
    """
    frags = list(fragments)
    if not frags:
        return np.zeros(0), 1.0
    first_payload = np.asarray(frags[0][1], dtype=np.float64)
    blended = np.zeros_like(first_payload)
    trans = 1.0
    for alpha, payload in frags:
        alpha = float(alpha)
        if not (0.0 <= alpha <= 1.0):
            raise ValueError("fragment alphas must lie in [0, 1]")
        blended = blended + np.asarray(payload, dtype=np.float64) * (alpha * trans)
        trans *= 1.0 - alpha
    return blended, trans


def render_labels(cloud: GaussianCloud, camera: Camera, settings: RenderSettings,
                  classifier_weight: np.ndarray, classifier_bias: np.ndarray,
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel class ids and logits from the composited feature plane.

    The classifier (28 x d_r matrix plus 28 bias) is applied to the rendered
    features; labels are the argmax with a hard Background override wherever
    alpha < 0.5.  Returns (labels (H, W) int64, logits (H, W, 28)).
    """
    weight = np.asarray(classifier_weight, dtype=np.float64)
    bias = np.asarray(classifier_bias, dtype=np.float64)
    d_r, _ = _resolve_feature_space(cloud, settings)
    if weight.shape != (NUM_CLASSES, d_r) or bias.shape != (NUM_CLASSES,):
        raise ValueError(f"classifier dimension mismatch: expected ({NUM_CLASSES}, {d_r}) and ({NUM_CLASSES},)")
    out = render(cloud, camera, settings)
    logits = out.feature @ weight.T + bias
    labels = np.argmax(logits, axis=2).astype(np.int64)
    labels[out.alpha < 0.5] = 0
    return labels, logits
