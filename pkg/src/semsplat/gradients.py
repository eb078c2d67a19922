"""Analytic backward pass for the rendering pipeline and a fitting loop.

`backward_render` returns exact adjoints of the forward compositing with
respect to every primitive attribute: payload channels are linear in the
blend weights, opacities/means/scales/rotations flow through the 2D
Gaussian weight, the EWA projection and the covariance factorization, and
colors additionally flow through the spherical-harmonics view direction.
`finite_diff_check` validates those adjoints against central differences,
and `optimize_cloud` runs adaptive-moment updates on raw (pre-activation)
parameters for desk-scale scene fitting.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels
from .camera import Camera, projection_jacobian
from .core import (
    SH_C0,
    ActivationConfig,
    GaussianCloud,
    inverse_activate_scale,
    inverse_sigmoid,
    quaternion_to_matrix,
    sh_basis_grad,
    sigmoid,
)
from .losses import LossConfig, feature_dist_loss_grad, seg_ce_loss_grad
from .rasterizer import RenderOutput, RenderSettings, _prepare, _resolve_feature_space, render


@dataclass
class ParamGradients:
    """Gradients with the same shapes as the owning GaussianCloud."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh_coeffs: np.ndarray
    features: np.ndarray

    @staticmethod
    def zeros_like(cloud: GaussianCloud) -> "ParamGradients":
        return ParamGradients(
            positions=np.zeros_like(cloud.positions),
            rotations=np.zeros_like(cloud.rotations),
            scales=np.zeros_like(cloud.scales),
            opacities=np.zeros_like(cloud.opacities),
            sh_coeffs=np.zeros_like(cloud.sh_coeffs),
            features=np.zeros_like(cloud.features),
        )

    def add_(self, other: "ParamGradients") -> None:
        self.positions += other.positions
        self.rotations += other.rotations
        self.scales += other.scales
        self.opacities += other.opacities
        self.sh_coeffs += other.sh_coeffs
        self.features += other.features


def _quat_rotation_partials(q: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/dq at unit quaternions; (M, 4) -> (M, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zeros = np.zeros_like(w)
    m = q.shape[0]
    out = np.empty((m, 4, 3, 3), dtype=np.float64)
    out[:, 0] = 2.0 * np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1),
    ], axis=-2)
    out[:, 1] = 2.0 * np.stack([
        np.stack([zeros, y, z], axis=-1),
        np.stack([y, -2.0 * x, -w], axis=-1),
        np.stack([z, w, -2.0 * x], axis=-1),
    ], axis=-2)
    out[:, 2] = 2.0 * np.stack([
        np.stack([-2.0 * y, x, w], axis=-1),
        np.stack([x, zeros, z], axis=-1),
        np.stack([-w, z, -2.0 * y], axis=-1),
    ], axis=-2)
    out[:, 3] = 2.0 * np.stack([
        np.stack([-2.0 * z, -w, x], axis=-1),
        np.stack([w, -2.0 * z, y], axis=-1),
        np.stack([x, y, zeros], axis=-1),
    ], axis=-2)
    return out


def backward_render(cloud: GaussianCloud, camera: Camera, settings: RenderSettings,
                    output_grads: RenderOutput) -> ParamGradients:
    """Adjoint of `render` with respect to all primitive attributes.

    output_grads carries the adjoint planes in a RenderOutput of matching
    shapes (label_logits is ignored).  Accumulation order is fixed, so
    repeated calls yield bitwise-identical gradients.
    """
    h, w = camera.height, camera.width
    d_r, proj = _resolve_feature_space(cloud, settings)
    d_color = np.asarray(output_grads.color, dtype=np.float64)
    d_depth = np.asarray(output_grads.depth, dtype=np.float64)
    d_alpha = np.asarray(output_grads.alpha, dtype=np.float64)
    d_normal = np.asarray(output_grads.normal, dtype=np.float64)
    d_feature = np.asarray(output_grads.feature, dtype=np.float64)
    if (d_color.shape != (h, w, 3) or d_depth.shape != (h, w) or d_alpha.shape != (h, w)
            or d_normal.shape != (h, w, 3) or d_feature.shape != (h, w, d_r)):
        raise ValueError("adjoint shapes do not match the render output")

    grads = ParamGradients.zeros_like(cloud)
    prep = _prepare(cloud, camera, settings)
    if prep is None:
        return grads

    m = prep.indices.size
    n_chan = prep.payload.shape[1]
    d_payload = np.empty((h, w, n_chan), dtype=np.float64)
    d_payload[:, :, 0:3] = d_color
    d_payload[:, :, 3:3 + d_r] = d_feature
    d_payload[:, :, 3 + d_r] = d_depth
    d_payload[:, :, 4 + d_r:7 + d_r] = d_normal
    bg = np.asarray(settings.background, dtype=np.float64)
    d_trans_v = d_color @ bg - d_alpha

    g_payload = np.zeros((m, n_chan), dtype=np.float64)
    g_opacity = np.zeros(m, dtype=np.float64)
    g_mean2d = np.zeros((m, 2), dtype=np.float64)
    g_conic = np.zeros((m, 3), dtype=np.float64)
    _kernels.composite_backward(
        prep.mean2d, prep.conic, prep.opacity, prep.payload, prep.bbox,
        settings.tile_size, settings.alpha_cutoff, settings.early_stop,
        np.ascontiguousarray(d_payload), np.ascontiguousarray(d_trans_v),
        g_payload, g_opacity, g_mean2d, g_conic,
    )

    idx = prep.indices
    g_color = g_payload[:, 0:3]
    g_feat = g_payload[:, 3:3 + d_r]
    g_depth = g_payload[:, 3 + d_r]
    g_norm = g_payload[:, 4 + d_r:7 + d_r]

    # Features: payload was features @ proj.T (or identity).
    grads.features[idx] = g_feat if proj is None else g_feat @ proj

    # Color: clamp to [0, 1] passes gradient only strictly inside, then the
    # SH evaluation splits into the coefficient path and the view-direction
    # path (directions depend on the primitive position).
    interior = (prep.color_raw > 0.0) & (prep.color_raw < 1.0)
    g_color_in = np.where(interior, g_color, 0.0)
    coeffs = cloud.sh_coeffs[idx]
    grads.sh_coeffs[idx] = prep.basis[:, :, None] * g_color_in[:, None, :]
    dbasis = sh_basis_grad(prep.view_dir)
    g_dir = np.einsum("mc,mkc,mkd->md", g_color_in, coeffs, dbasis)
    radial = np.einsum("md,md->m", prep.view_dir, g_dir)
    g_pos = (g_dir - prep.view_dir * radial[:, None]) / prep.view_dist[:, None]

    # Opacity is a direct factor of the fragment alpha.
    grads.opacities[idx] = g_opacity

    # Inverse 2D covariance -> 2D covariance (packed symmetric chain).
    a, b, c = prep.cov2d[:, 0], prep.cov2d[:, 1], prep.cov2d[:, 2]
    q_mat = np.empty((m, 2, 2), dtype=np.float64)
    q_mat[:, 0, 0] = prep.conic[:, 0]
    q_mat[:, 0, 1] = q_mat[:, 1, 0] = prep.conic[:, 1]
    q_mat[:, 1, 1] = prep.conic[:, 2]
    g_inv = np.empty((m, 2, 2), dtype=np.float64)
    g_inv[:, 0, 0] = g_conic[:, 0]
    g_inv[:, 0, 1] = g_inv[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_inv[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -np.einsum("mij,mjk,mkl->mil", q_mat, g_inv, q_mat)

    # cov2d = W cov3d W^T + floor, with W = J R.
    scales = cloud.scales[idx]
    cov3d = np.einsum("mij,mj,mkj->mik", prep.rot, scales * scales, prep.rot)
    J = projection_jacobian(camera, prep.x_cam)
    W = J @ camera.R
    g_cov3d = np.einsum("mji,mjk,mkl->mil", W, g_cov2d, W)
    g_W = 2.0 * np.einsum("mij,mjk,mkl->mil", g_cov2d, W, cov3d)
    g_J = g_W @ camera.R.T

    # Projection: mean2d and J both depend on the camera-frame position.
    g_xcam = np.einsum("mji,mj->mi", J, g_mean2d)
    x, y, z = prep.x_cam[:, 0], prep.x_cam[:, 1], prep.x_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    z2 = z * z
    g_xcam[:, 0] += g_J[:, 0, 2] * (-fx / z2)
    g_xcam[:, 1] += g_J[:, 1, 2] * (-fy / z2)
    g_xcam[:, 2] += (g_J[:, 0, 0] * (-fx / z2)
                     + g_J[:, 1, 1] * (-fy / z2)
                     + g_J[:, 0, 2] * (2.0 * fx * x / (z2 * z))
                     + g_J[:, 1, 2] * (2.0 * fy * y / (z2 * z)))
    g_xcam[:, 2] += g_depth  # depth payload is camera-frame z
    g_pos += g_xcam @ camera.R

    # cov3d = R_q diag(s^2) R_q^T plus the normal payload on the min axis.
    rt_g_r = np.einsum("mji,mjk,mkl->mil", prep.rot, g_cov3d, prep.rot)
    grads.scales[idx] = 2.0 * scales * np.einsum("mii->mi", rt_g_r)
    g_rot = 2.0 * np.einsum("mij,mjk,mk->mik", g_cov3d, prep.rot, scales * scales)
    rows = np.arange(m)
    g_rot[rows, :, prep.axis_index] += prep.axis_sign[:, None] * g_norm

    quats = cloud.rotations[idx]
    norms = np.linalg.norm(quats, axis=1)
    unit = quats / norms[:, None]
    partials = _quat_rotation_partials(unit)
    g_unit = np.einsum("mij,mcij->mc", g_rot, partials)
    radial_q = np.einsum("mc,mc->m", unit, g_unit)
    grads.rotations[idx] = (g_unit - unit * radial_q[:, None]) / norms[:, None]

    grads.positions[idx] = g_pos
    return grads


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    max_abs_err: float
    count: int
    passed: bool


@dataclass
class GradCheckReport:
    """Central-difference comparison per parameter class."""

    entries: Dict[str, GradCheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries.values())

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries.values()), default=0.0)


PARAM_CLASSES = ("color", "opacity", "feature", "mean", "scale", "rotation")

_PARAM_FIELDS = {
    "color": "sh_coeffs",
    "opacity": "opacities",
    "feature": "features",
    "mean": "positions",
    "scale": "scales",
    "rotation": "rotations",
}


def _ones_adjoints(h: int, w: int, d_r: int) -> RenderOutput:
    return RenderOutput(
        color=np.ones((h, w, 3)),
        depth=np.ones((h, w)),
        alpha=np.ones((h, w)),
        normal=np.ones((h, w, 3)),
        feature=np.ones((h, w, d_r)),
    )


def _scalar_loss(cloud: GaussianCloud, camera: Camera, settings: RenderSettings,
                 adj: RenderOutput) -> float:
    out = render(cloud, camera, settings)
    return float(
        np.sum(out.color * adj.color) + np.sum(out.depth * adj.depth)
        + np.sum(out.alpha * adj.alpha) + np.sum(out.normal * adj.normal)
        + np.sum(out.feature * adj.feature)
    )


def _replace_field(cloud: GaussianCloud, name: str, value: np.ndarray) -> GaussianCloud:
    kwargs = dict(
        positions=cloud.positions, rotations=cloud.rotations, scales=cloud.scales,
        opacities=cloud.opacities, sh_coeffs=cloud.sh_coeffs, features=cloud.features,
    )
    kwargs[name] = value
    return GaussianCloud(**kwargs)


def finite_diff_check(cloud: GaussianCloud, camera: Camera,
                      settings: RenderSettings = RenderSettings(),
                      param_classes: Sequence[str] = PARAM_CLASSES,
                      eps: float = 1e-4, tolerance: float = 1e-3,
                      adjoints: Optional[RenderOutput] = None,
                      smooth: bool = True) -> GradCheckReport:
    """Compare analytic gradients to central differences of a scalar loss.

    The loss is the adjoint-weighted sum of all output planes (all-ones
    adjoints by default).  With smooth=True the fragment cutoff and the
    early stop are disabled so the forward map stays differentiable.
    Relative error is |a - n| / max(|a|, |n|, 1e-6).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if smooth:
        settings = replace(settings, alpha_cutoff=0.0, early_stop=0.0)
    d_r, _ = _resolve_feature_space(cloud, settings)
    if adjoints is None:
        adjoints = _ones_adjoints(camera.height, camera.width, d_r)

    analytic = backward_render(cloud, camera, settings, adjoints)
    entries: Dict[str, GradCheckEntry] = {}
    for name in param_classes:
        if name not in _PARAM_FIELDS:
            raise ValueError(f"unknown parameter class {name!r}")
        fieldname = _PARAM_FIELDS[name]
        base = getattr(cloud, fieldname)
        ana = getattr(analytic, fieldname)
        max_rel = 0.0
        max_abs = 0.0
        count = 0
        flat = base.reshape(-1)
        for i in range(flat.size):
            perturbed = base.copy().reshape(-1)
            perturbed[i] = flat[i] + eps
            plus = _scalar_loss(_replace_field(cloud, fieldname, perturbed.reshape(base.shape)),
                                camera, settings, adjoints)
            perturbed[i] = flat[i] - eps
            minus = _scalar_loss(_replace_field(cloud, fieldname, perturbed.reshape(base.shape)),
                                 camera, settings, adjoints)
            numeric = (plus - minus) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), 1e-6)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            count += 1
        entries[name] = GradCheckEntry(
            name=name, max_rel_err=float(max_rel), max_abs_err=float(max_abs),
            count=count, passed=bool(max_rel <= tolerance),
        )
    return GradCheckReport(entries=entries, tolerance=tolerance)


@dataclass
class FitView:
    """Supervision for one camera: any subset of image/mask/features/labels."""

    camera: Camera
    image: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None


ALL_TRAINABLE = ("positions", "rotations", "scales", "opacities", "sh_dc", "sh_rest", "features")

# Per-class step-size multipliers on top of the base learning rate.
DEFAULT_LR_SCALE = {
    "positions": 0.1,
    "rotations": 0.5,
    "scales": 1.0,
    "opacities": 1.0,
    "sh_dc": 1.0,
    "sh_rest": 0.25,
    "features": 1.0,
}


@dataclass
class AdamConfig:
    """Adaptive-moment optimizer settings for raw-parameter fitting.

    beta1/beta2 follow the training recipe (0.9 / 0.95); decoupled weight
    decay defaults to 0 here because decaying raw splat parameters drags a
    converged scene away from its optimum (the 0.05 value belongs to
    network-weight training).
    """

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0


def _raw_from_cloud(cloud: GaussianCloud, cfg: ActivationConfig) -> Dict[str, np.ndarray]:
    rgb_dc = np.clip(0.5 + SH_C0 * cloud.sh_coeffs[:, 0, :], 1e-6, 1.0 - 1e-6)
    return {
        "positions": cloud.positions.copy(),
        "rotations": cloud.rotations.copy(),
        "scales": inverse_activate_scale(cloud.scales, cfg),
        "opacities": inverse_sigmoid(np.clip(cloud.opacities, 1e-6, 1.0 - 1e-6)),
        "sh_dc": inverse_sigmoid(rgb_dc),
        "sh_rest": cloud.sh_coeffs[:, 1:, :].copy(),
        "features": cloud.features.copy(),
    }


def _cloud_from_raw(raw: Dict[str, np.ndarray], cfg: ActivationConfig,
                    initial: GaussianCloud, trainable: frozenset) -> GaussianCloud:
    """Assemble the step cloud: activated raw values for trainable classes,
    the untouched initial attributes for frozen ones (so frozen attributes
    never get projected into the activation range)."""
    n = initial.count
    if "positions" in trainable:
        positions = raw["positions"]
    else:
        positions = initial.positions
    if "rotations" in trainable:
        norms = np.linalg.norm(raw["rotations"], axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("degenerate rotation during optimization")
        rotations = raw["rotations"] / norms[:, None]
    else:
        rotations = initial.rotations
    if "scales" in trainable:
        sg = sigmoid(raw["scales"])
        scales = cfg.scale_min * sg + cfg.scale_max * (1.0 - sg)
    else:
        scales = initial.scales
    opacities = sigmoid(raw["opacities"]) if "opacities" in trainable else initial.opacities
    sh = initial.sh_coeffs.copy()
    if "sh_dc" in trainable:
        sh[:, 0, :] = (sigmoid(raw["sh_dc"]) - 0.5) / SH_C0
    if "sh_rest" in trainable:
        sh[:, 1:, :] = raw["sh_rest"]
    features = raw["features"] if "features" in trainable else initial.features
    return GaussianCloud(positions=positions, rotations=rotations, scales=scales,
                         opacities=opacities, sh_coeffs=sh, features=features)


def _chain_to_raw(grads: ParamGradients, raw: Dict[str, np.ndarray],
                  cfg: ActivationConfig) -> Dict[str, np.ndarray]:
    """Pull cloud-space gradients back through the activation functions."""
    sg = sigmoid(raw["scales"])
    opa = sigmoid(raw["opacities"])
    dc = sigmoid(raw["sh_dc"])
    norms = np.linalg.norm(raw["rotations"], axis=1)
    unit = raw["rotations"] / norms[:, None]
    radial = np.einsum("mc,mc->m", unit, grads.rotations)
    return {
        "positions": grads.positions,
        "rotations": (grads.rotations - unit * radial[:, None]) / norms[:, None],
        "scales": grads.scales * (cfg.scale_min - cfg.scale_max) * sg * (1.0 - sg),
        "opacities": grads.opacities * opa * (1.0 - opa),
        "sh_dc": grads.sh_coeffs[:, 0, :] * dc * (1.0 - dc) / SH_C0,
        "sh_rest": grads.sh_coeffs[:, 1:, :],
        "features": grads.features,
    }


def raw_gradients(grads: ParamGradients, cloud: GaussianCloud,
                  activation: ActivationConfig = ActivationConfig()) -> Dict[str, np.ndarray]:
    """Cloud-space gradients pulled back to raw (pre-activation) parameters.

    Returns arrays keyed by the raw parameter classes (positions, rotations,
    scales, opacities, sh_dc, sh_rest, features), evaluated at the raw point
    that activates to `cloud`.
    """
    return _chain_to_raw(grads, _raw_from_cloud(cloud, activation), activation)


def fit_start_cloud(initial: GaussianCloud,
                    activation: ActivationConfig = ActivationConfig(),
                    trainable: Sequence[str] = ALL_TRAINABLE) -> GaussianCloud:
    """The exact step-0 cloud optimize_cloud works from.

    Trainable attributes pass through the raw parameterization (a projection
    that clamps them into the activation range, exact to the last ulp for
    in-range values); frozen attributes are untouched.  Rendering targets
    from this cloud makes an already-optimal fit a true fixed point.
    """
    raw = _raw_from_cloud(initial, activation)
    return _cloud_from_raw(raw, activation, initial, frozenset(trainable))


def cosine_schedule(base_lr: float, total_steps: int, warmup: int = 0,
                    floor: float = 0.0) -> Callable[[int], float]:
    """Linear warmup into cosine decay down to `floor`."""

    def lr_at(step: int) -> float:
        if warmup > 0 and step < warmup:
            return base_lr * (step + 1) / warmup
        span = max(total_steps - warmup, 1)
        progress = min(max(step - warmup, 0) / span, 1.0)
        return floor + (base_lr - floor) * 0.5 * (1.0 + np.cos(np.pi * progress))

    return lr_at


def optimize_cloud(
    initial: GaussianCloud,
    views: Sequence[FitView],
    loss_cfg: Optional[LossConfig] = None,
    steps: int = 500,
    lr: Union[float, Callable[[int], float]] = 1e-2,
    *,
    settings: RenderSettings = RenderSettings(),
    activation: ActivationConfig = ActivationConfig(),
    adam: AdamConfig = AdamConfig(),
    trainable: Sequence[str] = ALL_TRAINABLE,
    lr_scale: Optional[Dict[str, float]] = None,
    classifier: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[GaussianCloud, list]:
    """First-order fit of raw Gaussian parameters against rendered targets.

    Every view contributes MSE/mask terms when image/mask targets are set,
    a cosine feature-distillation term when a feature target is set, and a
    cross-entropy term (through `classifier`) when labels are set; weights
    come from loss_cfg.  Updates are adaptive-moment steps on the raw
    parameters through the activation chain rule.

    Returns the fitted cloud and the per-step total-loss trace.  Raises
    RuntimeError with the step index if the loss turns non-finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(views) < 1:
        raise ValueError("at least one view is required")
    cfg = loss_cfg if loss_cfg is not None else LossConfig()
    lr_fn = lr if callable(lr) else (lambda _s: float(lr))
    scale = dict(DEFAULT_LR_SCALE)
    if lr_scale:
        scale.update(lr_scale)
    unknown = set(trainable) - set(ALL_TRAINABLE)
    if unknown:
        raise ValueError(f"unknown trainable classes: {sorted(unknown)}")
    trainset = frozenset(trainable)

    raw = _raw_from_cloud(initial, activation)
    moment1 = {k: np.zeros_like(raw[k]) for k in trainset}
    moment2 = {k: np.zeros_like(raw[k]) for k in trainset}

    n_render = sum(1 for v in views if v.image is not None or v.mask is not None
                   or v.features is not None)
    n_seg = sum(1 for v in views if v.labels is not None)
    trace: list = []

    for step in range(steps):
        cloud = _cloud_from_raw(raw, activation, initial, trainset)
        total_grads = ParamGradients.zeros_like(cloud)
        render_sum = 0.0
        dist_sum = 0.0
        ce_sum = 0.0

        for view in views:
            out = render(cloud, view.camera, settings)
            h, w = view.camera.height, view.camera.width
            d_r = out.feature.shape[2]
            adj = RenderOutput(
                color=np.zeros((h, w, 3)), depth=np.zeros((h, w)),
                alpha=np.zeros((h, w)), normal=np.zeros((h, w, 3)),
                feature=np.zeros((h, w, d_r)),
            )
            touched = False
            if view.image is not None:
                diff = out.color - view.image
                render_sum += float(np.mean(diff * diff))
                adj.color += (2.0 / diff.size) * diff / max(n_render, 1)
                touched = True
            if view.mask is not None:
                dm = out.alpha - view.mask
                render_sum += cfg.lambda_mask * float(np.mean(dm * dm))
                adj.alpha += cfg.lambda_mask * (2.0 / dm.size) * dm / max(n_render, 1)
                touched = True
            if view.features is not None:
                dist, d_feat = feature_dist_loss_grad(out.feature, view.features)
                dist_sum += dist
                adj.feature += cfg.lambda_dist * d_feat / max(n_render, 1)
                touched = True
            if view.labels is not None:
                if classifier is None:
                    raise ValueError("label targets require a classifier")
                cw, cb = classifier
                logits = out.feature @ np.asarray(cw, dtype=np.float64).T + np.asarray(cb, dtype=np.float64)
                ce, d_logits = seg_ce_loss_grad(logits, view.labels)
                ce_sum += ce
                adj.feature += cfg.lambda_seg * (d_logits @ np.asarray(cw, dtype=np.float64)) / max(n_seg, 1)
                touched = True
            if touched:
                total_grads.add_(backward_render(cloud, view.camera, settings, adj))

        total = 0.0
        if n_render:
            total += render_sum / n_render + cfg.lambda_dist * dist_sum / n_render
        if n_seg:
            total += cfg.lambda_seg * ce_sum / n_seg
        if not np.isfinite(total):
            raise RuntimeError(f"optimization diverged at step {step}: non-finite loss")
        trace.append(total)

        raw_grads = _chain_to_raw(total_grads, raw, activation)
        step_lr = lr_fn(step)
        t = step + 1
        bc1 = 1.0 - adam.beta1 ** t
        bc2 = 1.0 - adam.beta2 ** t
        for name in trainset:
            g = raw_grads[name]
            moment1[name] = adam.beta1 * moment1[name] + (1.0 - adam.beta1) * g
            moment2[name] = adam.beta2 * moment2[name] + (1.0 - adam.beta2) * g * g
            m_hat = moment1[name] / bc1
            v_hat = moment2[name] / bc2
            update = m_hat / (np.sqrt(v_hat) + adam.eps)
            if adam.weight_decay:
                update = update + adam.weight_decay * raw[name]
            raw[name] = raw[name] - step_lr * scale.get(name, 1.0) * update
            if not np.all(np.isfinite(raw[name])):
                raise RuntimeError(
                    f"optimization diverged at step {step}: non-finite {name}")

    return _cloud_from_raw(raw, activation, initial, trainset), trace
