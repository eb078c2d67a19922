"""Core domain types for semantic Gaussian clouds.

A cloud is a flat collection of N Gaussian primitives, each carrying
geometry (position, unit quaternion, per-axis scale), appearance
(degree-3 spherical-harmonics color, opacity) and an unconstrained
semantic feature embedding.  This module owns the attribute
activation/normalization rules that map raw decoder outputs to valid
primitives, scene normalization to the unit cube, covariance assembly
and spherical-harmonics evaluation.

All functions are pure; arrays are float64 and never mutated in place.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import camera as _camera_mod

# Spherical harmonics constants, degree 0..3 (real SH basis, the usual
# splatting sign convention).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_COEFFS = 16  # degree 3 -> (3+1)^2 basis functions
MAX_FEATURE_DIM = 1024

# Raw per-pixel channel layout: depth(1) offset(3) scale(3) rotation(4)
# opacity(1) sh(48) feature(d_f)
RAW_DEPTH = slice(0, 1)
RAW_OFFSET = slice(1, 4)
RAW_SCALE = slice(4, 7)
RAW_ROTATION = slice(7, 11)
RAW_OPACITY = slice(11, 12)
RAW_SH = slice(12, 60)
RAW_GEOM_CHANNELS = 60


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    """Logit; caller is responsible for keeping p inside (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class ActivationConfig:
    """Constants of the attribute activation rules.

    scale_min/scale_max bound the interpolated scale activation,
    opacity_filter_threshold is the low-opacity prune level and
    sh_degree is fixed at 3 (16 basis functions per channel).
    """

    scale_min: float = 5e-4
    scale_max: float = 2e-2
    opacity_filter_threshold: float = 0.005
    sh_degree: int = 3

    def __post_init__(self) -> None:
        if not (0.0 < self.scale_min < self.scale_max):
            raise ValueError("require 0 < scale_min < scale_max")
        if not (0.0 <= self.opacity_filter_threshold < 1.0):
            raise ValueError("opacity_filter_threshold must lie in [0, 1)")
        if self.sh_degree != 3:
            raise ValueError("only spherical-harmonics degree 3 is supported")


def _as_float_array(value, shape_tail, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise ValueError(f"{name} has shape {arr.shape}, expected (N, {', '.join(map(str, shape_tail))})"
                         if shape_tail else f"{name} has shape {arr.shape}, expected (N,)")
    return arr


@dataclass(frozen=True)
class GaussianCloud:
    """An activated set of N semantic Gaussian primitives.

    positions   (N, 3) world coordinates in the normalized scene space
    rotations   (N, 4) quaternions in (w, x, y, z) order
    scales      (N, 3) strictly positive per-axis extents
    opacities   (N,)   values in [0, 1]
    sh_coeffs   (N, 16, 3) degree-3 SH color coefficients
    features    (N, d_f) unconstrained semantic embeddings, d_f <= 1024
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh_coeffs: np.ndarray
    features: np.ndarray

    def __post_init__(self) -> None:
        pos = _as_float_array(self.positions, (3,), "positions")
        rot = _as_float_array(self.rotations, (4,), "rotations")
        scl = _as_float_array(self.scales, (3,), "scales")
        opa = _as_float_array(self.opacities, (), "opacities")
        sh = np.ascontiguousarray(np.asarray(self.sh_coeffs, dtype=np.float64))
        if sh.ndim != 3 or sh.shape[1:] != (SH_COEFFS, 3):
            raise ValueError(f"sh_coeffs has shape {sh.shape}, expected (N, 16, 3)")
        feat = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        if feat.ndim != 2:
            raise ValueError(f"features has shape {feat.shape}, expected (N, d_f)")
        n = pos.shape[0]
        for name, arr in (("rotations", rot), ("scales", scl), ("opacities", opa),
                          ("sh_coeffs", sh), ("features", feat)):
            if arr.shape[0] != n:
                raise ValueError(f"{name} holds {arr.shape[0]} primitives, expected {n}")
        for name, arr in (("positions", pos), ("rotations", rot), ("scales", scl),
                          ("opacities", opa), ("sh_coeffs", sh), ("features", feat)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "scales", scl)
        object.__setattr__(self, "opacities", opa)
        object.__setattr__(self, "sh_coeffs", sh)
        object.__setattr__(self, "features", feat)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def validate(self, cfg: Optional[ActivationConfig] = None, atol: float = 1e-6) -> None:
        """Check the full cloud invariants, raising ValueError on violation.

        Structural checks (shapes, finiteness) already run at construction;
        this adds unit quaternions, opacity range, the feature-dim cap and,
        when cfg is given, the activated scale bounds.
        """
        if self.count:
            norms = np.linalg.norm(self.rotations, axis=1)
            if np.max(np.abs(norms - 1.0)) > atol:
                raise ValueError("quaternions are not unit length")
            if np.min(self.opacities) < -atol or np.max(self.opacities) > 1.0 + atol:
                raise ValueError("opacities outside [0, 1]")
            if np.min(self.scales) <= 0.0:
                raise ValueError("scales must be strictly positive")
            if cfg is not None:
                if np.min(self.scales) < cfg.scale_min - atol or np.max(self.scales) > cfg.scale_max + atol:
                    raise ValueError("scales outside the activation bounds")
        if self.feature_dim > MAX_FEATURE_DIM:
            raise ValueError(f"feature dim {self.feature_dim} exceeds {MAX_FEATURE_DIM}")

    def take(self, indices) -> "GaussianCloud":
        """New cloud holding the primitives at `indices`, order preserved."""
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            positions=self.positions[idx],
            rotations=self.rotations[idx],
            scales=self.scales[idx],
            opacities=self.opacities[idx],
            sh_coeffs=self.sh_coeffs[idx],
            features=self.features[idx],
        )

    @staticmethod
    def empty(feature_dim: int = 0) -> "GaussianCloud":
        return GaussianCloud(
            positions=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            scales=np.zeros((0, 3)),
            opacities=np.zeros((0,)),
            sh_coeffs=np.zeros((0, SH_COEFFS, 3)),
            features=np.zeros((0, feature_dim)),
        )


@dataclass(frozen=True)
class RawGaussianParams:
    """Pre-activation per-pixel decoder output, packed H x W x C.

    Channel layout: depth(1) | offset(3) | scale(3) | rotation(4) |
    opacity(1) | sh(48) | feature(d_f).
    """

    data: np.ndarray
    feature_dim: int

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 3:
            raise ValueError(f"raw params must be (H, W, C), got {arr.shape}")
        if self.feature_dim < 0 or self.feature_dim > MAX_FEATURE_DIM:
            raise ValueError("feature_dim out of range")
        expected = RAW_GEOM_CHANNELS + self.feature_dim
        if arr.shape[2] != expected:
            raise ValueError(f"raw params have {arr.shape[2]} channels, expected {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raw params contain non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> np.ndarray:
        return self.data[:, :, 0]

    @property
    def offset(self) -> np.ndarray:
        return self.data[:, :, RAW_OFFSET]

    @property
    def scale(self) -> np.ndarray:
        return self.data[:, :, RAW_SCALE]

    @property
    def rotation(self) -> np.ndarray:
        return self.data[:, :, RAW_ROTATION]

    @property
    def opacity(self) -> np.ndarray:
        return self.data[:, :, 11]

    @property
    def sh(self) -> np.ndarray:
        return self.data[:, :, RAW_SH]

    @property
    def feature(self) -> np.ndarray:
        return self.data[:, :, RAW_GEOM_CHANNELS:]

    @staticmethod
    def from_parts(depth, offset, scale, rotation, opacity, sh, feature) -> "RawGaussianParams":
        """Pack separate raw maps into the canonical channel layout."""
        depth = np.asarray(depth, dtype=np.float64)
        h, w = depth.shape
        feature = np.asarray(feature, dtype=np.float64).reshape(h, w, -1)
        data = np.concatenate(
            [
                depth[:, :, None],
                np.asarray(offset, dtype=np.float64).reshape(h, w, 3),
                np.asarray(scale, dtype=np.float64).reshape(h, w, 3),
                np.asarray(rotation, dtype=np.float64).reshape(h, w, 4),
                np.asarray(opacity, dtype=np.float64).reshape(h, w, 1),
                np.asarray(sh, dtype=np.float64).reshape(h, w, 48),
                feature,
            ],
            axis=2,
        )
        return RawGaussianParams(data=data, feature_dim=feature.shape[2])


def activate_scale(raw_scale: np.ndarray, cfg: ActivationConfig) -> np.ndarray:
    """scale = s_min * sigmoid(raw) + s_max * (1 - sigmoid(raw)), per axis."""
    sg = sigmoid(raw_scale)
    return cfg.scale_min * sg + cfg.scale_max * (1.0 - sg)


def inverse_activate_scale(scale: np.ndarray, cfg: ActivationConfig, clamp: float = 1e-6) -> np.ndarray:
    """Exact inverse of activate_scale on the open interval (clamped at the bounds)."""
    u = (cfg.scale_max - np.asarray(scale, dtype=np.float64)) / (cfg.scale_max - cfg.scale_min)
    return inverse_sigmoid(np.clip(u, clamp, 1.0 - clamp))


def activate_params(
    raw: RawGaussianParams,
    cfg: ActivationConfig,
    camera: "_camera_mod.Camera",
    *,
    half_pixel: bool = True,
    eq1_literal: bool = False,
) -> GaussianCloud:
    """Map raw per-pixel decoder outputs to a valid pixel-aligned cloud.

    Scales go through the bounded interpolation, opacities through sigmoid,
    quaternions are L2 normalized, the DC color channel goes through sigmoid
    and is converted to SH-DC space, and positions come from unprojecting the
    (softplus-activated) depth plus the raw 3D offset.  One primitive per
    pixel, row-major order.
    """
    if camera.height != raw.height or camera.width != raw.width:
        raise ValueError("camera dimensions do not match raw parameter maps")

    scales = activate_scale(raw.scale, cfg).reshape(-1, 3)
    opacities = sigmoid(raw.opacity).reshape(-1)

    quats = raw.rotation.reshape(-1, 4)
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate rotation: zero-norm raw quaternion")
    quats = quats / norms[:, None]

    sh = raw.sh.reshape(-1, SH_COEFFS, 3).copy()
    sh[:, 0, :] = (sigmoid(sh[:, 0, :]) - 0.5) / SH_C0

    # Raw depth has no stated activation; softplus keeps it strictly positive
    # for every finite input (floored against exp underflow).
    depth = np.maximum(softplus(raw.depth), 1e-12)
    positions, _ = _camera_mod.unproject(
        camera, depth, offsets=raw.offset, mask=None,
        half_pixel=half_pixel, eq1_literal=eq1_literal,
    )

    features = raw.feature.reshape(raw.height * raw.width, raw.feature_dim)

    return GaussianCloud(
        positions=positions,
        rotations=quats,
        scales=scales,
        opacities=opacities,
        sh_coeffs=sh,
        features=features,
    )


def filter_low_opacity(cloud: GaussianCloud, threshold: float) -> GaussianCloud:
    """Keep exactly the primitives with opacity >= threshold, order preserved."""
    if not (0.0 <= threshold < 1.0):
        raise ValueError("threshold must lie in [0, 1)")
    keep = np.flatnonzero(cloud.opacities >= threshold)
    return cloud.take(keep)


def normalize_scene(
    points: np.ndarray,
    cameras: Sequence["_camera_mod.Camera"],
    camera_scale: float = 1.4,
):
    """Center the point bounding box at the origin and scale into [-1, 1]^3.

    Camera positions undergo the same translation + uniform scale and are
    then multiplied by camera_scale; rotations and intrinsics are unchanged.

    Returns (points', [cameras']).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError("points must be (M, 3) with M >= 1")
    if len(cameras) < 1:
        raise ValueError("at least one camera is required")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float(np.max(0.5 * (hi - lo)))
    if scale <= 0.0:
        raise ValueError("degenerate point set: zero extent")
    out_pts = (pts - center) / scale

    out_cams = []
    for cam in cameras:
        c = camera_scale * (cam.center() - center) / scale
        out_cams.append(replace(cam, t=-cam.R @ c))
    return out_pts, out_cams


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z); shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def covariance_from(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """3x3 covariance R(q) diag(s^2) R(q)^T from a unit quaternion and scale."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if q.shape != (4,) or s.shape != (3,):
        raise ValueError("covariance_from expects q (4,) and s (3,)")
    rot = quaternion_to_matrix(q)
    return rot @ np.diag(s * s) @ rot.T


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 degree-3 SH basis functions at unit directions.

    dirs (..., 3) -> (..., 16).
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty(d.shape[:-1] + (SH_COEFFS,), dtype=np.float64)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * xy
    out[..., 5] = SH_C2[1] * yz
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * xz
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = SH_C3[1] * xy * z
    out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """Partial derivatives of the 16 basis functions w.r.t. (x, y, z).

    dirs (..., 3) -> (..., 16, 3).
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    g = np.zeros(d.shape[:-1] + (SH_COEFFS, 3), dtype=np.float64)
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    g[..., 4, 0] = SH_C2[0] * y
    g[..., 4, 1] = SH_C2[0] * x
    g[..., 5, 1] = SH_C2[1] * z
    g[..., 5, 2] = SH_C2[1] * y
    g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
    g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
    g[..., 6, 2] = SH_C2[2] * (4.0 * z)
    g[..., 7, 0] = SH_C2[3] * z
    g[..., 7, 2] = SH_C2[3] * x
    g[..., 8, 0] = SH_C2[4] * (2.0 * x)
    g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
    g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    g[..., 9, 2] = zero
    g[..., 10, 0] = SH_C3[1] * y * z
    g[..., 10, 1] = SH_C3[1] * x * z
    g[..., 10, 2] = SH_C3[1] * x * y
    g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
    g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[..., 11, 2] = SH_C3[2] * (8.0 * y * z)
    g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
    g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
    g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
    g[..., 13, 2] = SH_C3[4] * (8.0 * x * z)
    g[..., 14, 0] = SH_C3[5] * (2.0 * x * z)
    g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
    g[..., 14, 2] = SH_C3[5] * (xx - yy)
    g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return g


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent color 0.5 + sum_lm coeffs[lm] * Y_lm(view_dir).

    coeffs (16, 3), view_dir unit (3,) -> rgb (3,), unclamped (clamping to
    [0, 1] is a render-stage decision).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (SH_COEFFS, 3):
        raise ValueError("coeffs must be (16, 3)")
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64))
    return 0.5 + basis @ coeffs


# 28-way body-part taxonomy; class 0 is the background.
CLASS_NAMES = (
    "Background", "Apparel", "Face_Neck", "Hair", "Left_Foot", "Left_Hand",
    "Left_Lower_Arm", "Left_Lower_Leg", "Left_Shoe", "Left_Sock",
    "Left_Upper_Arm", "Left_Upper_Leg", "Lower_Clothing", "Right_Foot",
    "Right_Hand", "Right_Lower_Arm", "Right_Lower_Leg", "Right_Shoe",
    "Right_Sock", "Right_Upper_Arm", "Right_Upper_Leg", "Torso",
    "Upper_Clothing", "Lower_Lip", "Upper_Lip", "Lower_Teeth", "Upper_Teeth",
    "Tongue",
)
NUM_CLASSES = len(CLASS_NAMES)


def _default_colors() -> tuple:
    colors = [(0, 0, 0)]  # Background stays black
    for i in range(1, NUM_CLASSES):
        hue = (i * 0.6180339887498949) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.72, 0.95)
        colors.append((int(round(r * 255)), int(round(g * 255)), int(round(b * 255))))
    return tuple(colors)


@dataclass(frozen=True)
class ClassPalette:
    """The 28-entry (class_id, class_name, rgb) palette; ids are 0..27 with no gaps."""

    entries: tuple

    def __post_init__(self) -> None:
        if len(self.entries) != NUM_CLASSES:
            raise ValueError(f"palette must have exactly {NUM_CLASSES} entries")
        for i, (cid, name, rgb) in enumerate(self.entries):
            if cid != i:
                raise ValueError("class ids must be 0..27 with no gaps")
            if name != CLASS_NAMES[i]:
                raise ValueError(f"class {i} must be named {CLASS_NAMES[i]!r}")
            if len(rgb) != 3:
                raise ValueError("palette colors must be rgb triples")

    @staticmethod
    def default() -> "ClassPalette":
        colors = _default_colors()
        return ClassPalette(entries=tuple(
            (i, CLASS_NAMES[i], colors[i]) for i in range(NUM_CLASSES)
        ))

    def color_array(self) -> np.ndarray:
        """(28, 3) uint8 color lookup table indexed by class id."""
        return np.array([rgb for _, _, rgb in self.entries], dtype=np.uint8)

    def name_of(self, class_id: int) -> str:
        return self.entries[class_id][1]
