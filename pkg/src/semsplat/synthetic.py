"""Deterministic synthetic scenes for demos, gradient checks and fitting tests.

Everything here is seed-driven: random clouds for oracle/gradient checks,
a textured Gaussian sphere for the photometric fitting experiment, and a
two-blob scene with analytic sphere geometry for the semantic-field
experiment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .camera import Camera
from .core import SH_C0, GaussianCloud, NUM_CLASSES
from .rasterizer import RenderSettings, render


def orbit_camera(azimuth_deg: float, elevation_deg: float = 15.0, distance: float = 2.6,
                 width: int = 64, height: int = 64, focal_scale: float = 1.4) -> Camera:
    """Camera on an orbit around the origin, looking at it."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye = distance * np.array([
        np.cos(el) * np.sin(az),
        np.sin(el),
        -np.cos(el) * np.cos(az),
    ])
    return Camera.look_at(eye, (0.0, 0.0, 0.0), focal=focal_scale * min(width, height),
                          width=width, height=height)


def random_camera(rng: np.random.Generator, width: int = 64, height: int = 64) -> Camera:
    return orbit_camera(
        azimuth_deg=float(rng.uniform(0.0, 360.0)),
        elevation_deg=float(rng.uniform(-35.0, 35.0)),
        distance=float(rng.uniform(2.2, 3.2)),
        width=width, height=height,
        focal_scale=float(rng.uniform(1.1, 1.7)),
    )


def random_cloud(rng: np.random.Generator, count: int, feature_dim: int = 8,
                 extent: float = 0.7, scale_range: Tuple[float, float] = (0.01, 0.05),
                 opacity_range: Tuple[float, float] = (0.15, 0.9),
                 sh_rest_scale: float = 0.02) -> GaussianCloud:
    """Random cloud kept away from every non-smooth boundary of the renderer.

    DC colors land in [0.25, 0.75] with bounded higher-order SH, so rendered
    colors sit strictly inside the [0, 1] clamp; opacities stay below the
    0.99 fragment clamp; per-axis scales keep a guaranteed gap so the
    minimum-scale normal axis never switches under small perturbations.
    All of that keeps finite-difference checks honest.
    """
    quats = rng.standard_normal((count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((count, 16, 3))
    sh[:, 0, :] = (rng.uniform(0.25, 0.75, (count, 3)) - 0.5) / SH_C0
    sh[:, 1:, :] = rng.uniform(-sh_rest_scale, sh_rest_scale, (count, 15, 3))
    lo, hi = scale_range
    gap = 0.05 * (hi - lo)
    scales = np.sort(rng.uniform(lo, hi - 2.0 * gap, (count, 3)), axis=1)
    scales += gap * np.arange(3)
    return GaussianCloud(
        positions=rng.uniform(-extent, extent, (count, 3)),
        rotations=quats,
        scales=scales,
        opacities=rng.uniform(opacity_range[0], opacity_range[1], count),
        sh_coeffs=sh,
        features=rng.standard_normal((count, feature_dim)),
    )


def random_scene(seed: int, count: int = 64, width: int = 64, height: int = 64,
                 feature_dim: int = 8) -> Tuple[GaussianCloud, Camera]:
    rng = np.random.default_rng(seed)
    return random_cloud(rng, count, feature_dim=feature_dim), random_camera(rng, width, height)


def single_splat_scene(width: int = 64, height: int = 64) -> Tuple[GaussianCloud, Camera]:
    """One mid-gray splat at the origin; the builtin demo scene."""
    sh = np.zeros((1, 16, 3))
    sh[0, 0, :] = (np.array([0.8, 0.35, 0.25]) - 0.5) / SH_C0
    cloud = GaussianCloud(
        positions=np.array([[0.0, 0.0, 0.0]]),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        scales=np.array([[0.15, 0.1, 0.05]]),
        opacities=np.array([0.9]),
        sh_coeffs=sh,
        features=np.zeros((1, 0)),
    )
    return cloud, orbit_camera(30.0, width=width, height=height)


def _fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    y = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(1.0 - y * y, 0.0))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def textured_sphere_cloud(count: int = 512, radius: float = 0.25, seed: int = 0) -> GaussianCloud:
    """Evenly sampled sphere shell with smoothly varying surface color.

    The radius keeps neighbor spacing within a couple of activated splat
    widths so the rendered surface is continuous rather than speckled.
    """
    rng = np.random.default_rng(seed)
    pos = radius * _fibonacci_sphere(count)
    rgb = np.stack([
        0.5 + 0.32 * np.sin(4.0 * pos[:, 0] / radius + 1.0),
        0.5 + 0.32 * np.sin(5.0 * pos[:, 1] / radius),
        0.5 + 0.32 * np.cos(3.0 * pos[:, 2] / radius + 0.5),
    ], axis=1)
    sh = np.zeros((count, 16, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    quats = rng.standard_normal((count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianCloud(
        positions=pos,
        rotations=quats,
        scales=rng.uniform(0.013, 0.019, (count, 3)),
        opacities=np.full(count, 0.92),
        sh_coeffs=sh,
        features=np.zeros((count, 0)),
    )


def perturbed_init(cloud: GaussianCloud, seed: int = 1,
                   position_jitter: float = 0.008) -> GaussianCloud:
    """Fitting start point: jittered positions, gray color, flat attributes."""
    rng = np.random.default_rng(seed)
    n = cloud.count
    sh = np.zeros_like(cloud.sh_coeffs)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        positions=cloud.positions + position_jitter * rng.standard_normal((n, 3)),
        rotations=quats,
        scales=np.full((n, 3), 0.012),
        opacities=np.full(n, 0.5),
        sh_coeffs=sh,
        features=cloud.features.copy(),
    )


# Fitting a 4-view scene with the full 45 view-dependent SH coefficients
# free overfits the view directions badly; the experiment trains the
# diffuse set.
SPHERE_FIT_TRAINABLE = ("positions", "rotations", "scales", "opacities", "sh_dc")
SPHERE_FIT_LR_SCALE = {"positions": 0.3}


@dataclass
class SphereFitScene:
    """Photometric fitting experiment: GT renders from 4 orbits plus a held-out view."""

    gt_cloud: GaussianCloud
    init_cloud: GaussianCloud
    train_cameras: List[Camera]
    holdout_camera: Camera
    train_images: List[np.ndarray]
    train_masks: List[np.ndarray]
    holdout_image: np.ndarray
    settings: RenderSettings


def _sphere_camera(azimuth: float, elevation: float, size: int) -> Camera:
    return orbit_camera(azimuth, elevation_deg=elevation, distance=2.0,
                        width=size, height=size, focal_scale=2.6)


def sphere_fit_scene(seed: int = 0, count: int = 512, size: int = 64) -> SphereFitScene:
    gt = textured_sphere_cloud(count=count, seed=seed)
    settings = RenderSettings()
    train_cams = [_sphere_camera(az, el, size)
                  for az, el in ((0.0, 10.0), (90.0, 25.0), (180.0, 10.0), (270.0, 25.0))]
    holdout = _sphere_camera(45.0, 18.0, size)
    images, masks = [], []
    for cam in train_cams:
        out = render(gt, cam, settings)
        images.append(out.color)
        masks.append((out.alpha >= 0.5).astype(np.float64))
    holdout_image = render(gt, holdout, settings).color
    return SphereFitScene(
        gt_cloud=gt,
        init_cloud=perturbed_init(gt, seed=seed + 1),
        train_cameras=train_cams,
        holdout_camera=holdout,
        train_images=images,
        train_masks=masks,
        holdout_image=holdout_image,
        settings=settings,
    )


# Semantic two-blob scene: class ids for the left and right spheres.
BLOB_CLASS_A = 3
BLOB_CLASS_B = 7
_BLOB_CENTERS = (np.array([-0.5, 0.0, 0.0]), np.array([0.5, 0.0, 0.0]))
_BLOB_RADIUS = 0.42


@dataclass
class BlobScene:
    """Two single-class Gaussian blobs with analytic sphere geometry."""

    cloud: GaussianCloud            # geometry fixed, features to be fitted
    gt_features: np.ndarray         # (N, 2) one-hot per blob
    train_cameras: List[Camera]
    holdout_camera: Camera
    settings: RenderSettings

    def classifier(self) -> Tuple[np.ndarray, np.ndarray]:
        """28-way head mapping feature channel 0 -> class A, 1 -> class B."""
        weight = np.zeros((NUM_CLASSES, 2))
        weight[BLOB_CLASS_A, 0] = 10.0
        weight[BLOB_CLASS_B, 1] = 10.0
        return weight, np.zeros(NUM_CLASSES)


def _blob_cloud(seed: int, per_blob: int) -> Tuple[GaussianCloud, np.ndarray]:
    # Shell sits one splat width inside the analytic radius so the rendered
    # alpha-0.5 contour lands on the sphere (calibrated on the holdout view).
    splat_scale = 0.05
    shell = _BLOB_RADIUS - 2.0 * splat_scale
    rng = np.random.default_rng(seed)
    positions, features = [], []
    for b, center in enumerate(_BLOB_CENTERS):
        surface = center + shell * _fibonacci_sphere(per_blob)
        interior = center + rng.uniform(-0.9, 0.9, (per_blob, 3)) * shell
        interior = interior[np.linalg.norm(interior - center, axis=1) < shell * 0.92]
        pts = np.concatenate([surface, interior], axis=0)
        positions.append(pts)
        onehot = np.zeros((pts.shape[0], 2))
        onehot[:, b] = 1.0
        features.append(onehot)
    pos = np.concatenate(positions, axis=0)
    feats = np.concatenate(features, axis=0)
    n = pos.shape[0]
    rgb = np.where(feats[:, :1] > 0.5, np.array([[0.85, 0.3, 0.25]]), np.array([[0.25, 0.4, 0.85]]))
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    cloud = GaussianCloud(
        positions=pos,
        rotations=quats,
        scales=np.full((n, 3), splat_scale),
        opacities=np.full(n, 0.99),
        sh_coeffs=sh,
        features=0.05 * rng.standard_normal((n, 2)),
    )
    return cloud, feats


def analytic_blob_labels(camera: Camera) -> np.ndarray:
    """Ray-cast the two analytic spheres: nearest hit wins, else Background."""
    h, w = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64) + 0.5,
                         np.arange(h, dtype=np.float64) + 0.5)
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs = pix @ np.linalg.inv(camera.K).T @ camera.R
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = camera.center()

    labels = np.zeros(h * w, dtype=np.int64)
    best_t = np.full(h * w, np.inf)
    for cls, center in zip((BLOB_CLASS_A, BLOB_CLASS_B), _BLOB_CENTERS):
        oc = center - origin
        proj = dirs @ oc
        closest2 = np.sum(oc * oc) - proj * proj
        hit = (closest2 <= _BLOB_RADIUS ** 2) & (proj > 0.0)
        t_hit = proj - np.sqrt(np.maximum(_BLOB_RADIUS ** 2 - closest2, 0.0))
        better = hit & (t_hit < best_t)
        labels[better] = cls
        best_t[better] = t_hit[better]
    return labels.reshape(h, w)


def analytic_blob_features(camera: Camera) -> np.ndarray:
    """One-hot (H, W, 2) target feature map; background pixels stay zero."""
    labels = analytic_blob_labels(camera)
    target = np.zeros(labels.shape + (2,))
    target[:, :, 0] = labels == BLOB_CLASS_A
    target[:, :, 1] = labels == BLOB_CLASS_B
    return target


def blob_scene(seed: int = 0, per_blob: int = 220, size: int = 64) -> BlobScene:
    cloud, gt_features = _blob_cloud(seed, per_blob)
    train_cams = [orbit_camera(az, elevation_deg=el, distance=2.4, width=size, height=size,
                               focal_scale=1.25)
                  for az, el in ((0.0, 8.0), (25.0, 20.0), (-25.0, -5.0), (12.0, -18.0))]
    holdout = orbit_camera(8.0, elevation_deg=12.0, distance=2.4, width=size, height=size,
                           focal_scale=1.25)
    return BlobScene(cloud=cloud, gt_features=gt_features, train_cameras=train_cams,
                     holdout_camera=holdout, settings=RenderSettings())
