"""Pinhole camera model and pixel/world transforms.

Covers unprojection of depth maps to world points (with an optional 3D
offset term), perspective point projection, per-pixel Plucker ray
embeddings and the EWA linearization that maps a 3D covariance to a 2D
screen-space covariance.

Conventions: world-to-camera is x_cam = R x + t, +z in front of the
camera, pixel (u, v) indexes column/row with rays cast through pixel
centers (u + 0.5, v + 0.5) unless half_pixel is disabled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

# EWA low-pass floor added to each diagonal entry of the projected
# covariance, in pixels^2.
LOW_PASS_FLOOR = 0.3


@dataclass(frozen=True)
class Camera:
    """Intrinsics K (3x3), world-to-camera rotation R and translation t, image size."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        K = np.ascontiguousarray(np.asarray(self.K, dtype=np.float64))
        R = np.ascontiguousarray(np.asarray(self.R, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.t, dtype=np.float64)).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise ValueError("K and R must be 3x3")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= K[0, 2] <= self.width and 0.0 <= K[1, 2] <= self.height):
            raise ValueError("principal point outside the image")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("R must be orthonormal with det +1")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.R.T @ self.t

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), *, focal: float, width: int, height: int) -> "Camera":
        """Camera at `eye` with +z toward `target` (x right, y along `up`-cross)."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("eye and target coincide")
        fwd = fwd / n
        right = np.cross(up, fwd)
        n = np.linalg.norm(right)
        if n < 1e-12:
            raise ValueError("up direction is parallel to the view direction")
        right = right / n
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        K = np.array([
            [focal, 0.0, width / 2.0],
            [0.0, focal, height / 2.0],
            [0.0, 0.0, 1.0],
        ])
        return Camera(K=K, R=R, t=-R @ eye, width=width, height=height)


def unproject(
    camera: Camera,
    depth: np.ndarray,
    offsets: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    *,
    half_pixel: bool = True,
    eq1_literal: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Lift masked pixels of a depth map to world points plus a 3D offset.

    The default reading applies the conventional camera-to-world transform
    R^T (K^-1 p D - t) + delta; with eq1_literal the translation is
    subtracted after the rotation, R^T K^-1 p D - t + delta.

    Args:
        depth: (H, W) camera-frame depth, strictly positive on the mask.
        offsets: optional (H, W, 3) world-space offsets, zero when omitted.
        mask: optional (H, W) booleans; all pixels when omitted.
        half_pixel: cast rays through pixel centers (u+0.5, v+0.5).

    Returns:
        (points (M, 3), flat row-major pixel indices (M,)).
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = camera.height, camera.width
    if depth.shape != (h, w):
        raise ValueError(f"depth has shape {depth.shape}, camera expects {(h, w)}")
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (h, w, 3):
            raise ValueError("offsets must be (H, W, 3)")
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ValueError("mask must be (H, W)")

    vv, uu = np.nonzero(mask)  # row-major pixel order
    d = depth[vv, uu]
    if np.any(d <= 0.0):
        raise ValueError("invalid depth: non-positive depth on masked pixel")

    shift = 0.5 if half_pixel else 0.0
    pix = np.stack([uu + shift, vv + shift, np.ones_like(d)], axis=1)
    rays = pix @ np.linalg.inv(camera.K).T * d[:, None]
    if eq1_literal:
        pts = rays @ camera.R - camera.t
    else:
        pts = (rays - camera.t) @ camera.R
    if offsets is not None:
        pts = pts + offsets[vv, uu]
    return pts, (vv * w + uu).astype(np.int64)


def project_point(camera: Camera, x) -> Tuple[float, float, float]:
    """Perspective-project a world point; returns (u, v, depth).

    Raises ValueError when the point sits at or behind the camera plane.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    xc = camera.R @ x + camera.t
    z = xc[2]
    if z <= 1e-8:
        raise ValueError("behind camera")
    u = camera.fx * xc[0] / z + camera.cx
    v = camera.fy * xc[1] / z + camera.cy
    return float(u), float(v), float(z)


def plucker_embedding(camera: Camera, *, half_pixel: bool = True) -> np.ndarray:
    """Per-pixel (direction, moment) ray encoding, (H, W, 6).

    Direction d is the unit world-space ray through the pixel center and the
    moment is o x d with o the camera center.
    """
    h, w = camera.height, camera.width
    shift = 0.5 if half_pixel else 0.0
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64) + shift,
                         np.arange(h, dtype=np.float64) + shift)
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    rays = pix @ np.linalg.inv(camera.K).T @ camera.R  # R^T applied per pixel
    d = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    o = camera.center()
    moment = np.cross(np.broadcast_to(o, d.shape), d)
    return np.concatenate([d, moment], axis=-1)


def projection_jacobian(camera: Camera, x_cam: np.ndarray) -> np.ndarray:
    """Jacobian of the pinhole projection at camera-frame points (..., 3) -> (..., 2, 3)."""
    x_cam = np.asarray(x_cam, dtype=np.float64)
    x, y, z = x_cam[..., 0], x_cam[..., 1], x_cam[..., 2]
    J = np.zeros(x_cam.shape[:-1] + (2, 3), dtype=np.float64)
    J[..., 0, 0] = camera.fx / z
    J[..., 0, 2] = -camera.fx * x / (z * z)
    J[..., 1, 1] = camera.fy / z
    J[..., 1, 2] = -camera.fy * y / (z * z)
    return J


def project_covariance(camera: Camera, mu, cov) -> Tuple[np.ndarray, np.ndarray, float]:
    """EWA projection of a 3D Gaussian to screen space.

    Returns (mean2d (2,), cov2d (2,2), depth); cov2d = J R cov R^T J^T plus a
    low-pass floor of 0.3 px^2 on the diagonal.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(3)
    cov = np.asarray(cov, dtype=np.float64).reshape(3, 3)
    u, v, z = project_point(camera, mu)
    xc = camera.R @ mu + camera.t
    J = projection_jacobian(camera, xc)
    W = J @ camera.R
    cov2d = W @ cov @ W.T + LOW_PASS_FLOOR * np.eye(2)
    cov2d = 0.5 * (cov2d + cov2d.T)
    return np.array([u, v]), cov2d, z
