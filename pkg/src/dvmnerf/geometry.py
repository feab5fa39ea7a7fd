"""Pinhole cameras, projection/unprojection and farthest point view selection.

Conventions used everywhere in the package:

* camera frame: x right, y down, z forward (the camera looks along +z);
* poses map world to camera, ``x_cam = R @ x_world + t``;
* a pixel ``(row, col)`` covers ``[col, col + 1) x [row, row + 1)`` so its
  centre sits at continuous coordinates ``(col + 0.5, row + 0.5)``;
* "depth" is the Euclidean distance from the optic centre along the pixel
  ray, never the camera-frame z coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (InvalidCount, MalformedMatrix, NonPositiveDepth,
                     PointAtOpticCentre, SingularIntrinsics, ValidationError)

ROTATION_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("width", "height"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise SingularIntrinsics(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image size must be at least 1x1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        """Raster shape as ``(height, width)``."""
        return (self.height, self.width)

    @classmethod
    def from_fov(cls, fov_x: float, width: int, height: int) -> "CameraIntrinsics":
        """Square-pixel intrinsics with the principal point at the image centre."""
        focal = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(focal, focal, 0.5 * width, 0.5 * height, width, height)

    def replace(self, **changes) -> "CameraIntrinsics":
        values = dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                      width=self.width, height=self.height)
        values.update(changes)
        return CameraIntrinsics(**values)


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise MalformedMatrix("pose contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ROTATION_TOL or abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise MalformedMatrix("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_centre(cls, rotation: np.ndarray, centre: np.ndarray) -> "CameraPose":
        rotation = np.asarray(rotation, dtype=float)
        return cls(rotation, -rotation @ np.asarray(centre, dtype=float))

    @property
    def centre(self) -> np.ndarray:
        return optic_centre(self)

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction (camera +z) in world coordinates."""
        return self.rotation[2].copy()

    def camera_to_world(self) -> np.ndarray:
        """4x4 camera-to-world matrix in the internal convention."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = self.centre
        return m

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True)
class Camera:
    """A pinhole view: intrinsics plus pose."""

    intrinsics: CameraIntrinsics
    pose: CameraPose

    @property
    def centre(self) -> np.ndarray:
        return self.pose.centre

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.shape

    def project(self, points):
        return project(points, self.pose, self.intrinsics)

    def unproject(self, pixels, depth):
        return unproject(pixels, depth, self.pose, self.intrinsics)

    def pixel_rays(self):
        """Ray origins and unit directions for every pixel centre, each ``(H, W, 3)``."""
        pixels = pixel_grid(self.intrinsics.width, self.intrinsics.height)
        dirs = ray_directions(pixels, self.pose, self.intrinsics)
        origins = np.broadcast_to(self.centre, dirs.shape).copy()
        return origins, dirs


def orthonormalize(rotation: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    """Project a nearly-rigid 3x3 matrix onto SO(3).

    Raises MalformedMatrix when the input is further than ``tol`` from a rotation.
    """
    m = np.asarray(rotation, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise MalformedMatrix(f"expected a finite 3x3 rotation, got shape {m.shape}")
    if np.max(np.abs(m.T @ m - np.eye(3))) > tol or abs(np.linalg.det(m) - 1.0) > tol:
        raise MalformedMatrix("matrix is not rigid within tolerance")
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose of a camera at ``eye`` looking at ``target`` with image-up close to ``up``."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValidationError("eye and target coincide")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up vector; any perpendicular will do
        right = np.cross(forward, [1.0, 0.0, 0.0])
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return CameraPose.from_centre(rotation, eye)


def optic_centre(pose: CameraPose) -> np.ndarray:
    """Centre of projection ``o = -R^T t``."""
    return -pose.rotation.T @ pose.translation


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Continuous coordinates of every pixel centre, shape ``(H, W, 2)`` as (u, v)."""
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([u, v], axis=-1)


def ray_directions(pixels, pose: CameraPose, k: CameraIntrinsics) -> np.ndarray:
    """Unit world-frame directions of the rays through ``pixels`` (..., 2)."""
    pixels = np.asarray(pixels, dtype=float)
    x = (pixels[..., 0] - k.cx) / k.fx
    y = (pixels[..., 1] - k.cy) / k.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    return d_cam @ pose.rotation


def project(points, pose: CameraPose, k: CameraIntrinsics):
    """Project world points ``(..., 3)``.

    Returns ``(pixels, depth)`` where ``pixels`` is ``(..., 2)`` and ``depth`` is the
    distance from the optic centre, negative for points behind the camera.
    """
    points = np.asarray(points, dtype=float)
    cam = points @ pose.rotation.T + pose.translation
    z = cam[..., 2]
    dist = np.linalg.norm(cam, axis=-1)
    if np.any(dist < 1e-12):
        raise PointAtOpticCentre("cannot project a point located at the optic centre")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[..., 0] / z + k.cx
        v = k.fy * cam[..., 1] / z + k.cy
    depth = np.where(z < 0, -dist, dist)
    return np.stack([u, v], axis=-1), depth


def unproject(pixels, depth, pose: CameraPose, k: CameraIntrinsics) -> np.ndarray:
    """World point on the ray through ``pixels`` at distance ``depth`` from the optic centre."""
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise NonPositiveDepth("depth must be strictly positive")
    dirs = ray_directions(pixels, pose, k)
    return optic_centre(pose) + dirs * depth[..., None]


def fps_select(positions, n: int, seed_index: int = 0) -> list[int]:
    """Greedy farthest point sampling over 3D positions.

    Starts from ``seed_index`` and repeatedly adds the point whose distance to the
    current selection is largest. Ties go to the lowest index, which makes the
    result deterministic and every shorter run a prefix of a longer one.
    """
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    total = len(pts)
    if not 1 <= n <= total:
        raise InvalidCount(f"cannot select {n} views out of {total}")
    if not 0 <= seed_index < total:
        raise InvalidCount(f"seed index {seed_index} outside [0, {total})")
    selected = [seed_index]
    min_dist = np.linalg.norm(pts - pts[seed_index], axis=1)
    min_dist[seed_index] = -np.inf
    while len(selected) < n:
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(pts - pts[nxt], axis=1))
        min_dist[selected] = -np.inf
    return selected


def camera_centres(cameras: Sequence[Camera]) -> np.ndarray:
    return np.stack([c.centre for c in cameras])
