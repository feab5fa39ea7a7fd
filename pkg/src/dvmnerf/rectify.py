"""Stereo rectification for arbitrary camera pair configurations.

The reference camera ``k`` defines the rectified frame. The new x axis runs along
the baseline, the new y axis is perpendicular to both the baseline and the
reference viewing direction, and probe vectors expressed in the reference frame
decide whether the pair is vertical and which way each axis should point. Both
rectified cameras keep their optic centres and share one rotation and one
intrinsics matrix, so the warp of each source image is the homography
``(K~ R~) (K R)^-1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (CoincidentCentres, DegenerateBaseline, DimensionMismatch,
                     SingularIntrinsics, SingularWarp)
from .geometry import (Camera, CameraIntrinsics, CameraPose, optic_centre,
                       pixel_grid, unproject)

log = logging.getLogger(__name__)

SIGN_EPS = 1e-12

# probe vectors in the reference camera frame
A1 = np.array([1.0, 1.0, 0.0])
A2 = np.array([-1.0, 1.0, 0.0])
A3 = np.array([1.0, 0.0, 0.0])
A4 = np.array([0.0, 1.0, 0.0])


def _sgn(x: float) -> float:
    # sgn(0) := +1 keeps the configuration tests total
    return -1.0 if x < -SIGN_EPS else 1.0


def _probe(a: np.ndarray, pose: CameraPose) -> np.ndarray:
    return pose.rotation.T @ a


@dataclass(frozen=True)
class RectifyingBasis:
    v_x: np.ndarray
    v_y: np.ndarray
    v_z: np.ndarray
    vertical: bool
    swap_applied: bool
    sign_x: float
    sign_y: float

    @property
    def rotation(self) -> np.ndarray:
        return np.stack([self.v_x, self.v_y, self.v_z])


@dataclass(frozen=True)
class WarpPair:
    w_k: np.ndarray
    w_k2: np.ndarray
    intrinsics: CameraIntrinsics
    rotation: np.ndarray
    pose_k: CameraPose
    pose_k2: CameraPose
    basis: RectifyingBasis

    @property
    def camera_k(self) -> Camera:
        return Camera(self.intrinsics, self.pose_k)

    @property
    def camera_k2(self) -> Camera:
        return Camera(self.intrinsics, self.pose_k2)

    def warp_for(self, side: str) -> np.ndarray:
        return self.w_k if side == "k" else self.w_k2


@dataclass
class RectifiedPair:
    warp: WarpPair
    images: tuple[np.ndarray, np.ndarray]
    image_masks: tuple[np.ndarray, np.ndarray]
    depths: tuple[np.ndarray, np.ndarray]
    coords: tuple[np.ndarray, np.ndarray]
    depth_masks: tuple[np.ndarray, np.ndarray]


def baseline_axes(pose_k: CameraPose, pose_k2: CameraPose):
    """Unit baseline axis ``o_k - o_k'`` and its cross product with the reference viewing direction."""
    baseline = optic_centre(pose_k) - optic_centre(pose_k2)
    norm = np.linalg.norm(baseline)
    if norm <= 1e-9:
        raise CoincidentCentres("optic centres coincide; the pair has no baseline")
    v_x = baseline / norm
    v_y = np.cross(v_x, pose_k.forward)
    ny = np.linalg.norm(v_y)
    if ny <= 1e-9:
        raise DegenerateBaseline("baseline is parallel to the reference viewing direction")
    return v_x, v_y / ny


def detect_vertical(v_x: np.ndarray, pose_k: CameraPose) -> tuple[float, bool]:
    """Vertical-configuration score ``s`` in {0, 2} and whether the axes should swap."""
    s = abs(_sgn(_probe(A1, pose_k) @ v_x) + _sgn(_probe(A2, pose_k) @ v_x))
    return s, s != 0


def orient_axes(v_x: np.ndarray, v_y: np.ndarray, pose_k: CameraPose):
    """Flip each axis so that it agrees with the reference camera's x and y axes.

    Returns ``(v_x, v_y, sign_x, sign_y)``.
    """
    sign_x = _sgn(_probe(A3, pose_k) @ v_x)
    sign_y = _sgn(_probe(A4, pose_k) @ v_y)
    return v_x * sign_x, v_y * sign_y, sign_x, sign_y


def rectifying_basis(pose_k: CameraPose, pose_k2: CameraPose, swap_vertical: bool = False) -> RectifyingBasis:
    """Shared rectified rotation for a camera pair.

    With ``swap_vertical=True`` a vertical pair has its axes exchanged so the
    rectified images stay upright; epipolar lines then run along columns.
    The default keeps the baseline on the x axis for every configuration, so
    epipolar lines are always rows and vertical pairs come out turned by a
    quarter turn.
    """
    v_x, v_y = baseline_axes(pose_k, pose_k2)
    _, vertical = detect_vertical(v_x, pose_k)
    swap = vertical and swap_vertical
    if swap:
        v_x, v_y = v_y, v_x
    if vertical and not swap:
        sign_x = _sgn(_probe(A4, pose_k) @ v_x)
        v_x = v_x * sign_x
        v_y = np.cross(v_x, pose_k.forward)
        v_y /= np.linalg.norm(v_y)
        # keep the rectified camera facing the same half-space as the original
        sign_y = _sgn(np.cross(v_x, v_y) @ pose_k.forward)
        v_y = v_y * sign_y
    else:
        v_x, v_y, sign_x, sign_y = orient_axes(v_x, v_y, pose_k)
    v_z = np.cross(v_x, v_y)
    return RectifyingBasis(v_x, v_y, v_z, vertical, swap, sign_x, sign_y)


def _warp_matrix(k_new: np.ndarray, r_new: np.ndarray, cam: Camera) -> np.ndarray:
    src = cam.intrinsics.matrix @ cam.pose.rotation
    if abs(np.linalg.det(src)) < 1e-12:
        raise SingularIntrinsics("source projection matrix is singular")
    return (k_new @ r_new) @ np.linalg.inv(src)


def _apply_h(h: np.ndarray, pts: np.ndarray):
    hom = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ h.T
    return hom[..., :2] / hom[..., 2:3], hom[..., 2]


def _content_frame(homographies, cameras, width, height, max_scale):
    """Raster size and principal-point shift that fit the warped source footprints."""
    corners = []
    for h, cam in zip(homographies, cameras):
        w, hh = cam.intrinsics.width, cam.intrinsics.height
        # sample the border densely: corners alone miss curvature when w flips sign
        s = np.linspace(0.0, 1.0, 17)
        border = np.concatenate([
            np.stack([s * w, np.zeros_like(s)], -1), np.stack([s * w, np.full_like(s, hh)], -1),
            np.stack([np.zeros_like(s), s * hh], -1), np.stack([np.full_like(s, w), s * hh], -1)])
        xy, wz = _apply_h(h, border)
        corners.append(xy[wz > 1e-9])
    pts = np.concatenate(corners) if corners else np.zeros((0, 2))
    if len(pts) == 0:
        return width, height, 0.0, 0.0
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    max_w, max_h = int(np.ceil(max_scale * width)), int(np.ceil(max_scale * height))
    out_w = int(np.clip(np.ceil(hi[0] - lo[0] - 1e-9), width, max_w))
    out_h = int(np.clip(np.ceil(hi[1] - lo[1] - 1e-9), height, max_h))
    shift_x = 0.5 * out_w - 0.5 * (lo[0] + hi[0])
    shift_y = 0.5 * out_h - 0.5 * (lo[1] + hi[1])
    return out_w, out_h, shift_x, shift_y


def build_warp_pair(cam_k: Camera, cam_k2: Camera, *, swap_vertical: bool = False,
                    fit_content: bool = True, max_scale: float = 4.0) -> WarpPair:
    """Rectifying homographies and rectified cameras for a pair.

    The shared intrinsics are the mean of the two inputs. With ``fit_content``
    the raster grows (up to ``max_scale`` times the larger source) and the
    principal point moves so both warped footprints stay in frame; the shift is
    common to both cameras and does not disturb row alignment.
    """
    basis = rectifying_basis(cam_k.pose, cam_k2.pose, swap_vertical)
    r_new = basis.rotation
    ka, kb = cam_k.intrinsics, cam_k2.intrinsics
    width, height = max(ka.width, kb.width), max(ka.height, kb.height)
    k_mean = CameraIntrinsics(0.5 * (ka.fx + kb.fx), 0.5 * (ka.fy + kb.fy),
                              0.5 * (ka.cx + kb.cx), 0.5 * (ka.cy + kb.cy), width, height)
    hs = [_warp_matrix(k_mean.matrix, r_new, c) for c in (cam_k, cam_k2)]
    if fit_content:
        out_w, out_h, dx, dy = _content_frame(hs, (cam_k, cam_k2), width, height, max_scale)
        k_mean = k_mean.replace(cx=k_mean.cx + dx, cy=k_mean.cy + dy, width=out_w, height=out_h)
        hs = [_warp_matrix(k_mean.matrix, r_new, c) for c in (cam_k, cam_k2)]
    for h in hs:
        if abs(np.linalg.det(h)) <= 1e-12:
            raise SingularWarp("rectifying homography is singular")
    pose_k = CameraPose.from_centre(r_new, cam_k.centre)
    pose_k2 = CameraPose.from_centre(r_new, cam_k2.centre)
    return WarpPair(hs[0], hs[1], k_mean, r_new, pose_k, pose_k2, basis)


def _source_coords(w: np.ndarray, out_size):
    out_w, out_h = out_size
    if abs(np.linalg.det(w)) <= 1e-12:
        raise SingularWarp("warp is not invertible")
    grid = pixel_grid(out_w, out_h)
    src, wz = _apply_h(np.linalg.inv(w), grid)
    return src, wz


def warp_image(image: np.ndarray, w: np.ndarray, out_size, mask: np.ndarray | None = None):
    """Inverse-map ``image`` through homography ``w`` with bilinear sampling.

    ``out_size`` is ``(width, height)``. Returns the warped image and a boolean
    mask that is False wherever the sample falls outside the source footprint
    or touches an invalid source pixel.
    """
    image = np.asarray(image, dtype=float)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, wd = image.shape[:2]
    src, wz = _source_coords(w, out_size)
    x = src[..., 0] - 0.5
    y = src[..., 1] - 0.5
    inside = (wz > 0) & (x >= -0.5) & (x <= wd - 0.5) & (y >= -0.5) & (y <= h - 0.5)
    x = np.where(inside, np.clip(x, 0.0, wd - 1.0), 0.0)
    y = np.where(inside, np.clip(y, 0.0, h - 1.0), 0.0)
    x0 = np.minimum(np.floor(x).astype(int), max(wd - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, wd - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    out = ((1 - fx) * (1 - fy) * image[y0, x0] + fx * (1 - fy) * image[y0, x1]
           + (1 - fx) * fy * image[y1, x0] + fx * fy * image[y1, x1])
    valid = inside
    if mask is not None:
        m = np.asarray(mask, dtype=float)[..., None]
        mw = ((1 - fx) * (1 - fy) * m[y0, x0] + fx * (1 - fy) * m[y0, x1]
              + (1 - fx) * fy * m[y1, x0] + fx * fy * m[y1, x1])[..., 0]
        valid = valid & (mw > 1.0 - 1e-9)
    out[~valid] = 0.0
    if squeeze:
        out = out[..., 0]
    return out, valid


def lift_depth(depth: np.ndarray, camera: Camera, mask: np.ndarray | None = None):
    """Per-pixel world coordinates of a depth map; returns ``(coords, valid)``."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != camera.shape:
        raise DimensionMismatch(f"depth map {depth.shape} does not match camera raster {camera.shape}")
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    coords = np.zeros(depth.shape + (3,))
    pixels = pixel_grid(camera.intrinsics.width, camera.intrinsics.height)
    if valid.any():
        coords[valid] = unproject(pixels[valid], depth[valid], camera.pose, camera.intrinsics)
    return coords, valid


def warp_depth(depth: np.ndarray, camera: Camera, wp: WarpPair, side: str = "k",
               mask: np.ndarray | None = None):
    """Warp a depth map into the rectified frame through its 3D coordinate map.

    The map is lifted with the original camera, resampled with nearest-neighbour
    inverse mapping (3D points are copied, never blended) and converted back to
    distances from the rectified optic centre. Returns
    ``(depth, coords, valid)`` on the rectified raster.
    """
    if side not in ("k", "k2"):
        raise ValueError("side must be 'k' or 'k2'")
    coords, valid = lift_depth(depth, camera, mask)
    k_new = wp.intrinsics
    src, wz = _source_coords(wp.warp_for(side), (k_new.width, k_new.height))
    col = np.floor(src[..., 0])
    row = np.floor(src[..., 1])
    h, w = depth.shape
    inside = (wz > 0) & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    col = np.where(inside, col, 0).astype(int)
    row = np.where(inside, row, 0).astype(int)
    out_valid = inside & valid[row, col]
    out_coords = np.zeros(k_new.shape + (3,))
    out_coords[out_valid] = coords[row[out_valid], col[out_valid]]
    centre = (wp.pose_k if side == "k" else wp.pose_k2).centre
    out_depth = np.zeros(k_new.shape)
    out_depth[out_valid] = np.linalg.norm(out_coords[out_valid] - centre, axis=-1)
    return out_depth, out_coords, out_valid


def rectify_pair(cam_k: Camera, image_k, depth_k, cam_k2: Camera, image_k2, depth_k2, *,
                 mask_k=None, mask_k2=None, depth_mask_k=None, depth_mask_k2=None,
                 **warp_kwargs) -> RectifiedPair:
    """Rectify two views together with their depth maps."""
    wp = build_warp_pair(cam_k, cam_k2, **warp_kwargs)
    size = (wp.intrinsics.width, wp.intrinsics.height)
    img_a, m_a = warp_image(image_k, wp.w_k, size, mask_k)
    img_b, m_b = warp_image(image_k2, wp.w_k2, size, mask_k2)
    d_a, c_a, dm_a = warp_depth(depth_k, cam_k, wp, "k", depth_mask_k)
    d_b, c_b, dm_b = warp_depth(depth_k2, cam_k2, wp, "k2", depth_mask_k2)
    return RectifiedPair(wp, (img_a, img_b), (m_a, m_b), (d_a, d_b), (c_a, c_b), (dm_a, dm_b))
