"""In-between view synthesis from a rectified pair.

Both rectified views become coloured point clouds, which are projected into a
camera placed on the segment between the two optic centres. Points that land
on the same pixel are merged by keeping the one nearest to the new optic centre.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import binary_erosion, minimum_filter

from .errors import DimensionMismatch, NotRectified, ValidationError
from .geometry import Camera, CameraIntrinsics, CameraPose, pixel_grid, project, unproject
from .rectify import RectifiedPair

INVALID_COLOR = 1.0  # background white; masked out of training anyway
ALPHA_RETRIES = 16
ALPHA_CLAMP = (0.05, 0.95)
ROTATION_MATCH_TOL = 1e-9


@dataclass
class ColoredPointCloud:
    points: np.ndarray   # (N, 3)
    colors: np.ndarray   # (N, 3) in [0, 1]
    pixel_index: np.ndarray  # (N,) flat index of the source pixel
    source_centre: np.ndarray | None = None  # optic centre the points were observed from

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        self.pixel_index = np.asarray(self.pixel_index, dtype=np.int64).reshape(-1)
        if not (len(self.points) == len(self.colors) == len(self.pixel_index)):
            raise DimensionMismatch("point cloud arrays must have equal length")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "ColoredPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


@dataclass
class MorphResult:
    image: np.ndarray      # (H, W, 3)
    mask: np.ndarray       # (H, W) bool, True where a point landed
    depth: np.ndarray      # (H, W), 0 where invalid
    pose: CameraPose
    intrinsics: CameraIntrinsics
    alpha: float | None = None

    @property
    def camera(self) -> Camera:
        return Camera(self.intrinsics, self.pose)


@dataclass(frozen=True)
class PairFilterConfig:
    gamma: float = 6.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive")


class PairValidity(NamedTuple):
    valid: bool
    reason: str  # "ok", "too_far" or "singular"


def interpolate_pose(p_k: CameraPose, p_k2: CameraPose, alpha: float) -> CameraPose:
    """Pose on the segment between two rectified cameras sharing one rotation."""
    if np.max(np.abs(p_k.rotation - p_k2.rotation)) > ROTATION_MATCH_TOL:
        raise NotRectified("poses do not share a rotation; rectify the pair first")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return p_k
    if alpha == 1.0:
        return p_k2
    centre = (1.0 - alpha) * p_k.centre + alpha * p_k2.centre
    return CameraPose.from_centre(p_k.rotation, centre)


def to_point_cloud(image: np.ndarray, coords: np.ndarray, mask: np.ndarray | None = None,
                   coord_mask: np.ndarray | None = None, snap_to: Camera | None = None) -> ColoredPointCloud:
    """One coloured point per pixel that is valid in both the image and the coordinate map.

    With ``snap_to`` every point is moved onto the ray through its own pixel of
    that camera, keeping its distance from the optic centre. Nearest-neighbour
    depth warping leaves points up to a pixel off their ray; snapping makes a
    re-projection through the same camera land exactly on the source pixel.
    """
    image = np.asarray(image, dtype=float)
    coords = np.asarray(coords, dtype=float)
    if image.shape[:2] != coords.shape[:2]:
        raise DimensionMismatch(f"image {image.shape[:2]} and coordinate map {coords.shape[:2]} differ")
    valid = np.all(np.isfinite(coords), axis=-1)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if coord_mask is not None:
        valid &= np.asarray(coord_mask, dtype=bool)
    idx = np.flatnonzero(valid)
    pts = coords.reshape(-1, 3)[idx]
    if snap_to is not None and len(idx):
        h, w = image.shape[:2]
        if snap_to.shape != (h, w):
            raise DimensionMismatch("snapping camera raster does not match the image")
        dist = np.linalg.norm(pts - snap_to.centre, axis=-1)
        keep = dist > 0
        idx, pts, dist = idx[keep], pts[keep], dist[keep]
        pixels = pixel_grid(w, h).reshape(-1, 2)[idx]
        pts = unproject(pixels, dist, snap_to.pose, snap_to.intrinsics)
    colors = image.reshape(-1, image.shape[-1] if image.ndim == 3 else 1)[idx]
    centre = snap_to.centre if snap_to is not None else None
    return ColoredPointCloud(pts, colors[:, :3], idx, centre)


def fuse_project(x_k: ColoredPointCloud, x_k2: ColoredPointCloud, pose: CameraPose,
                 intrinsics: CameraIntrinsics, alpha: float | None = None,
                 view_bias: float = 0.0) -> MorphResult:
    """Project two clouds into one camera and merge collisions by coalescence.

    Among points landing on the same pixel the one nearest to the optic centre
    wins; exact ties go to the lower source pixel index, then to cloud ``k``.
    When ``alpha`` is given and ``view_bias > 0`` each distance is scaled by
    ``1 + view_bias * w`` with ``w = alpha`` for cloud ``k`` and ``1 - alpha``
    for cloud ``k'``, so near-coincident surface samples resolve in favour of
    the source camera closer to the new viewpoint. At ``alpha = 0.5`` this is
    plain nearest-point coalescence.

    At ``alpha`` exactly 0 or 1 the new camera is a source camera, whose own
    observation is authoritative: any point of the other cloud in front of it
    would sit in space that camera saw through. Only the coincident cloud is
    projected there.
    """
    if alpha == 0.0:
        x_k2 = ColoredPointCloud.empty()
    elif alpha == 1.0:
        x_k = ColoredPointCloud.empty()
    h, w = intrinsics.height, intrinsics.width
    image = np.full((h, w, 3), INVALID_COLOR)
    depth = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    result = MorphResult(image, mask, depth, pose, intrinsics, alpha)
    pts = np.concatenate([x_k.points, x_k2.points])
    if len(pts) == 0:
        return result
    cols = np.concatenate([x_k.colors, x_k2.colors])
    src = np.concatenate([x_k.pixel_index, x_k2.pixel_index])
    cloud = np.concatenate([np.zeros(len(x_k), dtype=np.int64), np.ones(len(x_k2), dtype=np.int64)])

    cam = pts @ pose.rotation.T + pose.translation
    dist = np.linalg.norm(cam, axis=-1)
    front = (cam[:, 2] > 0) & (dist > 1e-12)
    pts, cols, src, cloud, dist = pts[front], cols[front], src[front], cloud[front], dist[front]
    if len(pts) == 0:
        return result
    pix, _ = project(pts, pose, intrinsics)
    col = np.floor(pix[:, 0])
    row = np.floor(pix[:, 1])
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    col, row = col[inside].astype(np.int64), row[inside].astype(np.int64)
    cols, src, cloud, dist = cols[inside], src[inside], cloud[inside], dist[inside]
    if len(dist) == 0:
        return result

    key = dist
    if alpha is not None and view_bias > 0:
        key = dist * (1.0 + view_bias * np.where(cloud == 0, alpha, 1.0 - alpha))
    flat = row * w + col
    order = np.lexsort((cloud, src, key, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]
    target = flat[win]
    image.reshape(-1, 3)[target] = cols[win]
    depth.reshape(-1)[target] = dist[win]
    mask.reshape(-1)[target] = True
    return result


def clean_mask(mask: np.ndarray, depth: np.ndarray, leak_tolerance: float | None = 0.1,
               erode: int = 1) -> np.ndarray:
    """Drop morph pixels that are unreliable as training targets.

    A pixel whose depth exceeds the nearest depth in its 3x3 neighbourhood by
    more than ``leak_tolerance`` (relative) shows a point seen through a hole in
    a nearer surface. Eroding the mask by ``erode`` pixels removes the
    silhouette ring, where a projected point and the pixel-centre ray disagree
    about coverage.
    """
    keep = np.asarray(mask, dtype=bool).copy()
    if leak_tolerance is not None and keep.any():
        d = np.where(keep, depth, np.inf)
        nearest = minimum_filter(d, size=3, mode="constant", cval=np.inf)
        keep &= depth <= nearest * (1.0 + leak_tolerance)
    if erode > 0 and keep.any():
        keep &= binary_erosion(keep, iterations=erode, border_value=0)
    return keep


def sample_alpha(rng: np.random.Generator, sigma: float = 0.2, max_tries: int = ALPHA_RETRIES) -> float:
    """Draw the in-between position from N(0.5, sigma), redrawing values outside (0, 1).

    After ``max_tries`` rejected draws the last one is clamped to [0.05, 0.95].
    """
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    for _ in range(max_tries):
        a = rng.normal(0.5, sigma)
        if 0.0 < a < 1.0:
            return float(a)
    return float(np.clip(a, *ALPHA_CLAMP))


def pair_valid(cam_k: Camera, cam_k2: Camera, cfg: PairFilterConfig) -> PairValidity:
    """Reject pairs that are too far apart or where one centre is visible to the other camera."""
    o_k, o_k2 = cam_k.centre, cam_k2.centre
    if np.linalg.norm(o_k - o_k2) > cfg.gamma:
        return PairValidity(False, "too_far")
    for cam, other in ((cam_k, o_k2), (cam_k2, o_k)):
        if np.linalg.norm(other - cam.centre) < 1e-12:
            return PairValidity(False, "singular")
        pix, d = project(other, cam.pose, cam.intrinsics)
        k = cam.intrinsics
        if d > 0 and 0 <= pix[0] < k.width and 0 <= pix[1] < k.height:
            return PairValidity(False, "singular")
    return PairValidity(True, "ok")


def rectified_clouds(rect: RectifiedPair):
    """Coloured clouds of both rectified views, snapped onto their rectified pixel rays."""
    clouds = []
    for i, cam in enumerate((rect.warp.camera_k, rect.warp.camera_k2)):
        clouds.append(to_point_cloud(rect.images[i], rect.coords[i], rect.image_masks[i],
                                     rect.depth_masks[i], snap_to=cam))
    return clouds[0], clouds[1]


def morph_pair(rect: RectifiedPair, alpha: float, view_bias: float = 0.05, clean: bool = True,
               clouds=None) -> MorphResult:
    """In-between view at position ``alpha`` along the rectified baseline."""
    x_k, x_k2 = clouds if clouds is not None else rectified_clouds(rect)
    pose = interpolate_pose(rect.warp.pose_k, rect.warp.pose_k2, alpha)
    result = fuse_project(x_k, x_k2, pose, rect.warp.intrinsics, alpha=alpha, view_bias=view_bias)
    if clean:
        keep = clean_mask(result.mask, result.depth)
        result.image[~keep] = INVALID_COLOR
        result.depth[~keep] = 0.0
        result.mask = keep
    return result
