"""Datasets: transforms-JSON ingestion, image I/O and an analytic oracle scene."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError, MalformedMatrix, MissingField, ValidationError
from .geometry import Camera, CameraIntrinsics, CameraPose, camera_centres, fps_select, look_at, orthonormalize

log = logging.getLogger(__name__)

# blender camera axes (x right, y up, z backward) -> internal (x right, y down, z forward)
_FLIP = np.diag([1.0, -1.0, -1.0])

DEFAULT_NEAR = 2.0
DEFAULT_FAR = 6.0


@dataclass
class View:
    """An image bound to a camera, optionally with a validity mask and exact depth."""

    name: str
    image: np.ndarray
    camera: Camera
    mask: np.ndarray | None = None
    depth: np.ndarray | None = None
    depth_mask: np.ndarray | None = None

    @property
    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.image.shape[:2], dtype=bool)
        return self.mask


@dataclass
class SceneDataset:
    splits: dict[str, list[View]]
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __getitem__(self, split: str) -> list[View]:
        return self.splits[split]


# ---------------------------------------------------------------- image I/O

def read_image(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Decode an 8-bit image to float RGB in [0, 1], compositing alpha over ``background``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    if arr.shape[-1] == 4:
        a = arr[..., 3:4]
        arr = arr[..., :3] * a + np.asarray(background, dtype=float) * (1.0 - a)
    return np.clip(arr, 0.0, 1.0)


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=float)
    arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 127
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode mask {path}: {exc}") from exc


# ------------------------------------------------------- transforms format

def pose_from_blender(matrix) -> CameraPose:
    m = np.asarray(matrix, dtype=float)
    if m.shape != (4, 4):
        raise MalformedMatrix(f"transform_matrix must be 4x4, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise MalformedMatrix("transform_matrix contains non-finite values")
    rot = orthonormalize(m[:3, :3])
    c2w = rot @ _FLIP
    return CameraPose.from_centre(c2w.T, m[:3, 3])


def pose_to_blender(pose: CameraPose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = pose.rotation.T @ _FLIP
    m[:3, 3] = pose.centre
    return m


def _intrinsics_for(meta: dict, frame: dict, width: int, height: int) -> CameraIntrinsics:
    def pick(key):
        return frame.get(key, meta.get(key))

    if pick("fl_x") is not None:
        fx = float(pick("fl_x"))
        fy = float(pick("fl_y") if pick("fl_y") is not None else fx)
        cx = float(pick("cx") if pick("cx") is not None else 0.5 * width)
        cy = float(pick("cy") if pick("cy") is not None else 0.5 * height)
        return CameraIntrinsics(fx, fy, cx, cy, width, height)
    if "camera_angle_x" not in meta:
        raise MissingField("transforms file has no camera_angle_x")
    return CameraIntrinsics.from_fov(float(meta["camera_angle_x"]), width, height)


def _resolve(base: Path, rel: str, suffix: str = ".png") -> Path:
    p = (base / rel).resolve()
    if p.suffix == "" and not p.exists():
        p = p.with_suffix(suffix)
    return p


def _load_split(path: Path, background) -> list[View]:
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    if "frames" not in meta:
        raise MissingField(f"{path} has no 'frames'")
    views = []
    base = path.parent
    for i, frame in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise MissingField(f"frame {i} of {path} has no '{key}'")
        img_path = _resolve(base, frame["file_path"])
        image = read_image(img_path, background)
        h, w = image.shape[:2]
        k = _intrinsics_for(meta, frame, int(frame.get("w", meta.get("w", w))),
                            int(frame.get("h", meta.get("h", h))))
        if (k.height, k.width) != (h, w):
            raise ValidationError(f"{img_path} is {w}x{h} but the declared size is {k.width}x{k.height}")
        cam = Camera(k, pose_from_blender(frame["transform_matrix"]))
        mask = read_mask(_resolve(base, frame["mask_path"])) if "mask_path" in frame else None
        depth = depth_mask = None
        if "depth_path" in frame:
            depth = np.load(_resolve(base, frame["depth_path"], ".npy"))
            depth_mask = depth > 0
        views.append(View(Path(frame["file_path"]).name, image, cam, mask, depth, depth_mask))
    return views


def load_transforms(path, background=(1.0, 1.0, 1.0), near: float | None = None,
                    far: float | None = None) -> SceneDataset:
    """Load a scene in the NeRF-synthetic ``transforms_*.json`` layout.

    ``path`` is either a scene directory (every ``transforms_{split}.json``
    present is read) or a single transforms file, whose split name is taken
    from its file name.
    """
    path = Path(path)
    if path.is_dir():
        files = {s: path / f"transforms_{s}.json" for s in ("train", "val", "test")}
        files = {s: p for s, p in files.items() if p.exists()}
        if not files:
            raise MissingField(f"no transforms_*.json found in {path}")
    elif path.exists():
        stem = path.stem
        split = stem[len("transforms_"):] if stem.startswith("transforms_") else stem
        files = {split: path}
    else:
        raise ValidationError(f"dataset path {path} does not exist")
    splits = {s: _load_split(p, background) for s, p in files.items()}
    bounds = {}
    for p in files.values():
        meta = json.loads(p.read_text())
        for key in ("near", "far"):
            if key in meta:
                bounds[key] = float(meta[key])
    return SceneDataset(splits,
                        near if near is not None else bounds.get("near", DEFAULT_NEAR),
                        far if far is not None else bounds.get("far", DEFAULT_FAR),
                        tuple(background))


def save_transforms(directory, split: str, views: Sequence[View], near: float | None = None,
                    far: float | None = None) -> Path:
    """Write views in the transforms layout; masks and depths go to side files."""
    directory = Path(directory)
    (directory / split).mkdir(parents=True, exist_ok=True)
    frames = []
    first = views[0].camera.intrinsics if views else None
    for i, v in enumerate(views):
        stem = f"{split}/r_{i:03d}"
        write_image(directory / f"{stem}.png", v.image)
        k = v.camera.intrinsics
        frame = {"file_path": f"./{stem}",
                 "transform_matrix": pose_to_blender(v.camera.pose).tolist(),
                 "fl_x": k.fx, "fl_y": k.fy, "cx": k.cx, "cy": k.cy, "w": k.width, "h": k.height}
        if v.mask is not None:
            write_mask(directory / f"{stem}_mask.png", v.mask)
            frame["mask_path"] = f"./{stem}_mask.png"
        if v.depth is not None:
            np.save(directory / f"{stem}_depth.npy", np.where(v.depth_mask if v.depth_mask is not None
                                                              else v.depth > 0, v.depth, 0.0))
            frame["depth_path"] = f"./{stem}_depth.npy"
        frames.append(frame)
    meta = {"camera_angle_x": 2.0 * math.atan(0.5 * first.width / first.fx) if first else 0.0,
            "frames": frames}
    if near is not None:
        meta["near"] = near
    if far is not None:
        meta["far"] = far
    out = directory / f"transforms_{split}.json"
    out.write_text(json.dumps(meta, indent=2))
    return out


# ------------------------------------------------------------ oracle scene

@dataclass(frozen=True)
class Sphere:
    centre: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float]
    stripes: float = 0.0  # stripe frequency along world z, 0 for plain albedo

    def intersect(self, o, d):
        c = np.asarray(self.centre, dtype=float)
        oc = o - c
        b = np.sum(d * oc, axis=-1)
        disc = b * b - (np.sum(oc * oc, axis=-1) - self.radius ** 2)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        p = o + d * t[..., None]
        n = (p - c) / self.radius
        return t, n

    def albedo(self, p):
        base = np.broadcast_to(np.asarray(self.color, dtype=float), p.shape).copy()
        if self.stripes:
            base *= (0.7 + 0.3 * np.sin(self.stripes * p[..., 2:3]))
        return base


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    color: tuple[float, float, float]
    checker: float = 0.0  # checker cell size, 0 for plain albedo

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        hit = (tmax >= tmin) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        p = o + d * np.where(hit, t, 0.0)[..., None]
        centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        rel = (p - centre) / half
        axis = np.argmax(np.abs(rel), axis=-1)
        n = np.zeros_like(p)
        np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(rel, axis[..., None], -1)), -1)
        return t, n

    def albedo(self, p):
        base = np.broadcast_to(np.asarray(self.color, dtype=float), p.shape).copy()
        if self.checker:
            cell = np.floor(p / self.checker).astype(int).sum(axis=-1) % 2
            base *= np.where(cell == 0, 1.0, 0.6)[..., None]
        return base


@dataclass(frozen=True)
class Quad:
    """Finite rectangle ``centre + a*u + b*v`` with ``|a|, |b| <= half_extent``."""

    centre: tuple[float, float, float]
    u: tuple[float, float, float]
    v: tuple[float, float, float]
    half_extent: float
    color: tuple[float, float, float]

    def intersect(self, o, d):
        c, u, v = (np.asarray(x, dtype=float) for x in (self.centre, self.u, self.v))
        n = np.cross(u, v)
        n /= np.linalg.norm(n)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / denom
        p = o + d * np.where(np.isfinite(t), t, 0.0)[..., None]
        a, b = (p - c) @ u, (p - c) @ v
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(a) <= self.half_extent) & (np.abs(b) <= self.half_extent)
        t = np.where(hit, t, np.inf)
        normal = np.broadcast_to(n, p.shape) * np.where(denom > 0, -1.0, 1.0)[..., None]
        return t, normal

    def albedo(self, p):
        return np.broadcast_to(np.asarray(self.color, dtype=float), p.shape).copy()


@dataclass(frozen=True)
class OracleScene:
    primitives: tuple = ()
    light: tuple[float, float, float] = (0.4, -0.5, 0.75)
    ambient: float = 0.45
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit along each ray: ``(rgb, distance, hit)``; misses get the background."""
        shape = origins.shape[:-1]
        best_t = np.full(shape, np.inf)
        rgb = np.broadcast_to(np.asarray(self.background, dtype=float), shape + (3,)).copy()
        light = np.asarray(self.light, dtype=float)
        light /= np.linalg.norm(light)
        for prim in self.primitives:
            t, n = prim.intersect(origins, dirs)
            closer = t < best_t
            if not closer.any():
                continue
            p = origins[closer] + dirs[closer] * t[closer][:, None]
            shade = self.ambient + (1.0 - self.ambient) * np.clip(n[closer] @ light, 0.0, 1.0)
            rgb[closer] = np.clip(prim.albedo(p) * shade[:, None], 0.0, 1.0)
            best_t[closer] = t[closer]
        hit = np.isfinite(best_t)
        return rgb, np.where(hit, best_t, 0.0), hit


def default_scene() -> OracleScene:
    """A textured still life centred on the origin, about two units across."""
    return OracleScene((
        Box((-1.0, -1.0, -1.0), (0.25, 0.25, 0.1), (0.85, 0.35, 0.2), checker=0.5),
        Sphere((0.45, 0.4, 0.3), 0.7, (0.2, 0.45, 0.9), stripes=6.0),
        Sphere((-0.55, 0.7, -0.5), 0.45, (0.25, 0.8, 0.3)),
    ))


def render_oracle(scene: OracleScene, camera: Camera):
    """Exact image, depth and hit mask of ``scene`` seen from ``camera``."""
    origins, dirs = camera.pixel_rays()
    return scene.trace(origins, dirs)


def oracle_view(scene: OracleScene, camera: Camera, name: str = "") -> View:
    rgb, depth, hit = render_oracle(scene, camera)
    return View(name, rgb, camera, None, depth, hit)


def make_ring_cameras(n: int, radius: float, elevation: float, look_at_point=(0.0, 0.0, 0.0),
                      intrinsics: CameraIntrinsics | None = None, azimuth_offset: float = 0.0,
                      up=(0.0, 0.0, 1.0)) -> list[Camera]:
    """``n`` cameras evenly spaced in azimuth, all looking at ``look_at_point``.

    ``elevation`` is in radians above the horizontal plane through the target.
    """
    if n < 1:
        raise ValidationError("need at least one camera")
    intrinsics = intrinsics or CameraIntrinsics.from_fov(0.6911112, 64, 64)
    target = np.asarray(look_at_point, dtype=float)
    cams = []
    for i in range(n):
        az = azimuth_offset + 2.0 * math.pi * i / n
        eye = target + radius * np.array([math.cos(elevation) * math.cos(az),
                                          math.cos(elevation) * math.sin(az),
                                          math.sin(elevation)])
        cams.append(Camera(intrinsics, look_at(eye, target, up)))
    return cams


@dataclass
class OracleSetup:
    """Desk-scale few-shot split rendered from an oracle scene."""

    dataset: SceneDataset
    scene: OracleScene
    candidates: list[Camera] = field(default_factory=list)
    train_indices: list[int] = field(default_factory=list)


def few_shot_setup(n_train: int = 4, n_test: int = 8, n_candidates: int = 100, radius: float = 4.0,
                   elevation: float = math.radians(30.0), size: int = 64,
                   scene: OracleScene | None = None) -> OracleSetup:
    """FPS-selected training views from a camera ring plus held-out views between them.

    Held-out cameras sit on the same ring, offset by half the test spacing, so
    none coincides with a training camera.
    """
    scene = scene or default_scene()
    k = CameraIntrinsics.from_fov(0.6911112, size, size)
    candidates = make_ring_cameras(n_candidates, radius, elevation, intrinsics=k)
    idx = fps_select(camera_centres(candidates), n_train)
    test = make_ring_cameras(n_test, radius, elevation, intrinsics=k, azimuth_offset=math.pi / n_test)
    ds = oracle_dataset(scene, [candidates[i] for i in idx], test)
    return OracleSetup(ds, scene, candidates, idx)


def oracle_dataset(scene: OracleScene, train: Sequence[Camera], test: Sequence[Camera],
                   near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> SceneDataset:
    return SceneDataset({
        "train": [oracle_view(scene, c, f"train_{i:03d}") for i, c in enumerate(train)],
        "test": [oracle_view(scene, c, f"test_{i:03d}") for i, c in enumerate(test)],
    }, near, far, scene.background)
