"""Few-shot neural radiance fields augmented with depth-based view morphing."""
__version__ = "0.1.0"

from .errors import DVMError, ValidationError  # noqa: E402
from .geometry import Camera, CameraIntrinsics, CameraPose, fps_select, look_at  # noqa: E402
from .rectify import build_warp_pair, rectify_pair  # noqa: E402
from .morph import fuse_project, morph_pair, pair_valid, sample_alpha  # noqa: E402
from .field import FieldConfig, RadianceField, render_rays, render_view  # noqa: E402
from .metrics import MetricReport, psnr, ssim  # noqa: E402
from .data import SceneDataset, View, default_scene, few_shot_setup, load_transforms  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402
from .estimator import DVMNeRF  # noqa: E402

__all__ = [
    "DVMError", "ValidationError", "Camera", "CameraIntrinsics", "CameraPose", "fps_select", "look_at",
    "build_warp_pair", "rectify_pair", "fuse_project", "morph_pair", "pair_valid", "sample_alpha",
    "FieldConfig", "RadianceField", "render_rays", "render_view", "MetricReport", "psnr", "ssim",
    "SceneDataset", "View", "default_scene", "few_shot_setup", "load_transforms", "TrainConfig", "train",
    "DVMNeRF",
]
