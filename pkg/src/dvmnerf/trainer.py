"""Training loop with depth-based view morphing augmentation.

Real views train the field alone for a warmup period. After that, every
``eta_regen`` iterations each valid camera pair is rectified using the depth the
field currently predicts (or ground-truth depth in the oracle variant) and
``m_views_per_pair`` in-between views replace that pair's previous morphs.
Ray batches are drawn uniformly over every valid pixel of the pool.
"""
from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .data import SceneDataset, View
from .errors import ConfigError, DVMError
from .field import FieldConfig, RadianceField, nerf_loss, predict_depth_map, render_rays, render_view
from .geometry import Camera
from .metrics import psnr
from .morph import MorphResult, PairFilterConfig, morph_pair, pair_valid, rectified_clouds, sample_alpha
from .rectify import rectify_pair

log = logging.getLogger(__name__)

DVM_MODES = ("on", "off", "oracle-depth")


@dataclass
class TrainConfig:
    total_iters: int = 50_000
    lambda_warmup: int = 500
    eta_regen: int = 5000
    m_views_per_pair: int = 1
    gamma_distance: float = 6.0
    sigma_alpha: float = 0.2
    batch_rays: int = 1024
    lr: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    dvm: str = "on"
    n_coarse: int = 32
    n_fine: int = 64
    t_near: float | None = None
    t_far: float | None = None
    eval_every: int = 1000
    opacity_threshold: float = 0.5
    view_bias: float = 0.05
    clean_morphs: bool = True
    hidden_layers: int = 4
    width: int = 128
    pos_degree: int = 10
    dir_degree: int = 4
    density_shift: float = 5.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("total_iters", "eta_regen", "batch_rays", "n_coarse"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lambda_warmup < 0 or self.m_views_per_pair < 0 or self.n_fine < 0 or self.eval_every < 0:
            raise ConfigError("lambda_warmup, m_views_per_pair, n_fine and eval_every must be non-negative")
        if self.lambda_warmup > self.total_iters:
            raise ConfigError("lambda_warmup cannot exceed total_iters")
        if not (self.gamma_distance > 0 and self.sigma_alpha > 0 and self.lr > 0 and self.lr_final > 0):
            raise ConfigError("gamma_distance, sigma_alpha and learning rates must be positive")
        if self.dvm not in DVM_MODES:
            raise ConfigError(f"dvm must be one of {DVM_MODES}, got {self.dvm!r}")
        if not 0.0 <= self.opacity_threshold <= 1.0:
            raise ConfigError("opacity_threshold must lie in [0, 1]")

    @classmethod
    def reference_defaults(cls, **overrides) -> "TrainConfig":
        values = dict(gamma_distance=6.0, sigma_alpha=0.2, m_views_per_pair=1, eta_regen=5000,
                      lambda_warmup=500, batch_rays=1024, lr=5e-4)
        values.update(overrides)
        return cls(**values)

    @property
    def field_config(self) -> FieldConfig:
        return FieldConfig(self.hidden_layers, self.width, self.pos_degree, self.dir_degree, self.density_shift)

    @property
    def augmenting(self) -> bool:
        return self.dvm != "off" and self.m_views_per_pair > 0 and self.lambda_warmup < self.total_iters

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MorphEntry:
    pair: tuple[int, int]
    result: MorphResult
    iteration: int


@dataclass
class AugmentedPool:
    real: list[View]
    morphs: dict[tuple[int, int], list[MorphEntry]] = field(default_factory=dict)
    version: int = 0

    def replace(self, pair: tuple[int, int], entries: list[MorphEntry]) -> None:
        self.morphs[pair] = entries
        self.version += 1

    @property
    def morphed(self) -> list[MorphEntry]:
        return [e for pair in sorted(self.morphs) for e in self.morphs[pair]]

    def __len__(self):
        return len(self.real) + len(self.morphed)

    def composition(self) -> dict:
        return {"real": len(self.real), "morphed": len(self.morphed),
                "morphed_pixels": int(sum(e.result.mask.sum() for e in self.morphed))}

    def training_views(self):
        """``(camera, image, mask)`` of every pool view, real views first."""
        for v in self.real:
            yield v.camera, v.image, v.valid
        for e in self.morphed:
            yield e.result.camera, e.result.image, e.result.mask


class RayTable:
    """Flattened rays and colours of every valid pixel in a pool."""

    def __init__(self, pool: AugmentedPool):
        origins, dirs, colors, owner = [], [], [], []
        for i, (cam, image, mask) in enumerate(pool.training_views()):
            o, d = cam.pixel_rays()
            m = np.asarray(mask, dtype=bool)
            origins.append(o[m])
            dirs.append(d[m])
            colors.append(np.asarray(image)[m][:, :3])
            owner.append(np.full(int(m.sum()), i))
        self.origins = np.concatenate(origins) if origins else np.zeros((0, 3))
        self.dirs = np.concatenate(dirs) if dirs else np.zeros((0, 3))
        self.colors = np.concatenate(colors) if colors else np.zeros((0, 3))
        self.owner = np.concatenate(owner) if owner else np.zeros(0, dtype=int)
        self.version = pool.version

    def __len__(self):
        return len(self.origins)


def enumerate_valid_pairs(cameras: Sequence[Camera], cfg: TrainConfig | PairFilterConfig) -> list[tuple[int, int]]:
    """Unordered index pairs ``(i, j)``, ``i < j``, that pass the pair filter."""
    pf = cfg if isinstance(cfg, PairFilterConfig) else PairFilterConfig(cfg.gamma_distance)
    return [(i, j) for i, j in itertools.combinations(range(len(cameras)), 2)
            if pair_valid(cameras[i], cameras[j], pf).valid]


def _depth_for(view: View, field: RadianceField | None, cfg: TrainConfig, near: float, far: float,
               oracle: bool):
    if oracle:
        if view.depth is None:
            raise ConfigError(f"view {view.name!r} has no ground-truth depth for oracle-depth morphing")
        mask = view.depth_mask if view.depth_mask is not None else view.depth > 0
        return view.depth, mask
    return predict_depth_map(field, view.camera, near, far, cfg.opacity_threshold, cfg.n_coarse, cfg.n_fine)


def regenerate_views(field: RadianceField | None, views: Sequence[View], pairs, cfg: TrainConfig,
                     rng: np.random.Generator, iteration: int, pool: AugmentedPool | None = None,
                     near: float = 2.0, far: float = 6.0) -> dict[tuple[int, int], list[MorphEntry]]:
    """Synthesize ``m_views_per_pair`` morphs for every pair and replace them in ``pool``.

    Does nothing during warmup. Pairs whose rectification degenerates are
    logged and skipped.
    """
    if iteration < cfg.lambda_warmup or cfg.m_views_per_pair == 0 or cfg.dvm == "off":
        return {}
    oracle = cfg.dvm == "oracle-depth"
    depths: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    produced = {}
    for i, j in pairs:
        for idx in (i, j):
            if idx not in depths:
                depths[idx] = _depth_for(views[idx], field, cfg, near, far, oracle)
        a, b = views[i], views[j]
        (da, ma), (db, mb) = depths[i], depths[j]
        try:
            rect = rectify_pair(a.camera, a.image, da, b.camera, b.image, db,
                                mask_k=a.valid & ma, mask_k2=b.valid & mb,
                                depth_mask_k=ma, depth_mask_k2=mb)
        except DVMError as exc:
            log.warning("skipping pair (%d, %d): %s", i, j, exc)
            continue
        clouds = rectified_clouds(rect)
        entries = []
        for _ in range(cfg.m_views_per_pair):
            alpha = sample_alpha(rng, cfg.sigma_alpha)
            result = morph_pair(rect, alpha, cfg.view_bias, cfg.clean_morphs, clouds=clouds)
            entries.append(MorphEntry((i, j), result, iteration))
        produced[(i, j)] = entries
        if pool is not None:
            pool.replace((i, j), entries)
    return produced


def sample_ray_batch(table: RayTable, batch: int, rng: np.random.Generator, dtype=torch.float32):
    """Uniform draw over all valid pixels of the pool; returns origins, directions and colours."""
    if len(table) == 0:
        raise DVMError("the training pool has no valid pixels")
    idx = rng.integers(0, len(table), size=batch)
    to_t = lambda x: torch.as_tensor(x[idx], dtype=dtype)  # noqa: E731
    return to_t(table.origins), to_t(table.dirs), to_t(table.colors), idx


@dataclass
class TrainResult:
    field: RadianceField
    history: list[dict]
    pool: AugmentedPool
    pairs: list[tuple[int, int]]
    losses: list[float]


def evaluate(field: RadianceField, views: Sequence[View], cfg: TrainConfig, near: float, far: float) -> list[float]:
    scores = []
    for v in views:
        img, _, _ = render_view(field, v.camera, near, far, cfg.n_coarse, cfg.n_fine)
        scores.append(psnr(img, v.image))
    return scores


def train(data: SceneDataset | Sequence[View], cfg: TrainConfig, held_out: Sequence[View] | None = None,
          log_fn: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise a radiance field on ``data`` with the configured augmentation.

    ``data`` is either a dataset (its ``train`` split is used, and ``test`` for
    evaluation unless ``held_out`` is given) or a plain list of training views.
    """
    cfg.validate()
    if isinstance(data, SceneDataset):
        views = list(data["train"])
        held_out = held_out if held_out is not None else data.splits.get("test", [])
        near, far = data.near, data.far
    else:
        views = list(data)
        near, far = 2.0, 6.0
    near = cfg.t_near if cfg.t_near is not None else near
    far = cfg.t_far if cfg.t_far is not None else far
    if not views:
        raise ConfigError("no training views")
    held_out = list(held_out or [])

    torch.manual_seed(cfg.seed)
    field = RadianceField(cfg.field_config)
    gen = torch.Generator().manual_seed(cfg.seed)
    ray_rng = np.random.default_rng([cfg.seed, 1])
    alpha_rng = np.random.default_rng([cfg.seed, 2])
    opt = torch.optim.Adam(field.parameters(), lr=cfg.lr)
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / cfg.total_iters)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, decay)

    pool = AugmentedPool(views)
    pairs = enumerate_valid_pairs([v.camera for v in views], cfg) if cfg.augmenting else []
    history: list[dict] = []
    emit = log_fn or (lambda record: None)
    emit({"event": "header", "augmentation": "enabled" if cfg.augmenting else "disabled",
          "dvm": cfg.dvm, "valid_pairs": [list(p) for p in pairs], "near": near, "far": far,
          "config": cfg.as_dict()})

    table = RayTable(pool)
    losses = []
    for it in range(cfg.total_iters):
        if cfg.augmenting and it >= cfg.lambda_warmup and (it - cfg.lambda_warmup) % cfg.eta_regen == 0:
            field.eval()
            regenerate_views(field, views, pairs, cfg, alpha_rng, it, pool, near, far)
            field.train()
            table = RayTable(pool)
            emit({"event": "regenerate", "iter": it, "pool": pool.composition()})
        origins, dirs, target, _ = sample_ray_batch(table, cfg.batch_rays, ray_rng)
        out = render_rays(field, origins, dirs, near, far, cfg.n_coarse, cfg.n_fine, gen)
        loss = nerf_loss(out["coarse"]["rgb"], out["fine"]["rgb"], target)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.detach()))
        last = it + 1 == cfg.total_iters
        if (cfg.eval_every and (it + 1) % cfg.eval_every == 0) or last:
            record = {"event": "eval", "iter": it + 1, "loss": losses[-1], "pool": pool.composition()}
            if held_out and (cfg.eval_every or last):
                scores = evaluate(field, held_out, cfg, near, far)
                record["psnr"] = float(np.mean(scores))
                record["psnr_views"] = scores
            history.append(record)
            emit(record)
    return TrainResult(field, history, pool, pairs, losses)
