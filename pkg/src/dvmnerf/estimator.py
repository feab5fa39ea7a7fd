"""scikit-learn style facade over the trainer.

``fit`` takes training views (or a dataset), ``predict`` renders cameras and
``score`` returns mean PSNR against reference views.
"""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SceneDataset, View
from .errors import ValidationError
from .field import render_view
from .geometry import Camera
from .metrics import psnr
from .trainer import TrainConfig, train

_CONFIG_FIELDS = [f.name for f in dataclasses.fields(TrainConfig)]


class DVMNeRF(BaseEstimator):
    """Few-shot radiance field trained with depth-based view morphing.

    Every constructor argument maps onto a :class:`TrainConfig` field of the
    same name, so ``get_params``/``set_params`` and ``clone`` behave as usual.
    """

    def __init__(self, total_iters=50_000, lambda_warmup=500, eta_regen=5000, m_views_per_pair=1,
                 gamma_distance=6.0, sigma_alpha=0.2, batch_rays=1024, lr=5e-4, lr_final=5e-5, seed=0,
                 dvm="on", n_coarse=32, n_fine=64, t_near=None, t_far=None, eval_every=1000,
                 opacity_threshold=0.5, view_bias=0.05, clean_morphs=True, hidden_layers=4, width=128,
                 pos_degree=10, dir_degree=4, density_shift=5.0):
        self.total_iters = total_iters
        self.lambda_warmup = lambda_warmup
        self.eta_regen = eta_regen
        self.m_views_per_pair = m_views_per_pair
        self.gamma_distance = gamma_distance
        self.sigma_alpha = sigma_alpha
        self.batch_rays = batch_rays
        self.lr = lr
        self.lr_final = lr_final
        self.seed = seed
        self.dvm = dvm
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.t_near = t_near
        self.t_far = t_far
        self.eval_every = eval_every
        self.opacity_threshold = opacity_threshold
        self.view_bias = view_bias
        self.clean_morphs = clean_morphs
        self.hidden_layers = hidden_layers
        self.width = width
        self.pos_degree = pos_degree
        self.dir_degree = dir_degree
        self.density_shift = density_shift

    def _config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _CONFIG_FIELDS})

    def fit(self, X, y=None, held_out: Sequence[View] | None = None):
        """Train on ``X``: a :class:`SceneDataset` or a sequence of :class:`View`.

        ``y`` is accepted for API compatibility and ignored; the targets are
        the view images.
        """
        cfg = self._config()
        if isinstance(X, SceneDataset):
            near, far = X.near, X.far
        else:
            views = list(X)
            if not views or not all(isinstance(v, View) for v in views):
                raise ValidationError("X must be a SceneDataset or a non-empty sequence of View")
            near, far = 2.0, 6.0
        result = train(X, cfg, held_out=held_out)
        self.field_ = result.field
        self.history_ = result.history
        self.pairs_ = result.pairs
        self.near_ = cfg.t_near if cfg.t_near is not None else near
        self.far_ = cfg.t_far if cfg.t_far is not None else far
        return self

    def _cameras(self, X) -> list[Camera]:
        items = list(X) if not isinstance(X, (Camera, View)) else [X]
        cams = [x.camera if isinstance(x, View) else x for x in items]
        if not all(isinstance(c, Camera) for c in cams):
            raise ValidationError("expected cameras or views")
        return cams

    def predict(self, X) -> list[np.ndarray]:
        """Rendered ``(H, W, 3)`` images for each camera or view in ``X``."""
        check_is_fitted(self, "field_")
        return [render_view(self.field_, c, self.near_, self.far_, self.n_coarse, self.n_fine)[0]
                for c in self._cameras(X)]

    def predict_depth(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "field_")
        out = []
        for c in self._cameras(X):
            _, depth, opacity = render_view(self.field_, c, self.near_, self.far_, self.n_coarse, self.n_fine)
            out.append(np.where(opacity > 0, depth / np.maximum(opacity, 1e-12), 0.0))
        return out

    def score(self, X, y=None) -> float:
        """Mean PSNR of the renders of views ``X`` against their images."""
        views = list(X)
        if not all(isinstance(v, View) for v in views):
            raise ValidationError("score needs View objects carrying reference images")
        preds = self.predict(views)
        return float(np.mean([psnr(p, v.image) for p, v in zip(preds, views)]))
