"""Compact NeRF: encoding, coarse/fine MLPs, ray sampling and volume rendering."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointVersionError, DimensionMismatch, InvalidRange, ValidationError
from .geometry import Camera

CHECKPOINT_MAGIC = b"DVMNERF\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    hidden_layers: int = 4
    width: int = 128
    pos_degree: int = 10
    dir_degree: int = 4
    density_shift: float = 5.0
    skip_layer: int | None = None  # re-inject the encoded position after this layer

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1:
            raise ValidationError("field needs at least one hidden layer of width >= 1")
        if self.pos_degree < 0 or self.dir_degree < 0:
            raise ValidationError("encoding degrees must be non-negative")


def positional_encoding(x: torch.Tensor, degree: int) -> torch.Tensor:
    """``[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]`` per component."""
    if degree < 0:
        raise ValidationError("encoding degree must be non-negative")
    if degree == 0:
        return x
    freqs = 2.0 ** torch.arange(degree, dtype=x.dtype, device=x.device)
    scaled = x[..., None, :] * freqs[:, None]  # (..., L, D)
    enc = torch.stack([torch.sin(scaled), torch.cos(scaled)], dim=-2)  # (..., L, 2, D)
    return torch.cat([x, enc.flatten(-3)], dim=-1)


def encoded_dim(dim: int, degree: int) -> int:
    return dim * (2 * degree + 1)


class MLP(nn.Module):
    """Position trunk with a density head and a direction-conditioned colour head."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        in_pos = encoded_dim(3, cfg.pos_degree)
        in_dir = encoded_dim(3, cfg.dir_degree)
        layers = []
        for i in range(cfg.hidden_layers):
            n_in = in_pos if i == 0 else cfg.width
            if cfg.skip_layer is not None and i == cfg.skip_layer + 1:
                n_in += in_pos
            layers.append(nn.Linear(n_in, cfg.width))
        self.trunk = nn.ModuleList(layers)
        self.density = nn.Linear(cfg.width, 1)
        self.feature = nn.Linear(cfg.width, cfg.width)
        self.color_hidden = nn.Linear(cfg.width + in_dir, max(cfg.width // 2, 1))
        self.color = nn.Linear(max(cfg.width // 2, 1), 3)

    def forward(self, points: torch.Tensor, dirs: torch.Tensor):
        x_enc = positional_encoding(points, self.cfg.pos_degree)
        d_enc = positional_encoding(dirs, self.cfg.dir_degree)
        h = x_enc
        for i, layer in enumerate(self.trunk):
            if self.cfg.skip_layer is not None and i == self.cfg.skip_layer + 1:
                h = torch.cat([h, x_enc], dim=-1)
            h = F.relu(layer(h))
        sigma = F.softplus(self.density(h)[..., 0] - self.cfg.density_shift)
        h = torch.cat([self.feature(h), d_enc], dim=-1)
        rgb = torch.sigmoid(self.color(F.relu(self.color_hidden(h))))
        return rgb, sigma


class RadianceField(nn.Module):
    """Coarse and fine networks sharing one configuration."""

    def __init__(self, cfg: FieldConfig | None = None, seed: int | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        if seed is not None:
            torch.manual_seed(seed)
        self.coarse = MLP(self.cfg)
        self.fine = MLP(self.cfg)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, points, dirs, fine: bool = True):
        return (self.fine if fine else self.coarse)(points, dirs)

    def zero_density_(self) -> "RadianceField":
        """Zero the final density layers, the untrained 'empty space' state."""
        with torch.no_grad():
            for net in (self.coarse, self.fine):
                net.density.weight.zero_()
                net.density.bias.zero_()
        return self


# ------------------------------------------------------------------ sampling

@dataclass
class RaySampleBatch:
    origins: torch.Tensor     # (R, 3)
    directions: torch.Tensor  # (R, 3), unit
    t: torch.Tensor           # (R, S) strictly increasing in [t_n, t_f)
    deltas: torch.Tensor      # (R, S) > 0

    @property
    def points(self) -> torch.Tensor:
        return self.origins[:, None, :] + self.directions[:, None, :] * self.t[..., None]


def interval_deltas(t: torch.Tensor, t_far: float) -> torch.Tensor:
    """``t_{i+1} - t_i`` with the far clipping distance closing the last interval."""
    far = torch.full_like(t[..., :1], t_far)
    return torch.cat([t[..., 1:], far], dim=-1) - t


def sample_stratified(origins: torch.Tensor, dirs: torch.Tensor, t_near: float, t_far: float,
                      n_samples: int, generator: torch.Generator | None = None) -> RaySampleBatch:
    """One sample per equal-width bin of ``[t_near, t_far)``; bin midpoints without a generator."""
    if not t_near < t_far:
        raise InvalidRange(f"need t_near < t_far, got {t_near} >= {t_far}")
    if n_samples < 2:
        raise InvalidRange("need at least two samples per ray")
    n_rays = origins.shape[0]
    lower = t_near + (t_far - t_near) * torch.arange(n_samples, dtype=origins.dtype) / n_samples
    width = (t_far - t_near) / n_samples
    if generator is None:
        u = torch.full((n_rays, n_samples), 0.5, dtype=origins.dtype)
    else:
        u = torch.rand((n_rays, n_samples), generator=generator, dtype=origins.dtype)
    t = lower + width * u
    return RaySampleBatch(origins, dirs, t, interval_deltas(t, t_far))


def sample_hierarchical(weights: torch.Tensor, edges: torch.Tensor, n_fine: int,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverse-CDF samples from the piecewise-constant density proportional to ``weights``.

    ``edges`` has one more column than ``weights``. Rays whose weights are all
    zero are sampled uniformly over their bins. Without a generator the CDF is
    inverted at evenly spaced quantiles. Returns sorted ``(R, n_fine)`` distances.
    """
    weights = weights.detach()
    edges = edges.detach()
    if weights.shape[-1] + 1 != edges.shape[-1]:
        raise DimensionMismatch("edges must have one more entry than weights")
    if torch.any(weights < 0):
        raise ValidationError("weights must be non-negative")
    total = weights.sum(-1, keepdim=True)
    empty = total <= 0
    pdf = torch.where(empty, torch.ones_like(weights) / weights.shape[-1], weights / torch.where(empty, 1.0, total))
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], -1)
    cdf[..., -1] = 1.0
    n_rays = weights.shape[0]
    if generator is None:
        u = ((torch.arange(n_fine, dtype=weights.dtype) + 0.5) / n_fine).expand(n_rays, n_fine).contiguous()
    else:
        u = torch.rand((n_rays, n_fine), generator=generator, dtype=weights.dtype)
    idx = torch.searchsorted(cdf, u, right=True)
    idx = idx.clamp(1, weights.shape[-1])
    c0 = torch.gather(cdf, -1, idx - 1)
    c1 = torch.gather(cdf, -1, idx)
    e0 = torch.gather(edges, -1, idx - 1)
    e1 = torch.gather(edges, -1, idx)
    span = c1 - c0
    frac = torch.where(span > 0, (u - c0) / torch.where(span > 0, span, 1.0), torch.zeros_like(u))
    t = e0 + frac * (e1 - e0)
    return torch.sort(t, dim=-1).values


# ----------------------------------------------------------------- rendering

def volume_weights(sigmas: torch.Tensor, deltas: torch.Tensor):
    """Per-sample weights ``s(i) (1 - exp(-sigma_i delta_i))`` and transmittance ``s(i)``."""
    if sigmas.shape != deltas.shape:
        raise DimensionMismatch(f"sigmas {tuple(sigmas.shape)} and deltas {tuple(deltas.shape)} differ")
    tau = sigmas * deltas
    accumulated = torch.cumsum(tau, dim=-1)
    transmittance = torch.exp(-torch.cat([torch.zeros_like(tau[..., :1]), accumulated[..., :-1]], dim=-1))
    return transmittance * (1.0 - torch.exp(-tau)), transmittance


def render_color(sigmas, colors, deltas) -> torch.Tensor:
    if colors.shape[:-1] != sigmas.shape:
        raise DimensionMismatch("colors must have one RGB triple per sample")
    w, _ = volume_weights(sigmas, deltas)
    return (w[..., None] * colors).sum(dim=-2)


def render_depth(sigmas, z, deltas) -> torch.Tensor:
    if z.shape != sigmas.shape:
        raise DimensionMismatch("sample distances must match sigmas")
    w, _ = volume_weights(sigmas, deltas)
    return (w * z).sum(dim=-1)


def render_opacity(sigmas, deltas) -> torch.Tensor:
    w, _ = volume_weights(sigmas, deltas)
    return w.sum(dim=-1)


def _render_pass(net: MLP, batch: RaySampleBatch, background: float | None):
    pts = batch.points
    dirs = batch.directions[:, None, :].expand_as(pts)
    rgb, sigma = net(pts, dirs)
    w, _ = volume_weights(sigma, batch.deltas)
    color = (w[..., None] * rgb).sum(-2)
    opacity = w.sum(-1)
    if background is not None:
        color = color + background * (1.0 - opacity[..., None])
    depth = (w * batch.t).sum(-1)
    return {"rgb": color, "depth": depth, "opacity": opacity, "weights": w}


def render_rays(field: RadianceField, origins: torch.Tensor, dirs: torch.Tensor, t_near: float,
                t_far: float, n_coarse: int, n_fine: int, generator: torch.Generator | None = None,
                background: float | None = 1.0, fine_t: torch.Tensor | None = None) -> dict:
    """Coarse pass on stratified samples, fine pass on coarse plus importance samples.

    Returns a dict with ``coarse`` and ``fine`` sub-results plus ``fine_t``, the
    importance samples used (pass them back through ``fine_t`` to hold the
    sample positions fixed, e.g. for finite-difference checks).
    """
    coarse_batch = sample_stratified(origins, dirs, t_near, t_far, n_coarse, generator)
    coarse = _render_pass(field.coarse, coarse_batch, background)
    if fine_t is None:
        edges = torch.cat([coarse_batch.t, torch.full_like(coarse_batch.t[:, :1], t_far)], -1)
        fine_t = sample_hierarchical(coarse["weights"], edges, n_fine, generator) if n_fine > 0 \
            else coarse_batch.t[:, :0]
    t_all = torch.sort(torch.cat([coarse_batch.t, fine_t.detach()], -1), -1).values
    fine_batch = RaySampleBatch(origins, dirs, t_all, interval_deltas(t_all, t_far))
    fine = _render_pass(field.fine, fine_batch, background)
    return {"coarse": coarse, "fine": fine, "fine_t": fine_t}


def nerf_loss(pred_coarse: torch.Tensor, pred_fine: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared L2 colour errors of both passes."""
    if not (pred_coarse.shape == pred_fine.shape == target.shape):
        raise DimensionMismatch("predictions and targets must share a shape")
    return (((target - pred_coarse) ** 2).sum(-1) + ((target - pred_fine) ** 2).sum(-1)).mean()


@torch.no_grad()
def render_view(field: RadianceField, camera: Camera, t_near: float, t_far: float,
                n_coarse: int = 32, n_fine: int = 64, chunk: int = 8192, background: float | None = 1.0):
    """Render image, depth and opacity rasters with deterministic sampling."""
    origins, dirs = camera.pixel_rays()
    h, w = camera.shape
    o = torch.as_tensor(origins.reshape(-1, 3), dtype=field.dtype)
    d = torch.as_tensor(dirs.reshape(-1, 3), dtype=field.dtype)
    rgb, depth, opacity = [], [], []
    for i in range(0, len(o), chunk):
        out = render_rays(field, o[i:i + chunk], d[i:i + chunk], t_near, t_far, n_coarse, n_fine,
                          background=background)["fine"]
        rgb.append(out["rgb"])
        depth.append(out["depth"])
        opacity.append(out["opacity"])
    as_np = lambda xs, *shape: torch.cat(xs).double().numpy().reshape(*shape)  # noqa: E731
    return as_np(rgb, h, w, 3), as_np(depth, h, w), as_np(opacity, h, w)


def predict_depth_map(field: RadianceField, camera: Camera, t_near: float, t_far: float,
                      opacity_threshold: float = 0.5, n_coarse: int = 32, n_fine: int = 64):
    """Fine-network depth with pixels below ``opacity_threshold`` masked as background.

    Depth is the expected termination distance given that the ray terminates
    (rendered depth divided by opacity); the raw rendered depth is pulled
    towards the camera at partially transparent pixels.
    """
    _, depth, opacity = render_view(field, camera, t_near, t_far, n_coarse, n_fine)
    mask = opacity >= opacity_threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(opacity > 0, depth / opacity, 0.0)
    return depth, mask


# --------------------------------------------------------------- checkpoint

def _state_arrays(field: RadianceField) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in field.state_dict().items()}


def checkpoint_bytes(field: RadianceField, extra: dict | None = None) -> bytes:
    """Versioned, deterministic binary dump of the field parameters and config."""
    arrays = _state_arrays(field)
    names = sorted(arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "field": asdict(field.cfg),
        "dtype": str(field.dtype).replace("torch.", ""),
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    np_dtype = np.dtype(header["dtype"]).newbyteorder("<")
    for n in names:
        buf.write(np.ascontiguousarray(arrays[n], dtype=np_dtype).tobytes())
    return buf.getvalue()


def save_checkpoint(path, field: RadianceField, extra: dict | None = None) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    data = checkpoint_bytes(field, extra)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[RadianceField, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointVersionError(f"{path} is not a dvmnerf checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    off += 8
    header = json.loads(data[off:off + head_len])
    off += head_len
    cfg_keys = {f.name for f in fields(FieldConfig)}
    cfg = FieldConfig(**{k: v for k, v in header["field"].items() if k in cfg_keys})
    np_dtype = np.dtype(header["dtype"]).newbyteorder("<")
    field = RadianceField(cfg, dtype=getattr(torch, header["dtype"]))
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=off).reshape(t["shape"])
        off += count * np_dtype.itemsize
        state[t["name"]] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))
    field.load_state_dict(state)
    return field, header.get("extra", {})
