"""PSNR and SSIM for images in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionMismatch, ValidationError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio in dB over all channels, capped at 99 dB for identical inputs."""
    a, b = _check_pair(a, b)
    diff = (a - b) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(diff))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Mean windowed SSIM of the channel-mean grayscale images (dynamic range 1)."""
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(-1), b.mean(-1)
    if min(a.shape) < SSIM_WINDOW:
        raise ValidationError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    filt = lambda x: convolve2d(x, win, mode="valid")  # noqa: E731 (window is symmetric)
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, name: str, pred, target) -> None:
        self.rows.append((name, psnr(pred, target), ssim(pred, target)))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def to_text(self) -> str:
        lines = ["name\tpsnr\tssim"]
        lines += [f"{n}\t{p:.6f}\t{s:.6f}" for n, p, s in self.rows]
        lines.append(f"mean\t{self.mean_psnr:.6f}\t{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def parse(cls, text: str) -> tuple["MetricReport", tuple[float, float]]:
        """Rows and the stored aggregate ``(psnr, ssim)`` of a written report."""
        rows, agg = [], None
        for line in text.strip().splitlines()[1:]:
            name, p, s = line.split("\t")
            if name == "mean":
                agg = (float(p), float(s))
            else:
                rows.append((name, float(p), float(s)))
        return cls(rows), agg
