"""PSNR / SSIM on the luma channel and dataset-level benchmark reports."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .image import DegradationSpec, ImageRGB, bicubic_resize, degrade, list_images, mod_crop, quantize, read_png, rgb_to_y
from .parallel import map_ordered

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 255.0

Upscaler = Callable[[ImageRGB], ImageRGB]


def _shave(y: np.ndarray, crop: int) -> np.ndarray:
    if crop < 0:
        raise ValueError("crop must be non-negative")
    return y[crop:y.shape[0] - crop, crop:y.shape[1] - crop] if crop else y


def _luma_pair(a: ImageRGB, b: ImageRGB, crop: int) -> tuple[np.ndarray, np.ndarray]:
    if a.data.shape != b.data.shape:
        raise ValueError(f"image extents differ: {a.data.shape} vs {b.data.shape}")
    return _shave(rgb_to_y(a)[0], crop), _shave(rgb_to_y(b)[0], crop)


def psnr_y(a: ImageRGB, b: ImageRGB, crop: int = 0) -> float:
    """PSNR in dB; identical images give ``inf``."""
    ya, yb = _luma_pair(a, b, crop)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(x, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim_y(a: ImageRGB, b: ImageRGB, crop: int = 0) -> float:
    """Single-scale SSIM averaged over all fully-contained Gaussian windows."""
    ya, yb = _luma_pair(a, b, crop)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ya.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_a = _filter_valid(ya, g)
    mu_b = _filter_valid(yb, g)
    saa = _filter_valid(ya * ya, g) - mu_a**2
    sbb = _filter_valid(yb * yb, g) - mu_b**2
    sab = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class ImageScore:
    file: str
    psnr_db: float
    ssim: float


@dataclass
class MetricsReport:
    model_id: str
    spec: DegradationSpec
    crop: int
    rows: list[ImageScore] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        vals = [min(r.psnr_db, PSNR_CAP) for r in self.rows]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def write_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "psnr_db", "ssim"])
            for r in self.rows:
                w.writerow([r.file, f"{min(r.psnr_db, PSNR_CAP):.4f}", f"{r.ssim:.6f}"])
            w.writerow(["MEAN", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"])

    def table(self) -> str:
        width = max([len(r.file) for r in self.rows] + [8])
        head = (f"model={self.model_id} degradation={self.spec.kind.value} x{self.spec.scale} crop={self.crop}\n"
                f"{'file':<{width}}  {'PSNR(dB)':>9}  {'SSIM':>7}\n")
        body = "".join(f"{r.file:<{width}}  {min(r.psnr_db, PSNR_CAP):9.4f}  {r.ssim:7.4f}\n" for r in self.rows)
        foot = f"{'MEAN':<{width}}  {self.mean_psnr:9.4f}  {self.mean_ssim:7.4f}\n"
        if self.skipped:
            foot += "skipped: " + ", ".join(self.skipped) + "\n"
        return head + body + foot


def bicubic_upscaler(scale: int) -> Upscaler:
    def run(lr: ImageRGB) -> ImageRGB:
        return bicubic_resize(lr, lr.height * scale, lr.width * scale)
    return run


def model_upscaler(model) -> Upscaler:
    def run(lr: ImageRGB) -> ImageRGB:
        with T.no_grad():
            x = T.Tensor(lr.data.astype(model.parameters()[0].dtype))
            out = model(x).data.astype(np.float64)
        return ImageRGB(np.clip(out, 0.0, 255.0))
    return run


def score_image(upscale: Upscaler, hr: ImageRGB, spec: DegradationSpec, crop: int, name: str) -> ImageScore:
    hr = mod_crop(hr, spec.scale)
    sr = quantize(upscale(degrade(hr, spec)))
    return ImageScore(name, psnr_y(sr, hr, crop), ssim_y(sr, hr, crop))


def evaluate(upscale: Upscaler, dataset: str | Path, spec: DegradationSpec, crop: int | None = None,
             model_id: str = "model") -> MetricsReport:
    """Degrade every HR image, super-resolve it and score it; ``crop`` defaults to the scale."""
    crop = spec.scale if crop is None else crop
    report = MetricsReport(model_id, spec, crop)
    paths = list_images(dataset)

    def one(path: Path):
        try:
            hr = read_png(path)
        except Exception as exc:  # unreadable files are reported, not fatal
            log.warning("skipping %s: %s", path.name, exc)
            return path.name, None
        return path.name, score_image(upscale, hr, spec, crop, path.stem)

    for name, score in map_ordered(one, paths):
        if score is None:
            report.skipped.append(name)
        else:
            report.rows.append(score)
    return report
