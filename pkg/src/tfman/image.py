"""Image I/O, colour conversion, degradation models and patch sampling.

Images are float64 arrays of shape (3, H, W) on the 0..255 scale. They are
only quantised to 8 bits when written to disk.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

BLUR_SIGMA = 1.6
BLUR_SIZE = 7
NOISE_LEVEL = 30.0
CUBIC_A = -0.5


class Degradation(str, enum.Enum):
    BI = "BI"
    BD = "BD"
    DN = "DN"


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSpec:
    kind: Degradation = Degradation.BI
    scale: int = 2
    noise_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Degradation(str(self.kind).upper().split(".")[-1]))
        if self.scale < 1:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def tag(self) -> str:
        return f"LR_{self.kind.value.lower()}_x{self.scale}"


@dataclass
class ImageRGB:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) image, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def clamped(self) -> "ImageRGB":
        return ImageRGB(np.clip(self.data, 0.0, 255.0))


@dataclass
class PatchPair:
    lr: np.ndarray
    hr: np.ndarray
    image_id: str
    offset: tuple[int, int]
    augmentation: int


# ---------------------------------------------------------------- I/O


def read_png(path: str | Path) -> ImageRGB:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return ImageRGB(arr.transpose(2, 0, 1))


def to_uint8(img: ImageRGB) -> np.ndarray:
    return np.clip(np.round(img.data), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(img: ImageRGB, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def quantize(img: ImageRGB) -> ImageRGB:
    return ImageRGB(np.clip(np.round(img.data), 0, 255))


# ---------------------------------------------------------------- bicubic


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) cubic-convolution resampling matrix.

    Downscaling stretches the kernel by the scale ratio (antialiasing);
    out-of-range taps are folded onto the nearest edge sample.
    """
    scale = n_out / n_in
    kscale = min(scale, 1.0)
    width = 4.0 / kscale
    taps = int(np.ceil(width)) + 2
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        left = int(np.floor(u - width / 2))
        idx = left + np.arange(taps)
        w = kscale * cubic(kscale * (u - idx))
        w = w / w.sum()
        np.add.at(m[i], np.clip(idx, 0, n_in - 1), w)
    return m


def bicubic_resize(img: ImageRGB, out_h: int, out_w: int) -> ImageRGB:
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    mw = resize_weights(img.width, out_w)
    mh = resize_weights(img.height, out_h)
    rows = img.data @ mw.T
    out = np.einsum("ij,cjw->ciw", mh, rows)
    return ImageRGB(np.clip(out, 0.0, 255.0))


# ---------------------------------------------------------------- blur / noise


def gaussian_kernel7(sigma: float = BLUR_SIGMA) -> np.ndarray:
    r = np.arange(BLUR_SIZE) - BLUR_SIZE // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def gaussian_blur7(img: ImageRGB) -> ImageRGB:
    k = gaussian_kernel7()
    r = BLUR_SIZE // 2
    padded = np.pad(img.data, ((0, 0), (r, r), (r, r)), mode="edge")
    win = sliding_window_view(padded, (BLUR_SIZE, BLUR_SIZE), axis=(1, 2))
    out = np.einsum("chwij,ij->chw", win, k)
    return ImageRGB(np.clip(out, 0.0, 255.0))


def add_gaussian_noise(img: ImageRGB, level: float = NOISE_LEVEL, seed: int = 0) -> ImageRGB:
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return ImageRGB(img.data.copy())
    rng = np.random.default_rng(seed)
    noisy = img.data + rng.normal(0.0, level, size=img.data.shape)
    return ImageRGB(np.clip(noisy, 0.0, 255.0))


# ---------------------------------------------------------------- degradation


def mod_crop(img: ImageRGB, scale: int) -> ImageRGB:
    """Centre-crop so both extents are divisible by ``scale``."""
    h = img.height - img.height % scale
    w = img.width - img.width % scale
    top = (img.height - h) // 2
    left = (img.width - w) // 2
    return ImageRGB(img.data[:, top:top + h, left:left + w])


def downscale(img: ImageRGB, scale: int) -> ImageRGB:
    return bicubic_resize(img, img.height // scale, img.width // scale)


def degrade(hr: ImageRGB, spec: DegradationSpec) -> ImageRGB:
    hr = mod_crop(hr, spec.scale)
    if spec.kind is Degradation.BI:
        return downscale(hr, spec.scale)
    if spec.kind is Degradation.BD:
        return downscale(gaussian_blur7(hr), spec.scale)
    return add_gaussian_noise(downscale(hr, spec.scale), NOISE_LEVEL, spec.noise_seed)


def rgb_to_y(img: ImageRGB | np.ndarray) -> np.ndarray:
    """Studio-swing BT.601 luma, returned as (1, H, W)."""
    d = img.data if isinstance(img, ImageRGB) else np.asarray(img, dtype=np.float64)
    y = 16.0 + (65.481 * d[0] + 128.553 * d[1] + 24.966 * d[2]) / 255.0
    return y[None]


# ---------------------------------------------------------------- augmentation


def apply_dihedral(arr: np.ndarray, code: int) -> np.ndarray:
    """Codes 0-7: mirror the last axis when code >= 4, then rotate by (code % 4) quarter turns."""
    if not 0 <= code < 8:
        raise ValueError(f"augmentation code must be in 0..7, got {code}")
    out = arr[..., ::-1] if code >= 4 else arr
    return np.ascontiguousarray(np.rot90(out, code % 4, axes=(-2, -1)))


def compose_dihedral(first: int, second: int) -> int:
    """Code equivalent to applying ``first`` then ``second``."""
    k1, m1 = first % 4, first // 4
    k2, m2 = second % 4, second // 4
    k = (k2 + (-k1 if m2 else k1)) % 4
    return k + 4 * ((m1 + m2) % 2)


def sample_patch_pair(
    hr: ImageRGB,
    spec: DegradationSpec,
    p: int,
    rng: np.random.Generator,
    lr: ImageRGB | None = None,
    image_id: str = "",
) -> PatchPair:
    """Crop aligned LR/HR windows from a once-degraded image and augment both."""
    hr = mod_crop(hr, spec.scale)
    if lr is None:
        lr = degrade(hr, spec)
    if lr.height < p or lr.width < p:
        raise SamplingError(f"image {image_id!r} LR size {lr.height}x{lr.width} is smaller than patch {p}")
    s = spec.scale
    y = int(rng.integers(0, lr.height - p + 1))
    x = int(rng.integers(0, lr.width - p + 1))
    code = int(rng.integers(0, 8))
    lr_patch = lr.data[:, y:y + p, x:x + p]
    hr_patch = hr.data[:, s * y:s * (y + p), s * x:s * (x + p)]
    return PatchPair(apply_dihedral(lr_patch, code), apply_dihedral(hr_patch, code), image_id, (y, x), code)


def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if (d / "HR").is_dir():
        d = d / "HR"
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
