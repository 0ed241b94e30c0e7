"""Training losses and image-quality metrics.

Images are (H, W, 3) arrays or tensors with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor
from .geometry import Aabb, CameraView, project_points

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PERC_FILTERS = 16
PERC_SCALES = 3


@dataclass(frozen=True)
class LossWeights:
    mask: float = 0.1
    ssim: float = 0.01
    perc: float = 0.01

    def __post_init__(self):
        if min(self.mask, self.ssim, self.perc) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    color: Tensor
    mask: Tensor
    ssim: Tensor
    perc: Tensor
    total: Tensor

    TERMS = ("color", "mask", "ssim", "perc", "total")

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in self.TERMS}

    def first_nonfinite(self) -> str | None:
        for k in self.TERMS:
            if not np.isfinite(getattr(self, k).data):
                return k
        return None


def photometric(pred, target) -> Tensor:
    """Mean over rays of the squared L2 color error."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.shape[0] == 0:
        raise ValueError("empty ray set")
    return dc.square(pred - target).sum(axis=1).mean()


def mask_loss(opacity, mask) -> Tensor:
    opacity = as_tensor(opacity)
    mask = np.asarray(mask, dtype=np.float64)
    if opacity.shape != mask.shape:
        raise ValueError(f"opacity {opacity.shape} and mask {mask.shape} differ")
    if opacity.size == 0:
        raise ValueError("empty ray set")
    return dc.square(opacity - mask).mean()


@lru_cache(maxsize=None)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _planes(img) -> Tensor:
    # (H, W, C) -> (C, 1, H, W) so each channel is filtered separately
    img = as_tensor(img)
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {img.shape}")
    h, w, c = img.shape
    return img.transpose(2, 0, 1).reshape(c, 1, h, w)


def ssim(a, b) -> Tensor:
    """Mean windowed SSIM over all valid windows and channels."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()[None, None]
    pa, pb = _planes(a), _planes(b)

    def blur(x):
        return dc.conv2d(x, win)

    mu_a, mu_b = blur(pa), blur(pb)
    var_a = blur(pa * pa) - mu_a * mu_a
    var_b = blur(pb * pb) - mu_b * mu_b
    cov = blur(pa * pb) - mu_a * mu_b
    num = (2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


@lru_cache(maxsize=None)
def perceptual_filters(seed: int = 0, channels: int = 3) -> tuple[np.ndarray, ...]:
    rng = np.random.default_rng(seed)
    return tuple(rng.standard_normal((PERC_FILTERS, channels, 3, 3)) / 3.0 for _ in range(PERC_SCALES))


def _avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x[:, :, : h // 2 * 2, : w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def perceptual(a, b, seed: int = 0) -> Tensor:
    """Distance between unit-normalized responses of a fixed random filter stack at 3 scales.

    Stands in for a learned perceptual metric; any callable with the same
    signature can replace it.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")
    xa = a.transpose(2, 0, 1).reshape(1, a.shape[2], a.shape[0], a.shape[1])
    xb = b.transpose(2, 0, 1).reshape(1, b.shape[2], b.shape[0], b.shape[1])
    total = None
    for s, filt in enumerate(perceptual_filters(seed, a.shape[2])):
        if s:
            xa, xb = _avg_pool2(xa), _avg_pool2(xb)
        fa, fb = dc.conv2d(xa, filt, padding=1), dc.conv2d(xb, filt, padding=1)
        fa = fa / dc.sqrt((fa * fa).sum(axis=1, keepdims=True) + 1e-10)
        fb = fb / dc.sqrt((fb * fb).sum(axis=1, keepdims=True) + 1e-10)
        term = dc.square(fa - fb).sum(axis=1).mean()
        total = term if total is None else total + term
    return total * (1.0 / PERC_SCALES)


def total_loss(color: Tensor, mask: Tensor, ssim_term: Tensor, perc: Tensor,
               weights: LossWeights = LossWeights()) -> LossReport:
    """L = L_color + w_mask * L_mask + w_ssim * L_ssim + w_perc * L_perc."""
    total = color + weights.mask * mask + weights.ssim * ssim_term + weights.perc * perc
    return LossReport(color, mask, ssim_term, perc, total)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over masked pixels; ``inf`` when the images agree exactly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")
    err = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty metric mask")
        err = err[mask]
    mse = float(err.mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def box_rect(cam: CameraView, box: Aabb) -> tuple[int, int, int, int]:
    """Pixel rectangle (x0, y0, x1, y1), end-exclusive, covering the projected box."""
    uv, depth = project_points(cam, box.corners())
    if np.any(depth <= 0):
        return 0, 0, cam.width, cam.height
    lo = np.ceil(uv.min(axis=0) - 0.5)  # first pixel whose center lies inside
    hi = np.floor(uv.max(axis=0) - 0.5) + 1
    x0, y0 = (int(np.clip(v, 0, n)) for v, n in zip(lo, (cam.width, cam.height)))
    x1, y1 = (int(np.clip(v, 0, n)) for v, n in zip(hi, (cam.width, cam.height)))
    return x0, y0, max(x1, x0), max(y1, y0)


def bbox_mask(cam: CameraView, box: Aabb) -> np.ndarray:
    x0, y0, x1, y1 = box_rect(cam, box)
    m = np.zeros((cam.height, cam.width), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def masked_ssim(a: np.ndarray, b: np.ndarray, rect: tuple[int, int, int, int]) -> float:
    """SSIM over the crop ``rect``, grown to the window size where needed."""
    h, w = a.shape[:2]
    x0, y0, x1, y1 = rect

    def grow(lo, hi, n):
        short = SSIM_WINDOW - (hi - lo)
        if short > 0:
            lo = max(0, lo - (short + 1) // 2)
            hi = min(n, lo + SSIM_WINDOW)
            lo = max(0, hi - SSIM_WINDOW)
        return lo, hi

    x0, x1 = grow(x0, x1, w)
    y0, y1 = grow(y0, y1, h)
    with dc.no_grad():
        return float(ssim(a[y0:y1, x0:x1], b[y0:y1, x0:x1]).data)


@dataclass
class MetricRecord:
    image_id: str
    psnr: float
    ssim: float
    coverage: float  # fraction of pixels inside the metric mask

    HEADER = "image_id\tpsnr\tssim\tcoverage"

    def line(self) -> str:
        return f"{self.image_id}\t{self.psnr:.6f}\t{self.ssim:.6f}\t{self.coverage:.6f}"

    @classmethod
    def parse(cls, line: str) -> "MetricRecord":
        ident, p, s, c = line.rstrip("\n").split("\t")
        return cls(ident, float(p), float(s), float(c))


def evaluate_image(image_id: str, pred: np.ndarray, target: np.ndarray, cam: CameraView, box: Aabb) -> MetricRecord:
    rect = box_rect(cam, box)
    m = bbox_mask(cam, box)
    return MetricRecord(image_id, psnr(pred, target, m), masked_ssim(pred, target, rect), float(m.mean()))
