"""Image/mask data model and evaluation metrics (PSNR, SSIM, F1)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConstants:
    c1: float = SSIM_C1
    c2: float = SSIM_C2
    psnr_cap_db: float = PSNR_CAP_DB

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be positive")


DEFAULT_CONSTANTS = MetricConstants()


def as_image(arr, *, check_range: bool = True) -> np.ndarray:
    """Validate an H x W x 3 unit-range image and return it as float64."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 image, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("image contains non-finite values")
    if check_range and (a.min() < 0.0 or a.max() > 1.0):
        raise DomainError("image values outside [0, 1]")
    return a


def round_half_away(x):
    """Round half away from zero (numpy's round is half-to-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class RectMask:
    """Axis-aligned rectangle in normalized coordinates plus a confidence."""

    x0: float
    y0: float
    x1: float
    y1: float
    confidence: float = 1.0

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1, self.confidence)
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise DomainError(f"rectangle values must lie in [0, 1]: {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DomainError(f"rectangle corners not ordered: {vals}")

    @classmethod
    def full(cls, confidence: float = 0.0) -> RectMask:
        return cls(0.0, 0.0, 1.0, 1.0, confidence)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def pixel_box(self, h: int, w: int) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1) half-open pixel bounds on an h x w grid."""
        c0, c1 = (int(v) for v in round_half_away([self.x0 * w, self.x1 * w]))
        r0, r1 = (int(v) for v in round_half_away([self.y0 * h, self.y1 * h]))
        return r0, r1, c0, c1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> RectMask:
        return cls(float(d["x0"]), float(d["y0"]), float(d["x1"]), float(d["y1"]),
                   float(d.get("confidence", 1.0)))

    @classmethod
    def from_json(cls, text: str) -> RectMask:
        return cls.from_dict(json.loads(text))

    @classmethod
    def parse(cls, text: str) -> RectMask:
        """Parse ``"x0,y0,x1,y1"`` (CLI form) or a JSON object."""
        text = text.strip()
        if text.startswith("{"):
            return cls.from_json(text)
        parts = [float(p) for p in text.split(",")]
        if len(parts) not in (4, 5):
            raise DomainError(f"expected x0,y0,x1,y1[,confidence], got {text!r}")
        return cls(*parts)


RECT_MASK_SCHEMA = {
    "type": "object",
    "properties": {k: {"type": "number", "minimum": 0.0, "maximum": 1.0}
                   for k in ("x0", "y0", "x1", "y1", "confidence")},
    "required": ["x0", "y0", "x1", "y1", "confidence"],
}


def rasterize(mask: RectMask, h: int, w: int) -> np.ndarray:
    r0, r1, c0, c1 = mask.pixel_box(h, w)
    out = np.zeros((h, w), dtype=np.uint8)
    out[r0:r1, c0:c1] = 1
    return out


def bounding_box(binary: np.ndarray) -> RectMask | None:
    """Normalized bounding box of the 1-region, or None if empty."""
    b = np.asarray(binary).astype(bool)
    if not b.any():
        return None
    h, w = b.shape
    rows = np.flatnonzero(b.any(axis=1))
    cols = np.flatnonzero(b.any(axis=0))
    return RectMask(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def save_mask_png(binary: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray((np.asarray(binary) > 0).astype(np.uint8) * 255, mode="L").save(path)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b, constants: MetricConstants = DEFAULT_CONSTANTS) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return constants.psnr_cap_db
    return min(10.0 * math.log10(1.0 / mse), constants.psnr_cap_db)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _window_size(h: int, w: int) -> int:
    # images smaller than the default window fall back to the largest odd size that fits
    size = min(SSIM_WINDOW, h, w)
    return size if size % 2 == 1 else size - 1


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    y = correlate1d(x, g, axis=0, mode="constant")
    y = correlate1d(y, g, axis=1, mode="constant")
    r = len(g) // 2
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim(a, b, constants: MetricConstants = DEFAULT_CONSTANTS) -> float:
    """Gaussian-windowed SSIM (covariance form), per channel then averaged.

    Only windows fully inside the image contribute. Inputs may be H x W or
    H x W x C.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = _window_size(a.shape[0], a.shape[1])
    if size < 1:
        raise ShapeError("image too small for SSIM")
    g = gaussian_window(size)
    c1, c2 = constants.c1, constants.c2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def _as_binary(m) -> np.ndarray:
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise DomainError("mask must be binary (0/1)")
    return m.astype(bool)


def f1_score(pred, truth) -> float:
    """Pixel F1 with positive = retained (in-crop) pixels.

    Two empty masks agree vacuously and score 1.0.
    """
    p, t = _as_binary(pred), _as_binary(truth)
    _check_same(p, t)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    denom = 2 * tp + fn + fp
    if denom == 0:
        return 1.0
    return 2 * tp / denom
