"""Attack layer: crop sampling, region selection, post-processing, rectification.

Images are (B, C, H, W) tensors in [0, 1]. Resampling is bilinear with
half-pixel-center alignment everywhere (``align_corners=False``).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .metrics import RectMask, round_half_away


class AttackParamError(ValueError):
    pass


class CodecUnavailable(RuntimeError):
    pass


# canonical kind -> (text token, parameter names)
ATTACK_KINDS = {
    "identity": ("identity", ()),
    "jpeg_sim": ("jpeg_sim", ("qf",)),
    "jpeg_real": ("jpeg_real", ("qf",)),
    "gaussian_blur": ("blur", ("k",)),
    "rescale": ("rescale", ("ratio",)),
    "median": ("median", ("window",)),
    "awgn": ("awgn", ("sigma",)),
    "dropout": ("dropout", ("p",)),
    "brightness": ("brightness", ("b",)),
    "contrast": ("contrast", ("c",)),
}
EVAL_ONLY = {"brightness", "contrast"}
_TOKEN_TO_KIND = {tok: kind for kind, (tok, _) in ATTACK_KINDS.items()}
_TOKEN_TO_KIND.update({kind: kind for kind in ATTACK_KINDS})
_INT_PARAMS = {"qf", "k", "window"}


@dataclass(frozen=True)
class AttackSpec:
    """One post-processing attack. Missing parameters are drawn at apply time."""

    kind: str
    params: tuple = ()  # sorted (name, value) pairs, hashable

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackParamError(f"unknown attack kind {self.kind!r}")
        allowed = ATTACK_KINDS[self.kind][1]
        for name, value in self.params:
            if name not in allowed:
                raise AttackParamError(f"{self.kind} takes no parameter {name!r}")
            _validate(self.kind, name, value)

    @classmethod
    def make(cls, kind: str, **params) -> AttackSpec:
        kind = _TOKEN_TO_KIND.get(kind, kind)
        return cls(kind, tuple(sorted(params.items())))

    @classmethod
    def parse(cls, text: str) -> AttackSpec:
        """Parse the canonical text form, e.g. ``"jpeg_real:qf=70"`` or ``"blur:k=5"``."""
        text = text.strip()
        token, _, rest = text.partition(":")
        kind = _TOKEN_TO_KIND.get(token.strip())
        if kind is None:
            raise AttackParamError(f"unknown attack {token!r}")
        params = {}
        for item in filter(None, (p.strip() for p in rest.split(","))):
            name, eq, value = item.partition("=")
            if not eq:
                raise AttackParamError(f"malformed attack parameter {item!r}")
            name = name.strip()
            try:
                params[name] = int(value) if name in _INT_PARAMS else float(value)
            except ValueError as e:
                raise AttackParamError(f"bad value for {name}: {value!r}") from e
        return cls.make(kind, **params)

    def __str__(self) -> str:
        token = ATTACK_KINDS[self.kind][0]
        if not self.params:
            return token
        return token + ":" + ",".join(f"{k}={_fmt(v)}" for k, v in self.params)

    def get(self, name, default=None):
        return dict(self.params).get(name, default)

    @property
    def severity(self) -> float | None:
        """The attack's single numeric parameter, used as the x-axis of plots."""
        names = ATTACK_KINDS[self.kind][1]
        return float(self.get(names[0])) if names and self.get(names[0]) is not None else None

    def resolve(self, rng: np.random.Generator) -> AttackSpec:
        """Fill missing parameters with draws from the training ranges."""
        p = dict(self.params)
        k = self.kind
        if k in ("jpeg_sim", "jpeg_real"):
            p.setdefault("qf", int(rng.integers(10, 101)))
        elif k == "gaussian_blur":
            p.setdefault("k", int(rng.choice([3, 5])))
        elif k == "rescale":
            p.setdefault("ratio", float(rng.uniform(0.5, 2.0)))
        elif k == "median":
            p.setdefault("window", 4)
        elif k == "awgn":
            p.setdefault("sigma", float(rng.uniform(0.0, 0.05)))
        elif k == "dropout":
            p.setdefault("p", float(rng.uniform(0.1, 0.3)))
        elif k == "brightness":
            p.setdefault("b", float(rng.uniform(0.7, 1.3)))
        elif k == "contrast":
            p.setdefault("c", float(rng.uniform(0.7, 1.3)))
        return AttackSpec(k, tuple(sorted(p.items())))


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v))


def _validate(kind, name, value):
    ok = {
        "qf": lambda v: 0 <= v <= 100,
        "k": lambda v: v in (3, 5),
        "ratio": lambda v: 0.5 <= v <= 2.0,
        "window": lambda v: v >= 2,
        "sigma": lambda v: v >= 0,
        "p": lambda v: 0.0 <= v <= 1.0,
        "b": lambda v: v >= 0,
        "c": lambda v: v >= 0,
    }[name]
    if not ok(value):
        raise AttackParamError(f"{kind}: {name}={value} out of range")


@dataclass
class CropSpec:
    rate: float
    aspect: tuple[float, float] = (0.75, 1.33)
    resize_target: tuple[int, int] | None = None

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise AttackParamError(f"crop rate must be in (0, 1], got {self.rate}")
        lo, hi = self.aspect
        if not 0 < lo <= 1.0 <= hi:
            raise AttackParamError(f"aspect range must bracket 1, got {self.aspect}")


def sample_crop(rng: np.random.Generator, spec: CropSpec, h: int, w: int) -> RectMask:
    """Random axis-aligned rectangle retaining ``spec.rate`` of the area."""
    r = spec.rate
    # keep both normalized sides <= 1
    lo, hi = max(spec.aspect[0], r), min(spec.aspect[1], 1.0 / r)
    a = float(rng.uniform(lo, hi)) if hi > lo else 1.0
    cw = int(min(w, round_half_away(math.sqrt(r * a) * w)))
    ch = int(min(h, round_half_away(math.sqrt(r / a) * h)))
    if cw < 2 or ch < 2:
        raise AttackParamError(f"crop rate {r} too small for a {h}x{w} image")
    left = int(rng.integers(0, w - cw + 1))
    top = int(rng.integers(0, h - ch + 1))
    return RectMask(left / w, top / h, (left + cw) / w, (top + ch) / h)


def resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def region_select(x: torch.Tensor, m: RectMask,
                  resize_target: tuple[int, int] | None = None) -> torch.Tensor:
    h, w = x.shape[-2:]
    r0, r1, c0, c1 = m.pixel_box(h, w)
    if r1 - r0 < 2 or c1 - c0 < 2:
        raise AttackParamError("degenerate crop rectangle (< 2 px side)")
    out = x[..., r0:r1, c0:c1]
    return resize(out, resize_target) if resize_target else out


class _Quantize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.floor(x.clamp(0.0, 1.0) * 255.0 + 0.5) / 255.0

    @staticmethod
    def backward(ctx, g):
        return g


def quantize_u8(x: torch.Tensor) -> torch.Tensor:
    """Snap to the k/255 grid (round half up); straight-through gradient."""
    return _Quantize.apply(x)


def real_jpeg(x: torch.Tensor, qf: int) -> torch.Tensor:
    """Round-trip each image through the platform baseline JPEG codec (no gradient)."""
    try:
        from PIL import Image, features
    except ImportError as e:  # pragma: no cover
        raise CodecUnavailable("Pillow is required for real JPEG") from e
    if not features.check("jpg"):
        raise CodecUnavailable("Pillow was built without JPEG support")
    arr = (x.detach().clamp(0, 1) * 255.0 + 0.5).floor().to(torch.uint8)
    arr = arr.permute(0, 2, 3, 1).cpu().numpy()
    out = []
    for img in arr:
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format="JPEG", quality=int(qf))
        buf.seek(0)
        out.append(np.asarray(Image.open(buf).convert("RGB")))
    t = torch.from_numpy(np.stack(out)).permute(0, 3, 1, 2).to(x.dtype) / 255.0
    return t.to(x.device)


def blur_sigma(k: int) -> float:
    return 0.3 * ((k - 1) * 0.5 - 1) + 0.8


def gaussian_blur(x: torch.Tensor, k: int) -> torch.Tensor:
    sigma = blur_sigma(k)
    t = torch.arange(k, dtype=x.dtype, device=x.device) - (k - 1) / 2
    g = torch.exp(-t**2 / (2 * sigma**2))
    g = g / g.sum()
    c = x.shape[1]
    kernel = (g[:, None] * g[None, :]).expand(c, 1, k, k)
    xp = F.pad(x, (k // 2,) * 4, mode="reflect")
    return F.conv2d(xp, kernel, groups=c)


def median_filter(x: torch.Tensor, window: int = 4) -> torch.Tensor:
    """Sliding median; even windows take the lower median. Reflect padding."""
    lo, hi = (window - 1) // 2, window // 2
    xp = F.pad(x, (lo, hi, lo, hi), mode="reflect")
    b, c, h, w = x.shape
    patches = F.unfold(xp, window).view(b, c, window * window, h, w)
    return patches.median(dim=2).values


def rescale(x: torch.Tensor, ratio: float) -> torch.Tensor:
    h, w = x.shape[-2:]
    small = (max(2, int(round_half_away(h * ratio))), max(2, int(round_half_away(w * ratio))))
    return resize(resize(x, small), (h, w))


def apply_attack(x: torch.Tensor, a: AttackSpec, rng: np.random.Generator, *,
                 cover: torch.Tensor | None = None,
                 simulator: Callable[[torch.Tensor, int], torch.Tensor] | None = None
                 ) -> torch.Tensor:
    """Apply one attack and re-quantize to the 8-bit grid.

    ``cover`` is the unprotected counterpart of ``x`` (dropout only);
    ``simulator`` maps (images, qf) to simulated JPEG (jpeg_sim only).
    """
    a = a.resolve(rng)
    k = a.kind
    if k == "identity":
        out = x
    elif k == "jpeg_real":
        out = real_jpeg(x, a.get("qf"))
    elif k == "jpeg_sim":
        if simulator is None:
            raise AttackParamError("jpeg_sim needs a trained JPEG simulator")
        out = simulator(x, a.get("qf"))
    elif k == "gaussian_blur":
        out = gaussian_blur(x, a.get("k"))
    elif k == "rescale":
        out = rescale(x, a.get("ratio"))
    elif k == "median":
        out = median_filter(x, a.get("window"))
    elif k == "awgn":
        noise = torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(x)
        out = x + a.get("sigma") * noise
    elif k == "dropout":
        if cover is None or cover.shape != x.shape:
            raise AttackParamError("dropout needs a cover image of the same shape")
        keep = torch.from_numpy(rng.random((x.shape[0], 1, *x.shape[-2:])) < a.get("p"))
        out = torch.where(keep.to(x.device), cover, x)
    elif k == "brightness":
        out = x * a.get("b")
    elif k == "contrast":
        gray = (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).mean(dim=(1, 2))
        mean = gray.view(-1, 1, 1, 1)
        out = (x - mean) * a.get("c") + mean
    else:  # pragma: no cover - guarded by AttackSpec
        raise AttackParamError(f"unknown attack {k!r}")
    return quantize_u8(out)


def zero_pad_resize(x_atk: torch.Tensor, masks: RectMask | Sequence[RectMask],
                    original_hw: tuple[int, int]) -> torch.Tensor:
    """Resize each image into its rectangle on a zero canvas of ``original_hw``."""
    h, w = original_hw
    if isinstance(masks, RectMask):
        masks = [masks] * x_atk.shape[0]
    if len(masks) != x_atk.shape[0]:
        raise AttackParamError("need one mask per image")
    out = []
    for img, m in zip(x_atk, masks):
        r0, r1, c0, c1 = m.pixel_box(h, w)
        if r1 - r0 < 2 or c1 - c0 < 2:
            raise AttackParamError("degenerate rectification rectangle (< 2 px side)")
        patch = resize(img[None], (r1 - r0, c1 - c0))
        out.append(F.pad(patch, (c0, w - c1, r0, h - r1)))
    return torch.cat(out, dim=0)


@dataclass(frozen=True)
class AffineMap:
    """p -> scale * p + shift per axis, in normalized coordinates."""

    scale_x: float = 1.0
    scale_y: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    def __post_init__(self):
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise AttackParamError("affine scales must be positive")

    def apply_point(self, x: float, y: float) -> tuple[float, float]:
        return self.scale_x * x + self.shift_x, self.scale_y * y + self.shift_y


def affine_from_masks(m: RectMask, m_hat: RectMask) -> AffineMap:
    sx = (m_hat.x1 - m_hat.x0) / (m.x1 - m.x0)
    sy = (m_hat.y1 - m_hat.y0) / (m.y1 - m.y0)
    return AffineMap(sx, sy, m_hat.x0 - sx * m.x0, m_hat.y0 - sy * m.y0)


def apply_affine(img: torch.Tensor, maps: AffineMap | Sequence[AffineMap]) -> torch.Tensor:
    """Warp images so content at p moves to Aff(p); border padding outside."""
    b, _, h, w = img.shape
    if isinstance(maps, AffineMap):
        maps = [maps] * b
    theta = torch.zeros(b, 2, 3, dtype=img.dtype, device=img.device)
    for i, a in enumerate(maps):
        # grid coords g = 2u - 1; source u_s = (u - shift) / scale
        theta[i, 0, 0] = 1.0 / a.scale_x
        theta[i, 0, 2] = (1.0 - a.scale_x - 2.0 * a.shift_x) / a.scale_x
        theta[i, 1, 1] = 1.0 / a.scale_y
        theta[i, 1, 2] = (1.0 - a.scale_y - 2.0 * a.shift_y) / a.scale_y
    grid = F.affine_grid(theta, list(img.shape), align_corners=False)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=False)
