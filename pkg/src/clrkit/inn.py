"""Invertible U-shaped generator: Haar levels with double-sided affine couplings.

The forward pass protects an image, the exact inverse recovers it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import ShapeError


@dataclass
class HaarStack:
    low: torch.Tensor
    horizontal: torch.Tensor  # top rows minus bottom rows
    vertical: torch.Tensor  # left columns minus right columns
    diagonal: torch.Tensor

    @property
    def highs(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (self.horizontal, self.vertical, self.diagonal)


def haar_forward(x: torch.Tensor) -> HaarStack:
    """Orthonormal 2x2 Haar analysis over the last two dims."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"Haar analysis needs even height/width, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return HaarStack(
        low=(a + b + c + d) / 2,
        horizontal=(a + b - c - d) / 2,
        vertical=(a - b + c - d) / 2,
        diagonal=(a - b - c + d) / 2,
    )


def haar_inverse(s: HaarStack) -> torch.Tensor:
    shape = s.low.shape
    if any(band.shape != shape for band in s.highs):
        raise ShapeError("Haar bands have inconsistent shapes")
    ll, hh_, vv, dd = s.low, s.horizontal, s.vertical, s.diagonal
    out = ll.new_empty(*shape[:-2], shape[-2] * 2, shape[-1] * 2)
    out[..., 0::2, 0::2] = (ll + hh_ + vv + dd) / 2
    out[..., 0::2, 1::2] = (ll + hh_ - vv - dd) / 2
    out[..., 1::2, 0::2] = (ll - hh_ + vv - dd) / 2
    out[..., 1::2, 1::2] = (ll - hh_ - vv + dd) / 2
    return out


def haar_down(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 4C, H/2, W/2) laid out as [low | horizontal | vertical | diagonal]."""
    s = haar_forward(x)
    return torch.cat([s.low, *s.highs], dim=1)


def haar_up(y: torch.Tensor) -> torch.Tensor:
    return haar_inverse(HaarStack(*torch.chunk(y, 4, dim=1)))


class SpectralNorm:
    """Power-iteration estimate of the top singular value with persistent vectors."""

    def __init__(self, rows: int, cols: int, generator: torch.Generator | None = None,
                 dtype=torch.float32):
        self.u = F.normalize(torch.randn(rows, generator=generator, dtype=dtype), dim=0)
        self.v = F.normalize(torch.randn(cols, generator=generator, dtype=dtype), dim=0)

    @torch.no_grad()
    def iterate(self, w: torch.Tensor, n: int = 1) -> None:
        for _ in range(n):
            self.v = F.normalize(w.t() @ self.u, dim=0, eps=1e-12)
            self.u = F.normalize(w @ self.v, dim=0, eps=1e-12)

    def sigma(self, w: torch.Tensor) -> torch.Tensor:
        return torch.dot(self.u, w @ self.v)


def spectral_project(weight: torch.Tensor, state: SpectralNorm | None = None,
                     iterations: int = 1) -> torch.Tensor:
    """Divide a 2-D weight by its power-iteration estimate of sigma_max.

    Pass the same ``state`` across calls to keep the singular vectors warm.
    """
    if weight.ndim != 2:
        raise ShapeError("spectral_project expects a 2-D weight")
    if state is None:
        state = SpectralNorm(*weight.shape, dtype=weight.dtype)
    state.iterate(weight.detach(), iterations)
    return weight / state.sigma(weight).clamp_min(1e-12)


class SNConv2d(nn.Conv2d):
    """Conv2d whose kernel is spectrally normalized.

    The singular vectors only move when ``power_iterate`` is called, so a
    forward/inverse pair inside one step sees the same normalized weights.
    """

    def __init__(self, *args, init_iterations: int = 5, **kwargs):
        super().__init__(*args, **kwargs)
        w = self.weight.detach().flatten(1)
        self.register_buffer("sn_u", F.normalize(torch.randn(w.shape[0]), dim=0))
        self.register_buffer("sn_v", F.normalize(torch.randn(w.shape[1]), dim=0))
        self.power_iterate(init_iterations)

    @torch.no_grad()
    def power_iterate(self, n: int = 1) -> None:
        w = self.weight.flatten(1)
        u, v = self.sn_u, self.sn_v
        for _ in range(n):
            v = F.normalize(w.t() @ u, dim=0, eps=1e-12)
            u = F.normalize(w @ v, dim=0, eps=1e-12)
        self.sn_u.copy_(u)
        self.sn_v.copy_(v)

    def normalized_weight(self) -> torch.Tensor:
        w = self.weight.flatten(1)
        sigma = torch.dot(self.sn_u, w @ self.sn_v).abs().clamp_min(1e-12)
        return self.weight / sigma

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


def subnet(c_in: int, c_out: int, hidden: int, spectral: bool = True) -> nn.Sequential:
    conv = SNConv2d if spectral else nn.Conv2d
    last = nn.Conv2d(hidden, c_out, 3, padding=1)
    # zero output layer: every coupling starts as the identity
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
    return nn.Sequential(
        conv(c_in, hidden, 3, padding=1),
        nn.LeakyReLU(0.2),
        conv(hidden, hidden, 3, padding=1),
        nn.LeakyReLU(0.2),
        last,
    )


class CouplingBlock(nn.Module):
    """Double-sided affine coupling with tanh-clamped log-scales."""

    def __init__(self, c1: int, c2: int, hidden: int = 16, clamp: float = 2.0,
                 spectral: bool = True):
        super().__init__()
        self.split = (c1, c2)
        self.clamp = clamp
        self.s1 = subnet(c1, c2, hidden, spectral)
        self.t1 = subnet(c1, c2, hidden, spectral)
        self.s2 = subnet(c2, c1, hidden, spectral)
        self.t2 = subnet(c2, c1, hidden, spectral)

    def log_scale(self, z):
        return self.clamp * torch.tanh(z)

    def forward(self, u1, u2):
        v1 = u1 * torch.exp(self.log_scale(self.s2(u2))) + self.t2(u2)
        v2 = u2 * torch.exp(self.log_scale(self.s1(v1))) + self.t1(v1)
        return v1, v2

    def inverse(self, v1, v2):
        u2 = (v2 - self.t1(v1)) * torch.exp(-self.log_scale(self.s1(v1)))
        u1 = (v1 - self.t2(u2)) * torch.exp(-self.log_scale(self.s2(u2)))
        return u1, u2


def coupling_forward(u, block: CouplingBlock):
    return block(*u)


def coupling_inverse(v, block: CouplingBlock):
    return block.inverse(*v)


@dataclass
class GeneratorConfig:
    levels: int = 3
    couplings_per_level: int = 4
    base_channels: int = 16
    clamp: float = 2.0
    use_spectral_norm: bool = True
    in_channels: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.couplings_per_level < 1:
            raise ValueError("levels and couplings_per_level must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class InvertibleGenerator(nn.Module):
    """U-shaped INN: ``levels`` Haar-down modules then mirrored Haar-up modules.

    Each module holds ``couplings_per_level`` couplings that split channels
    into the low band and the three high bands.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()

        def level(k):
            c = cfg.in_channels * 4 ** k
            return nn.ModuleList(
                CouplingBlock(c, 3 * c, cfg.base_channels, cfg.clamp, cfg.use_spectral_norm)
                for _ in range(cfg.couplings_per_level))

        self.down = nn.ModuleList(level(k) for k in range(cfg.levels))
        self.up = nn.ModuleList(level(k) for k in range(cfg.levels))

    def check_shape(self, x: torch.Tensor) -> None:
        m = 2 ** self.config.levels
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ShapeError(f"height/width must be divisible by {m}, got {tuple(x.shape[-2:])}")

    @staticmethod
    def _run(blocks, x, inverse=False):
        c1 = x.shape[1] // 4
        u1, u2 = x[:, :c1], x[:, c1:]
        if inverse:
            for blk in reversed(blocks):
                u1, u2 = blk.inverse(u1, u2)
        else:
            for blk in blocks:
                u1, u2 = blk(u1, u2)
        return torch.cat([u1, u2], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_shape(x)
        for blocks in self.down:
            x = self._run(blocks, haar_down(x))
        for blocks in reversed(self.up):
            x = haar_up(self._run(blocks, x))
        return x

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        self.check_shape(y)
        for blocks in self.up:
            y = self._run(blocks, haar_down(y), inverse=True)
        for blocks in reversed(self.down):
            y = haar_up(self._run(blocks, y, inverse=True))
        return y

    def protect(self, image: torch.Tensor) -> torch.Tensor:
        return self(image)

    def recover(self, image: torch.Tensor) -> torch.Tensor:
        return self.inverse(image)

    def spectral_layers(self):
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def update_spectral(self, n: int = 1) -> None:
        for m in self.spectral_layers():
            m.power_iterate(n)
