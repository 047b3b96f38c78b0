"""Recipient side: Siamese pre-processor and crop localizer."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConvBlock, coord_channels
from .metrics import RectMask

CROPPED_THRESHOLD = 0.5
COMPARED_LAYERS = (3, 4, 5)  # 1-based layer indices used by the consistency loss


@dataclass
class FeatureStack:
    features: list[torch.Tensor]
    layers_compared: tuple[int, ...] = COMPARED_LAYERS

    def __post_init__(self):
        if any(not 1 <= i <= len(self.features) for i in self.layers_compared):
            raise IndexError("compared layer index outside the feature stack")

    def compared(self) -> list[torch.Tensor]:
        return [self.features[i - 1] for i in self.layers_compared]


class Preprocessor(nn.Module):
    """Six-layer fully convolutional network that unifies attacked views.

    Layers 1-5 are conv blocks; layer 6 is a zero-initialized conv added to
    the input, so the network starts as the identity.
    """

    def __init__(self, channels=(32, 64, 64, 64, 32)):
        super().__init__()
        widths = (3, *channels)
        self.blocks = nn.ModuleList(ConvBlock(widths[i], widths[i + 1]) for i in range(len(channels)))
        self.out = nn.Conv2d(widths[-1], 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, FeatureStack]:
        feats, h = [], x * 2.0 - 1.0
        for blk in self.blocks:
            h = blk(h)
            feats.append(h)
        res = self.out(h)
        feats.append(res)
        return x + res, FeatureStack(feats)


def preprocess(model: Preprocessor, x: torch.Tensor) -> tuple[torch.Tensor, FeatureStack]:
    return model(x)


@dataclass
class LocalizerOutput:
    """Batched localizer output: corners (B, 4) as x0, y0, x1, y1 and score (B,)."""

    corners: torch.Tensor
    score: torch.Tensor

    def rects(self) -> list[RectMask]:
        c = self.corners.detach().double().cpu().tolist()
        s = self.score.detach().double().cpu().tolist()
        return [RectMask(*ci, confidence=si) for ci, si in zip(c, s)]

    def cropped(self) -> torch.Tensor:
        return self.score >= CROPPED_THRESHOLD


def decide_cropped(out: LocalizerOutput | RectMask | float) -> bool | torch.Tensor:
    """True iff the confidence score is at least 0.5."""
    if isinstance(out, LocalizerOutput):
        return out.cropped()
    score = out.confidence if isinstance(out, RectMask) else float(out)
    return score >= CROPPED_THRESHOLD


# corner bounds keep every output strictly inside (0, 1) and x0 < x1
_EDGE = 1e-6
_MIN_SIDE = 1e-3


def corners_from_params(z: torch.Tensor) -> torch.Tensor:
    """Map raw (B, 4) center/size logits to ordered corners (x0, y0, x1, y1)."""
    pc = torch.sigmoid(z[:, :2])
    size = _MIN_SIDE + (1.0 - _MIN_SIDE - 2 * _EDGE) * torch.sigmoid(z[:, 2:])
    lo = _EDGE + (1.0 - 2 * _EDGE - size) * pc
    hi = lo + size
    return torch.stack([lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1]], dim=1)


class Localizer(nn.Module):
    """Three-level U-Net followed by a four-layer MLP emitting a box and a score.

    The U-Net output is average-pooled to a fixed ``pool`` x ``pool`` grid
    before flattening, so any input size that is a multiple of 4 works.
    """

    def __init__(self, widths=(16, 32, 64), pool: int = 8, hidden=(256, 128, 64)):
        super().__init__()
        w1, w2, w3 = widths
        self.enc1 = ConvBlock(3 + 2, w1)
        self.enc2 = ConvBlock(w1, w2)
        self.enc3 = ConvBlock(w2, w3)
        self.dec2 = ConvBlock(w3 + w2, w2)
        self.dec1 = ConvBlock(w2 + w1, w1)
        self.pool = pool
        dims = (w1 * pool * pool, *hidden)
        layers = []
        for i in range(len(dims) - 1):
            layers += [nn.Linear(dims[i], dims[i + 1]), nn.LeakyReLU(0.2)]
        layers.append(nn.Linear(dims[-1], 5))
        self.mlp = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> LocalizerOutput:
        h1 = self.enc1(torch.cat([x * 2.0 - 1.0, coord_channels(x)], dim=1))
        h2 = self.enc2(F.avg_pool2d(h1, 2))
        h3 = self.enc3(F.avg_pool2d(h2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(h3, size=h2.shape[-2:], mode="bilinear",
                                                align_corners=False), h2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=h1.shape[-2:], mode="bilinear",
                                                align_corners=False), h1], dim=1))
        z = self.mlp(F.adaptive_avg_pool2d(d1, self.pool).flatten(1))
        score = torch.sigmoid(z[:, 4]).clamp(_EDGE, 1.0 - _EDGE)
        return LocalizerOutput(corners_from_params(z[:, :4]), score)


def localize(model: Localizer, x: torch.Tensor) -> LocalizerOutput:
    return model(x)
