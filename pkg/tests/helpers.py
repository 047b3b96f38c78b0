"""Shared test fixtures that are plain functions."""

import numpy as np
import torch


def u8_images(rng, n, h=64, w=64) -> torch.Tensor:
    """Smooth random images on the 8-bit grid, (n, 3, h, w)."""
    base = rng.random((n, 3, h // 8, w // 8))
    x = torch.nn.functional.interpolate(torch.from_numpy(base), size=(h, w), mode="bilinear",
                                        align_corners=False)
    return (torch.floor(x * 255 + 0.5) / 255).float()


def randomize_subnets(model: torch.nn.Module, std: float = 0.01, seed: int = 0) -> None:
    """Give the zero-initialized coupling output layers small random weights."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.abs().sum() == 0:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
