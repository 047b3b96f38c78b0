"""Crop-robust image protection: invertible protection, crop localization and recovery."""

from .attacks import AttackSpec, CropSpec, apply_attack, region_select, sample_crop, zero_pad_resize
from .config import RunConfig
from .inn import GeneratorConfig, InvertibleGenerator
from .metrics import RectMask, f1_score, psnr, ssim

__all__ = [
    "AttackSpec", "CropSpec", "GeneratorConfig", "InvertibleGenerator", "RectMask", "RunConfig",
    "apply_attack", "f1_score", "psnr", "region_select", "sample_crop", "ssim", "zero_pad_resize",
]
