"""Image I/O, dataset ingestion and the bundled toy corpus."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


class ImageReadError(OSError):
    pass


def load_image(path: str | Path) -> np.ndarray:
    """Read any Pillow-decodable image as an H x W x 3 uint8 array."""
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise ImageReadError(f"cannot read image {path}: {e}") from e


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def encode_image(img_u8: np.ndarray, fmt: str = "png", quality: int = 95) -> bytes:
    import io

    fmt = {"jpg": "JPEG", "jpeg": "JPEG", "png": "PNG", "bmp": "BMP"}[fmt.lower()]
    buf = io.BytesIO()
    kwargs = {"quality": quality} if fmt == "JPEG" else {}
    Image.fromarray(img_u8).save(buf, format=fmt, **kwargs)
    return buf.getvalue()


def save_image(img, path: str | Path, fmt: str | None = None) -> None:
    """Write a uint8 or unit-range float image; format from the suffix by default."""
    fmt = fmt or Path(path).suffix.lstrip(".") or "png"
    atomic_write_bytes(path, encode_image(to_u8(img), fmt))


def to_u8(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a
    return np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def center_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def ingest(img: np.ndarray, resolution: int) -> np.ndarray:
    """Centre-crop to a square, then resize to ``resolution``."""
    sq = center_square(img)
    if sq.shape[0] == resolution:
        return np.ascontiguousarray(sq)
    return np.asarray(Image.fromarray(sq).resize((resolution, resolution), Image.LANCZOS))


def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dir(directory: str | Path, resolution: int, limit: int = 0) -> tuple[np.ndarray, list[str]]:
    """Load a flat image directory as (N, R, R, 3) uint8 plus file names."""
    paths = list_images(directory)
    if limit:
        paths = paths[:limit]
    if not paths:
        raise ValueError(f"no images in {directory}")
    imgs = [ingest(load_image(p), resolution) for p in paths]
    return np.stack(imgs), [p.name for p in paths]


def to_tensor(u8: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) uint8/float -> (N, 3, H, W) float32 in [0, 1]."""
    a = np.asarray(u8)
    if a.ndim == 3:
        a = a[None]
    t = torch.from_numpy(np.ascontiguousarray(a)).permute(0, 3, 1, 2)
    return t.float() / 255.0 if a.dtype == np.uint8 else t.float()


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (N, 3, H, W) tensor -> H x W x 3 (or N x H x W x 3) float64."""
    a = t.detach().cpu().double()
    return (a.permute(1, 2, 0) if a.ndim == 3 else a.permute(0, 2, 3, 1)).numpy()


def _toy_sources() -> list[np.ndarray]:
    import skimage.data as skd
    from sklearn.datasets import load_sample_images

    srcs = [skd.astronaut(), skd.chelsea(), skd.coffee(), skd.rocket(), skd.immunohistochemistry()]
    srcs += list(load_sample_images().images)
    return [np.ascontiguousarray(s[..., :3]) for s in srcs]


def make_toy_corpus(out_dir: str | Path, count: int, *, size: int = 64, split: str = "train",
                    seed: int = 0, train_fraction: float = 0.75) -> list[Path]:
    """Write ``count`` natural-image patches drawn from bundled sample photos.

    Each source photo is split by columns: the left ``train_fraction`` feeds the
    train split, the rest feeds the test split, so the splits share no pixels.
    Patches of 1.5x-4x the target size are downscaled with Lanczos filtering.
    """
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    regions = []
    for src in _toy_sources():
        cut = int(src.shape[1] * train_fraction)
        regions.append(src[:, :cut] if split == "train" else src[:, cut:])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for n in range(count):
        reg = regions[int(rng.integers(len(regions)))]
        h, w = reg.shape[:2]
        hi = min(h, w, 4 * size)
        side = int(rng.integers(min(int(1.5 * size), hi), hi + 1))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        patch = reg[top:top + side, left:left + side]
        if rng.random() < 0.5:
            patch = patch[:, ::-1]
        img = Image.fromarray(np.ascontiguousarray(patch)).resize((size, size), Image.LANCZOS)
        p = out / f"{split}_{n:05d}.png"
        img.save(p)
        paths.append(p)
    return paths
