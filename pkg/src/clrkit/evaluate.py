"""Robustness grid: attacks x crop-rate buckets -> F1 / PSNR / SSIM tables and plots."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .attacks import AttackSpec, CropSpec, apply_attack, region_select, sample_crop
from .data import atomic_write_bytes, to_numpy, to_tensor
from .metrics import RectMask, f1_score, psnr, rasterize, ssim
from .pipeline import Pipeline

REPORT_COLUMNS = ("dataset", "rate_bucket", "attack", "F1", "PSNR", "SSIM")


@dataclass
class GridCell:
    dataset: str
    rate_bucket: str
    attack: str
    F1: float
    PSNR: float
    SSIM: float
    count: int
    detected: float  # fraction of attacked crops scored as cropped


@dataclass
class EvalReport:
    cells: list[GridCell]
    protect_psnr: float
    false_alarm_rate: float

    def cell(self, attack: str, bucket: str) -> GridCell:
        for c in self.cells:
            if c.attack == attack and c.rate_bucket == bucket:
                return c
        raise KeyError((attack, bucket))

    def to_dict(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells], "protect_psnr": self.protect_psnr,
                "false_alarm_rate": self.false_alarm_rate}


def bucket_name(lo: float, hi: float) -> str:
    return f"{lo:g}-{hi:g}"


def save_roundtrip(x: torch.Tensor, fmt: str) -> torch.Tensor:
    """Pass attacked images through the on-disk format the recipient would receive."""
    fmt = fmt.lower()
    if fmt == "png":
        return x  # lossless on the 8-bit grid
    pil_fmt = {"jpg": "JPEG", "jpeg": "JPEG", "bmp": "BMP"}[fmt]
    out = []
    for img in (x.detach().clamp(0, 1) * 255 + 0.5).floor().byte().permute(0, 2, 3, 1).numpy():
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format=pil_fmt, **({"quality": 95} if pil_fmt == "JPEG" else {}))
        buf.seek(0)
        out.append(np.asarray(Image.open(buf).convert("RGB")))
    return to_tensor(np.stack(out))


@torch.no_grad()
def evaluate(pipe: Pipeline, images_u8: np.ndarray, attacks: list[AttackSpec],
             buckets: list[tuple[float, float]], *, seed: int = 0, dataset: str = "dataset",
             save_format: str = "png") -> EvalReport:
    """Run every (attack, bucket) cell over all images with per-image seeded crops."""
    hw = pipe.hw
    originals = to_tensor(images_u8)
    protected = torch.cat([pipe.protect_tensor(originals[i:i + 16]) for i in range(0, len(originals), 16)])
    protected = (protected * 255 + 0.5).floor() / 255
    protect_psnr = float(np.mean([psnr(to_numpy(p), to_numpy(o)) for p, o in zip(protected, originals)]))
    orig_masks = pipe.detect_tensor(originals)
    false_alarm = float(np.mean([m.confidence >= 0.5 for m in orig_masks]))
    simulator = pipe.models.simulator()
    cells = []
    for ai, atk in enumerate(attacks):
        for bi, (lo, hi) in enumerate(buckets):
            f1s, ps, ss, det = [], [], [], []
            for n in range(len(originals)):
                # crops depend on (image, bucket) only, so attacks are compared on equal crops
                crop_rng = np.random.default_rng([seed, n, bi])
                rate = float(crop_rng.uniform(lo, hi)) if hi > lo else float(lo)
                m = sample_crop(crop_rng, CropSpec(rate), *hw)
                rng = np.random.default_rng([seed, n, bi, ai])
                x = protected[n:n + 1]
                crop = region_select(x, m)
                attacked = apply_attack(crop, atk, rng, cover=region_select(originals[n:n + 1], m),
                                        simulator=simulator)
                attacked = save_roundtrip(attacked, save_format)
                m_hat = pipe.detect_tensor(attacked)[0]
                used = m_hat if m_hat.confidence >= 0.5 else RectMask.full(m_hat.confidence)
                rec = pipe.recover_tensor(attacked, [used])[0]
                rec = (rec * 255 + 0.5).floor() / 255
                ref = to_numpy(originals[n])
                f1s.append(f1_score(rasterize(used, *hw), rasterize(m, *hw)))
                ps.append(psnr(to_numpy(rec), ref))
                ss.append(ssim(to_numpy(rec), ref))
                det.append(m_hat.confidence >= 0.5)
            cells.append(GridCell(dataset, bucket_name(lo, hi), str(atk), float(np.mean(f1s)),
                                  float(np.mean(ps)), float(np.mean(ss)), len(originals),
                                  float(np.mean(det))))
    return EvalReport(cells, protect_psnr, false_alarm)


def write_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(REPORT_COLUMNS)
    for c in report.cells:
        w.writerow([c.dataset, c.rate_bucket, c.attack, f"{c.F1:.4f}", f"{c.PSNR:.3f}", f"{c.SSIM:.4f}"])
    atomic_write_bytes(out / "report.csv", buf.getvalue().encode())
    atomic_write_bytes(out / "report.json", json.dumps(report.to_dict(), indent=2).encode())
    paths = {"csv": out / "report.csv", "json": out / "report.json"}
    paths.update(plot_report(report, out))
    return paths


def plot_report(report: EvalReport, out_dir: Path) -> dict[str, Path]:
    """One figure per metric; a panel per attack family, metric vs severity per bucket."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    families: dict[str, list[GridCell]] = {}
    for c in report.cells:
        families.setdefault(AttackSpec.parse(c.attack).kind, []).append(c)
    buckets = list(dict.fromkeys(c.rate_bucket for c in report.cells))
    paths = {}
    for metric in ("F1", "PSNR", "SSIM"):
        fig, axes = plt.subplots(1, len(families), figsize=(3.2 * len(families), 3), squeeze=False)
        for ax, (kind, cells) in zip(axes[0], families.items()):
            for b in buckets:
                pts = sorted((AttackSpec.parse(c.attack).severity or 0.0, getattr(c, metric))
                             for c in cells if c.rate_bucket == b)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=b)
            ax.set_title(kind)
            ax.set_xlabel("severity")
            ax.set_ylabel(metric)
        axes[0][0].legend(title="crop rate", fontsize=7)
        fig.tight_layout()
        p = out_dir / f"plot_{metric.lower()}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths[metric] = p
    return paths
