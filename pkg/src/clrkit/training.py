"""Losses, discriminators, tamper augmentation and the staged trainer."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import (AttackSpec, CropSpec, affine_from_masks, apply_affine, apply_attack,
                      quantize_u8, region_select, resize, sample_crop, zero_pad_resize)
from .config import LossWeights, RunConfig
from .fgjpeg import FGJpeg
from .inn import GeneratorConfig, InvertibleGenerator
from .localize import FeatureStack, Localizer, LocalizerOutput, Preprocessor
from .metrics import RectMask, ShapeError, f1_score, psnr, rasterize

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "stage", "l_prt", "l_rec", "l_loc", "l_cons", "d_a", "d_b",
               "psnr_protect", "f1")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# --- adversarial pieces --------------------------------------------------------

class PatchDiscriminator(nn.Module):
    """Patch discriminator: strided 4x4 convs ending in a one-channel score map."""

    def __init__(self, in_channels: int = 3, dim: int = 32, n_layers: int = 3):
        super().__init__()
        seq = [nn.Conv2d(in_channels, dim, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c = dim
        for i in range(1, n_layers):
            c_out = dim * min(2 ** i, 8)
            seq += [nn.Conv2d(c, c_out, 4, stride=2, padding=1), nn.InstanceNorm2d(c_out),
                    nn.LeakyReLU(0.2)]
            c = c_out
        seq.append(nn.Conv2d(c, 1, 3, padding=1))
        self.seq = nn.Sequential(*seq)

    def forward(self, x):
        return self.seq(x * 2.0 - 1.0)


def lsgan_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN: (discriminator loss, generator loss)."""
    d_loss = 0.5 * ((d_real - 1) ** 2).mean() + 0.5 * (d_fake ** 2).mean()
    g_loss = ((d_fake - 1) ** 2).mean()
    return d_loss, g_loss


def lsgan_g(d_fake: torch.Tensor) -> torch.Tensor:
    return ((d_fake - 1) ** 2).mean()


# --- task losses ---------------------------------------------------------------

def loss_protect(x, i, d_a_score=None, eta: float = 0.01):
    _same_shape(x, i)
    loss = (i - x).abs().mean()
    if d_a_score is not None and eta:
        loss = loss + eta * lsgan_g(d_a_score)
    return loss


def loss_recover(i_hat, i, d_b_score=None, eta: float = 0.01):
    _same_shape(i_hat, i)
    loss = (i - i_hat).abs().mean()
    if d_b_score is not None and eta:
        loss = loss + eta * lsgan_g(d_b_score)
    return loss


def loss_localize(m_hat: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    _same_shape(m_hat, m)
    p = m_hat.clamp(1e-6, 1 - 1e-6)
    m = m.to(p.dtype)
    return -(m * torch.log(p) + (1 - m) * torch.log(1 - p)).mean()


@dataclass
class View:
    """One recipient-side evaluation of an attacked crop."""

    image_in: torch.Tensor
    image_out: torch.Tensor
    features: FeatureStack
    mask: torch.Tensor  # soft (B, 1, H, W)
    recovered: torch.Tensor | None = None
    loc: LocalizerOutput | None = None


def loss_consistency(v0: View, v1: View) -> torch.Tensor:
    """Feature, mask and recovery agreement between twin views, plus image drift."""
    loss = sum((a - b).abs().mean() for a, b in zip(v0.features.compared(), v1.features.compared()))
    loss = loss + (v0.mask - v1.mask).abs().mean()
    if v0.recovered is not None and v1.recovered is not None:
        loss = loss + (v0.recovered - v1.recovered).abs().mean()
    drift = 0.5 * ((v0.image_out - v0.image_in).abs().mean()
                   + (v1.image_out - v1.image_in).abs().mean())
    return loss + drift


def feature_distance(f0: FeatureStack, f1: FeatureStack) -> torch.Tensor:
    return sum((a - b).abs().mean() for a, b in zip(f0.compared(), f1.compared()))


def loss_total(parts: dict, w: LossWeights):
    return parts["prt"] + w.alpha * parts["rec"] + w.beta * parts["loc"] + w.gamma * parts["cons"]


def soft_rect_mask(corners: torch.Tensor, h: int, w: int, tau: float = 1.0) -> torch.Tensor:
    """Differentiable (B, 1, h, w) rasterization of normalized corners; tau in pixels."""
    cols = torch.arange(w, dtype=corners.dtype, device=corners.device) + 0.5
    rows = torch.arange(h, dtype=corners.dtype, device=corners.device) + 0.5
    x0, y0, x1, y1 = (corners[:, i, None] for i in range(4))
    mx = torch.sigmoid((cols - x0 * w) / tau) * torch.sigmoid((x1 * w - cols) / tau)
    my = torch.sigmoid((rows - y0 * h) / tau) * torch.sigmoid((y1 * h - rows) / tau)
    return (my[:, :, None] * mx[:, None, :]).unsqueeze(1)


# --- gradient stabilization ----------------------------------------------------

class _Stabilize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, attacked, protected):
        return attacked.detach().clone()

    @staticmethod
    def backward(ctx, g):
        return None, g


def stabilize_gradient(attacked: torch.Tensor, protected: torch.Tensor) -> torch.Tensor:
    """Value of ``attacked``; gradient routed to ``protected`` as the identity.

    Equivalent to ``(attacked.detach() - protected) + protected`` without the
    floating-point round-off of that expression.
    """
    _same_shape(attacked, protected)
    return _Stabilize.apply(attacked, protected)


# --- tamper-based augmentation -------------------------------------------------

def _stroke_segment(h, w, p0, p1, radius):
    rr, cc = np.mgrid[0:h, 0:w]
    pts = np.stack([rr, cc], axis=-1).astype(np.float64)
    a, b = np.asarray(p0, float), np.asarray(p1, float)
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros((h, w)) if denom == 0 else np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.sum((pts - proj) ** 2, axis=-1) <= radius**2


def free_form_mask(rng: np.random.Generator, h: int, w: int, strokes: int = 3,
                   thickness: int | None = None, max_vertex: int = 5,
                   max_length: float | None = None, coverage=(0.02, 0.30)) -> np.ndarray:
    """Union of random-walk thick polylines with coverage held in ``coverage``.

    Segments that would push coverage above the upper bound are skipped; extra
    strokes are added until the lower bound is met.
    """
    mask = np.zeros((h, w), dtype=bool)
    if strokes <= 0:
        return mask.astype(np.uint8)
    thickness = thickness or max(2, round(min(h, w) / 12))
    max_length = max_length or min(h, w) / 4
    lo, hi = coverage
    total = h * w

    def add_stroke():
        nonlocal mask
        r, c = rng.uniform(0, h), rng.uniform(0, w)
        for _ in range(int(rng.integers(1, max_vertex + 1))):
            angle = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(max_length / 4, max_length)
            r1 = float(np.clip(r + length * math.sin(angle), 0, h - 1))
            c1 = float(np.clip(c + length * math.cos(angle), 0, w - 1))
            width = rng.uniform(thickness * 0.5, thickness)
            cand = mask | _stroke_segment(h, w, (r, c), (r1, c1), width / 2)
            if cand.sum() <= hi * total:
                mask = cand
            r, c = r1, c1

    for _ in range(strokes):
        add_stroke()
    for _ in range(100):
        if mask.sum() >= lo * total:
            break
        add_stroke()
    return mask.astype(np.uint8)


@dataclass
class TamperPlan:
    mask: np.ndarray
    donor: torch.Tensor
    applied_fraction: float = 0.15


def t2a_augment(i: torch.Tensor, donor: torch.Tensor, rng: np.random.Generator,
                mask: np.ndarray | None = None, r_aug: float = 0.15) -> tuple[torch.Tensor, TamperPlan]:
    """Blend donor content into ``i`` under a free-form mask: I*(1-M) + R*M.

    Works on a single (C, H, W) image or a (B, C, H, W) batch (one mask).
    """
    _same_shape(i, donor)
    h, w = i.shape[-2:]
    if mask is None:
        mask = free_form_mask(rng, h, w, strokes=int(rng.integers(1, 4)))
    m = torch.from_numpy(np.asarray(mask, dtype=bool)).to(i.device)
    out = torch.where(m, donor, i)
    return out, TamperPlan(np.asarray(mask, dtype=np.uint8), donor, r_aug)


# --- the trainer ---------------------------------------------------------------

class Stage(str, enum.Enum):
    WARMUP = "WARMUP"
    JOINT = "JOINT"


@dataclass
class TrainState:
    stage: Stage = Stage.WARMUP
    step: int = 0
    feat_loss_ema: float | None = None
    threshold: float = 0.001
    transitions: list[int] = field(default_factory=list)

    def update_ema(self, value: float, decay: float) -> None:
        self.feat_loss_ema = value if self.feat_loss_ema is None else (
            decay * self.feat_loss_ema + (1 - decay) * value)

    def maybe_transition(self, cap_step: int, min_steps: int = 0) -> bool:
        """Switch to JOINT once the feature EMA is below threshold or at the cap.

        The EMA is only trusted after ``min_steps`` updates, roughly its memory.
        """
        if self.stage is Stage.JOINT:
            return False
        reached = (self.feat_loss_ema is not None and self.step >= min_steps
                   and self.feat_loss_ema < self.threshold)
        if reached or self.step >= cap_step:
            self.stage = Stage.JOINT
            self.transitions.append(self.step)
            return True
        return False


class Models(nn.Module):
    """Everything the pipeline trains, under stable names for checkpoints."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        self.generator = InvertibleGenerator(GeneratorConfig(
            levels=m.levels, couplings_per_level=m.couplings_per_level,
            base_channels=m.base_channels, clamp=m.clamp, use_spectral_norm=m.use_spectral_norm))
        self.preprocessor = Preprocessor(tuple(m.preprocessor_channels))
        self.localizer = Localizer(tuple(m.localizer_widths), pool=m.localizer_pool)
        self.disc_a = PatchDiscriminator(dim=m.disc_channels, n_layers=m.disc_layers)
        self.disc_b = PatchDiscriminator(dim=m.disc_channels, n_layers=m.disc_layers)
        self.fgjpeg: FGJpeg | None = None

    def attach_fgjpeg(self, fg: FGJpeg) -> None:
        fg.eval()
        for p in fg.parameters():
            p.requires_grad_(False)
        self.fgjpeg = fg

    def simulator(self):
        if self.fgjpeg is None:
            return None
        return lambda x, qf: self.fgjpeg.simulate(x, qf)


def recipient_view(models: Models, x_atk: torch.Tensor, hw: tuple[int, int]) -> View:
    """Resize an attacked image to the model size, pre-process and localize it."""
    x = resize(x_atk, hw)
    y, feats = models.preprocessor(x)
    loc = models.localizer(y)
    return View(x, y, feats, soft_rect_mask(loc.corners, *hw), loc=loc)


def recover_view(models: Models, view: View, masks: list[RectMask], hw) -> torch.Tensor:
    return models.generator.inverse(zero_pad_resize(view.image_out, masks, hw))


def shifted_target(i: torch.Tensor, m: RectMask, m_hat: list[RectMask]) -> torch.Tensor:
    maps = [affine_from_masks(m, mh) for mh in m_hat]
    if all(a.scale_x == 1 and a.scale_y == 1 and a.shift_x == 0 and a.shift_y == 0 for a in maps):
        return i
    return apply_affine(i, maps)


class Trainer:
    def __init__(self, cfg: RunConfig, models: Models | None = None, *, total_steps: int | None = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.models = models or Models(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.total_steps = total_steps or cfg.train.steps
        self.state = TrainState(threshold=cfg.train.feat_threshold)
        self.weights = cfg.loss
        mm = self.models
        self.main_params = (list(mm.generator.parameters()) + list(mm.preprocessor.parameters())
                            + list(mm.localizer.parameters()))
        self.opt = torch.optim.Adam(self.main_params, lr=cfg.train.lr)
        disc_params = list(mm.disc_a.parameters()) + list(mm.disc_b.parameters())
        self.opt_d = torch.optim.Adam(disc_params, lr=cfg.train.disc_lr, betas=(0.5, 0.999))
        self.attacks = cfg.attacks()
        self.hw = (cfg.resolution, cfg.resolution)
        self.mask_override: RectMask | None = None  # perfect-mask probe for tests

    # learning-rate schedule: halve at each configured fraction of training
    def lr_at(self, step: int) -> float:
        k = sum(step >= frac * self.total_steps for frac in self.cfg.train.lr_decay_at)
        return self.cfg.train.lr * 0.5 ** k

    def sample_rate(self) -> float:
        lo, hi = self.cfg.attack.crop_rate
        return float(self.rng.uniform(lo, hi)) if hi > lo else float(lo)

    def augment(self, images: torch.Tensor) -> torch.Tensor:
        r = self.cfg.attack.r_aug
        out = images.clone()
        b = len(images)
        for k in range(b):
            if b > 1 and self.rng.random() < r:
                donor = images[(k + int(self.rng.integers(1, b))) % b]
                out[k], _ = t2a_augment(images[k], donor, self.rng, r_aug=r)
        return out

    def _localization_loss(self, view: View, m_true: torch.Tensor, m: RectMask, cropped: bool):
        loss = loss_localize(view.mask, m_true)
        c = torch.tensor(m.corners, dtype=view.loc.corners.dtype)
        loss = loss + self.cfg.train.corner_weight * (view.loc.corners - c).abs().mean()
        target = torch.full_like(view.loc.score, 1.0 if cropped else 0.0)
        return loss + F.binary_cross_entropy(view.loc.score.clamp(1e-6, 1 - 1e-6), target)

    def train_step(self, batch: torch.Tensor) -> dict:
        mm, cfg, st, w = self.models, self.cfg, self.state, self.weights
        for g in self.opt.param_groups:
            g["lr"] = self.lr_at(st.step)
        mm.train()
        mm.generator.update_spectral(1)
        hw = self.hw
        images = self.augment(batch)

        x = mm.generator(images)
        xq = quantize_u8(x)
        m = self.mask_override or sample_crop(
            self.rng, CropSpec(self.sample_rate(), tuple(cfg.attack.aspect)), *hw)
        cropped = m.area < 1.0 - 1e-9
        m_true = torch.from_numpy(rasterize(m, *hw)).float().expand(len(images), 1, *hw)
        crop = region_select(xq, m)
        attack = self.attacks[int(self.rng.integers(len(self.attacks)))]
        attacked = apply_attack(crop.detach(), attack, self.rng, cover=region_select(images, m),
                                simulator=mm.simulator())

        # false-alarm supervision: unprotected, uncropped originals
        v_orig = recipient_view(mm, images, hw)
        l_orig = F.binary_cross_entropy(v_orig.loc.score.clamp(1e-6, 1 - 1e-6),
                                        torch.zeros_like(v_orig.loc.score))

        d_a = mm.disc_a(x)
        l_prt = loss_protect(x, images, d_a, w.eta)
        logs = {}
        if st.stage is Stage.WARMUP:
            # main stream: crop only, ideal intermediate image, teacher view
            v0 = recipient_view(mm, crop, hw)
            v0.recovered = recover_view(mm, v0, [m] * len(images), hw)
            d_b = mm.disc_b(v0.recovered)
            l_rec = loss_recover(v0.recovered, images, d_b, w.eta)
            l_loc = self._localization_loss(v0, m_true, m, cropped) + l_orig
            main = l_prt + w.alpha * l_rec + w.beta * l_loc
            # student: detached attacked view, updates the pre-processor only
            v1 = recipient_view(mm, attacked.detach(), hw)
            v1.recovered = recover_view(mm, v1, [m] * len(images), hw)
            v0_det = View(v0.image_in.detach(), v0.image_out.detach(),
                          FeatureStack([f.detach() for f in v0.features.features]),
                          v0.mask.detach(), v0.recovered.detach())
            l_cons = loss_consistency(v0_det, v1)
            student = (w.alpha * loss_recover(v1.recovered, images) + w.beta
                       * self._localization_loss(v1, m_true, m, cropped) + w.gamma * l_cons)
            self.opt.zero_grad()
            main.backward()
            pre = list(mm.preprocessor.parameters())
            grads = torch.autograd.grad(student, pre, allow_unused=True)
            for p, g in zip(pre, grads):
                if g is not None:
                    p.grad = g if p.grad is None else p.grad + g
            total = main + student
            recovered, loc_view = v0.recovered, v0
        else:
            # joint: attacked student view, predicted mask, shifted ground truth
            stabilized = stabilize_gradient(attacked, crop)
            v1 = recipient_view(mm, stabilized, hw)
            masks1 = ([self.mask_override] * len(images) if self.mask_override
                      else v1.loc.rects())
            v1.recovered = recover_view(mm, v1, masks1, hw)
            target = shifted_target(images, m, masks1)
            d_b = mm.disc_b(v1.recovered)
            l_rec = loss_recover(v1.recovered, target, d_b, w.eta)
            l_loc = self._localization_loss(v1, m_true, m, cropped) + l_orig
            v0 = recipient_view(mm, crop, hw)
            masks0 = ([self.mask_override] * len(images) if self.mask_override
                      else v0.loc.rects())
            v0.recovered = recover_view(mm, v0, masks0, hw)
            l_cons = loss_consistency(v0, v1)
            total = loss_total({"prt": l_prt, "rec": l_rec, "loc": l_loc, "cons": l_cons}, w)
            self.opt.zero_grad()
            total.backward()
            recovered, loc_view = v1.recovered, v1
        if cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.main_params, cfg.train.grad_clip)
        self.opt.step()

        # discriminators
        l_da = l_db = torch.tensor(0.0)
        if cfg.train.disc_every and st.step % cfg.train.disc_every == 0:
            l_da, _ = lsgan_losses(mm.disc_a(images), mm.disc_a(x.detach()))
            l_db, _ = lsgan_losses(mm.disc_b(images), mm.disc_b(recovered.detach()))
            self.opt_d.zero_grad()
            (l_da + l_db).backward()
            self.opt_d.step()

        feat = float(feature_distance(v0.features, v1.features).detach())
        st.update_ema(feat, cfg.train.ema_decay)
        stage_now = st.stage.value
        with torch.no_grad():
            rect = loc_view.loc.rects()[0]
            f1 = f1_score(rasterize(rect, *hw), rasterize(m, *hw))
            p = float(np.mean([psnr(a.numpy(), b.numpy())
                               for a, b in zip(xq.detach(), images)]))
        val = lambda t: float(t.detach())  # noqa: E731
        logs.update(step=st.step, stage=stage_now, l_prt=val(l_prt), l_rec=val(l_rec),
                    l_loc=val(l_loc), l_cons=val(l_cons), d_a=val(l_da), d_b=val(l_db),
                    psnr_protect=p, f1=f1, total=val(total), feat=feat,
                    feat_ema=st.feat_loss_ema, attack=str(attack))
        st.step += 1
        cap = int(math.ceil(cfg.train.stage_cap * self.total_steps))
        st.maybe_transition(cap, min(cap, int(round(1.0 / (1.0 - cfg.train.ema_decay)))))
        return logs


class MetricsLog:
    """Append-only CSV with the fixed metrics columns."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        self._w.writeheader()

    def write(self, row: dict) -> None:
        self._w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
