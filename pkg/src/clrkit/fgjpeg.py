"""Fine-grained generative JPEG simulator.

Three networks: a QF-conditioned U-Net generator, a controller MLP that turns
QF/100 into per-level modulation pairs, and a QF-class predictor with SRM and
Bayar front-end filters. The predictor is trained first on real codec output
and then frozen while the generator and controller learn to imitate the codec.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConvBlock

log = logging.getLogger(__name__)

QF_CLASSES = (10, 30, 50, 70, 90, 100)
QF_DELTA = 20


class QFError(ValueError):
    pass


def qf_to_class(qf: int) -> int:
    """Index of the nearest QF class; ties go to the lower class."""
    if not 0 <= qf <= 100:
        raise QFError(f"QF must lie in [0, 100], got {qf}")
    dists = [abs(qf - c) for c in QF_CLASSES]
    return dists.index(min(dists))  # index() returns the first, i.e. lower, tie


def acceptable(pred_class: int, qf: int, delta: int = QF_DELTA) -> bool:
    """A class prediction is acceptable when its QF is within ``delta`` of the truth."""
    return abs(QF_CLASSES[pred_class] - qf) <= delta


@dataclass(frozen=True)
class QualityFactor:
    qf: int

    def __post_init__(self):
        if not 0 <= self.qf <= 100:
            raise QFError(f"QF must lie in [0, 100], got {self.qf}")

    @property
    def class_index(self) -> int:
        return qf_to_class(self.qf)


# --- predictor -----------------------------------------------------------------

def srm_kernels() -> torch.Tensor:
    """The three classic SRM residual filters, each 5x5: KV, 3x3 second order, 5x5 edge."""
    kv = torch.tensor([[-1, 2, -2, 2, -1],
                       [2, -6, 8, -6, 2],
                       [-2, 8, -12, 8, -2],
                       [2, -6, 8, -6, 2],
                       [-1, 2, -2, 2, -1]], dtype=torch.float32) / 12.0
    second = torch.zeros(5, 5)
    second[1:4, 1:4] = torch.tensor([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]], dtype=torch.float32) / 4.0
    edge = torch.tensor([[-1, 2, -2, 2, -1],
                         [2, -6, 8, -6, 2],
                         [-2, 8, -12, 8, -2],
                         [0, 0, 0, 0, 0],
                         [0, 0, 0, 0, 0]], dtype=torch.float32) / 12.0
    return torch.stack([kv, second, edge])


class SRMConv(nn.Module):
    """Frozen SRM bank applied per input channel (3 residuals per channel)."""

    def __init__(self, channels: int = 3, truncate: float = 3.0):
        super().__init__()
        k = srm_kernels()
        self.register_buffer("kernel", k.repeat(channels, 1, 1).unsqueeze(1))
        self.channels = channels
        self.truncate = truncate
        self.out_channels = 3 * channels

    def forward(self, x):
        r = F.conv2d(x * 255.0, self.kernel, padding=2, groups=self.channels)
        return r.clamp(-self.truncate, self.truncate) / self.truncate


class BayarConv2d(nn.Module):
    """Constrained conv: centre tap -1, off-centre taps sum to +1 per kernel."""

    def __init__(self, c_in: int = 3, c_out: int = 3, kernel: int = 5):
        super().__init__()
        self.kernel = kernel
        self.weight = nn.Parameter(torch.rand(c_out, c_in, kernel, kernel) * 0.1)
        self.project_()

    @torch.no_grad()
    def project_(self):
        c = self.kernel // 2
        w = self.weight
        w[:, :, c, c] = 0.0
        s = w.sum(dim=(2, 3), keepdim=True)
        s = torch.where(s.abs() < 1e-8, torch.full_like(s, 1e-8), s)
        w.div_(s)
        w[:, :, c, c] = -1.0

    def forward(self, x):
        return F.conv2d(x * 255.0, self.weight, padding=self.kernel // 2)


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.short = None
        if stride != 1 or c_in != c_out:
            self.short = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False),
                                       nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class QFPredictor(nn.Module):
    """Compact ResNet-32 classifier over the six QF classes."""

    def __init__(self, widths=(16, 32, 64), blocks_per_stage: int = 5, plain_channels: int = 16):
        super().__init__()
        self.plain = nn.Conv2d(3, plain_channels, 3, padding=1)
        self.srm = SRMConv(3)
        self.bayar = BayarConv2d(3, 3, 5)
        front = plain_channels + self.srm.out_channels + 3
        self.front_norm = nn.BatchNorm2d(front)
        self.stem = nn.Sequential(nn.Conv2d(front, widths[0], 3, padding=1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU())
        layers, c = [], widths[0]
        for i, w in enumerate(widths):
            for j in range(blocks_per_stage):
                layers.append(BasicBlock(c, w, stride=2 if (i > 0 and j == 0) else 1))
                c = w
        self.stages = nn.Sequential(*layers)
        self.fc = nn.Linear(c, len(QF_CLASSES))

    def front(self, x):
        return torch.cat([self.plain(x), self.srm(x), self.bayar(x)], dim=1)

    def forward(self, x):
        h = self.stem(self.front_norm(self.front(x)))
        h = self.stages(h)
        return self.fc(h.mean(dim=(2, 3)))

    def project_(self):
        self.bayar.project_()


def predictor_classify(predictor: QFPredictor, x: torch.Tensor) -> torch.Tensor:
    return predictor(x)


# --- controller and generator --------------------------------------------------

class Controller(nn.Module):
    """Six linear layers: a three-layer trunk on QF/100, then one head per level."""

    def __init__(self, level_channels=(32, 64, 128), hidden: int = 64):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Linear(1, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
        )
        self.heads = nn.ModuleList(nn.Linear(hidden, 2 * c) for c in level_channels)
        for head, c in zip(self.heads, level_channels):
            nn.init.normal_(head.weight, std=1e-3)
            with torch.no_grad():
                head.bias.zero_()
                head.bias[:c] = 1.0  # a starts at 1, b at 0

    def forward(self, qf_normalized: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        z = self.trunk(qf_normalized.view(-1, 1))
        pairs = []
        for head in self.heads:
            a, b = head(z).chunk(2, dim=1)
            pairs.append((a, b))
        return pairs


class ModulatedBridge(nn.Module):
    """Skip-connection conv block whose output is scaled/shifted per channel."""

    def __init__(self, c: int):
        super().__init__()
        self.block = ConvBlock(c, c)

    def forward(self, x, pair=None):
        y = self.block(x)
        if pair is None:
            return y
        a, b = pair
        return a[:, :, None, None] * y + b[:, :, None, None]


class JpegGenerator(nn.Module):
    """Four-level U-Net with conv-block bridges; lower three bridges are modulated."""

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        self.widths = widths
        self.enc = nn.ModuleList()
        c_prev = 3
        for w in widths:
            self.enc.append(ConvBlock(c_prev, w))
            c_prev = w
        self.bridges = nn.ModuleList(ModulatedBridge(w) for w in widths)
        self.dec = nn.ModuleList(ConvBlock(widths[i + 1] + widths[i], widths[i])
                                 for i in range(len(widths) - 1))
        self.out = nn.Conv2d(widths[0], 3, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def modulated_channels(self):
        return tuple(self.widths[1:])

    def forward(self, x, pairs):
        feats, h = [], x
        for i, enc in enumerate(self.enc):
            if i > 0:
                h = F.interpolate(h, scale_factor=0.5, mode="bilinear", align_corners=False)
            h = enc(h)
            feats.append(h)
        bridged = [self.bridges[0](feats[0])]
        for i in range(1, len(feats)):
            bridged.append(self.bridges[i](feats[i], pairs[i - 1]))
        h = bridged[-1]
        for i in reversed(range(len(self.dec))):
            h = F.interpolate(h, size=bridged[i].shape[-2:], mode="bilinear", align_corners=False)
            h = self.dec[i](torch.cat([h, bridged[i]], dim=1))
        return (x + self.out(h)).clamp(0.0, 1.0)


class FGJpeg(nn.Module):
    def __init__(self, widths=(16, 32, 64, 128), controller_hidden: int = 64,
                 predictor_widths=(16, 32, 64)):
        super().__init__()
        self.generator = JpegGenerator(widths)
        self.controller = Controller(self.generator.modulated_channels, controller_hidden)
        self.predictor = QFPredictor(predictor_widths)

    def control(self, qf_normalized: torch.Tensor):
        return self.controller(qf_normalized)

    def simulate(self, x: torch.Tensor, qf) -> torch.Tensor:
        """Differentiable JPEG imitation at quality ``qf`` (int or per-sample tensor)."""
        if not torch.is_tensor(qf):
            qf = torch.full((x.shape[0],), float(qf))
        q = qf.to(x).view(-1) / 100.0
        if q.numel() == 1 and x.shape[0] > 1:
            q = q.expand(x.shape[0])
        return self.generator(x, self.controller(q))

    def forward(self, x, qf):
        return self.simulate(x, qf)


# --- real codec pairs ----------------------------------------------------------

def codec_available() -> bool:
    try:
        from PIL import features
    except ImportError:  # pragma: no cover
        return False
    return bool(features.check("jpg"))


def jpeg_roundtrip_u8(img: np.ndarray, qf: int) -> np.ndarray:
    """Encode/decode one H x W x 3 uint8 image with the baseline codec."""
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="JPEG", quality=int(qf))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"))


def default_cache_dir() -> Path:
    root = os.environ.get("CLRKIT_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "clrkit"


class PairCache:
    """On-disk cache of codec decodes keyed by (image hash, QF), with a JSON manifest."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root else default_cache_dir() / "jpeg_pairs"
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.manifest = (json.loads(self.manifest_path.read_text())
                         if self.manifest_path.exists() else {})
        self._dirty = False

    def get(self, img: np.ndarray, qf: int) -> np.ndarray:
        from PIL import Image

        key = f"{hashlib.sha1(np.ascontiguousarray(img).tobytes()).hexdigest()}_{int(qf)}"
        name = self.manifest.get(key)
        if name and (self.root / name).exists():
            return np.asarray(Image.open(self.root / name).convert("RGB"))
        out = jpeg_roundtrip_u8(img, qf)
        name = key + ".png"
        Image.fromarray(out).save(self.root / name)
        self.manifest[key] = name
        self._dirty = True
        return out

    def flush(self):
        if self._dirty:
            tmp = self.manifest_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(self.manifest, indent=0, sort_keys=True))
            tmp.replace(self.manifest_path)
            self._dirty = False


@dataclass
class PairSet:
    """Paired clean/compressed images, stored as uint8 (N, 3, H, W) tensors."""

    clean: torch.Tensor
    compressed: torch.Tensor
    source: torch.Tensor  # index into clean
    qf: torch.Tensor

    def __len__(self):
        return len(self.qf)


def build_pairs(images_u8: np.ndarray, rng: np.random.Generator, *,
                class_qfs: bool = True, uniform_per_image: int = 1,
                cache: PairCache | None = None) -> PairSet:
    """Make codec pairs at every class QF plus uniform QF draws per image.

    ``images_u8`` is (N, H, W, 3) uint8.
    """
    if len(images_u8) == 0:
        raise ValueError("no images to build JPEG pairs from")
    if not codec_available():
        from .attacks import CodecUnavailable

        raise CodecUnavailable("baseline JPEG codec unavailable (Pillow built without libjpeg)")
    comp, src, qfs = [], [], []
    for i, img in enumerate(images_u8):
        todo = list(QF_CLASSES) if class_qfs else []
        todo += [int(q) for q in rng.integers(10, 101, size=uniform_per_image)]
        for qf in todo:
            comp.append(cache.get(img, qf) if cache else jpeg_roundtrip_u8(img, qf))
            src.append(i)
            qfs.append(qf)
    if cache:
        cache.flush()

    def to_t(a):
        return torch.from_numpy(np.ascontiguousarray(np.stack(a))).permute(0, 3, 1, 2).contiguous()

    return PairSet(to_t(list(images_u8)), to_t(comp), torch.tensor(src), torch.tensor(qfs))


def _u8(t: torch.Tensor) -> torch.Tensor:
    return t.float() / 255.0


# --- training ------------------------------------------------------------------

def train_predictor(model: FGJpeg, pairs: PairSet, steps: int, *, batch_size: int = 16,
                    lr: float = 1e-3, seed: int = 0, log_every: int = 100) -> list[dict]:
    if len(pairs) == 0:
        raise ValueError("empty JPEG pair set")
    rng = np.random.default_rng(seed)
    pred = model.predictor
    pred.train()
    opt = torch.optim.Adam(pred.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, steps))
    labels = torch.tensor([qf_to_class(int(q)) for q in pairs.qf])
    history = []
    for step in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(pairs), size=batch_size))
        logits = pred(_u8(pairs.compressed[idx]))
        loss = F.cross_entropy(logits, labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        pred.project_()
        history.append({"step": step, "loss": float(loss.detach())})
        if log_every and step % log_every == 0:
            log.info("predictor step %d loss %.4f", step, float(loss.detach()))
    pred.eval()
    return history


def jpeg_loss(sim: torch.Tensor, target: torch.Tensor, logits: torch.Tensor,
              labels: torch.Tensor, epsilon: float = 0.1) -> torch.Tensor:
    """Per-image l1 norm to the real codec output (batch mean) plus epsilon * CE on the QF class."""
    loss = (sim - target).abs().flatten(1).sum(1).mean()
    if epsilon:
        loss = loss + epsilon * F.cross_entropy(logits, labels)
    return loss


def train_fgjpeg(model: FGJpeg, pairs: PairSet, steps: int, *, epsilon: float = 0.1,
                 batch_size: int = 16, lr: float = 1e-3, awgn_sigma: float = 0.01,
                 awgn_prob: float = 0.5, seed: int = 0, log_every: int = 100) -> list[dict]:
    """Fit generator + controller against the codec with the predictor frozen."""
    if len(pairs) == 0:
        raise ValueError("empty JPEG pair set")
    rng = np.random.default_rng(seed)
    model.predictor.eval()
    for p in model.predictor.parameters():
        p.requires_grad_(False)
    params = list(model.generator.parameters()) + list(model.controller.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, steps))
    labels = torch.tensor([qf_to_class(int(q)) for q in pairs.qf])
    model.generator.train()
    model.controller.train()
    history = []
    for step in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(pairs), size=batch_size))
        clean = _u8(pairs.clean[pairs.source[idx]])
        noisy = torch.from_numpy(rng.random(batch_size) < awgn_prob).float().view(-1, 1, 1, 1)
        noise = torch.from_numpy(rng.standard_normal(tuple(clean.shape))).float()
        clean = (clean + noisy * awgn_sigma * noise).clamp(0, 1)
        target = _u8(pairs.compressed[idx])
        sim = model.simulate(clean, pairs.qf[idx].float())
        logits = model.predictor(sim) if epsilon else None
        loss = jpeg_loss(sim, target, logits, labels[idx], epsilon)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append({"step": step, "loss": float(loss.detach())})
        if log_every and step % log_every == 0:
            log.info("fg-jpeg step %d loss %.5f", step, float(loss.detach()))
    model.eval()
    return history


@torch.no_grad()
def predictor_accuracy(model: FGJpeg, pairs: PairSet, batch_size: int = 64) -> dict:
    model.predictor.eval()
    exact = ok = 0
    for s in range(0, len(pairs), batch_size):
        x = _u8(pairs.compressed[s:s + batch_size])
        pred = model.predictor(x).argmax(dim=1).tolist()
        for p, qf in zip(pred, pairs.qf[s:s + batch_size].tolist()):
            exact += p == qf_to_class(qf)
            ok += acceptable(p, qf)
    n = max(1, len(pairs))
    return {"exact": exact / n, "acceptable": ok / n, "count": len(pairs)}


@torch.no_grad()
def fidelity_report(model: FGJpeg, pairs: PairSet, batch_size: int = 64) -> list[dict]:
    """Per class QF: mean l1 of simulated vs real and of input vs real."""
    model.eval()
    rows = []
    for qf in QF_CLASSES:
        sel = (pairs.qf == qf).nonzero().flatten()
        if len(sel) == 0:
            continue
        sim_l1 = in_l1 = 0.0
        for s in range(0, len(sel), batch_size):
            idx = sel[s:s + batch_size]
            clean = _u8(pairs.clean[pairs.source[idx]])
            real = _u8(pairs.compressed[idx])
            sim = model.simulate(clean, qf)
            sim_l1 += float((sim - real).abs().mean(dim=(1, 2, 3)).sum())
            in_l1 += float((clean - real).abs().mean(dim=(1, 2, 3)).sum())
        rows.append({"qf": qf, "l1_sim_vs_real": sim_l1 / len(sel),
                     "l1_input_vs_real": in_l1 / len(sel), "count": int(len(sel))})
    return rows
