"""Run orchestration: training loops over a dataset, checkpoints and inference."""

from __future__ import annotations

import json
import logging
import platform
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from .attacks import resize, zero_pad_resize
from .checkpoint import Checkpoint, CheckpointError, file_hash, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import atomic_write_bytes, load_dir, to_numpy, to_tensor
from .fgjpeg import (FGJpeg, PairCache, build_pairs, fidelity_report, predictor_accuracy,
                     train_fgjpeg, train_predictor)
from .metrics import RectMask, psnr
from .training import MetricsLog, Models, Trainer

log = logging.getLogger(__name__)

MODEL_MODULES = ("generator", "preprocessor", "localizer", "disc_a", "disc_b")


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "0+unknown"


def write_manifest(path: str | Path, payload: dict, cfg: RunConfig | None = None) -> dict:
    """Write a JSON manifest stamped with code version and config hash."""
    doc = {"code_version": code_version(), "torch": torch.__version__,
           "python": platform.python_version(), "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if cfg is not None:
        doc["config_hash"] = cfg.hash()
        doc["config"] = cfg.to_dict()
    doc.update(payload)
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n").encode())
    return doc


def make_fgjpeg(cfg: RunConfig) -> FGJpeg:
    return FGJpeg(widths=tuple(cfg.jpeg.widths))


def save_models(path, models: Models, cfg: RunConfig, step: int, extra: dict | None = None) -> str:
    mods = {name: getattr(models, name) for name in MODEL_MODULES}
    if models.fgjpeg is not None:
        mods["fgjpeg"] = models.fgjpeg
    return save_checkpoint(path, mods, config=cfg.to_dict(), step=step, extra=extra)


def load_models(ck: Checkpoint | str | Path) -> tuple[Models, RunConfig]:
    if not isinstance(ck, Checkpoint):
        ck = load_checkpoint(ck)
    if ck.config is None:
        raise CheckpointError("checkpoint carries no run configuration")
    cfg = RunConfig.from_dict(ck.config)
    models = Models(cfg)
    for name in MODEL_MODULES:
        ck.load_into(name, getattr(models, name))
    if "fgjpeg" in ck.states:
        fg = make_fgjpeg(cfg)
        ck.load_into("fgjpeg", fg)
        models.attach_fgjpeg(fg)
    models.eval()
    return models, cfg


def load_fgjpeg(path: str | Path, cfg: RunConfig) -> FGJpeg:
    ck = load_checkpoint(path)
    fg = make_fgjpeg(RunConfig.from_dict(ck.config) if ck.config else cfg)
    ck.load_into("fgjpeg", fg)
    fg.eval()
    return fg


# --- training runs -------------------------------------------------------------

def fit(cfg: RunConfig, out_dir: str | Path, *, images: np.ndarray | None = None,
        steps: int | None = None, callback=None) -> dict:
    """Train the full pipeline; writes metrics.csv, checkpoints and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if images is None:
        images, _ = load_dir(cfg.data.train_dir, cfg.resolution, cfg.data.limit)
    data = to_tensor(images)
    trainer = Trainer(cfg, total_steps=steps or cfg.train.steps)
    if cfg.train.fgjpeg_checkpoint:
        trainer.models.attach_fgjpeg(load_fgjpeg(cfg.train.fgjpeg_checkpoint, cfg))
    (out / "config.toml").write_text(cfg.dumps())
    metrics = MetricsLog(out / "metrics.csv")
    rng = np.random.default_rng([cfg.seed, 1])
    b = cfg.train.batch_size
    t0 = time.time()
    try:
        for step in range(trainer.total_steps):
            idx = rng.choice(len(data), size=b, replace=len(data) < b)
            row = trainer.train_step(data[torch.from_numpy(idx)])
            if cfg.train.log_every and step % cfg.train.log_every == 0:
                metrics.write(row)
            if callback:
                callback(row)
            ce = cfg.train.checkpoint_every
            if ce and step and step % ce == 0:
                save_models(out / f"step_{step:06d}.ckpt", trainer.models, cfg, step)
    finally:
        metrics.close()
    digest = save_models(out / "final.ckpt", trainer.models, cfg, trainer.state.step,
                         extra={"transitions": trainer.state.transitions})
    return write_manifest(out / "manifest.json", {
        "command": "train", "steps": trainer.state.step, "train_images": int(len(data)),
        "stage_transitions": trainer.state.transitions, "final_stage": trainer.state.stage.value,
        "checkpoint": "final.ckpt", "checkpoint_sha256": digest,
        "seconds": round(time.time() - t0, 1)}, cfg)


_CURVE_WINDOW = 100


def _curve(history: list[dict]) -> list[float]:
    """Mean loss over consecutive windows of steps."""
    losses = [r["loss"] for r in history]
    return [float(np.mean(losses[i:i + _CURVE_WINDOW])) for i in range(0, len(losses), _CURVE_WINDOW)]


def fit_jpeg(cfg: RunConfig, out_dir: str | Path, *, images: np.ndarray | None = None,
             test_images: np.ndarray | None = None, cache_dir: str | Path | None = None) -> dict:
    """Train the QF predictor, then the simulator; report held-out fidelity."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    j = cfg.jpeg
    if images is None:
        images, _ = load_dir(j.data_dir, cfg.resolution, j.limit)
    if test_images is None and j.test_dir:
        test_images, _ = load_dir(j.test_dir, cfg.resolution, 0)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    cache = PairCache(cache_dir)
    t0 = time.time()
    pairs = build_pairs(images, rng, uniform_per_image=j.uniform_per_image, cache=cache)
    model = make_fgjpeg(cfg)
    h_pred = train_predictor(model, pairs, j.predictor_steps, batch_size=j.batch_size, lr=j.lr,
                             seed=cfg.seed)
    h_gen = train_fgjpeg(model, pairs, j.generator_steps, epsilon=cfg.loss.epsilon,
                         batch_size=j.batch_size, lr=j.lr, awgn_sigma=j.awgn_sigma,
                         awgn_prob=j.awgn_prob, seed=cfg.seed)
    report = {"train": {"accuracy": predictor_accuracy(model, pairs)},
              "loss_curve": {"window": _CURVE_WINDOW, "predictor": _curve(h_pred),
                             "generator": _curve(h_gen)}}
    if test_images is not None:
        test_pairs = build_pairs(test_images, np.random.default_rng([cfg.seed, 7]),
                                 uniform_per_image=j.uniform_per_image, cache=cache)
        report["test"] = {"accuracy": predictor_accuracy(model, test_pairs),
                          "fidelity": fidelity_report(model, test_pairs)}
    digest = save_checkpoint(out / "fgjpeg.ckpt", {"fgjpeg": model}, config=cfg.to_dict(),
                             step=j.predictor_steps + j.generator_steps)
    return write_manifest(out / "manifest.json", {
        "command": "train-jpeg", "checkpoint": "fgjpeg.ckpt", "checkpoint_sha256": digest,
        "pairs": len(pairs), "report": report, "seconds": round(time.time() - t0, 1)}, cfg)


# --- inference -----------------------------------------------------------------

class Pipeline:
    """Protect, detect and recover single H x W x 3 images with a trained model."""

    def __init__(self, models: Models, cfg: RunConfig, checkpoint_sha256: str = ""):
        self.models = models.eval()
        self.cfg = cfg
        self.checkpoint_sha256 = checkpoint_sha256
        self.hw = (cfg.resolution, cfg.resolution)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> Pipeline:
        models, cfg = load_models(path)
        return cls(models, cfg, file_hash(path))

    def _fit(self, image: np.ndarray) -> torch.Tensor:
        x = to_tensor(image)
        if tuple(x.shape[-2:]) != self.hw:
            log.warning("input %s resized to model resolution %s", tuple(x.shape[-2:]), self.hw)
            x = resize(x, self.hw)
        return x

    @torch.no_grad()
    def protect_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return self.models.generator(x).clamp(0, 1)

    @torch.no_grad()
    def detect_tensor(self, x_atk: torch.Tensor) -> list[RectMask]:
        y, _ = self.models.preprocessor(resize(x_atk, self.hw))
        return self.models.localizer(y).rects()

    @torch.no_grad()
    def recover_tensor(self, x_atk: torch.Tensor, masks: list[RectMask]) -> torch.Tensor:
        """Undo the crop with ``masks``; masks scored below 0.5 fall back to the full frame."""
        y, _ = self.models.preprocessor(resize(x_atk, self.hw))
        used = [m if m.confidence >= 0.5 else RectMask.full(m.confidence) for m in masks]
        return self.models.generator.inverse(zero_pad_resize(y, used, self.hw)).clamp(0, 1)

    def protect(self, image: np.ndarray) -> tuple[np.ndarray, float]:
        """Returns the protected image (float, 8-bit grid) and its PSNR vs the input."""
        x = self._fit(image)
        out = to_numpy(self.protect_tensor(x)[0])
        out = np.floor(out * 255.0 + 0.5) / 255.0
        return out, psnr(out, to_numpy(x[0]))

    def detect(self, image: np.ndarray) -> RectMask:
        return self.detect_tensor(to_tensor(image))[0]

    def recover(self, image: np.ndarray, mask: RectMask | None = None) -> tuple[np.ndarray, RectMask]:
        x = to_tensor(image)
        m = mask if mask is not None else self.detect_tensor(x)[0]
        if m.confidence < 0.5:
            m = RectMask.full(m.confidence)
        return to_numpy(self.recover_tensor(x, [m])[0]), m
