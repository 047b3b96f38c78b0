import json
import zipfile

import numpy as np
import pytest
import torch

from clrkit.checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from clrkit.config import ConfigError, RunConfig
from clrkit.data import (ImageReadError, center_square, ingest, load_dir, load_image,
                         make_toy_corpus, save_image, to_numpy, to_tensor)
from clrkit.pipeline import Pipeline, load_models, save_models, write_manifest
from clrkit.training import Models
from helpers import randomize_subnets, u8_images

TINY = {
    "resolution": 64,
    "model": {"base_channels": 4, "preprocessor_channels": [8, 8, 8, 8, 8],
              "localizer_widths": [4, 8, 8], "localizer_pool": 4, "disc_channels": 8, "disc_layers": 2},
}


# --- config --------------------------------------------------------------------

def test_defaults_mirror_loss_weights_and_schedule():
    cfg = RunConfig()
    assert (cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma, cfg.loss.epsilon, cfg.loss.eta) == \
        (1.5, 0.1, 0.05, 0.1, 0.01)
    assert cfg.train.lr == 1e-4 and cfg.train.batch_size == 4 and cfg.train.feat_threshold == 0.001
    assert cfg.attack.r_aug == 0.15


def test_toml_roundtrip(tmp_path):
    cfg = RunConfig.from_dict(TINY)
    (tmp_path / "c.toml").write_text(cfg.dumps())
    back = RunConfig.load(tmp_path / "c.toml")
    back.output_dir = cfg.output_dir  # relative paths are re-anchored at the file
    assert back == cfg and back.hash() == cfg.hash()


def test_shipped_config_loads():
    from pathlib import Path

    cfg = RunConfig.load(Path(__file__).parents[1] / "configs" / "toy64.toml")
    assert cfg.resolution == 64 and [str(a) for a in cfg.attacks()] == ["identity", "jpeg_real:qf=90"]
    assert Path(cfg.data.train_dir).is_absolute()


@pytest.mark.parametrize("patch", [
    {"resolution": 100},
    {"attack": {"roster": []}},
    {"attack": {"roster": ["warp"]}},
    {"attack": {"crop_rate": [0.9, 0.5]}},
    {"attack": {"r_aug": 2.0}},
    {"loss": {"alpha": -1.0}},
    {"train": {"no_such_key": 1}},
    {"eval": {"save_format": "gif"}},
])
def test_invalid_configs(patch):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(patch)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("resolution = [")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.toml")


def test_manifest_echoes_config(tmp_path):
    cfg = RunConfig.from_dict(TINY)
    doc = write_manifest(tmp_path / "m.json", {"command": "x"}, cfg)
    on_disk = json.loads((tmp_path / "m.json").read_text())
    assert on_disk == doc
    assert doc["config_hash"] == cfg.hash() and doc["config"]["loss"]["alpha"] == 1.5
    assert doc["code_version"]


# --- checkpoint ----------------------------------------------------------------

def _models(seed=0):
    cfg = RunConfig.from_dict(TINY)
    torch.manual_seed(seed)
    models = Models(cfg)
    randomize_subnets(models, std=0.02, seed=seed)
    return models, cfg


def test_checkpoint_bit_identical_inference(tmp_path):
    models, cfg = _models()
    digest = save_models(tmp_path / "m.ckpt", models, cfg, step=7)
    assert digest == file_hash(tmp_path / "m.ckpt")
    pipe_a = Pipeline(models, cfg)
    pipe_b = Pipeline.from_checkpoint(tmp_path / "m.ckpt")
    assert pipe_b.cfg == cfg and pipe_b.checkpoint_sha256 == digest
    probes = u8_images(np.random.default_rng(0), 10)
    for probe in probes.split(1):
        xa, xb = pipe_a.protect_tensor(probe), pipe_b.protect_tensor(probe)
        assert torch.equal(xa, xb)
        ma, mb = pipe_a.detect_tensor(xa), pipe_b.detect_tensor(xb)
        assert ma == mb
        assert torch.equal(pipe_a.recover_tensor(xa, ma), pipe_b.recover_tensor(xb, mb))


def test_checkpoint_is_little_endian_npy_zip(tmp_path):
    lin = torch.nn.Linear(3, 2)
    save_checkpoint(tmp_path / "c.ckpt", {"lin": lin}, step=3, extra={"note": "x"})
    with zipfile.ZipFile(tmp_path / "c.ckpt") as zf:
        names = set(zf.namelist())
        meta = json.loads(zf.read("meta.json"))
    assert names == {"meta.json", "arrays/lin.weight.npy", "arrays/lin.bias.npy"}
    assert meta["arrays"]["lin.weight"]["dtype"] == "<f4" and meta["format_version"] == 1
    ck = load_checkpoint(tmp_path / "c.ckpt")
    other = torch.nn.Linear(3, 2)
    ck.load_into("lin", other)
    assert torch.equal(other.weight, lin.weight) and ck.step == 3


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    save_checkpoint(tmp_path / "c.ckpt", {"lin": torch.nn.Linear(2, 2)})
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.ckpt").load_into("other", torch.nn.Linear(2, 2))


def test_load_models_restores_config(tmp_path):
    models, cfg = _models(1)
    save_models(tmp_path / "m.ckpt", models, cfg, step=0)
    back, cfg2 = load_models(tmp_path / "m.ckpt")
    assert cfg2 == cfg
    for (ka, va), (kb, vb) in zip(models.state_dict().items(), back.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


# --- images and data -----------------------------------------------------------

def test_image_io_roundtrip(tmp_path):
    img = (np.random.default_rng(0).random((12, 10, 3)) * 255).astype(np.uint8)
    save_image(img, tmp_path / "a.png")
    assert np.array_equal(load_image(tmp_path / "a.png"), img)
    with pytest.raises(ImageReadError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "bad.png").write_bytes(b"garbage")
    with pytest.raises(ImageReadError):
        load_image(tmp_path / "bad.png")


def test_ingest_center_square_and_resize():
    img = np.zeros((40, 60, 3), np.uint8)
    img[:, 10:50] = 200
    sq = center_square(img)
    assert sq.shape == (40, 40, 3) and (sq == 200).all()
    assert ingest(img, 16).shape == (16, 16, 3)


def test_tensor_conversions():
    img = (np.random.default_rng(1).random((2, 8, 8, 3)) * 255).astype(np.uint8)
    t = to_tensor(img)
    assert t.shape == (2, 3, 8, 8) and float(t.max()) <= 1.0
    assert np.allclose(to_numpy(t[0]), img[0] / 255.0)


def test_toy_corpus(tmp_path):
    paths = make_toy_corpus(tmp_path / "train", 6, size=32, split="train")
    again = make_toy_corpus(tmp_path / "again", 6, size=32, split="train")
    assert len(paths) == 6
    imgs, names = load_dir(tmp_path / "train", 32)
    imgs2, _ = load_dir(tmp_path / "again", 32)
    assert imgs.shape == (6, 32, 32, 3) and names[0] == "train_00000.png"
    assert np.array_equal(imgs, imgs2)
    test_imgs, _ = load_dir(make_toy_corpus(tmp_path / "test", 6, size=32, split="test")[0].parent, 32)
    assert not any(np.array_equal(a, b) for a in imgs for b in test_imgs)
    assert len(load_dir(tmp_path / "train", 32, limit=2)[0]) == 2
