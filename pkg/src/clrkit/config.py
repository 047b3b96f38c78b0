"""Run configuration: TOML file <-> nested dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacks import AttackSpec, AttackParamError

RESOLUTIONS = (64, 128, 256, 512)


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 1.5
    beta: float = 0.1
    gamma: float = 0.05
    epsilon: float = 0.1
    eta: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")


@dataclass
class ModelConfig:
    levels: int = 3
    couplings_per_level: int = 4
    base_channels: int = 16
    clamp: float = 2.0
    use_spectral_norm: bool = True
    preprocessor_channels: list[int] = field(default_factory=lambda: [32, 64, 64, 64, 32])
    localizer_widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    localizer_pool: int = 8
    disc_channels: int = 32
    disc_layers: int = 3


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 4
    lr: float = 1e-4
    lr_decay_at: list[float] = field(default_factory=lambda: [0.6, 0.85])
    disc_lr: float = 1e-4
    disc_every: int = 1
    feat_threshold: float = 0.001
    ema_decay: float = 0.99
    stage_cap: float = 0.2
    corner_weight: float = 1.0
    grad_clip: float = 1.0
    log_every: int = 1
    checkpoint_every: int = 0
    fgjpeg_checkpoint: str = ""


@dataclass
class AttackConfig:
    roster: list[str] = field(default_factory=lambda: [
        "identity", "jpeg_sim", "blur", "rescale", "median:window=4", "awgn", "dropout"])
    crop_rate: list[float] = field(default_factory=lambda: [0.4, 1.0])
    aspect: list[float] = field(default_factory=lambda: [0.75, 1.33])
    r_aug: float = 0.15


@dataclass
class DataConfig:
    train_dir: str = ""
    test_dir: str = ""
    limit: int = 0


@dataclass
class JpegConfig:
    data_dir: str = ""
    test_dir: str = ""
    limit: int = 0
    predictor_steps: int = 1000
    generator_steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    awgn_sigma: float = 0.01
    awgn_prob: float = 0.5
    uniform_per_image: int = 1
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])


@dataclass
class EvalConfig:
    attacks: list[str] = field(default_factory=lambda: [
        "identity", "jpeg_real:qf=90", "jpeg_real:qf=70", "jpeg_real:qf=50", "jpeg_real:qf=10",
        "rescale:ratio=1.5", "rescale:ratio=1.25", "rescale:ratio=0.75", "median:window=4",
        "dropout:p=0.2"])
    rate_buckets: list[list[float]] = field(default_factory=lambda: [[0.5, 0.65], [0.65, 0.8], [0.8, 1.0]])
    save_format: str = "png"
    limit: int = 0


@dataclass
class RunConfig:
    resolution: int = 256
    seed: int = 0
    output_dir: str = "runs/default"
    dataset_name: str = "dataset"
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    data: DataConfig = field(default_factory=DataConfig)
    jpeg: JpegConfig = field(default_factory=JpegConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.resolution not in RESOLUTIONS:
            raise ConfigError(f"resolution must be one of {RESOLUTIONS}")
        if self.resolution % 2 ** self.model.levels:
            raise ConfigError("resolution must be divisible by 2**levels")
        if not self.attack.roster:
            raise ConfigError("attack roster must not be empty")
        try:
            for a in self.attack.roster + self.eval.attacks:
                AttackSpec.parse(a)
        except AttackParamError as e:
            raise ConfigError(str(e)) from e
        lo, hi = self.attack.crop_rate
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_rate must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.attack.r_aug <= 1:
            raise ConfigError("r_aug must lie in [0, 1]")
        if self.eval.save_format.lower() not in ("png", "jpeg", "jpg", "bmp"):
            raise ConfigError("eval.save_format must be png, jpeg or bmp")

    def attacks(self) -> list[AttackSpec]:
        return [AttackSpec.parse(a) for a in self.attack.roster]

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return _build(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e
        cfg = cls.from_dict(raw)
        # relative paths in the file are relative to the file
        base = path.parent
        for sec, key in (("data", "train_dir"), ("data", "test_dir"), ("jpeg", "data_dir"),
                         ("jpeg", "test_dir"), ("train", "fgjpeg_checkpoint")):
            obj = getattr(cfg, sec)
            val = getattr(obj, key)
            if val and not Path(val).is_absolute():
                setattr(obj, key, str(base / val))
        if cfg.output_dir and not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(base / cfg.output_dir)
        return cfg

    def dumps(self) -> str:
        return to_toml(self.to_dict())


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a table for {cls.__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {type(v)} in TOML")


def to_toml(d: dict) -> str:
    lines, tables = [], []
    for k, v in d.items():
        if isinstance(v, dict):
            tables.append((k, v))
        else:
            lines.append(f"{k} = {_toml_value(v)}")
    for name, table in tables:
        lines.append(f"\n[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in table.items())
    return "\n".join(lines) + "\n"
