"""Command-line entry point: ``clrkit protect|detect|recover|train|train-jpeg|evaluate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .attacks import AttackParamError, AttackSpec, CodecUnavailable
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import ImageReadError, load_dir, load_image, make_toy_corpus, save_image

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_CODEC = 0, 2, 3, 4

log = logging.getLogger("clrkit")


class InputError(ValueError):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = str(args.out)
    return cfg


def _pipeline(args):
    from .pipeline import Pipeline

    if not args.checkpoint:
        raise InputError("--checkpoint is required")
    return Pipeline.from_checkpoint(args.checkpoint)


def _sidecar(out_path: Path) -> Path:
    return out_path.with_suffix(out_path.suffix + ".json")


def cmd_protect(args) -> int:
    from .pipeline import write_manifest

    pipe = _pipeline(args)
    img = load_image(args.input)
    out, p = pipe.protect(img)
    dst = Path(args.out or Path(args.input).with_name(Path(args.input).stem + "_protected.png"))
    save_image(out, dst, "png")
    write_manifest(_sidecar(dst), {"command": "protect", "input": str(args.input),
                                   "checkpoint_sha256": pipe.checkpoint_sha256,
                                   "resolution": pipe.cfg.resolution, "psnr_vs_original": p},
                   pipe.cfg)
    print(json.dumps({"output": str(dst), "psnr_vs_original": round(p, 3)}))
    return EXIT_OK


def cmd_detect(args) -> int:
    from .pipeline import write_manifest

    pipe = _pipeline(args)
    m = pipe.detect(load_image(args.input))
    cropped = m.confidence >= 0.5
    doc = {"verdict": "cropped" if cropped else "uncropped", "mask": m.to_dict()}
    print(json.dumps(doc))
    if args.out:
        write_manifest(args.out, {"command": "detect", "input": str(args.input),
                                  "checkpoint_sha256": pipe.checkpoint_sha256, **doc}, pipe.cfg)
    return EXIT_OK


def cmd_recover(args) -> int:
    from .metrics import RectMask
    from .pipeline import write_manifest

    pipe = _pipeline(args)
    override = None
    if args.mask:
        try:
            override = RectMask.parse(args.mask)
        except (ValueError, TypeError) as e:
            raise InputError(f"bad --mask: {e}") from e
    rec, used = pipe.recover(load_image(args.input), override)
    dst = Path(args.out or Path(args.input).with_name(Path(args.input).stem + "_recovered.png"))
    save_image(rec, dst, "png")
    write_manifest(_sidecar(dst), {"command": "recover", "input": str(args.input),
                                   "checkpoint_sha256": pipe.checkpoint_sha256,
                                   "mask_source": "override" if override else "detected",
                                   "mask": used.to_dict()}, pipe.cfg)
    print(json.dumps({"output": str(dst), "mask": used.to_dict()}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import fit

    cfg = _load_config(args)
    if args.attack:
        cfg.attack.roster = list(args.attack)
    if args.crop_rate:
        cfg.attack.crop_rate = list(args.crop_rate[0])
    cfg.validate()
    if not cfg.data.train_dir:
        raise ConfigError("data.train_dir is not set")
    man = fit(cfg, cfg.output_dir, steps=args.steps)
    print(json.dumps({"output_dir": cfg.output_dir, "steps": man["steps"],
                      "stage_transitions": man["stage_transitions"]}))
    return EXIT_OK


def cmd_train_jpeg(args) -> int:
    from .pipeline import fit_jpeg

    cfg = _load_config(args)
    if not cfg.jpeg.data_dir:
        raise ConfigError("jpeg.data_dir is not set")
    man = fit_jpeg(cfg, cfg.output_dir)
    print(json.dumps({"output_dir": cfg.output_dir, "report": man["report"]}, default=str))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate, write_report
    from .pipeline import write_manifest

    pipe = _pipeline(args)
    cfg = pipe.cfg
    data_dir = args.data or cfg.data.test_dir
    if not data_dir:
        raise InputError("--data is required (no data.test_dir in the checkpoint config)")
    try:
        images, _ = load_dir(data_dir, cfg.resolution, args.limit or cfg.eval.limit)
    except (FileNotFoundError, ValueError) as e:
        raise InputError(str(e)) from e
    attacks = [AttackSpec.parse(a) for a in (args.attack or cfg.eval.attacks)]
    buckets = [tuple(b) for b in (args.crop_rate or cfg.eval.rate_buckets)]
    seed = cfg.seed if args.seed is None else args.seed
    report = evaluate(pipe, images, attacks, buckets, seed=seed, dataset=args.dataset
                      or Path(data_dir).name, save_format=args.save_format or cfg.eval.save_format)
    out = Path(args.out or "eval")
    paths = write_report(report, out)
    write_manifest(out / "manifest.json", {"command": "evaluate", "data": str(data_dir),
                                           "checkpoint_sha256": pipe.checkpoint_sha256,
                                           "seed": seed, "images": int(len(images)),
                                           "attacks": [str(a) for a in attacks],
                                           "buckets": buckets,
                                           "protect_psnr": report.protect_psnr,
                                           "false_alarm_rate": report.false_alarm_rate,
                                           "files": {k: str(v) for k, v in paths.items()}}, cfg)
    print(Path(paths["csv"]).read_text(), end="")
    return EXIT_OK


def cmd_toy_data(args) -> int:
    paths = make_toy_corpus(args.out, args.count, size=args.size, split=args.split,
                            seed=args.seed or 0)
    print(json.dumps({"output_dir": str(args.out), "images": len(paths)}))
    return EXIT_OK


def _rate_pair(text: str) -> tuple[float, float]:
    try:
        parts = [float(t) for t in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad crop rate {text!r}") from e
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or not 0 < parts[0] <= parts[1] <= 1:
        raise argparse.ArgumentTypeError("crop rate must be 'r' or 'lo,hi' with 0 < lo <= hi <= 1")
    return parts[0], parts[1]


def _attack(text: str) -> str:
    try:
        AttackSpec.parse(text)
    except AttackParamError as e:
        raise argparse.ArgumentTypeError(str(e)) from e
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clrkit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    def image_cmd(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("input")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out")
        s.set_defaults(fn=fn)
        return s

    image_cmd("protect", cmd_protect, "protect an image")
    image_cmd("detect", cmd_detect, "localize a crop; --out writes a JSON manifest")
    r = image_cmd("recover", cmd_recover, "recover the full image from an attacked crop")
    r.add_argument("--mask", help="override mask: 'x0,y0,x1,y1' or RectMask JSON")

    t = sub.add_parser("train", help="train the pipeline")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--attack", action="append", type=_attack)
    t.add_argument("--crop-rate", action="append", type=_rate_pair)
    t.set_defaults(fn=cmd_train)

    j = sub.add_parser("train-jpeg", help="train the JPEG simulator")
    j.add_argument("--config", required=True)
    j.add_argument("--out")
    j.set_defaults(fn=cmd_train_jpeg)

    e = sub.add_parser("evaluate", help="robustness grid over attacks and crop rates")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--attack", action="append", type=_attack)
    e.add_argument("--crop-rate", action="append", type=_rate_pair)
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--dataset")
    e.add_argument("--save-format", choices=("png", "jpeg", "bmp"))
    e.set_defaults(fn=cmd_evaluate)

    d = sub.add_parser("toy-data", help="write a small natural-image corpus")
    d.add_argument("--out", required=True)
    d.add_argument("--count", type=int, default=200)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--split", choices=("train", "test"), default="train")
    d.set_defaults(fn=cmd_toy_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CodecUnavailable as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODEC
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ImageReadError, InputError, CheckpointError, AttackParamError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
