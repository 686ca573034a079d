"""Command-line entry point: train, predict, eval, curves, params.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Keys:

    backbone_widths   comma list of 4 ints (stem + 3 stages)   default 8,8,16,16
    decoder_width     int                                       default 8
    arch              fpn | unet                                default fpn
    refine            none | dacf | adf_auf                     default dacf
    input_size        HxW                                       default 96x96
    epsilon           loss smoothing                            default 1.0
    dice_variant      standard_2x | paper_verbatim              default standard_2x
    stage_weights     comma list of 3 floats                    default 1,1,1
    base_lr           float                                     default 0.001
    warmup_epochs     int                                       default 5
    epochs            int                                       default 40
    gamma             poly decay exponent                       default 3
    batch_size        int                                       default 16
    augment           true | false                              default true
    workers           eval threads                              default 1

Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SynthSpec, generate_synthetic, list_images, load_dataset, read_image, write_gray
from .metrics import evaluate_dataset
from .network import CheckpointError, ConfigError, ModelConfig, build_model, count_macs, count_params, \
    load_checkpoint, save_checkpoint
from .tensor import Tensor, resize_array
from .training import LossConfig, Schedule, train

log = logging.getLogger("cpdr")

DEFAULTS = {
    "backbone_widths": "8,8,16,16",
    "decoder_width": "8",
    "arch": "fpn",
    "refine": "dacf",
    "input_size": "96x96",
    "epsilon": "1.0",
    "dice_variant": "standard_2x",
    "stage_weights": "1,1,1",
    "base_lr": "0.001",
    "warmup_epochs": "5",
    "epochs": "40",
    "gamma": "3",
    "batch_size": "16",
    "augment": "true",
    "workers": "1",
}


class UsageFailure(Exception):
    """Raised for anything that should exit with status 2."""


@dataclass
class RunConfig:
    values: dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_file(cls, path: str | Path | None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        p = Path(path)
        if not p.is_file():
            raise UsageFailure(f"config file not found: {p}")
        for lineno, raw in enumerate(p.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageFailure(f"{p}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise UsageFailure(f"{p}:{lineno}: unknown config key {key!r}")
            cfg.values[key] = value
        cfg.check()
        return cfg

    def check(self) -> None:
        """Type-check every scalar key so a bad file fails before any work starts."""
        for key in ("decoder_width", "warmup_epochs", "epochs", "batch_size", "workers"):
            self.get_int(key)
        for key in ("epsilon", "base_lr", "gamma"):
            self.get_float(key)
        self.get_bool("augment")

    def _ints(self, key: str) -> tuple[int, ...]:
        return tuple(int(v) for v in self.values[key].replace("x", ",").split(","))

    def model(self, seed: int) -> ModelConfig:
        try:
            return ModelConfig(
                backbone_widths=self._ints("backbone_widths"),
                decoder_width=int(self.values["decoder_width"]),
                arch=self.values["arch"],
                refine=self.values["refine"],
                input_size=self._ints("input_size"),
                seed=seed,
            )
        except (ValueError, TypeError) as exc:
            raise UsageFailure(f"bad model config: {exc}") from exc

    def loss(self) -> LossConfig:
        try:
            return LossConfig(
                epsilon=float(self.values["epsilon"]),
                dice_variant=self.values["dice_variant"],
                stage_weights=tuple(float(v) for v in self.values["stage_weights"].split(",")),
            )
        except ValueError as exc:
            raise UsageFailure(f"bad loss config: {exc}") from exc

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as exc:
            raise UsageFailure(f"{key} must be an integer") from exc

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as exc:
            raise UsageFailure(f"{key} must be a number") from exc

    def get_bool(self, key: str) -> bool:
        v = self.values[key].lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageFailure(f"{key} must be true or false")
        return v in ("true", "1", "yes")


def _require_dir(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageFailure(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageFailure(f"{flag} directory not found: {p}")
    return p


def _synth_spec(tokens: list[str], seed: int) -> SynthSpec:
    opts = {"count": 16, "size": 96, "noise": 0.1}
    for tok in tokens:
        key, _, value = tok.partition("=")
        if key not in opts or not value:
            raise UsageFailure(f"--synthetic expects count=N size=N noise=X, got {tok!r}")
        try:
            opts[key] = type(opts[key])(value)
        except ValueError as exc:
            raise UsageFailure(f"--synthetic {key}: {exc}") from exc
    try:
        return SynthSpec(count=opts["count"], size=opts["size"], noise=opts["noise"], seed=seed)
    except ValueError as exc:
        raise UsageFailure(str(exc)) from exc


def cmd_train(args) -> int:
    rc = RunConfig.from_file(args.config)
    mcfg = rc.model(args.seed)
    lcfg = rc.loss()
    if args.out is None:
        raise UsageFailure("--out (checkpoint path) is required")
    if args.synthetic is not None:
        data = generate_synthetic(_synth_spec(args.synthetic, args.seed))
        if (data[0].image.shape[2], data[0].image.shape[3]) != mcfg.input_size:
            raise UsageFailure(f"synthetic size does not match input_size {mcfg.input_size}")
    else:
        images = _require_dir(args.images, "--images")
        masks = _require_dir(args.masks, "--masks")
        data = load_dataset(images, masks, mcfg.input_size)

    batch = min(rc.get_int("batch_size"), len(data))
    spe = len(data) // batch
    if args.epochs is not None:
        epochs = args.epochs
    elif args.steps is not None:
        epochs = math.ceil(args.steps / spe)
    else:
        epochs = rc.get_int("epochs")
    try:
        sched = Schedule(base_lr=rc.get_float("base_lr"), warmup_epochs=rc.get_int("warmup_epochs"),
                         total_epochs=epochs, gamma=rc.get_float("gamma"), steps_per_epoch=spe)
    except ValueError as exc:
        raise UsageFailure(f"bad schedule: {exc}") from exc

    model = build_model(mcfg)
    record = train(model, data, sched, lcfg, batch_size=batch, seed=args.seed, max_steps=args.steps,
                   augment=rc.get_bool("augment"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    record.write_csv(log_path)

    errs = []
    for s in data:
        errs.append(np.abs(model.predict(s.image)[0] - s.mask.data[0, 0]).mean())
    print(f"steps {len(record.steps)}  final loss {record.steps[-1].total:.4f}  train MAE {np.mean(errs):.4f}")
    print(f"checkpoint {out}  log {log_path}")
    return 0


def cmd_predict(args) -> int:
    rc = RunConfig.from_file(args.config)
    mcfg = rc.model(args.seed)
    if args.checkpoint is None or not Path(args.checkpoint).is_file():
        raise UsageFailure(f"checkpoint not found: {args.checkpoint}")
    images = _require_dir(args.images, "--images")
    if args.out is None:
        raise UsageFailure("--out (output directory) is required")
    try:
        model = load_checkpoint(args.checkpoint, mcfg)
    except CheckpointError as exc:
        raise UsageFailure(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = mcfg.input_size
    files = list_images(images)
    for name, path in files.items():
        img = read_image(path)
        prob = model.predict(Tensor(resize_array(img, h, w)[None]))[0]
        prob = np.clip(resize_array(prob, img.shape[1], img.shape[2]), 0.0, 1.0)
        write_gray(out / f"{name}.png", np.round(255.0 * prob))
    print(f"wrote {len(files)} saliency maps to {out}")
    return 0


def _evaluate(args):
    preds = _require_dir(args.preds, "--preds")
    gts = _require_dir(args.gts, "--gts")
    if args.out is None:
        raise UsageFailure("--out is required")
    rc = RunConfig.from_file(args.config)
    try:
        return evaluate_dataset(preds, gts, workers=rc.get_int("workers"))
    except ValueError as exc:
        raise UsageFailure(str(exc)) from exc


def cmd_eval(args) -> int:
    report = _evaluate(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    report.curves_csv(out.with_suffix(".curves.csv"))
    for key, value in report.scalars().items():
        print(f"{key:<11s}{value:.4f}")
    print(f"images     {report.n_images}")
    if report.missing:
        print(f"unmatched  {len(report.missing)}: {', '.join(report.missing)}")
    return 0


def cmd_curves(args) -> int:
    report = _evaluate(args)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.curves_csv(args.out)
    print(f"wrote curves for {report.n_images} images to {args.out}")
    return 0


def cmd_params(args) -> int:
    rc = RunConfig.from_file(args.config)
    model = build_model(rc.model(args.seed))
    n = count_params(model)
    macs = count_macs(model)
    h, w = model.cfg.input_size
    print(f"params {n}  ({n / 1e6:.2f} M)")
    print(f"macs   {macs}  ({macs / 1e9:.2f} G)  at {h}x{w}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpdr", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--out")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--images")
    p.add_argument("--masks")
    p.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE",
                   help="train on generated data; optional count=N size=N noise=X")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--log", help="training-log CSV (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write saliency maps for a directory of images")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--images")
    p.set_defaults(func=cmd_predict)

    for name, func, help_ in (("eval", cmd_eval, "score predictions: JSON report + curves CSV"),
                              ("curves", cmd_curves, "write only the threshold curves CSV")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--preds")
        p.add_argument("--gts")
        p.set_defaults(func=func)

    p = sub.add_parser("params", help="parameter count and MACs for a config")
    common(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageFailure, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
