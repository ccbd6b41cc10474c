"""Command-line entry point: synth, train, eval, gradcheck, losscurves.

Settings resolve as command-line flags > flat JSON ``--config`` file > defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import data as data_mod
from . import losses, metrics
from .gradcheck import DEFAULT_H, TOLERANCE, gradcheck_report
from .model import (ArchConfig, CheckpointError, ConfigError, categorical_logits,
                    differential_head, features, init_model, load_checkpoint)
from .optim import ScheduleConfig, TrainConfig, dior_threads, train
from .pairing import PairingError
from .rngs import substream

log = logging.getLogger("diorvit")

DIFF_LOSS_FLAGS = {"nad": "nad", "mse": "mse", "mae": "mae", "mse+ceo": "mse+ce_o",
                   "mae+ceo": "mae+ce_o", "none": "none"}

DEFAULTS: dict = {
    # synthetic data
    "classes": 4, "per_class": 250, "image_size": 32, "channels": 1, "noise_sigma": 0.08,
    # shared
    "seed": 0, "data": None, "out": None, "checkpoint": None,
    # architecture
    "patch_size": 8, "dim": 64, "blocks": 4, "heads": 4, "ff_hidden": [128, 128, 64],
    "head_hidden": [64, 64], "leaky_slope": 0.01,
    # training
    "diff_loss": "nad", "lambda": 6.5, "eps": 1e-5, "epochs": 50, "batch_size": 16,
    "lr": 1e-4, "lr_min": 0.0, "t0": 10, "t_mult": 2, "split": [0.7, 0.15, 0.15],
    "augment": "none",
    # evaluation
    "subset": "test", "pairs": 0, "report": None,
    # gradcheck
    "h": DEFAULT_H, "corrupt": None,
    # loss curves
    "K": 3, "step": 0.01,
}


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of settings")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="diorvit", description=__doc__.splitlines()[0],
                                     argument_default=S)
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ordinal dataset", argument_default=S)
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--out", help="output .dold path")

    p = sub.add_parser("train", help="train on a DOLD dataset", argument_default=S)
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out", help="output directory")
    p.add_argument("--diff-loss", dest="diff_loss", choices=sorted(DIFF_LOSS_FLAGS))
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--t0", type=int)
    p.add_argument("--t-mult", dest="t_mult", type=int)
    p.add_argument("--split", type=float, nargs=3)
    p.add_argument("--augment", choices=data_mod.AUGMENT_MODES)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ff-hidden", dest="ff_hidden", type=int, nargs=3)
    p.add_argument("--head-hidden", dest="head_hidden", type=int, nargs=2)
    p.add_argument("--leaky-slope", dest="leaky_slope", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint", argument_default=S)
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--subset", choices=("all", "train", "val", "test"))
    p.add_argument("--split", type=float, nargs=3)
    p.add_argument("--pairs", type=int, help="also score this many random ordered pairs")
    p.add_argument("--report", help="write the CSV report here")

    p = sub.add_parser("gradcheck", help="verify gradients on a tiny float64 model",
                       argument_default=S)
    _add_common(p)
    p.add_argument("--h", type=float)
    p.add_argument("--corrupt", help=S)

    p = sub.add_parser("losscurves", help="tabulate per-pair losses against d", argument_default=S)
    _add_common(p)
    p.add_argument("--K", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--out", help="CSV path (default: stdout)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags; reject unknown config keys."""
    cfg = dict(DEFAULTS)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = sorted(set(file_cfg) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(file_cfg)
    cfg.update(flags)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + k for k in missing)}")


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    try:
        sc = data_mod.SynthConfig(num_classes=cfg["classes"], per_class=cfg["per_class"],
                                  image_size=cfg["image_size"], channels=cfg["channels"],
                                  noise_sigma=cfg["noise_sigma"], seed=cfg["seed"])
    except data_mod.DataConfigError as exc:
        raise UsageError(str(exc)) from exc
    ds = data_mod.generate_synthetic(sc)
    data_mod.write_dataset(ds, cfg["out"])
    data_mod.write_metadata(ds, cfg["out"])
    print(f"wrote {len(ds)} samples to {cfg['out']}")
    for c, n in enumerate(ds.class_counts(), start=1):
        print(f"class {c}: {n}")
    return 0


def _arch_from(cfg: dict, ds: data_mod.Dataset) -> ArchConfig:
    C, H, W = ds.image_shape
    if H != W:
        raise UsageError(f"images must be square, got {H}x{W}")
    return ArchConfig(image_size=H, channels=C, patch_size=cfg["patch_size"], dim=cfg["dim"],
                      num_blocks=cfg["blocks"], num_heads=cfg["heads"],
                      ff_hidden=tuple(cfg["ff_hidden"]), head_hidden=tuple(cfg["head_hidden"]),
                      num_classes=ds.num_classes, leaky_slope=cfg["leaky_slope"])


def train_config_from(cfg: dict, arch: ArchConfig) -> TrainConfig:
    if cfg["diff_loss"] not in DIFF_LOSS_FLAGS:
        raise UsageError(f"unknown --diff-loss {cfg['diff_loss']!r}")
    loss_cfg = losses.LossConfig(lam=cfg["lambda"], eps=cfg["eps"], K=arch.num_classes - 1,
                                 diff_loss_kind=DIFF_LOSS_FLAGS[cfg["diff_loss"]])
    schedule = ScheduleConfig(lr_max=cfg["lr"], lr_min=cfg["lr_min"], T_0=cfg["t0"],
                              T_mult=cfg["t_mult"])
    return TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
                       loss=loss_cfg, arch=arch, schedule=schedule, augment=cfg["augment"])


def _load_data(path) -> data_mod.Dataset:
    try:
        return data_mod.read_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found: {path}") from exc


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    ds = _load_data(cfg["data"])
    try:
        arch = _arch_from(cfg, ds)
        tcfg = train_config_from(cfg, arch)
        train_set, val_set, _ = data_mod.split(ds, cfg["split"], cfg["seed"])
    except (ConfigError, losses.LossError, data_mod.DataConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(cfg["out"])
    model = init_model(arch, substream(tcfg.seed, "init"))
    result = train(model, train_set, val_set, tcfg, out_dir)
    record = {k: cfg[k] for k in DEFAULTS if k in cfg}
    (out_dir / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"trained {tcfg.epochs} epochs ({tcfg.loss.diff_loss_kind}, lambda={tcfg.loss.lam})")
    print(f"best val acc {result.best_val_acc:.6f} at epoch {result.best_epoch}")
    print(f"checkpoints: {result.best_path} {result.final_path}; log: {result.log_path}")
    return 0


def _check_compatible(arch: ArchConfig, ds: data_mod.Dataset) -> None:
    C, H, W = ds.image_shape
    for name, want, got in (("channels", arch.channels, C), ("image_size", arch.image_size, H),
                            ("image_size", arch.image_size, W),
                            ("num_classes", arch.num_classes, ds.num_classes)):
        if want != got:
            raise UsageError(f"checkpoint/data mismatch in {name}: checkpoint {want}, data {got}")


def sample_pairs(n: int, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``count`` ordered pairs (i, j), i != j, uniform over all such pairs."""
    if n < 2:
        raise UsageError("need at least 2 samples to sample pairs")
    rng = substream(seed, "pair-sampling")
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j = j + (j >= i)
    return i, j


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "checkpoint", "data")
    try:
        model = load_checkpoint(cfg["checkpoint"])
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {cfg['checkpoint']}") from exc
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    ds = _load_data(cfg["data"])
    _check_compatible(model.config, ds)
    if cfg["subset"] != "all":
        parts = dict(zip(("train", "val", "test"), data_mod.split(ds, cfg["split"], cfg["seed"])))
        ds = parts[cfg["subset"]]
    if len(ds) == 0:
        raise UsageError(f"subset {cfg['subset']!r} is empty")
    F = features(model, ds.images)
    preds = np.argmax(categorical_logits(model, ad.Tensor(F)).data, axis=1) + 1
    result = metrics.evaluate(ds.labels, preds, ds.num_classes)
    text = metrics.report_csv(result)
    if cfg["pairs"]:
        i, j = sample_pairs(len(ds), int(cfg["pairs"]), cfg["seed"])
        r_hat = differential_head(model, ad.Tensor(F[i] - F[j])).data
        r = ds.labels[i] - ds.labels[j]
        text += f"\npairs,mean_abs_diff_error\n{len(i)},{np.abs(r - r_hat).mean():.6f}\n"
    sys.stdout.write(text)
    if cfg["report"]:
        Path(cfg["report"]).write_text(text)
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    if cfg["h"] <= 0:
        raise UsageError("--h must be positive")
    if cfg["corrupt"]:
        with ad.inject_grad_fault(cfg["corrupt"]):
            report = gradcheck_report(cfg["seed"], cfg["h"])
    else:
        report = gradcheck_report(cfg["seed"], cfg["h"])
    failed = [name for name, err in report.items() if not err < TOLERANCE]
    width = max(len(n) for n in report)
    for name, err in report.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    if failed:
        print(f"gradient check FAILED (tolerance {TOLERANCE:g}): {', '.join(failed)}")
        return 1
    print(f"gradient check passed: {len(report)} groups below {TOLERANCE:g}")
    return 0


def cmd_losscurves(cfg: dict) -> int:
    K = int(cfg["K"])
    if K < 1:
        raise UsageError("--K must be >= 1")
    try:
        rows = losses.loss_curve_table(K=K, eps=cfg["eps"], step=cfg["step"])
    except losses.LossError as exc:
        raise UsageError(str(exc)) from exc
    text = losses.loss_curve_csv(rows)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "losscurves": cmd_losscurves}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        with threadpool_limits(limits=dior_threads()):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, data_mod.DatasetFormatError, PairingError, ArithmeticError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
