"""Command-line pipeline: synth, heatmap, build-dataset, train, eval, predict.

Settings come from built-in defaults, then a ``key = value`` config file
(``--config``), then command-line flags; later sources win. Config keys are
the flag names without the leading dashes. ``IMGNILM_SEED`` supplies the
seed when neither the config file nor ``--seed`` does.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .heatmap import HeatmapSpec, HeatmapError, encode_window, read_png, slice_windows, write_png
from .nn import NetworkConfig
from .series import PRESETS, DEFAULT_PERIOD, SeriesError, load_house, save_house, subtract_appliance, synth_house
from .trainer import (
    TrainConfig,
    evaluate,
    format_history,
    images_to_input,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

log = logging.getLogger("imgnilm")

SUBCOMMANDS = ("synth", "heatmap", "build-dataset", "train", "eval", "predict")


class UsageError(Exception):
    pass


# name -> (type, default, help)
FLAGS = {
    "seed": (int, 0, "random seed (fallback: $IMGNILM_SEED)"),
    "out": (str, None, "output directory"),
    "house": (str, None, "house directory (labels.dat + channel_N.dat)"),
    "appliance": (str, None, "target appliance name"),
    "window-hours": (int, 24, "hours per heatmap"),
    "step-seconds": (int, 6, "seconds aggregated into one pixel"),
    "stride-seconds": (int, 86400, "offset between consecutive windows"),
    "period": (int, DEFAULT_PERIOD, "sampling period of the resampled series"),
    "input-size": (int, 300, "side of the square network input"),
    "epochs": (int, 125, "training epochs"),
    "lr": (float, 1e-4, "Adam learning rate"),
    "batch-size": (int, 32, "minibatch size"),
    "dropout": (float, 0.0, "dropout rate after the last pooling layer"),
    "test-fraction": (float, 0.2, "fraction of each class held out for testing"),
    "val-fraction": (float, 0.2, "fraction of the remaining training images used for validation"),
    "checkpoint": (str, None, "model checkpoint file"),
    "manifest": (str, None, "dataset manifest (manifest.jsonl)"),
    "days": (int, 10, "days of synthetic data"),
    "appliances": (str, "dishwasher,fridge,tv", "comma-separated appliance presets"),
    "base-load": (float, 300.0, "always-on base load in watts"),
    "noise": (float, 30.0, "std of the aggregate meter noise in watts"),
    "include-inactive": (int, 0, "1 to also emit inactive days as extra Class I images"),
    "split": (str, "test", "manifest split to evaluate"),
    "image": (str, None, "PNG heatmap to classify"),
}

SUBCOMMAND_FLAGS = {
    "synth": ["seed", "out", "days", "appliances", "base-load", "noise", "period"],
    "heatmap": ["seed", "out", "house", "appliance", "window-hours", "step-seconds",
                "stride-seconds", "period"],
    "build-dataset": ["seed", "out", "house", "appliance", "window-hours", "step-seconds",
                      "stride-seconds", "period", "input-size", "test-fraction", "val-fraction",
                      "include-inactive"],
    "train": ["seed", "out", "manifest", "input-size", "epochs", "lr", "batch-size", "dropout"],
    "eval": ["seed", "out", "manifest", "checkpoint", "split"],
    "predict": ["seed", "out", "checkpoint", "image"],
}

REQUIRED = {
    "synth": ["out"],
    "heatmap": ["out", "house", "appliance"],
    "build-dataset": ["out", "house", "appliance"],
    "train": ["out", "manifest"],
    "eval": ["manifest", "checkpoint"],
    "predict": ["checkpoint", "image"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="imgnilm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key = value settings file")
        for flag in SUBCOMMAND_FLAGS[name]:
            typ, default, help_ = FLAGS[flag]
            p.add_argument(f"--{flag}", type=typ,
                           help=help_ if default is None else f"{help_} (default {default})")
    return parser


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    settings = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        settings[key] = value
    return settings


def resolve_settings(command: str, args: argparse.Namespace) -> tuple[dict, set]:
    """Merge defaults < config file < flags; returns settings and the explicitly set keys."""
    settings = {flag: FLAGS[flag][1] for flag in SUBCOMMAND_FLAGS[command]}
    explicit = set()
    given = {k.replace("_", "-"): v for k, v in vars(args).items() if k not in ("command", "config")}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_settings = read_config(config_path)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        for key, raw in file_settings.items():
            if key not in FLAGS:
                raise UsageError(f"unknown config key {key!r}")
            if key not in settings:
                continue  # shared config files may carry keys for other subcommands
            try:
                settings[key] = FLAGS[key][0](raw)
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
            explicit.add(key)
    if "seed" not in given and "seed" not in explicit and os.environ.get("IMGNILM_SEED"):
        try:
            settings["seed"] = int(os.environ["IMGNILM_SEED"])
        except ValueError:
            raise UsageError("IMGNILM_SEED must be an integer") from None
    settings.update(given)
    explicit |= set(given)
    missing = [k for k in REQUIRED[command] if settings.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): "
                         + ", ".join(f"--{k}" for k in missing))
    return settings, explicit


def _heatmap_spec(s) -> HeatmapSpec:
    return HeatmapSpec(window_hours=s["window-hours"], step_seconds=s["step-seconds"])


def validate(command: str, s: dict) -> None:
    """Check every setting against its module's preconditions."""
    try:
        if "window-hours" in s:
            spec = _heatmap_spec(s)
            if s["period"] <= 0 or spec.step_seconds % s["period"]:
                raise ValueError("step-seconds must be a multiple of period")
            if s["stride-seconds"] <= 0 or s["stride-seconds"] % s["period"]:
                raise ValueError("stride-seconds must be a positive multiple of period")
        if command == "synth":
            if s["days"] < 1 or s["base-load"] < 0 or s["noise"] < 0 or s["period"] <= 0:
                raise ValueError("days >= 1, base-load >= 0, noise >= 0 and period > 0 required")
            if 86400 % s["period"]:
                raise ValueError("period must divide 86400")
            unknown = [a for a in s["appliances"].split(",") if a and a not in PRESETS]
            if unknown:
                raise ValueError(f"unknown appliance presets {unknown}; choose from {sorted(PRESETS)}")
        if command == "build-dataset":
            ds.SplitSpec(s["test-fraction"], s["val-fraction"], s["seed"])
            if s["input-size"] < 1:
                raise ValueError("input-size must be positive")
        if command == "train":
            TrainConfig(s["epochs"], s["batch-size"], s["lr"], s["seed"])
            NetworkConfig(input_side=s["input-size"], dropout_rate=s["dropout"])
        if command == "eval" and s["split"] not in ds.SPLITS:
            raise ValueError(f"split must be one of {ds.SPLITS}")
    except ValueError as exc:
        raise UsageError(f"{command}: invalid setting: {exc}") from None


# ---------------------------------------------------------------- subcommands

def cmd_synth(s, explicit):
    names = [a for a in s["appliances"].split(",") if a]
    house = synth_house({n: PRESETS[n] for n in names}, s["base-load"], s["days"],
                        s["period"], s["seed"], noise_std=s["noise"])
    save_house(s["out"], house)
    print(f"wrote {s['days']} days, channels: aggregate {' '.join(names)} -> {s['out']}")


def _load(s):
    house = load_house(s["house"], s["period"])
    return house, Path(s["house"]).resolve().name


def cmd_heatmap(s, explicit):
    house, house_id = _load(s)
    if s["appliance"] not in house.appliances:
        raise ds.UnknownAppliance(f"{s['appliance']!r} not in {sorted(house.appliances)}")
    spec = _heatmap_spec(s)
    out = Path(s["out"])
    app = house.appliances[s["appliance"]]
    count = 0
    for agg, win in zip(slice_windows(house.aggregate, spec, s["stride-seconds"]),
                        slice_windows(app, spec, s["stride-seconds"])):
        for label, series in ((ds.CLASS_II, agg), (ds.CLASS_I, subtract_appliance(agg, win))):
            img = ds.LabeledImage(encode_window(series, spec), label, house_id, s["appliance"], agg.start)
            write_png(img.image, out / img.filename)
            count += 1
    print(f"wrote {count} heatmaps to {out}")


def cmd_build_dataset(s, explicit):
    house, house_id = _load(s)
    images = ds.build_classes(house, s["appliance"], _heatmap_spec(s), ds.ActivityRule(),
                              s["stride-seconds"], house_id, bool(s["include-inactive"]))
    manifest = ds.stratified_split(images, ds.SplitSpec(s["test-fraction"], s["val-fraction"], s["seed"]))
    path = ds.write_dataset(images, manifest, s["out"], side=s["input-size"])
    counts = manifest.counts()
    for label in ds.LABELS:
        print(f"{label}: " + " ".join(f"{sp}={counts.get((label, sp), 0)}" for sp in ds.SPLITS))
    print(f"manifest: {path}")


def load_split(manifest_path, split: str, side: int | None = None):
    """Images and 0/1 labels of one manifest split."""
    manifest = ds.DatasetManifest.load(manifest_path)
    root = Path(manifest_path).parent
    entries = manifest.split(split)
    if not entries:
        raise ds.DatasetError(f"manifest has no {split!r} images")
    images = [read_png(root / e.path) for e in entries]
    if side is not None and any(im.shape[:2] != (side, side) for im in images):
        raise ds.DatasetError(f"{split} images are not {side}x{side}; rebuild with --input-size {side}")
    labels = np.array([int(e.label == ds.CLASS_II) for e in entries])
    return images_to_input(np.stack(images)), labels


def cmd_train(s, explicit):
    side = s["input-size"] if "input-size" in explicit else None
    x_tr, y_tr = load_split(s["manifest"], "train", side)
    x_va, y_va = load_split(s["manifest"], "val", x_tr.shape[2])
    net_config = NetworkConfig(input_side=x_tr.shape[2], dropout_rate=s["dropout"])
    train_config = TrainConfig(s["epochs"], s["batch-size"], s["lr"], s["seed"])
    network, history = train(net_config, train_config, (x_tr, y_tr), (x_va, y_va))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(network, out / "model.imgn")
    (out / "history.tsv").write_text(format_history(history), encoding="utf-8")
    last = history[-1]
    print(f"epoch {last.epoch}: loss {last.train_loss:.4f} train_acc {last.train_accuracy:.4f} "
          f"val_acc {last.val_accuracy:.4f}")
    print(f"checkpoint: {out / 'model.imgn'}")


def cmd_eval(s, explicit):
    network = load_checkpoint(s["checkpoint"])
    x, y = load_split(s["manifest"], s["split"], network.config.input_side)
    m = evaluate(network, x, y)
    result = {"split": s["split"], "tp": m.tp, "tn": m.tn, "fp": m.fp, "fn": m.fn,
              "accuracy": m.accuracy}
    print(json.dumps(result))
    if s["out"]:
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")


def cmd_predict(s, explicit):
    network = load_checkpoint(s["checkpoint"])
    image = read_png(s["image"])
    side = network.config.input_side
    if image.shape[:2] != (side, side):
        image = ds.resize_nearest(image, side)
    label, probs = predict(network, image)
    result = {"image": s["image"], "label": ds.LABELS[label],
              "p_classI": float(probs[0]), "p_classII": float(probs[1])}
    print(json.dumps(result))
    if s["out"]:
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "prediction.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")


COMMANDS = {
    "synth": cmd_synth,
    "heatmap": cmd_heatmap,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("no subcommand given")
        settings, explicit = resolve_settings(args.command, args)
        validate(args.command, settings)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](settings, explicit)
    except (ValueError, OSError) as exc:
        print(f"imgnilm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
