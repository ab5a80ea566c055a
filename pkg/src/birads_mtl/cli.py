"""Command-line entry point: ``birads-mtl <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O, 5 numerical failure
(gradient check out of tolerance, degenerate statistics), 6 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcheck as gc
from . import synthetic
from .errors import (ConfigError, InsufficientDataError, InvalidInputError,
                     UndefinedMetricError)
from .features import raw_features
from .grid import read_gray
from .metrics import evaluation_report, wilcoxon_signed_rank
from .model import load_checkpoint
from .prior import WEIGHT_NAMES, composite_score
from .trainer import ArraySet, TrainConfig, alpha_sweep, predict, train, write_csv

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_INPUT = 0, 2, 3, 4, 5, 6
OUTPUT_ROOT_ENV = "BIRADS_MTL_OUTPUT_ROOT"
MANIFEST_NAME = "run_manifest.json"

log = logging.getLogger("birads_mtl")


class NumericalFailure(Exception):
    """A numerical check ran to completion but did not meet its tolerance."""


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config_path: str | None
    seed: int | None
    inputs: dict
    outputs: dict
    version: str = __version__
    timestamp: str = ""

    def write(self, directory: Path) -> Path:
        self.timestamp = self.timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat()
        path = directory / MANIFEST_NAME
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def resolve_out(path: str) -> Path:
    """Relative output paths land under ``$BIRADS_MTL_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)


# ---- config handling -------------------------------------------------------

_OVERRIDABLE = ("learning_rate", "weight_decay", "batch_size", "max_epochs", "patience", "w_seg",
                "w_cls", "alpha", "lambda_nt", "beta", "mode", "consistency_grad", "adam_eps",
                "in_channels", "dtype")


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields (defaults below otherwise)")
    p.add_argument("--seed", type=int, required=seed_required, help="training seed")
    defaults = TrainConfig()
    group = p.add_argument_group("config overrides (take precedence over --config)")
    for name in _OVERRIDABLE:
        default = getattr(defaults, name)
        kind = type(default)
        group.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind,
                           default=argparse.SUPPRESS, help=f"default: {default!r}")


def build_config(args) -> TrainConfig:
    data = {}
    if args.config:
        data = TrainConfig.from_json(args.config).to_dict()
    for name in _OVERRIDABLE:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return TrainConfig.from_dict(data)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", help="training manifest.csv (synthetic data generated if omitted)")
    p.add_argument("--val", help="validation manifest.csv (synthetic data generated if omitted)")
    p.add_argument("--n-train", type=int, default=200, help="synthetic training size")
    p.add_argument("--n-val", type=int, default=40, help="synthetic validation size")
    p.add_argument("--data-seed", type=int, default=101, help="synthetic training data seed")
    p.add_argument("--val-seed", type=int, default=202, help="synthetic validation data seed")
    p.add_argument("--size", type=int, default=64, help="synthetic image size")


def _load_manifest_set(path) -> tuple[ArraySet, list[str], list[str]]:
    samples = synthetic.read_manifest(path)
    if not samples:
        raise InvalidInputError(f"{path}: manifest lists no samples")
    data = ArraySet.from_samples(samples)
    return data, [s.name for s in samples], [str(path)]


def _load_sets(args) -> tuple[ArraySet, ArraySet, dict]:
    if args.train:
        train_set, _, _ = _load_manifest_set(args.train)
    else:
        train_set = ArraySet.from_samples(synthetic.make_dataset(
            args.n_train, seed=args.data_seed, size=args.size))
    if args.val:
        val_set, _, _ = _load_manifest_set(args.val)
    else:
        val_set = ArraySet.from_samples(synthetic.make_dataset(
            args.n_val, seed=args.val_seed, size=args.size))
    inputs = {"train": args.train or f"synthetic:n={args.n_train},seed={args.data_seed}",
              "val": args.val or f"synthetic:n={args.n_val},seed={args.val_seed}"}
    return train_set, val_set, inputs


# ---- subcommands -----------------------------------------------------------

def cmd_features(args) -> int:
    mask = read_gray(args.mask)
    image = read_gray(args.image) if args.image else None
    if image is not None and image.shape != mask.shape:
        raise InvalidInputError(f"mask {mask.shape} and image {image.shape} differ in shape")
    out = raw_features(mask, image)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        out["R"] = ckpt.norm_r.apply(out["R_raw"])
        out["w"] = dict(zip(WEIGHT_NAMES, map(float, ckpt.prior.w)))
        if image is not None:
            out["T"] = ckpt.norm_t.apply(out["T_raw"])
            out["phi"] = composite_score((out["A"], out["R"], out["C"], out["T"]), ckpt.prior).phi
    print(_dump(out))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = resolve_out(args.out)
    samples = synthetic.make_dataset(args.n, tuple(args.mix), args.domain, args.seed, args.size)
    manifest = synthetic.write_dataset(samples, out)
    RunManifest("synth", None, args.seed,
                {"n": args.n, "mix": list(args.mix), "domain": args.domain, "size": args.size},
                {"manifest": str(manifest)}).write(out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    config = build_config(args)
    train_set, val_set, inputs = _load_sets(args)
    out = resolve_out(args.out)
    result = train(config, train_set, val_set, out)
    summary = {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
               "val": result.val_report.to_dict() if result.val_report else None}
    (out / "summary.json").write_text(_dump(summary) + "\n")
    RunManifest("train", args.config, config.seed, inputs,
                {name: str(out / name) for name in
                 ("history.csv", "epochs.csv", "checkpoint.bin", "config.json", "summary.json")}
                ).write(out)
    print(_dump(summary))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = build_config(args)
    train_set, val_set, inputs = _load_sets(args)
    out = resolve_out(args.out)
    result = alpha_sweep(args.alphas, config, train_set, val_set, out, jobs=args.jobs)
    RunManifest("sweep", args.config, config.seed, {**inputs, "alphas": list(args.alphas)},
                {"sweep": str(out / "sweep.csv"),
                 "runs": [str(out / r.checkpoint_id) for r in result.records]}).write(out)
    print(_dump({"best_cls": dataclasses.asdict(result.best_cls),
                 "best_seg": dataclasses.asdict(result.best_seg)}))
    return EXIT_OK


PER_IMAGE_FIELDS = ("name", "label", "dice", "p_hat")


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.manifest:
        data, names, _ = _load_manifest_set(args.manifest)
        source = args.manifest
    else:
        data = ArraySet.from_samples(synthetic.make_dataset(
            args.n, domain=args.domain, seed=args.data_seed, size=args.size))
        names = [f"sample_{i:04d}" for i in range(len(data))]
        source = f"synthetic:n={args.n},domain={args.domain},seed={args.data_seed}"
    masks, probs = predict(ckpt, data.images)
    report = evaluation_report(masks, data.masks, probs, data.labels)
    out = resolve_out(args.out)
    (out / "report.json").write_text(_dump(report.to_dict()) + "\n")
    rows = [{"name": n, "label": int(l), "dice": float(d), "p_hat": float(p)}
            for n, l, d, p in zip(names, data.labels, report.per_image_dice, probs)]
    write_csv(rows, out / "per_image.csv", PER_IMAGE_FIELDS)
    RunManifest("eval", None, None, {"checkpoint": args.checkpoint, "data": source},
                {"report": str(out / "report.json"), "per_image": str(out / "per_image.csv")}
                ).write(out)
    print(_dump(report.to_dict()))
    return EXIT_OK


def _read_column(path, column: str) -> list[float]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise InvalidInputError(f"{path}: no column {column!r}")
        return [float(row[column]) for row in reader]


def cmd_compare(args) -> int:
    a = _read_column(args.a, args.column)
    b = _read_column(args.b, args.column)
    if len(a) != len(b):
        raise InvalidInputError(f"{args.a} has {len(a)} rows, {args.b} has {len(b)}")
    result = wilcoxon_signed_rank(a, b, method=args.method)
    payload = {**result.to_dict(), "mean_a": float(np.mean(a)), "mean_b": float(np.mean(b))}
    text = _dump(payload)
    if args.out:
        out = resolve_out(args.out)
        (out / "wilcoxon.json").write_text(text + "\n")
        RunManifest("compare", None, None, {"a": args.a, "b": args.b},
                    {"result": str(out / "wilcoxon.json")}).write(out)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gc.run_suite(seed=args.seed, instances=args.instances, probes=args.probes,
                           size=args.size, step=args.step)
    targets = {name: {**rep.to_dict(), "passed": rep.passed(args.rtol, args.atol)}
               for name, rep in reports.items()}
    if args.network:
        rep = gc.network_check(seed=args.seed, probes=args.probes)
        targets["network"] = {**rep.to_dict(), "passed": rep.passed(args.rtol, args.atol)}
    ok = all(t["passed"] for t in targets.values())
    payload = {"passed": ok, "rtol": args.rtol, "atol": args.atol, "step": args.step,
               "instances": args.instances, "seed": args.seed, "targets": targets}
    text = _dump(payload)
    if args.out:
        out = resolve_out(args.out)
        (out / "gradcheck.json").write_text(text + "\n")
        RunManifest("gradcheck", None, args.seed, {}, {"report": str(out / "gradcheck.json")}
                    ).write(out)
    print(text)
    if not ok:
        raise NumericalFailure("gradient check exceeded tolerance: "
                               + ", ".join(k for k, t in targets.items() if not t["passed"]))
    return EXIT_OK


# ---- parser ----------------------------------------------------------------

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for options that have none."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="birads-mtl", description=__doc__.splitlines()[0],
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="morphology features of one mask", formatter_class=fmt)
    p.add_argument("mask", help="mask image (PGM or PNG, values k/255)")
    p.add_argument("--image", help="grayscale image for texture")
    p.add_argument("--checkpoint", help="checkpoint supplying normalizer and weight state")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("synth", help="write a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.add_argument("--mix", type=float, nargs=3, default=[0.5, 0.4, 0.1],
                   metavar=("BENIGN", "MALIGNANT", "NO_TUMOR"), help="class proportions")
    p.add_argument("--domain", choices=("source", "shifted"), default="source")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model", formatter_class=fmt)
    p.add_argument("--out", required=True, help="run directory")
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="alpha sweep with AUC/Dice model selection",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="sweep directory (one subdirectory per alpha)")
    p.add_argument("--alphas", type=float, nargs="+", default=[0.1, 0.2, 0.3])
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest", help="dataset manifest.csv (synthetic data generated if omitted)")
    p.add_argument("--n", type=int, default=100, help="synthetic test size")
    p.add_argument("--domain", choices=("source", "shifted"), default="shifted")
    p.add_argument("--data-seed", type=int, default=303)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=None, help="accepted for symmetry; eval is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired Wilcoxon test on two per-image CSVs",
                       formatter_class=fmt)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--column", default="dice")
    p.add_argument("--method", choices=("auto", "exact", "normal"), default="auto")
    p.add_argument("--out", help="also write wilcoxon.json here")
    p.add_argument("--seed", type=int, default=None, help="accepted for symmetry; compare is deterministic")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients",
                       formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=20, help="random logit entries per instance")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--size", type=int, default=16, help="logit grid side length")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=gc.DEFAULT_RTOL)
    p.add_argument("--atol", type=float, default=gc.DEFAULT_ATOL)
    p.add_argument("--network", action="store_true", help="also check the toy network")
    p.add_argument("--out", help="also write gradcheck.json here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InsufficientDataError, UndefinedMetricError, NumericalFailure) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidInputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
