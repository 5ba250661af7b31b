"""Command-line surface tying the pipeline together.

Subcommands: gen-phantoms, split, train, predict, evaluate, report,
gradcheck.  A JSON config file (sections "unet", "train", "loss",
"infer") provides defaults; command-line flags win over file values.
The MYOSEG_DATA_DIR environment variable supplies the default data
directory where a --data flag is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gradcheck import DEFAULT_TOLERANCE, run_gradient_suite
from .inference import EvalConfig, evaluate_cases, predict
from .losses import LossConfig
from .metrics import (
    aggregate,
    case_dice,
    format_report_markdown,
    read_case_csv,
    write_case_csv,
    write_class_value_files,
)
from .nifti import NiftiError, read_nifti, write_nifti
from .phantom import PhantomSpec, generate
from .training import Case, TrainConfig, split_dataset, train
from .unet import UNetConfig, build_unet, load_checkpoint, save_checkpoint

_CASE_RE = re.compile(r"(case_\d+)")


class CliError(Exception):
    """Operator-facing failure with a clean message and nonzero exit."""


def _data_dir(value) -> Path:
    if value:
        return Path(value)
    env = os.environ.get("MYOSEG_DATA_DIR")
    if env:
        return Path(env)
    raise CliError("no data directory given (pass --data or set MYOSEG_DATA_DIR)")


def _case_id(path: Path) -> str | None:
    m = _CASE_RE.search(path.name)
    return m.group(1) if m else None


def _find_cases(directory: Path, suffix: str) -> dict[str, Path]:
    found = {}
    for path in sorted(directory.glob(f"*{suffix}*")):
        cid = _case_id(path)
        if cid:
            found[cid] = path
    return found


def _load_dataset(directory: Path, case_ids=None) -> list[Case]:
    images = _find_cases(directory, "_img")
    segs = _find_cases(directory, "_seg")
    ids = sorted(images.keys() & segs.keys())
    if case_ids is not None:
        wanted = set(case_ids)
        ids = [i for i in ids if i in wanted]
    if not ids:
        raise CliError(f"no case_*_img/_seg pairs found under {directory}")
    return [
        Case(cid, read_nifti(images[cid], as_labels=False), read_nifti(segs[cid], as_labels=True))
        for cid in ids
    ]


def _config_section(args, name: str) -> dict:
    if not getattr(args, "config", None):
        return {}
    with open(args.config, encoding="utf-8") as f:
        data = json.load(f)
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise CliError(f"config section {name!r} must be an object")
    return section


def _build_config(cls, section: dict, overrides: dict):
    values = dict(section)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {cls.__name__}: {exc}") from exc


def _triple(value):
    if value is None:
        return None
    if len(value) == 1:
        return (value[0],) * 3
    if len(value) == 3:
        return tuple(value)
    raise CliError(f"expected 1 or 3 extents, got {value}")


def cmd_gen_phantoms(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = _triple(args.size) or (32, 32, 32)
    for i in range(args.count):
        spec = PhantomSpec(
            size=size,
            seed=args.seed + i,
            cyst_probability=args.cyst_probability,
            noise_sd=args.noise_sd,
        )
        volume, labels = generate(spec)
        write_nifti(out / f"case_{i:04d}_img.nii.gz", volume)
        write_nifti(out / f"case_{i:04d}_seg.nii.gz", labels)
    print(f"wrote {args.count} phantom pairs to {out}")
    return 0


def cmd_split(args) -> int:
    if args.count is not None:
        ids = [f"case_{i:04d}" for i in range(args.count)]
    else:
        ids = sorted(_find_cases(_data_dir(args.data), "_img"))
        if not ids:
            raise CliError("no cases found to split")
    train_ids, test_ids = split_dataset(ids, args.fraction, args.seed)
    payload = {"train": train_ids, "test": test_ids}
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"split {len(ids)} cases into {len(train_ids)} train / {len(test_ids)} test", file=sys.stderr)
    return 0


def _read_split(path, subset: str) -> list[str]:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if subset not in data:
        raise CliError(f"split file {path} has no {subset!r} list")
    return list(data[subset])


def cmd_train(args) -> int:
    unet_cfg = _build_config(
        UNetConfig,
        _config_section(args, "unet"),
        {"levels": args.levels, "base_channels": args.base_channels, "num_classes": args.num_classes},
    )
    train_overrides = {
        "epochs": args.epochs,
        "batches_per_epoch": args.batches_per_epoch,
        "batch_size": args.batch_size,
        "patch_size": _triple(args.patch),
        "learning_rate": args.learning_rate,
        "momentum": args.momentum,
        "seed": args.seed,
        "foreground_patch_bias": args.foreground_bias,
    }
    section = _config_section(args, "train")
    if "patch_size" in section:
        section["patch_size"] = tuple(section["patch_size"])
    train_cfg = _build_config(TrainConfig, section, train_overrides)
    loss_section = _config_section(args, "loss")
    if "class_set" in loss_section and loss_section["class_set"] is not None:
        loss_section["class_set"] = tuple(loss_section["class_set"])
    loss_cfg = _build_config(LossConfig, loss_section, {})

    case_ids = _read_split(args.split, args.subset) if args.split else None
    dataset = _load_dataset(_data_dir(args.data), case_ids)
    model = build_unet(unet_cfg, seed=train_cfg.seed, dtype=train_cfg.np_dtype)
    print(
        f"training on {len(dataset)} cases: {train_cfg.epochs} epochs x "
        f"{train_cfg.batches_per_epoch} batches, {model.parameter_count()} parameters"
    )
    _, history = train(
        model, dataset, train_cfg, loss_cfg,
        log_path=args.log, checkpoint_path=args.out,
    )
    first, last = history[0], history[-1]
    print(f"epoch {first.epoch}: total {first.mean_total_loss:.4f}")
    print(f"epoch {last.epoch}: total {last.mean_total_loss:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _data_dir(args.data)
    images = _find_cases(data, "_img")
    if args.cases:
        wanted = set(args.cases)
        images = {k: v for k, v in images.items() if k in wanted}
    if not images:
        raise CliError(f"no input images found under {data}")
    patch = _triple(args.patch) or (32, 32, 32)
    stride = _triple(args.stride)
    for cid in sorted(images):
        volume = read_nifti(images[cid], as_labels=False)
        labels = predict(model, volume, patch, stride)
        write_nifti(out / f"{cid}_pred.nii.gz", labels)
        print(f"{cid}: predicted {labels.extents}")
    return 0


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = _find_cases(pred_dir, "_pred") or _find_cases(pred_dir, "_seg")
    gts = _find_cases(gt_dir, "_seg")
    ids = sorted(preds.keys() & gts.keys())
    if not ids:
        raise CliError(f"no matching case ids between {pred_dir} and {gt_dir}")

    def one(cid):
        pred = read_nifti(preds[cid], as_labels=True)
        gt = read_nifti(gts[cid], as_labels=True)
        return case_dice(pred, gt)

    per_case: dict[str, dict[int, float]] = {}
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futures = {cid: pool.submit(one, cid) for cid in ids}
        per_case = {cid: futures[cid].result() for cid in ids}
    else:
        per_case = {cid: one(cid) for cid in ids}
    report = aggregate(per_case)
    _emit_report(report, args)
    return 0


def _emit_report(report, args) -> None:
    text = format_report_markdown(report)
    sys.stdout.write(text)
    if getattr(args, "md", None):
        Path(args.md).write_text(text, encoding="utf-8")
    if getattr(args, "csv", None):
        write_case_csv(report, args.csv)
    if getattr(args, "boxplot_dir", None):
        written = write_class_value_files(report, args.boxplot_dir)
        print(f"wrote {len(written)} per-class value files", file=sys.stderr)


def cmd_report(args) -> int:
    report = aggregate(read_case_csv(args.csv))
    text = format_report_markdown(report)
    sys.stdout.write(text)
    if args.md:
        Path(args.md).write_text(text, encoding="utf-8")
    if args.boxplot_dir:
        write_class_value_files(report, args.boxplot_dir)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(instances=args.instances, seed=args.seed)
    worst = max(results.values())
    for name in sorted(results):
        flag = "ok" if results[name] <= args.tolerance else "FAIL"
        print(f"{name:20s} max rel err {results[name]:.3e}  {flag}")
    print(f"overall max relative error: {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if worst <= args.tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="myoseg",
        description="Desk-scale 3D U-Net segmentation pipeline for uterine MRI structures.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="write synthetic (image, label) NIfTI pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, nargs="+", default=None, help="one or three extents")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cyst-probability", type=float, default=0.5, dest="cyst_probability")
    p.add_argument("--noise-sd", type=float, default=0.04, dest="noise_sd")
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("split", help="deterministic train/test split of case ids")
    p.add_argument("--data", default=None)
    p.add_argument("--count", type=int, default=None, help="split synthetic ids 0..count-1 instead of scanning --data")
    p.add_argument("--fraction", type=float, default=0.82)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on case_*_img/_seg pairs")
    p.add_argument("--data", default=None)
    p.add_argument("--split", default=None, help="JSON split file from `myoseg split`")
    p.add_argument("--subset", default="train", choices=["train", "test"])
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="per-epoch CSV log path")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None, dest="base_channels")
    p.add_argument("--num-classes", type=int, default=None, dest="num_classes")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batches-per-epoch", type=int, default=None, dest="batches_per_epoch")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--patch", type=int, nargs="+", default=None)
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--foreground-bias", type=float, default=None, dest="foreground_bias")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment volumes with a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--cases", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, nargs="+", default=None)
    p.add_argument("--stride", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-class Dice of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv", default=None, help="write per-case results CSV")
    p.add_argument("--md", default=None, help="write the markdown table")
    p.add_argument("--boxplot-dir", default=None, dest="boxplot_dir")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate a per-case results CSV into the summary table")
    p.add_argument("--csv", required=True)
    p.add_argument("--md", default=None)
    p.add_argument("--boxplot-dir", default=None, dest="boxplot_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, NiftiError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
