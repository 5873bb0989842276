"""Command-line entry point.

Subcommands cover the full workflow: synthesize or import data, train,
evaluate against manual contours, preview augmentations, verify
gradients, and summarize report files. Every failure surfaces as a
single `error: ...` line on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, pipeline
from .checks import run_gradcheck_suite
from .data import (
    CineSample,
    DicomFormatError,
    load_dataset,
    parse_contour,
    rasterize,
    read_dicom,
    save_sample,
    split_patients,
    synth_phantom,
)
from .engine import (
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    history_to_csv,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .metrics import parse_report_csv, report_to_csv
from .model import ACTIVATIONS, VARIANTS, UNetSpec, build

__all__ = ["main"]


def _parse_ratio(text: str) -> tuple[int, int, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"split ratio must look like A:B:C, got {text!r}")
    try:
        ratio = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"split ratio parts must be integers, got {text!r}")
    if any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise argparse.ArgumentTypeError(f"split ratio must be nonnegative and nonzero, got {text!r}")
    return ratio


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lvseg",
        description="left-ventricle segmentation toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of cases")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("import-dicom", help="convert DICOM slices to the dataset format")
    p.add_argument("files", nargs="+", help="DICOM files named <case>-<slice>.dcm")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--contour-dir", default=None,
                   help="directory holding <case>-<slice>.contour.txt files")

    p = sub.add_parser("train", help="train a segmentation network")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", default=None, help="write per-epoch CSV here")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--loss", choices=("soft_dice", "bce", "sum"), default="soft_dice")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--variant", choices=VARIANTS, default="gbu")
    p.add_argument("--activation", choices=ACTIVATIONS, default="elu")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--dropconnect-rate", type=float, default=0.0)
    p.add_argument("--padding-mode", choices=("same", "valid"), default="same")
    p.add_argument("--split-ratio", type=_parse_ratio, default=(1, 1, 1),
                   metavar="A:B:C", help="patient-level train:val:test ratio")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test",
                   help="partition, re-derived from the checkpoint's train config")
    p.add_argument("--out", default=None, help="write the report CSV here")
    p.add_argument("--symmetric-apd", action="store_true",
                   help="average both contour directions")

    p = sub.add_parser("augment-preview",
                       help="write augmented copies of dataset samples as PGM images")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for PGM files")
    p.add_argument("--index", type=int, default=0, help="sample index in the dataset")
    p.add_argument("--copies", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="run the gradient-check battery")

    p = sub.add_parser("report", help="summarize evaluation report CSVs")
    p.add_argument("files", nargs="+", help="report CSV files from eval")
    return ap


# ---------------------------------------------------------------------------
# helpers


def _write_pgm(path: Path, grid: np.ndarray):
    """8-bit binary PGM; input is rescaled to the full 0..255 range."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    byte = (scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        fh.write(byte.tobytes())


def _select_split(samples: list[CineSample], split: str,
                  ratio: tuple[int, int, int], seed: int):
    if split == "all":
        return samples
    cases = sorted({s.case_id for s in samples})
    train_ids, val_ids, test_ids = split_patients(cases, ratio, seed)
    chosen = {"train": train_ids, "val": val_ids, "test": test_ids}[split]
    chosen = set(chosen)
    return [s for s in samples if s.case_id in chosen]


def _print_config(args, spec: UNetSpec, cfg: TrainConfig, n_train: int, n_val: int):
    resolved = {
        "data": args.data,
        "out": args.out,
        "depth": spec.depth,
        "base_channels": spec.base_channels,
        "kernel_size": spec.kernel_size,
        "padding_mode": spec.padding_mode,
        "groups": spec.groups,
        "dropconnect_rate": spec.dropconnect_rate,
        "variant": cfg.variant,
        "activation": cfg.activation,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "optimizer": cfg.optimizer,
        "loss": cfg.loss,
        "seed": cfg.seed,
        "augment": cfg.augment,
        "split_ratio": ":".join(str(r) for r in cfg.split_ratio),
        "n_train_slices": n_train,
        "n_val_slices": n_val,
    }
    print(json.dumps(resolved, indent=2))


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_synth(args) -> int:
    samples = synth_phantom(args.count, size=args.size, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(out, s)
    print(f"wrote {len(samples)} cases to {out}")
    return 0


def _cmd_import_dicom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for name in args.files:
        src = Path(name)
        image, (row_mm, col_mm) = read_dicom(src.read_bytes())
        stem = src.stem
        case_id, _, slice_id = stem.rpartition("-")
        if not case_id:
            case_id, slice_id = stem, "000"
        contour = None
        mask = np.zeros(image.shape, dtype=np.uint8)
        cdir = Path(args.contour_dir) if args.contour_dir else src.parent
        cpath = cdir / f"{stem}.contour.txt"
        if cpath.exists():
            contour = parse_contour(cpath.read_text())
            mask = rasterize(contour, image.shape)
        sample = CineSample(
            image=image, mask=mask, spacing_mm=(col_mm, row_mm),
            case_id=case_id, slice_id=slice_id, truth_contour=contour,
        )
        save_sample(out, sample)
        n += 1
    print(f"imported {n} slices to {out}")
    return 0


def _cmd_train(args) -> int:
    samples = load_dataset(args.data)
    spec = UNetSpec(
        depth=args.depth, base_channels=args.base_channels,
        kernel_size=args.kernel_size, padding_mode=args.padding_mode,
        variant=args.variant, activation=args.activation,
        dropconnect_rate=args.dropconnect_rate, groups=args.groups,
    )
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, optimizer=args.optimizer,
        loss=args.loss, seed=args.seed, augment=args.augment,
        variant=args.variant, activation=args.activation,
        split_ratio=args.split_ratio,
    )
    train_set = _select_split(samples, "train", cfg.split_ratio, cfg.seed)
    val_set = _select_split(samples, "val", cfg.split_ratio, cfg.seed)
    _print_config(args, spec, cfg, len(train_set), len(val_set))
    model = build(spec, seed=cfg.seed)
    model, history = train(model, spec, train_set, val_set, cfg, log=print)
    save_checkpoint(args.out, model, spec, cfg=cfg,
                    epoch=len(history), history=history)
    if args.history:
        Path(args.history).write_text(history_to_csv(history))
    best = max(h[2] for h in history) if history else float("nan")
    print(f"saved checkpoint to {args.out} (best val dice {best:.4f})")
    return 0


def _cmd_eval(args) -> int:
    model, spec, manifest = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    tc = manifest.get("train_config") or {}
    ratio = tuple(tc.get("split_ratio", (1, 1, 1)))
    seed = tc.get("seed", 0)
    subset = _select_split(samples, args.split, ratio, seed)
    if not subset:
        raise ValueError(f"split {args.split!r} selects no samples")
    report = evaluate(model, spec, subset, apd_symmetric=args.symmetric_apd)
    report.extra = {
        "split": args.split,
        "checkpoint": str(args.ckpt),
        "n_slices": str(len(subset)),
    }
    text = report_to_csv(report)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote report to {args.out}")
    else:
        print(text, end="")
    apd_txt = "n/a" if report.apd_mean_mm is None else f"{report.apd_mean_mm:.3f} mm"
    print(f"dice {report.dice_mean:.4f} +/- {report.dice_std:.4f}, apd {apd_txt} "
          f"({report.apd_excluded} slices excluded)")
    return 0


def _cmd_augment_preview(args) -> int:
    samples = load_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise ValueError(f"--index {args.index} out of range; dataset has {len(samples)} samples")
    if args.copies < 1:
        raise ValueError(f"--copies must be positive, got {args.copies}")
    base = samples[args.index]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = AugmentConfig(seed=args.seed)
    stem = f"{base.case_id}-{base.slice_id}"
    _write_pgm(out / f"{stem}.orig.pgm", base.image)
    _write_pgm(out / f"{stem}.orig.mask.pgm", base.mask)
    for k in range(args.copies):
        aug = pipeline(base, cfg, k)
        _write_pgm(out / f"{stem}.aug{k}.pgm", aug.image)
        _write_pgm(out / f"{stem}.aug{k}.mask.pgm", aug.mask)
    print(f"wrote {2 * (args.copies + 1)} PGM files to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(progress=print)
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} gradient checks passed")
    return 1 if n_fail else 0


def _cmd_report(args) -> int:
    header = f"{'report':30s} {'n':>4s} {'dice':>14s} {'sens':>7s} {'apd_mm':>8s} {'excl':>4s}  meta"
    print(header)
    print("-" * len(header))
    for name in args.files:
        rep = parse_report_csv(Path(name).read_text())
        sens = "n/a" if rep.sensitivity_mean is None else f"{rep.sensitivity_mean:.4f}"
        apd_txt = "n/a" if rep.apd_mean_mm is None else f"{rep.apd_mean_mm:.3f}"
        meta = " ".join(f"{k}={v}" for k, v in sorted(rep.extra.items()))
        print(f"{Path(name).name:30s} {len(rep.records):>4d} "
              f"{rep.dice_mean:.4f} +/- {rep.dice_std:.4f} {sens:>7s} "
              f"{apd_txt:>8s} {rep.apd_excluded:>4d}  {meta}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "import-dicom": _cmd_import_dicom,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "augment-preview": _cmd_augment_preview,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, DicomFormatError, CheckpointError,
            TrainingDivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
