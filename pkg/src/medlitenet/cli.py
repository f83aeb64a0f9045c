"""Command-line interface: synth / train / infer / eval / gradcheck / params.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .autodiff import ShapeError, Tensor
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    DIFFICULTIES,
    SampleSpec,
    _assign_difficulties,
    generate_samples,
    load_dataset_dir,
    make_split,
    normalize_imagenet,
    synth_sample,
)
from .metrics import confusion_metrics
from .model import ConfigError, MedLiteNet, predict_mask
from .netpbm import (
    NetpbmError,
    load_image_ppm,
    load_mask_pgm,
    save_gray_pgm,
    save_image_ppm,
    save_mask_pgm,
)
from .runconfig import dump_resolved, load_run_config
from .training import (
    NumericalError,
    ensemble_predict,
    evaluate,
    fit,
    tta_predict,
)

USAGE_ERROR = 2
NUMERICAL_ERROR = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medlitenet",
        description="Lightweight CNN-Transformer lesion segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic dataset directory",
                       formatter_class=fmt)
    p.add_argument("--count", type=int, default=16, help="number of samples")
    p.add_argument("--size", type=int, default=64,
                   help="image size (multiple of 32)")
    p.add_argument("--seed", type=int, default=0, help="base sample seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--config", default=None, help="YAML run config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override train.seed")
    p.add_argument("--epochs", type=int, default=None,
                   help="override train.epochs")
    p.add_argument("--out", default=None, help="override paths.out_dir")
    p.add_argument("--dataset", default=None,
                   help="override paths.dataset_dir (ppm/pgm pairs)")

    p = sub.add_parser("infer", help="segment images with a checkpoint",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="input .ppm file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="mask threshold in [0, 1]")
    p.add_argument("--tta", action="store_true",
                   help="use six-fold test-time augmentation")
    p.add_argument("--prob", action="store_true",
                   help="also write the quantized probability map")

    p = sub.add_parser("eval", help="evaluate predictions or a checkpoint",
                       formatter_class=fmt)
    p.add_argument("--pred-dir", default=None, help="directory of predicted masks")
    p.add_argument("--gt-dir", default=None, help="directory of reference masks")
    p.add_argument("--ckpt", default=None, help="checkpoint to evaluate")
    p.add_argument("--ensemble", nargs="+", default=None,
                   help="checkpoints for a performance-weighted ensemble")
    p.add_argument("--dataset", default=None,
                   help="dataset directory of ppm/pgm pairs")
    p.add_argument("--tta", action="store_true",
                   help="use six-fold test-time augmentation")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="mask threshold in [0, 1]")
    p.add_argument("--out", default=None, help="optional CSV output path")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks",
                       formatter_class=fmt)
    p.add_argument("--scope", choices=("ops", "blocks", "model"),
                   default="ops", help="which suite to run")
    p.add_argument("--tol", type=float, default=None,
                   help="override the scope's default tolerance")
    p.add_argument("--inject-error", action="store_true",
                   help=argparse.SUPPRESS)   # harness sanity hook

    p = sub.add_parser("params", help="print the parameter budget",
                       formatter_class=fmt)
    p.add_argument("--config", default=None, help="YAML run config file")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.size % 32 != 0 or args.size <= 0:
        raise ConfigError(
            f"--size must be a positive multiple of 32, got {args.size}")
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([args.seed, 0])
    tags = _assign_difficulties(args.count, (0.6, 0.25, 0.15), rng)
    for i in range(args.count):
        sample = synth_sample(args.seed + i, args.size, tags[i])
        name = f"sample_{i:05d}"
        save_image_ppm(out / f"{name}.ppm", sample.image)
        save_mask_pgm(out / f"{name}_mask.pgm", sample.mask)
        print(f"{name}.ppm {name}_mask.pgm seed={sample.seed} "
              f"difficulty={sample.difficulty}")
    return 0


def _load_train(args):
    config = load_run_config(args.config)
    if args.seed is not None:
        config.train.seed = args.seed
    if args.epochs is not None:
        config.train.epochs = args.epochs
    if args.out is not None:
        config.paths.out_dir = args.out
    if args.dataset is not None:
        config.paths.dataset_dir = args.dataset
    config.validate()
    return config


def _train_val_samples(config):
    if config.paths.dataset_dir:
        pairs = load_dataset_dir(config.paths.dataset_dir)
        samples = [s for _, s in pairs]
        n_val = max(1, len(samples) // 5)
        if len(samples) < 2:
            raise ConfigError("dataset directory needs at least two samples")
        return samples[:-n_val], samples[-n_val:]
    train_specs, val_specs, _ = make_split(
        config.data.n_train, config.data.n_val, config.data.n_test,
        config.data.base_seed, config.data.difficulty_mix)
    return (generate_samples(train_specs, config.data.size),
            generate_samples(val_specs, config.data.size))


def cmd_train(args) -> int:
    config = _load_train(args)
    train_samples, val_samples = _train_val_samples(config)
    out = Path(config.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_resolved(config, out / "config_resolved.yaml")
    model = MedLiteNet(config.model, seed=config.train.seed)
    result = fit(model, train_samples, val_samples, config.train,
                 out_dir=out, augment_config=config.augment, log_fn=print)
    print(f"best epoch {result.best_epoch} val dice {result.best_val_dice:.4f}")
    print(f"wrote {result.best_checkpoint} and {result.last_checkpoint}")
    return 0


def _prepare_input_batch(image: np.ndarray) -> np.ndarray:
    return normalize_imagenet(image)[None].astype(np.float32)


def _list_inputs(path: Path):
    if path.is_dir():
        files = sorted(path.glob("*.ppm"))
        if not files:
            raise FileNotFoundError(f"no .ppm files found in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def cmd_infer(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise ConfigError(
            f"--threshold must lie in [0, 1], got {args.threshold}")
    model, _ = load_checkpoint(args.ckpt)
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in _list_inputs(Path(args.input)):
        image = load_image_ppm(f)
        batch = _prepare_input_batch(image)
        start = time.perf_counter()
        if args.tta:
            prob = tta_predict(model, batch)
        else:
            prob = model(Tensor(batch)).data
        elapsed = (time.perf_counter() - start) * 1000.0
        mask = predict_mask(prob[0, 0], args.threshold)
        save_mask_pgm(out / f"{f.stem}_pred.pgm", mask)
        if args.prob:
            save_gray_pgm(out / f"{f.stem}_prob.pgm", prob[0, 0])
        print(f"{f.name}: wrote {f.stem}_pred.pgm ({elapsed:.1f} ms)")
    return 0


def _eval_rows_from_dirs(pred_dir: Path, gt_dir: Path):
    gts = sorted(gt_dir.glob("*.pgm"))
    if not gts:
        raise FileNotFoundError(f"no .pgm masks found in {gt_dir}")
    pairs, missing = [], []
    for g in gts:
        # same name, or the infer convention <name>_pred.pgm for <name>_mask.pgm
        candidates = [pred_dir / g.name]
        if g.name.endswith("_mask.pgm"):
            candidates.append(pred_dir / g.name.replace("_mask.pgm", "_pred.pgm"))
        found = next((c for c in candidates if c.exists()), None)
        if found is None:
            missing.append(g.name)
        else:
            pairs.append((g, found))
    if missing:
        raise FileNotFoundError(
            f"prediction dir lacks matching files: {', '.join(missing)}")
    for g, p in pairs:
        yield g.stem, load_mask_pgm(p), load_mask_pgm(g)


def _eval_rows_from_model(predict_fn, dataset_dir, threshold):
    for name, sample in load_dataset_dir(dataset_dir):
        prob = predict_fn(_prepare_input_batch(sample.image))
        yield name, predict_mask(prob[0, 0], threshold), sample.mask


def cmd_eval(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise ConfigError(
            f"--threshold must lie in [0, 1], got {args.threshold}")
    if args.pred_dir and args.gt_dir:
        rows = _eval_rows_from_dirs(Path(args.pred_dir), Path(args.gt_dir))
    elif args.ensemble and args.dataset:
        models, dices = [], []
        for path in args.ensemble:
            model, extras = load_checkpoint(path)
            model.eval()
            stored = extras["meta"].get("best_val_dice")
            if stored is None:
                raise ConfigError(
                    f"checkpoint {path} has no stored best_val_dice; cannot "
                    f"weight the ensemble")
            models.append(model)
            dices.append(float(stored))

        def predict(batch, _models=models, _dices=dices):
            return ensemble_predict(_models, _dices, batch)

        rows = _eval_rows_from_model(predict, args.dataset, args.threshold)
    elif args.ckpt and args.dataset:
        model, _ = load_checkpoint(args.ckpt)
        model.eval()
        if args.tta:
            predict = lambda batch: tta_predict(model, batch)   # noqa: E731
        else:
            predict = lambda batch: model(Tensor(batch)).data   # noqa: E731
        rows = _eval_rows_from_model(predict, args.dataset, args.threshold)
    else:
        raise ConfigError(
            "eval needs either --pred-dir with --gt-dir, or --ckpt/--ensemble "
            "with --dataset")

    header = ("name", "dice", "iou", "accuracy", "sensitivity", "specificity")
    table = []
    for name, pred, gt in rows:
        rec = confusion_metrics(pred, gt)
        table.append((name, rec.dice, rec.iou, rec.accuracy, rec.sensitivity,
                      rec.specificity))
    print(",".join(header))
    for row in table:
        print(row[0] + "," + ",".join(f"{v:.6f}" for v in row[1:]))
    stats = np.array([row[1:] for row in table], dtype=np.float64)
    mean, std = stats.mean(axis=0), stats.std(axis=0)
    print("aggregate: " + "  ".join(
        f"{h}={m:.4f}+/-{s:.4f}" for h, m, s in zip(header[1:], mean, std)))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(table)
    return 0


def cmd_gradcheck(args) -> int:
    checks = gc.run_scope(args.scope, tol=args.tol,
                          inject_error=args.inject_error)
    tol = args.tol if args.tol is not None else gc.DEFAULT_TOLS[args.scope]
    width = max(len(name) for name, _ in checks)
    failures = 0
    for name, report in checks:
        status = "pass" if report.passed else "FAIL"
        print(f"{name:<{width}}  max_rel_err={report.max_rel_err:<12.3e} "
              f"coords={report.checked:<4d} {status}")
        failures += not report.passed
    print(f"{args.scope}: {len(checks) - failures}/{len(checks)} checks passed "
          f"(tol {tol:g})")
    return 0 if failures == 0 else 1


def cmd_params(args) -> int:
    config = load_run_config(args.config)
    model = MedLiteNet(config.model, seed=config.train.seed)
    counts = model.count_parameters()
    for key, value in counts["breakdown"].items():
        print(f"{key:<12} {value:>12,}")
    print(f"{'total':<12} {counts['total']:>12,}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "infer": cmd_infer,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "params": cmd_params,
    }
    try:
        return handlers[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except (ConfigError, CheckpointError, NetpbmError, ShapeError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
