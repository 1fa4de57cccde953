"""Command-line surface: train, evaluate, predict, stats, and compare.

Global --seed overrides the config seed; --deterministic pins the single-threaded
reference execution path (also the default) for bit-exact reproducibility.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_model
from .data import class_stats, parse_metadata_csv, stats_to_csv
from .metrics import TABLE_COLUMNS
from .train import TrainConfig, compare, compare_csv, evaluate_checkpoint, predict_image, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrnet",
        description="Train and evaluate chest X-ray binary classifiers "
                    "(hybrid STN+VGG16 model, CNN/VGG16/capsule baselines).")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="force the single-threaded reference path (the default; "
                             "kept explicit for reproducibility scripts)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default="runs", help="output directory")

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on its train or val split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", required=True, choices=("train", "val"))
    p_eval.add_argument("--threshold", type=float, default=None)
    p_eval.add_argument("--beta", type=float, default=None)

    p_pred = sub.add_parser("predict", help="disease confidence for one image")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--image", required=True)
    p_pred.add_argument("--age", type=float, required=True)
    p_pred.add_argument("--gender", required=True, choices=("M", "F"))
    p_pred.add_argument("--view", required=True, choices=("AP", "PA"))
    p_pred.add_argument("--threshold", type=float, default=0.5)

    p_stats = sub.add_parser("stats", help="dataset tallies from a metadata CSV")
    p_stats.add_argument("--csv", required=True)
    p_stats.add_argument("--out", default=None, help="write the table here instead of stdout")

    p_cmp = sub.add_parser("compare", help="train/evaluate several configs into one table")
    p_cmp.add_argument("--configs", nargs="+", required=True)
    p_cmp.add_argument("--out", default="runs/compare", help="output directory")
    return parser


def _load_config(path, seed_override) -> TrainConfig:
    config = TrainConfig.from_json(path)
    if seed_override is not None:
        config = replace(config, seed=seed_override)
    return config


def _cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    report, ckpt_path = train(config, args.out)
    print(f"model: {report.model}")
    print(f"epochs run: {report.epochs_run} (best epoch {report.best_epoch}, "
          f"val loss {report.best_val_loss:.6f})")
    print(f"params: {report.param_count}")
    print(f"train seconds: {report.train_seconds:.2f}")
    row = report.final
    print(f"val metrics @ t={row.threshold}: recall {row.recall:.4f}, "
          f"precision {row.precision:.4f}, f{row.beta} {row.f_beta:.4f}, "
          f"accuracy {row.accuracy:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_evaluate(args) -> int:
    row, header, n = evaluate_checkpoint(args.checkpoint, args.split,
                                         args.threshold, args.beta)
    print(f"model: {header['model']} ({n} samples, split {args.split})")
    print(",".join(TABLE_COLUMNS[:4]))
    print(f"{row.recall:.4f},{row.precision:.4f},{row.f_beta:.4f},{row.accuracy:.4f}")
    if row.degenerate:
        print("warning: a 0/0 metric was reported as 0", file=sys.stderr)
    return 0


def _cmd_predict(args) -> int:
    model, _ = load_model(args.checkpoint)
    result = predict_image(model, args.image, args.age, args.gender, args.view,
                           args.threshold)
    print(f"confidence: {result.formatted}")
    print(f"verdict: {result.verdict} (threshold {result.threshold})")
    if result.borderline:
        print("note: borderline — confidence within 0.05 of the threshold")
    return 0


def _cmd_stats(args) -> int:
    result = parse_metadata_csv(args.csv)
    table = stats_to_csv(class_stats(result.records))
    if result.skipped or result.outliers:
        print(f"note: skipped {result.skipped} unparseable row(s), "
              f"dropped {result.outliers} age outlier(s)", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(table, end="")
    return 0


def _cmd_compare(args) -> int:
    configs = [_load_config(p, args.seed) for p in args.configs]
    results = compare(configs, args.out)
    table = compare_csv(results)
    out_path = Path(args.out) / "comparison.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(table, encoding="utf-8")
    print(table, end="")
    for r in results:
        if r.error:
            print(f"error: {r.model}: {r.error}", file=sys.stderr)
    print(f"wrote {out_path}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "stats": _cmd_stats,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
