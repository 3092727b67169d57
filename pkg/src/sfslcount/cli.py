"""Command-line entry point: ``sfslcount <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, make_checkpoint, restore, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .datagen import generate_dataset, load_dataset, save_dataset
from .evaluation import (
    DEFAULT_SIGMAS,
    PATCH_GRID,
    ExperimentRecord,
    SuiteFailure,
    ablation_suite,
    consistency_gap,
    fit,
    mae_mse,
    predict_counts,
    robustness_sweep,
    split_scenes,
    write_csv,
)
from .gradcheck import run_suite

log = logging.getLogger("sfslcount")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
HISTORY_HEADER = "epoch,l_r,l_c,l_gt,alpha,total,val_mae"


def _g(x: float | None) -> str:
    return "" if x is None else format(float(x), ".17g")


def _load_config(path: str | None) -> RunConfig:
    return parse_config(path) if path else RunConfig()


def cmd_datagen(args: argparse.Namespace) -> int:
    config = _load_config(args.spec)
    scenes = generate_dataset(config.dataset_spec())
    save_dataset(args.out, scenes)
    log.info("wrote %d scenes to %s", len(scenes), args.out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    train_scenes, _ = split_scenes(config, load_dataset(args.data))
    result = fit(config, train_scenes, config.seed)
    save_checkpoint(args.out, make_checkpoint(config, result.params))
    history_path = args.history or config.history_out
    if history_path:
        lines = [HISTORY_HEADER]
        for rec in result.history:
            b = rec.losses
            lines.append(",".join([str(rec.epoch), _g(b.l_r), _g(b.l_c), _g(b.l_gt), _g(b.alpha), _g(b.total), _g(rec.val_mae)]))
        Path(history_path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    log.info("trained %d epochs in %.1fs; checkpoint %s", len(result.history), result.seconds, args.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config, model, params = restore(load_checkpoint(args.ckpt))
    scenes = load_dataset(args.data)
    if not args.all_scenes:
        _, scenes = split_scenes(config, scenes)
    images = [s.image for s in scenes]
    preds = predict_counts(model, params, images, PATCH_GRID if config.patch_label_mode else None)
    mae, mse = mae_mse(preds, [s.count for s in scenes])
    gap = consistency_gap(model, params, images, config.partition_grid())
    nan = float("nan")
    record = ExperimentRecord("eval", config.digest(), config.seed, mae, mse, nan, nan, gap, 0.0)
    write_csv(args.out, [record])
    print(f"MAE {mae:.4f}  MSE {mse:.4f}  consistency gap {gap:.4f}")
    return EXIT_OK


def _suite(args: argparse.Namespace, records_fn) -> int:
    try:
        records = records_fn()
    except SuiteFailure as exc:
        write_csv(args.out, exc.records, timing=args.timing)
        log.error("%s", exc)
        numeric = any(isinstance(e, ArithmeticError) for _, _, e in exc.failures)
        return EXIT_NUMERIC if numeric else EXIT_INVALID
    write_csv(args.out, records, timing=args.timing)
    for r in records:
        print(f"{r.arm:24s} seed {r.seed}  MAE {r.mae:8.4f}  MSE {r.mse:8.4f}  gap {r.consistency_gap:.4f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    scenes = load_dataset(args.data)
    arms = args.arms.split(",") if args.arms else None
    return _suite(args, lambda: ablation_suite(config, scenes, config.seeds, arms))


def _parse_sigmas(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sigmas expects comma-separated numbers, got {text!r}") from None


def cmd_robustness(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    scenes = load_dataset(args.data)
    sigmas = _parse_sigmas(args.sigmas)
    return _suite(args, lambda: robustness_sweep(config, scenes, sigmas, config.seeds))


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_suite(seed=args.seed, cases=args.cases)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfslcount", description="Weakly supervised counting experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="write a synthetic WCDS dataset")
    p.add_argument("--spec", help="config file with dataset keys (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="per-epoch loss CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-scenes", action="store_true", help="score every scene, not just the test split")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ablate", cmd_ablate, "run the ablation arms over config seeds"),
                                 ("robustness", cmd_robustness, "label-noise sweep over config seeds")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--timing", action="store_true", help="write wall-clock seconds instead of 0")
        if name == "ablate":
            p.add_argument("--arms", help="comma-separated subset of arms")
        else:
            p.add_argument("--sigmas", default=",".join(str(s) for s in DEFAULT_SIGMAS))
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=120)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ArithmeticError, ad.GradCheckError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
