"""Command-line entry points.

Every subcommand reads one JSON config (or the built-in glyph benchmark),
applies ``--set key=value`` overrides, writes ``resolved-config.json`` into
the output directory and then does its work there.

Exit codes: 0 success, 2 bad configuration, 3 data problem, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, glyph_benchmark_config
from .data import load_manifest, save_manifest
from .engine import (DEFAULT_ABLATIONS, VARIANTS, evaluate, f1_openness_sweep, load_train_state,
                     resolve_datasets, run_ablation_matrix, run_training)
from .errors import ConfigError, DataError, NumericAbort
from .exemplars import estimate_exemplars, pretrain_encoder_nonepisodic, save_exemplars
from .metrics import write_report_table

log = logging.getLogger("refocs")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
OUTPUT_ENV = "REFOCS_OUTPUT_DIR"


def load_config(path, overrides) -> RunConfig:
    if path is None:
        raw = glyph_benchmark_config().to_dict()
        return RunConfig.from_dict(apply_overrides(raw, overrides))
    return RunConfig.from_file(path, overrides)


def _write_resolved(out: Path, config: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.json").write_text(config.to_json() + "\n")


def _checkpoint_path(args, out: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "last.pt"


def _eval_config(args, out: Path):
    """State and config for commands that start from a trained checkpoint.

    The checkpoint's own config is the base; ``--set`` may change evaluation
    settings such as ``episodes.episodes_test`` or ``eval.seed``.
    """
    state, trained = load_train_state(_checkpoint_path(args, out))
    config = RunConfig.from_dict(apply_overrides(trained.to_dict(), args.overrides))
    if config.arch() != trained.arch():
        raise ConfigError("overrides may not change the trained architecture")
    return state, config


def _test_manifest(args, config: RunConfig):
    if getattr(args, "test_manifest", None):
        return load_manifest(args.test_manifest)
    return resolve_datasets(config)[1]


# --- subcommands -------------------------------------------------------------

def cmd_generate_data(args, config: RunConfig, out: Path) -> int:
    if config.data.source != "glyph":
        raise ConfigError("generate-data only builds the procedural glyph dataset")
    train, test, val = resolve_datasets(config)
    for name, m in (("train", train), ("test", test), ("val", val)):
        if m is not None:
            save_manifest(m, out / "data" / name)
            print(f"{name}: {len(m.class_ids)} classes, {m.num_samples} samples -> {out / 'data' / name}")
    return 0


def cmd_estimate_exemplars(args, config: RunConfig, out: Path) -> int:
    train, _, _ = resolve_datasets(config)
    enc, history = pretrain_encoder_nonepisodic(
        train, config.train.pretrain_epochs, config.train.pretrain_lr, config.train.seed,
        arch=config.arch())
    exemplars = estimate_exemplars(enc, train, config.method.exemplar_distance)
    save_exemplars(exemplars, out / "exemplars")
    (out / "pretrain-history.json").write_text(json.dumps(history) + "\n")
    print(f"estimated {len(exemplars)} exemplars -> {out / 'exemplars'}")
    return 0


def cmd_train(args, config: RunConfig, out: Path) -> int:
    train, _, val = resolve_datasets(config)
    state = None
    if args.resume:
        state, saved = load_train_state(args.resume)
        if saved.config_hash() != config.config_hash():
            raise ConfigError("resume checkpoint was trained with a different config")
    state = run_training(train, config, out, val_manifest=val, state=state)
    last = state.history[-1] if state.history else {}
    print(f"trained {state.episode} episodes; last losses {last}")
    return 0


def cmd_eval(args, config: RunConfig, out: Path) -> int:
    state, config = _eval_config(args, out)
    _write_resolved(out, config)
    test = _test_manifest(args, config)
    report = evaluate(state, test, config)
    (out / "eval-report.json").write_text(report.to_json() + "\n")
    write_report_table(out / "tables" / "eval.csv", [("model", report)])
    print(report.summary())
    return 0


def cmd_ablate(args, config: RunConfig, out: Path) -> int:
    variants = args.variants or list(DEFAULT_ABLATIONS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; known: {', '.join(VARIANTS)}")
    rows = run_ablation_matrix(config, variants, output_dir=out)
    for name, rep in rows:
        print(f"{name:22s} {rep.summary()}")
    return 0


def cmd_sweep_openness(args, config: RunConfig, out: Path) -> int:
    state, config = _eval_config(args, out)
    _write_resolved(out, config)
    test = _test_manifest(args, config)
    result = f1_openness_sweep(state, test, config)
    (out / "openness-sweep.json").write_text(json.dumps(result, indent=1) + "\n")
    path = out / "tables" / "openness.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["openness_pct", "macro_f1"])
        for key, f1 in result.items():
            w.writerow([key, f"{f1:.4f}"])
            print(f"openness {key:>5s}%  F1 {f1:.4f}")
    return 0


def lambda_sweep_points(config: RunConfig, axis: str = "both"):
    """``(axis, value, overrides)`` for each point of the loss-weight sweep."""
    e = config.eval
    points = []
    if axis in ("vae", "both"):
        for v in e.lambda_vae_grid:
            points.append(("lambda_vae", v, {"loss.lambda_vae": v,
                                             "loss.lambda_ce": e.sweep_fixed_lambda_ce,
                                             "loss.lambda_bce": e.sweep_fixed_lambda_bce}))
    if axis in ("bce", "both"):
        for v in e.lambda_bce_grid:
            points.append(("lambda_bce", v, {"loss.lambda_bce": v,
                                             "loss.lambda_vae": e.sweep_fixed_lambda_vae,
                                             "loss.lambda_ce": e.sweep_fixed_lambda_ce}))
    return points


def cmd_sweep_lambda(args, config: RunConfig, out: Path) -> int:
    train, test, _ = resolve_datasets(config)
    rows = {}
    for axis, value, dotted in lambda_sweep_points(config, args.axis):
        cfg = config.replace(**dotted)
        sub = out / axis / f"{value:g}"
        state = run_training(train, cfg, sub)
        rep = evaluate(state, test, cfg)
        (sub / "eval-report.json").write_text(rep.to_json() + "\n")
        rows.setdefault(axis, []).append((value, rep))
        print(f"{axis}={value:g}  {rep.summary()}")
    for axis, entries in rows.items():
        path = out / "tables" / f"{axis}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([axis, "auroc_mean", "auroc_ci95", "acc_mean", "acc_ci95"])
            for value, rep in entries:
                w.writerow([f"{value:g}", f"{rep.auroc_mean:.2f}", f"{rep.auroc_ci95:.2f}",
                            f"{rep.accuracy_mean:.2f}", f"{rep.accuracy_ci95:.2f}"])
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "estimate-exemplars": cmd_estimate_exemplars,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-openness": cmd_sweep_openness,
    "sweep-lambda": cmd_sweep_lambda,
}
# these start from a checkpoint and resolve their config from it
_FROM_CHECKPOINT = {"eval", "sweep-openness"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: built-in glyph benchmark)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. episodes.k_shot=1 (repeatable)")
    common.add_argument("--output-dir", default=os.environ.get(OUTPUT_ENV, "runs/latest"),
                        help=f"artifact directory (default ${OUTPUT_ENV} or runs/latest)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="refocs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in _FROM_CHECKPOINT:
            p.add_argument("--checkpoint", help="default: <output-dir>/checkpoints/last.pt")
            p.add_argument("--test-manifest", help="evaluate on this saved manifest instead")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "ablate":
            p.add_argument("--variants", nargs="+", help=f"default: {' '.join(DEFAULT_ABLATIONS)}")
        if name == "sweep-lambda":
            p.add_argument("--axis", choices=("vae", "bce", "both"), default="both")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.output_dir)
    try:
        if args.command in _FROM_CHECKPOINT:
            config = None  # resolved from the checkpoint inside the command
        else:
            config = load_config(args.config, args.overrides)
            _write_resolved(out, config)
        return COMMANDS[args.command](args, config, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
