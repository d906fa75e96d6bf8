"""Command-line entry point.

Every subcommand reads one experiment config (``--config``), writes into an
output directory (``--out``, else ``output_dir`` from the config, else
``$ROBUSTGEN_OUT/<name>``) and leaves a ``manifest.json`` there.

Exit codes: 0 success, 1 stage failure, 2 usage or config error,
3 invariant violation (budget feasibility, report consistency).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import BudgetViolation, check_budget, generate_eval_suite
from .config import ExperimentConfig, load_config
from .data import load_dataset
from .evaluation import ReportInconsistency, evaluate_model
from .formats import FormatError, save_tensors
from .models import ModelSpecError, build_model
from .pipeline import (
    OutputExists,
    bounds_report,
    corruption_report,
    landscape_report,
    resolve_output_dir,
    run_context,
    run_experiment,
    run_sweep,
    sparsity_report,
    sweep_variants,
    train_model,
)

EXIT_FAILURE, EXIT_USAGE, EXIT_INVARIANT = 1, 2, 3


def _csv_list(cast):
    def parse(text: str):
        return [cast(v) for v in text.split(",") if v.strip()]

    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment config (YAML)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads (sweep only)")
    common.add_argument("-v", "--verbose", action="store_true")

    weights = argparse.ArgumentParser(add_help=False)
    weights.add_argument("--weights", type=Path, help="RGW1 weights; trains from the config when omitted")

    parser = argparse.ArgumentParser(prog="robustgen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"robustgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model, save weights and the training log")
    sub.add_parser("attack", parents=[common, weights], help="run the eval attacks and save adversarial examples")
    sub.add_parser("eval", parents=[common, weights], help="clean, per-attack and worst-case accuracy")
    sub.add_parser("analyze-sparsity", parents=[common, weights], help="weight sparsity ratios and histograms")
    sub.add_parser("landscape", parents=[common, weights], help="filter-normalized loss landscape grid")
    sub.add_parser("bound", parents=[common, weights], help="Rademacher and margin bound report")
    sub.add_parser("run", parents=[common], help="full pipeline: train, evaluate, flagged analyses")
    sw = sub.add_parser("sweep", parents=[common], help="run one config per stage layout, patch size or l1 strength")
    sw.add_argument("--stages", type=_csv_list(str), help="e.g. CCCC,CTCC,CTTC,CTTT")
    sw.add_argument("--patch-sizes", type=_csv_list(int), help="e.g. 2,4,8 (ViT)")
    sw.add_argument("--l1-lambdas", type=_csv_list(float), help="e.g. 0,1e-5,1e-4,1e-3")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.model.validate()
    return cfg


def _model_and_data(run, args):
    """Load weights when given, else train from the config (the training log is emitted too)."""
    cfg = run.cfg
    data = run.stage("data", load_dataset, cfg.dataset, cfg.seed)
    model = build_model(cfg.model, cfg.seed)
    if args.weights is not None:
        model.load(args.weights)
    else:
        model, train_log = run.stage("train", train_model, run, data)
        run.emit({"train_log": train_log}, "csv")
    return model, data


def cmd_train(args, cfg):
    with run_context(cfg, args.out, args.force, args.config) as run:
        data = run.stage("data", load_dataset, cfg.dataset, cfg.seed)
        model, train_log = run.stage("train", train_model, run, data)
        run.emit({"train_log": train_log}, "csv")
        model.save(run.out_dir / "model.rgw")
        run.files.append(run.out_dir / "model.rgw")


def cmd_attack(args, cfg):
    with run_context(cfg, args.out, args.force, args.config) as run:
        model, data = _model_and_data(run, args)
        suite = run.stage("attack", generate_eval_suite, model, data.x_test, data.y_test, cfg.eval_attacks, cfg.seed)
        tensors = {"x": data.x_test, "y": data.y_test.astype(np.float64)}
        for (name, adv), acfg in zip(suite.items(), cfg.eval_attacks):
            check_budget(data.x_test, adv.x_adv, acfg)
            tensors[f"{name}:x_adv"] = adv.x_adv
            tensors[f"{name}:success"] = adv.success_mask.astype(np.float64)
        save_tensors(run.out_dir / "adversarial.rgw", tensors)
        run.files.append(run.out_dir / "adversarial.rgw")


def cmd_eval(args, cfg):
    with run_context(cfg, args.out, args.force, args.config) as run:
        model, data = _model_and_data(run, args)
        report = run.stage("evaluate", evaluate_model, model, data.x_test, data.y_test, cfg.eval_attacks, cfg.seed)
        run.emit({"robustness": report}, "json")
        run.emit({"robustness": report}, "csv")
        if cfg.analyses.corruption:
            run.stage("corruption", corruption_report, run, model, data)


def cmd_sparsity(args, cfg):
    with run_context(cfg, args.out, args.force, args.config) as run:
        model, _ = _model_and_data(run, args)
        run.stage("sparsity", sparsity_report, run, model)


def cmd_landscape(args, cfg):
    with run_context(cfg, args.out, args.force, args.config) as run:
        model, data = _model_and_data(run, args)
        run.stage("landscape", landscape_report, run, model, data)


def cmd_bound(args, cfg):
    with run_context(cfg, args.out, args.force, args.config) as run:
        model, data = _model_and_data(run, args)
        run.files.append(run.stage("bounds", bounds_report, run, model, data))


def cmd_run(args, cfg):
    run_experiment(cfg, args.out, args.force, args.config)


def cmd_sweep(args, cfg):
    variants = sweep_variants(cfg, args.stages, args.patch_sizes, args.l1_lambdas)
    for path in run_sweep(cfg, resolve_output_dir(cfg, args.out), variants, threads=args.threads, force=args.force):
        print(path)


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "analyze-sparsity": cmd_sparsity,
    "landscape": cmd_landscape,
    "bound": cmd_bound,
    "run": cmd_run,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _load(args)
    except (OSError, ValueError, TypeError, ModelSpecError) as exc:
        print(f"error: bad config {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, cfg)
    except OutputExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BudgetViolation, ReportInconsistency) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, FormatError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
