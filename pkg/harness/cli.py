"""
Command-line interface.

Every subcommand accepts the shared configuration flags (``--config``,
``--preset``, ``--set``, ``--seed``, ``--output``, ``--workers``) and returns
an exit code: 0 on success, 1 on configuration errors, 2 on pipeline errors.
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any, NoReturn

import pandas as pd

from core.checkpoint import load_model, save_model, write_history
from core.constants import DEFAULT_ETA, EXIT_CONFIG_ERROR, EXIT_OK
from core.datasets import write_manifest, write_png_tree
from core.errors import ConfigError
from core.evaluation import evaluate_attack
from core.image_io import write_png
from core.keys import save_spec
from core.training import configure_torch, finetune_last_layer, init_model, train
from harness.config import DefenseConfig, ExperimentConfig, load_config
from harness.experiment import (
    RunSeeds,
    prepare_attack,
    prepare_data,
    pristine_baseline,
    report_json,
    run_defenses,
    run_experiment,
    train_config,
)
from harness.presets import preset_names
from harness.sweep import (
    emit_plot_data,
    monotonicity_summary,
    run_cross_subject,
    run_sweep,
)
from utils.error_handling import error_handling_decorator
from utils.logging_setup import configure_logging
from utils.state_manager import LoggingObserver, StateManager

logger = logging.getLogger(__name__)

Command = Callable[[argparse.Namespace], int | None]


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors and exit with 1, not argparse's 2."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG_ERROR, f"{self.prog}: error: {message}\n")


def _shared_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("configuration")
    group.add_argument("--config", type=Path, help="JSON experiment config")
    group.add_argument("--preset", choices=preset_names(), help="built-in preset")
    group.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field, e.g. attack.n=15 (repeatable)",
    )
    group.add_argument("--seed", type=int, help="master seed")
    group.add_argument(
        "--seed-index", type=int, default=0, help="seed index of the run"
    )
    group.add_argument("--output", help="root directory for run outputs")
    group.add_argument("--workers", type=int, help="parallel worker processes")
    verbosity = parent.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="backdoorlab",
        description="Desk-scale laboratory for targeted backdoor poisoning attacks.",
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    shared = _shared_flags()

    def add(name: str, func: Command, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[shared], help=help_text)
        sub.set_defaults(func=func)
        return sub

    add(
        "synth", cmd_synth, "generate and split the dataset, write it as PNG trees"
    ).add_argument(
        "--out", type=Path, help="target directory"
    )
    add(
        "poison", cmd_poison, "write poisoning samples, backdoor instances and the key"
    ).add_argument(
        "--out", type=Path, help="target directory"
    )
    train_cmd = add("train", cmd_train, "train a model and save its checkpoint")
    train_cmd.add_argument("--out", type=Path, help="target directory")
    train_cmd.add_argument(
        "--pristine", action="store_true", help="train on the pristine training set"
    )
    evaluate = add(
        "evaluate", cmd_evaluate, "score a saved model on the configured attack"
    )
    evaluate.add_argument("--model", type=Path, required=True, help="model checkpoint")
    evaluate.add_argument(
        "--out", type=Path, help="write the report here instead of stdout"
    )
    add(
        "defend", cmd_defend, "run the enabled defenses on the poisoned set"
    ).add_argument(
        "--out", type=Path, help="write the results here instead of stdout"
    )
    add("run", cmd_run, "run one experiment end to end").add_argument(
        "--out", type=Path, help="run directory"
    )
    add("sweep", cmd_sweep, "run the configured grid over all seeds").add_argument(
        "--out", type=Path, help="sweep directory"
    )
    add("cross-subject", cmd_cross_subject, "leave-one-out subject study").add_argument(
        "--out", type=Path, help="study directory"
    )
    report = add("report", cmd_report, "summarise a report.json or a sweep table")
    report.add_argument(
        "--input", type=Path, required=True, help="report.json or sweep CSV"
    )
    report.add_argument("--x", default="n", help="x axis column for plot series")
    report.add_argument("--y", default="asr", help="metric column for plot series")
    report.add_argument("--out", type=Path, help="directory for plot series")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Preset, then config file, then ``--set`` overrides, then explicit flags."""
    extra: dict[str, Any] = {}
    for flag in ("seed", "output", "workers"):
        value = getattr(args, flag)
        if value is not None:
            extra[flag] = value
    return load_config(args.config, args.preset, args.overrides, extra)


def _run_dir(cfg: ExperimentConfig, args: argparse.Namespace, leaf: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(cfg.output) / cfg.name / leaf


def _state() -> StateManager:
    state = StateManager()
    state.subscribe(LoggingObserver())
    return state


def _emit(data: dict[str, Any], out: Path | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True, default=str) + "\n"
    if out is None:
        print(text, end="")
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        logger.info(f"Wrote {out}")


def cmd_synth(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    bundle = prepare_data(cfg, args.seed_index)
    out = _run_dir(cfg, args, "dataset")
    for name, ds in (
        ("train", bundle.train),
        ("attacker_pool", bundle.attacker_pool),
        ("test", bundle.test),
    ):
        write_png_tree(ds, out / name)
    write_manifest(bundle, out / "manifest.json")
    logger.info(f"Wrote dataset to {out}")


def cmd_poison(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    state = _state()
    with state.stage("dataset"):
        bundle = prepare_data(cfg, args.seed_index)
    seeds = RunSeeds.derive(cfg.seed, 0, args.seed_index)
    artifacts = prepare_attack(cfg.attack, bundle, seeds.attack, state)
    out = _run_dir(cfg, args, "poison")
    save_spec(artifacts.spec, out / "spec")
    (out / "poisons").mkdir(parents=True, exist_ok=True)
    (out / "backdoors").mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(artifacts.poisons):
        write_png(sample.instance, out / "poisons" / f"{i:04d}_label{sample.label}.png")
    for i, img in enumerate(artifacts.backdoors):
        write_png(img, out / "backdoors" / f"{i:04d}.png")
    write_manifest(
        {"poisoned_train": artifacts.poisoned.combined}, out / "manifest.json"
    )
    logger.info(
        f"Wrote {len(artifacts.poisons)} poisons "
        f"and {len(artifacts.backdoors)} backdoors"
    )


def cmd_train(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    state = _state()
    seeds = RunSeeds.derive(cfg.seed, 0, args.seed_index)
    out = _run_dir(cfg, args, "pristine" if args.pristine else "model")
    if args.pristine:
        baseline = pristine_baseline(cfg, args.seed_index, state)
        model, history = baseline.model, baseline.history
    else:
        if cfg.mode == "finetune":
            baseline = pristine_baseline(cfg, args.seed_index, state)
            bundle = baseline.bundle
        else:
            with state.stage("dataset"):
                bundle = prepare_data(cfg, args.seed_index)
        artifacts = prepare_attack(cfg.attack, bundle, seeds.attack, state)
        attack_cfg = train_config(cfg, seeds.attack_train_seed)
        with state.stage(cfg.mode if cfg.mode == "finetune" else "train"):
            if cfg.mode == "finetune":
                model, history = finetune_last_layer(
                    baseline.model, artifacts.poisoned, bundle.test, attack_cfg
                )
            else:
                spec = cfg.model_spec(bundle.train.frame, bundle.train.label_count)
                model, history = train(
                    init_model(spec, seeds.attack.child("init")),
                    artifacts.poisoned,
                    bundle.test,
                    attack_cfg,
                )
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.bfm")
    write_history(history, out / "history.jsonl")
    logger.info(
        f"Saved model to {out / 'model.bfm'} (selected epoch {history.selected_epoch})"
    )


def cmd_evaluate(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    state = _state()
    with state.stage("load-model"):
        model = load_model(args.model)
    with state.stage("dataset"):
        bundle = prepare_data(cfg, args.seed_index)
    seeds = RunSeeds.derive(cfg.seed, 0, args.seed_index)
    artifacts = prepare_attack(cfg.attack, bundle, seeds.attack, state)
    with state.stage("evaluate"):
        report = evaluate_attack(
            model,
            artifacts.backdoors,
            bundle.test,
            cfg.attack.target_label,
            artifacts.wrong_instances,
            cfg.evaluation.threshold,
            cfg.evaluation.not_sure_counts_as_error,
            provenance={
                "model": str(args.model),
                "test_hash": bundle.test.content_hash,
            },
            backdoor_truths=artifacts.backdoor_truths,
        )
    text = report_json(report, state.timing)
    if args.out is None:
        print(text, end="")
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)


def cmd_defend(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    if not cfg.defenses.any_enabled:
        cfg = replace(cfg, defenses=DefenseConfig(audit=True, prune_eta=DEFAULT_ETA))
    state = _state()
    seeds = RunSeeds.derive(cfg.seed, 0, args.seed_index)
    baseline = None
    if cfg.defenses.aux_pristine:
        baseline = pristine_baseline(cfg, args.seed_index, state)
        bundle = baseline.bundle
    else:
        with state.stage("dataset"):
            bundle = prepare_data(cfg, args.seed_index)
    artifacts = prepare_attack(cfg.attack, bundle, seeds.attack, state)
    with state.stage("defend"):
        results = run_defenses(
            cfg, artifacts, train_config(cfg, seeds.attack_train_seed), seeds, baseline
        )
    _emit(results, args.out)


def cmd_run(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    out = _run_dir(cfg, args, f"seed-{args.seed_index}")
    report = run_experiment(cfg, seed_index=args.seed_index, output_dir=out)
    print(
        f"asr={report.attack_success_rate:.4f} acc={report.standard_test_accuracy:.4f} "
        f"wrong_key={report.wrong_key_rate} not_sure={report.not_sure_fraction:.4f}"
    )


def cmd_sweep(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    out = _run_dir(cfg, args, "sweep")
    table = run_sweep(cfg, output_dir=out)
    for axis in ("n", "alpha_test"):
        emit_plot_data(table, axis, out / "series")
    failed = int((table["error"].fillna("") != "").sum()) if not table.empty else 0
    print(f"{len(table)} rows written to {out} ({failed} failed)")


def cmd_cross_subject(args: argparse.Namespace) -> None:
    cfg = config_from_args(args)
    out = _run_dir(cfg, args, "cross-subject")
    table = run_cross_subject(cfg, output_dir=out)
    print(f"{len(table)} rows written to {out}")


def cmd_report(args: argparse.Namespace) -> None:
    path: Path = args.input
    if not path.is_file():
        raise ConfigError(f"input '{path}' does not exist")
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        if "report" in data:
            report = data["report"]
            summary = {
                k: v
                for k, v in report.items()
                if k not in ("provenance", "counts")
            }
            _emit(summary, None)
            return
        table = pd.DataFrame(data)
    else:
        table = pd.read_csv(path)
    out = args.out or path.parent / "series"
    paths = emit_plot_data(table, args.x, out, y=args.y)
    inversions = monotonicity_summary(table, args.x, args.y)
    _emit({"series": [str(p) for p in paths], "inversions": inversions}, None)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    configure_logging(-1 if args.quiet else 1 if args.verbose else 0)
    configure_torch()
    command = error_handling_decorator(f"backdoorlab {args.command} failed")(args.func)
    return command(args)
