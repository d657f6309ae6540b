"""
Grid sweeps, the cross-subject (leave-one-out) study and plot-series emission.

Every run is a self-contained task built from plain dicts, so tasks can be
shipped to worker processes. Rows come back in task order and the final
table is sorted, which keeps the table independent of the worker count.
"""

import json
import logging
import multiprocessing
import re
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import pandas as pd

from core.constants import SWEEP_COLUMNS, SWEEP_SIZE_WARNING
from core.datasets import (
    assemble_poisoned,
    leave_one_out_pools,
    subject_pools,
    synth_generate,
)
from core.errors import AxisError, ConfigError, ProtocolError
from core.evaluation import EvalReport, evaluate_attack
from core.imaging import Image
from core.keys import (
    PatternKey,
    PoisoningSample,
    Strategy,
    accessory_inject,
    generate_poisons,
)
from core.result import Result
from core.rng import RngStream, derive_seed
from core.training import init_model, train
from core.utils import image_identity
from harness.config import AttackConfig, ExperimentConfig
from harness.experiment import (
    RunSeeds,
    build_keys,
    make_spec,
    prepare_data,
    run_experiment,
    train_config,
)
from utils.state_manager import StateManager

logger = logging.getLogger(__name__)

SWEEP_EXTRA_COLUMNS = (
    "asr_non_target",
    "mean_confidence",
    "acc_delta",
    "stealthy",
    "config_hash",
    "test_hash",
    "runtime",
    "error",
)
SWEEP_TABLE_COLUMNS = SWEEP_COLUMNS + SWEEP_EXTRA_COLUMNS
SWEEP_SORT_ORDER = ["strategy", "pattern", "alpha_train", "n", "alpha_test", "seed"]
GROUP_COLUMNS = ("strategy", "pattern", "alpha_train", "n", "alpha_test")

CROSS_SUBJECT_COLUMNS = (
    "strategy",
    "pattern",
    "held_out",
    "m",
    "n",
    "alpha_train",
    "seed",
    "asr",
    "acc",
    "not_sure",
    "mean_confidence",
    "runtime",
    "error",
)
CROSS_SUBJECT_SORT_ORDER = ["held_out", "m", "seed"]


@dataclass(frozen=True)
class SweepTask:
    config: dict[str, Any]
    attack: dict[str, Any]
    point_index: int
    seed: int


@dataclass(frozen=True)
class CrossSubjectTask:
    config: dict[str, Any]
    held_out: int
    m: int
    point_index: int
    seed: int
    pools: list[list[Image]] | None = None


def _execute(
    func: Callable[[Any], dict[str, Any]], tasks: Sequence[Any], workers: int
) -> list[dict[str, Any]]:
    """Run tasks serially or on a spawn-based process pool; results keep task order."""
    if workers <= 1 or len(tasks) <= 1:
        rows = []
        for i, task in enumerate(tasks, start=1):
            rows.append(func(task))
            logger.info(f"Finished run {i}/{len(tasks)}")
        return rows
    context = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(
        max_workers=min(workers, len(tasks)), mp_context=context
    ) as pool:
        rows = []
        for i, row in enumerate(pool.map(func, tasks), start=1):
            rows.append(row)
            logger.info(f"Finished run {i}/{len(tasks)}")
        return rows


def _attack_columns(attack: AttackConfig, seed: int) -> dict[str, Any]:
    return {
        "strategy": attack.strategy,
        "pattern": attack.pattern,
        "n": attack.n,
        "alpha_train": attack.alpha_train,
        "alpha_test": attack.alpha_test,
        "seed": seed,
    }


def report_row(report: EvalReport) -> dict[str, Any]:
    """Metric columns of a sweep row."""
    stealth = report.provenance.get("stealth", {})
    return {
        "asr": report.attack_success_rate,
        "acc": report.standard_test_accuracy,
        "wrong_key": report.wrong_key_rate,
        "not_sure": report.not_sure_fraction,
        "asr_non_target": report.non_target_success_rate,
        "mean_confidence": report.mean_backdoor_confidence,
        "acc_delta": stealth.get("delta"),
        "stealthy": stealth.get("stealthy"),
        "config_hash": report.provenance.get("config_hash"),
        "test_hash": report.test_hash,
    }


def run_point(task: SweepTask) -> dict[str, Any]:
    """Worker entry: one grid point under one seed, never raising."""
    cfg = ExperimentConfig.from_dict(task.config)
    attack = AttackConfig(**task.attack)
    started = time.perf_counter()
    result: Result[EvalReport, str] = Result.capture(
        lambda: run_experiment(
            cfg,
            attack,
            task.point_index,
            task.seed,
            output_dir=None,
            state=StateManager(),
        )
    )
    metrics = result.map(report_row)
    row = {**_attack_columns(attack, task.seed), **metrics.unwrap_or({})}
    row["error"] = metrics.error or ""
    if metrics.is_error():
        logger.warning(
            f"Grid point {task.point_index} seed {task.seed} failed: {row['error']}"
        )
    row["runtime"] = round(time.perf_counter() - started, 3)
    return row


def _table(
    rows: list[dict[str, Any]], columns: Sequence[str], order: list[str]
) -> pd.DataFrame:
    table = pd.DataFrame(rows, columns=list(columns))
    if table.empty:
        return table
    return table.sort_values(order, kind="mergesort").reset_index(drop=True)


def write_table(table: pd.DataFrame, directory: Path, stem: str) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json`` (records)."""
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    json_path = directory / f"{stem}.json"
    table.to_csv(csv_path, index=False)
    table.to_json(json_path, orient="records", indent=2)
    return csv_path, json_path


def run_sweep(
    cfg: ExperimentConfig,
    seeds: Sequence[int] | None = None,
    output_dir: str | Path | None = None,
) -> pd.DataFrame:
    """
    Run every grid point under every seed.

    Failed runs stay in the table with an ``error`` message and empty metrics.

    Returns:
        One row per (grid point, seed), sorted by
        (strategy, pattern, alpha_train, n, alpha_test, seed).
    """
    points = cfg.grid.points(cfg.attack)
    seed_list = list(seeds if seeds is not None else cfg.grid.seeds)
    if not seed_list:
        raise ConfigError("a sweep needs at least one seed")
    total = len(points) * len(seed_list)
    if total > SWEEP_SIZE_WARNING:
        logger.warning(
            f"Sweep has {total} runs (> {SWEEP_SIZE_WARNING}); this will take a while"
        )
    base = cfg.to_dict()
    tasks = [
        SweepTask(base, point.to_dict(), point_index, seed)
        for point_index, point in enumerate(points)
        for seed in seed_list
    ]
    logger.info(f"Sweep '{cfg.name}': {len(points)} points x {len(seed_list)} seeds")
    table = _table(
        _execute(run_point, tasks, cfg.workers), SWEEP_TABLE_COLUMNS, SWEEP_SORT_ORDER
    )
    if output_dir is not None:
        directory = Path(output_dir)
        write_table(table, directory, "sweep")
        summary = {
            axis: monotonicity_summary(table, axis) for axis in ("n", "alpha_test")
        }
        text = json.dumps(summary, indent=2, sort_keys=True, default=_json_default)
        (directory / "monotonicity.json").write_text(text + "\n", encoding="utf-8")
    return table


def _json_default(value: Any) -> Any:
    return value.item() if hasattr(value, "item") else str(value)


def _check_columns(table: pd.DataFrame, names: Sequence[str]) -> None:
    for name in names:
        if name not in table.columns:
            raise AxisError(f"unknown column '{name}'")


def _successful(table: pd.DataFrame) -> pd.DataFrame:
    if "error" not in table.columns:
        return table
    return table[table["error"].fillna("") == ""]


def monotonicity_summary(
    table: pd.DataFrame, axis: str, metric: str = "asr"
) -> list[dict[str, Any]]:
    """
    Inversions of the seed-averaged ``metric`` along ``axis``.

    Rows are grouped on every other grid axis; each time the mean drops
    between consecutive axis values an inversion with its size is reported.
    """
    _check_columns(table, [axis, metric])
    groups = [c for c in GROUP_COLUMNS if c != axis and c in table.columns]
    ok = _successful(table)
    if ok.empty:
        return []
    means = ok.groupby([*groups, axis])[metric].mean().reset_index()
    inversions = []
    for key, group in means.groupby(groups, sort=True) if groups else [((), means)]:
        ordered = group.sort_values(axis)
        xs, ys = ordered[axis].tolist(), ordered[metric].tolist()
        for i in range(1, len(xs)):
            if ys[i] < ys[i - 1]:
                labels = key if isinstance(key, tuple) else (key,)
                inversions.append(
                    {
                        "group": dict(zip(groups, labels, strict=True)),
                        "from": xs[i - 1],
                        "to": xs[i],
                        "drop": ys[i - 1] - ys[i],
                    }
                )
    return inversions


def _slug(value: Any) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", str(value)).strip("-")


def emit_plot_data(
    table: pd.DataFrame,
    x: str,
    output_dir: str | Path,
    y: str = "asr",
    series: Sequence[str] | None = None,
) -> list[Path]:
    """
    Write one CSV per series: x, mean, min, max and count of ``y`` across seeds.

    Raises:
        AxisError: If ``x``, ``y`` or a series column is not in the table.
    """
    series_columns = list(
        series if series is not None else [c for c in GROUP_COLUMNS if c != x]
    )
    _check_columns(table, [x, y, *series_columns])
    directory = Path(output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    header = [*series_columns, x, "mean", "min", "max", "count"]
    ok = _successful(table)
    if ok.empty:
        path = directory / f"{y}_vs_{x}.csv"
        pd.DataFrame(columns=header).to_csv(path, index=False)
        return [path]
    paths = []
    grouped = ok.groupby(series_columns, sort=True) if series_columns else [((), ok)]
    for key, group in grouped:
        labels = key if isinstance(key, tuple) else (key,)
        stats = group.groupby(x)[y].agg(["mean", "min", "max", "count"]).reset_index()
        for column, value in zip(series_columns, labels, strict=True):
            stats[column] = value
        suffix = "__".join(
            f"{c}-{_slug(v)}" for c, v in zip(series_columns, labels, strict=True)
        )
        name = f"{y}_vs_{x}__{suffix}.csv" if suffix else f"{y}_vs_{x}.csv"
        path = directory / name
        stats[header].to_csv(path, index=False)
        paths.append(path)
    return paths


# Cross-subject study ----------------------------------------------------------


def _subject_pools(cfg: ExperimentConfig, seed: int, offset: int) -> list[list[Image]]:
    """Fresh synthetic identities, absent from the training labels."""
    stream = RngStream(derive_seed(cfg.seed, "subjects", seed))
    subjects = synth_generate(
        cfg.cross_subject.subjects,
        cfg.cross_subject.photos_per_subject,
        cfg.dataset.frame,
        stream,
        template_offset=offset,
    )
    return subject_pools(subjects)


def _cross_subject_metrics(outcome: tuple[EvalReport, int]) -> dict[str, Any]:
    report, n = outcome
    return {
        "n": n,
        "asr": report.attack_success_rate,
        "acc": report.standard_test_accuracy,
        "not_sure": report.not_sure_fraction,
        "mean_confidence": report.mean_backdoor_confidence,
    }


def run_cross_point(task: CrossSubjectTask) -> dict[str, Any]:
    """Worker entry: one (held-out subject, m) pair under one seed."""
    cfg = ExperimentConfig.from_dict(task.config)
    attack = cfg.attack
    started = time.perf_counter()
    row: dict[str, Any] = {
        "strategy": attack.strategy,
        "pattern": attack.pattern,
        "held_out": task.held_out,
        "m": task.m,
        "alpha_train": attack.alpha_train,
        "seed": task.seed,
    }
    result = Result.capture(lambda: _cross_subject_run(cfg, task))
    metrics = result.map(_cross_subject_metrics)
    row.update(metrics.unwrap_or({}))
    row["error"] = metrics.error or ""
    if metrics.is_error():
        logger.warning(
            f"Held-out subject {task.held_out}, m={task.m} failed: {row['error']}"
        )
    row["runtime"] = round(time.perf_counter() - started, 3)
    return row


def _cross_subject_run(
    cfg: ExperimentConfig, task: CrossSubjectTask
) -> tuple[EvalReport, int]:
    attack = cfg.attack
    target = attack.target_label
    seeds = RunSeeds.derive(cfg.seed, task.point_index, task.seed)
    bundle = prepare_data(cfg, task.seed)
    pools = task.pools or _subject_pools(cfg, task.seed, bundle.train.label_count)
    poison_source, eval_source = leave_one_out_pools(pools, task.held_out)
    key, _ = build_keys(attack, bundle, RunSeeds.derive(cfg.seed, 0, task.seed).attack)
    if not isinstance(key, PatternKey):
        raise ConfigError("the cross-subject study needs a pattern key")

    poisons = [
        PoisoningSample(
            accessory_inject(key, img), target, {"source": "subject", "photo": i}
        )
        for i, img in enumerate(poison_source)
    ]
    if task.m > 0:
        digital_spec = make_spec(replace(attack, n=task.m), key)
        pool = [img for img, label in bundle.attacker_pool.samples() if label != target]
        poisons += generate_poisons(digital_spec, pool, seeds.attack.child("digital"))
    poisoned = assemble_poisoned(bundle.train, poisons)

    backdoors = [accessory_inject(key, img) for img in eval_source]
    training_images = {image_identity(p) for p in poisoned.combined.images}
    held_out_images = {image_identity(img.pixels) for img in eval_source + backdoors}
    if training_images & held_out_images:
        raise ProtocolError(
            f"held-out subject {task.held_out} leaked into the training set"
        )

    spec = cfg.model_spec(bundle.train.frame, bundle.train.label_count)
    model, _ = train(
        init_model(spec, seeds.attack.child("init")),
        poisoned,
        bundle.test,
        train_config(cfg, seeds.attack_train_seed),
    )
    report = evaluate_attack(
        model,
        backdoors,
        bundle.test,
        target,
        None,
        cfg.evaluation.threshold,
        cfg.evaluation.not_sure_counts_as_error,
    )
    return report, len(poisons)


def run_cross_subject(
    cfg: ExperimentConfig,
    pools: list[list[Image]] | None = None,
    m_values: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
    output_dir: str | Path | None = None,
) -> pd.DataFrame:
    """
    Leave-one-out study: for every held-out subject and every m, poison with
    the other subjects' keyed photos plus m keyed pool images, then score the
    held-out subject's keyed photos.

    Args:
        cfg: Experiment configuration; ``cfg.attack`` must be a pattern attack.
        pools: Per-subject images; fresh synthetic subjects when None.
        m_values: Digital poison counts; ``cfg.cross_subject.m_values`` when None.
        seeds: Seed indices; ``cfg.grid.seeds`` when None.
        output_dir: Where to write ``cross_subject.csv``/``.json`` and curves.

    Returns:
        One row per (held-out subject, m, seed).
    """
    if not Strategy(cfg.attack.strategy).uses_pattern:
        raise ConfigError("the cross-subject study needs a pattern attack")
    m_list = list(m_values if m_values is not None else cfg.cross_subject.m_values)
    seed_list = list(seeds if seeds is not None else cfg.grid.seeds)
    subjects = len(pools) if pools is not None else cfg.cross_subject.subjects
    if subjects < 2:
        raise ProtocolError("leave-one-out needs at least two subjects")
    base = cfg.to_dict()
    tasks = [
        CrossSubjectTask(base, held_out, m, held_out * len(m_list) + j, seed, pools)
        for held_out in range(subjects)
        for j, m in enumerate(m_list)
        for seed in seed_list
    ]
    logger.info(f"Cross-subject study: {subjects} subjects x m in {m_list}")
    rows = _execute(run_cross_point, tasks, cfg.workers)
    table = _table(rows, CROSS_SUBJECT_COLUMNS, CROSS_SUBJECT_SORT_ORDER)
    if output_dir is not None:
        directory = Path(output_dir)
        write_table(table, directory, "cross_subject")
        emit_plot_data(table, "m", directory / "series", series=["held_out"])
    return table

