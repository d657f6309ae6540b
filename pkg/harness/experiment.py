"""
Single-experiment pipeline.

split -> keys -> poison -> assemble -> train (or fine-tune) -> backdoor
instances -> wrong-key instances -> metrics -> optional defenses -> report.

Seeds: the dataset, its split and the pristine baseline derive from
(master seed, seed index); everything attack-specific derives from
(master seed, grid-point index, seed index). The pristine baseline is
therefore shared by every grid point of a seed and is cached per process.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from core.checkpoint import save_model, write_history
from core.datasets import (
    LabeledDataset,
    PoisonedDataset,
    SplitBundle,
    assemble_poisoned,
    filter_infrequent,
    load_idx,
    load_png_tree,
    split_three_way,
    synth_generate,
    write_manifest,
)
from core.defenses import aux_pristine_eval, audit_label_distribution, l2_outlier_prune
from core.errors import ConfigError, InsufficientPoolError
from core.evaluation import EvalReport, compare_to_pristine, evaluate_attack
from core.imaging import Image, Shape
from core.keys import (
    BackdoorSpec,
    InputInstanceKey,
    Key,
    PatternKey,
    PoisoningSample,
    Strategy,
    WrongKeyInstance,
    cartoon_pattern,
    generate_backdoor_instances,
    generate_poisons,
    glasses_pattern,
    load_pattern_key,
    random_pattern,
    save_spec,
    spec_to_dict,
    wrong_key_instances,
)
from core.rng import RngStream, derive_seed
from core.training import (
    Model,
    TrainConfig,
    TrainHistory,
    finetune_last_layer,
    init_model,
    train,
)
from core.utils import canonical_json, config_hash
from harness.config import (
    INSTANCE_PATTERN,
    PATTERN_DIR_PREFIX,
    AttackConfig,
    DatasetConfig,
    ExperimentConfig,
)
from utils.state_manager import LoggingObserver, StateManager

logger = logging.getLogger(__name__)

_BASELINE_CACHE: dict[str, "Baseline"] = {}
_BASELINE_CACHE_SIZE = 8


@dataclass(frozen=True)
class RunSeeds:
    """Derived random streams of one (grid point, seed index) run."""

    data: RngStream
    attack: RngStream
    pristine_train_seed: int
    attack_train_seed: int

    @classmethod
    def derive(cls, master: int, point_index: int, seed_index: int) -> "RunSeeds":
        return cls(
            data=RngStream(derive_seed(master, "data", seed_index)),
            attack=RngStream(derive_seed(master, "attack", point_index, seed_index)),
            pristine_train_seed=derive_seed(master, "pristine", seed_index),
            attack_train_seed=derive_seed(master, "train", point_index, seed_index),
        )


@dataclass(frozen=True)
class Baseline:
    """Split datasets plus the model trained on pristine data only."""

    bundle: SplitBundle
    model: Model
    history: TrainHistory


@dataclass(frozen=True)
class AttackArtifacts:
    spec: BackdoorSpec
    wrong_key: Key
    poisons: list[PoisoningSample]
    poisoned: PoisonedDataset
    backdoors: list[Image]
    wrong_instances: list[WrongKeyInstance]
    backdoor_truths: list[int] | None = None


def load_dataset(cfg: DatasetConfig, stream: RngStream) -> LabeledDataset:
    """Generate or load the full labelled dataset named by the config."""
    if cfg.source == "synth":
        ds = synth_generate(
            cfg.num_labels, cfg.per_label, cfg.frame, stream.child("synth")
        )
    elif cfg.source == "idx":
        ds = load_idx(cfg.path, cfg.labels_path)  # type: ignore[arg-type]
    else:
        ds = load_png_tree(cfg.path)  # type: ignore[arg-type]
    if cfg.min_count > 1:
        ds = filter_infrequent(ds, cfg.min_count)
    logger.info(
        f"Dataset: {len(ds)} samples, {ds.label_count} labels, frame {ds.frame}"
    )
    return ds


def prepare_data(cfg: ExperimentConfig, seed_index: int = 0) -> SplitBundle:
    stream = RunSeeds.derive(cfg.seed, 0, seed_index).data
    ds = load_dataset(cfg.dataset, stream)
    if cfg.attack.target_label >= ds.label_count:
        raise ConfigError(
            f"attack.target_label {cfg.attack.target_label} outside {ds.label_count} labels"
        )
    return split_three_way(
        ds,
        cfg.dataset.test_per_label,
        cfg.dataset.pool_per_label,
        stream.child("split"),
    )


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**cfg.train.to_dict(), "seed": seed})


def _baseline_key(cfg: ExperimentConfig, seed_index: int) -> str:
    return config_hash(
        {
            "dataset": cfg.dataset.to_dict(),
            "model": cfg.model.to_dict(),
            "train": cfg.train.to_dict(),
            "seed": cfg.seed,
            "seed_index": seed_index,
        }
    )


def pristine_baseline(
    cfg: ExperimentConfig, seed_index: int = 0, state: StateManager | None = None
) -> Baseline:
    """Split data and train the pristine model, reusing a cached result."""
    key = _baseline_key(cfg, seed_index)
    if key in _BASELINE_CACHE:
        logger.debug(f"Reusing pristine baseline {key[:12]}")
        return _BASELINE_CACHE[key]
    state = state or StateManager()
    seeds = RunSeeds.derive(cfg.seed, 0, seed_index)
    with state.stage("dataset"):
        bundle = prepare_data(cfg, seed_index)
    with state.stage("train-pristine"):
        spec = cfg.model_spec(bundle.train.frame, bundle.train.label_count)
        model, history = train(
            init_model(spec, seeds.data.child("pristine-init")),
            bundle.train,
            bundle.test,
            train_config(cfg, seeds.pristine_train_seed),
        )
    baseline = Baseline(bundle=bundle, model=model, history=history)
    if len(_BASELINE_CACHE) >= _BASELINE_CACHE_SIZE:
        _BASELINE_CACHE.pop(next(iter(_BASELINE_CACHE)))
    _BASELINE_CACHE[key] = baseline
    return baseline


def clear_baseline_cache() -> None:
    _BASELINE_CACHE.clear()


def _benign(ds: LabeledDataset, target: int) -> list[tuple[Image, int]]:
    return [(img, label) for img, label in ds.samples() if label != target]


def build_pattern(name: str, frame: Shape, scale: str, stream: RngStream) -> PatternKey:
    """Resolve a pattern name from the config into a key."""
    if name.startswith(PATTERN_DIR_PREFIX):
        return load_pattern_key(name[len(PATTERN_DIR_PREFIX) :])
    if name == "random":
        return random_pattern(frame, stream.child("pattern", name))
    if name == "cartoon":
        return cartoon_pattern(frame, stream.child("pattern", name))
    return glasses_pattern(name, frame, scale)


def build_keys(
    attack: AttackConfig, bundle: SplitBundle, stream: RngStream
) -> tuple[Key, Key]:
    """
    The true key and a wrong key for one attack.

    Instance keys are two distinct attacker-pool images whose labels differ
    from the target; neither appears in the training set.
    """
    frame = bundle.train.frame
    if attack.pattern == INSTANCE_PATTERN:
        candidates = _benign(bundle.attacker_pool, attack.target_label)
        if len(candidates) < 2:
            raise InsufficientPoolError("instance keys need two non-target pool images")
        picks = (
            stream.child("key").generator().choice(len(candidates), 2, replace=False)
        )
        (key_img, key_label), (wrong_img, wrong_label) = (
            candidates[int(i)] for i in picks
        )
        return (
            InputInstanceKey(key_img, attack.noise_bound, key_label),
            InputInstanceKey(wrong_img, attack.noise_bound, wrong_label),
        )
    return (
        build_pattern(attack.pattern, frame, attack.scale, stream),
        build_pattern(attack.resolved_wrong_pattern, frame, attack.scale, stream),
    )


def make_spec(attack: AttackConfig, key: Key) -> BackdoorSpec:
    return BackdoorSpec(
        strategy=Strategy(attack.strategy),
        key=key,
        target_label=attack.target_label,
        alpha_train=attack.alpha_train,
        alpha_test=attack.alpha_test,
        n=attack.n,
    )


def prepare_attack(
    attack: AttackConfig,
    bundle: SplitBundle,
    stream: RngStream,
    state: StateManager | None = None,
) -> AttackArtifacts:
    """Keys, poisons, the poisoned training set and both evaluation instance sets."""
    state = state or StateManager()
    target = attack.target_label
    with state.stage("keys"):
        key, wrong_key = build_keys(attack, bundle, stream)
        spec = make_spec(attack, key)
    with state.stage("poison"):
        pool = [img for img, _ in _benign(bundle.attacker_pool, target)]
        poisons = generate_poisons(spec, pool, stream.child("poison"))
    with state.stage("assemble"):
        poisoned = assemble_poisoned(bundle.train, poisons)
    with state.stage("backdoor"):
        eval_samples = bundle.test.samples()
        backdoors = generate_backdoor_instances(
            spec,
            [img for img, _ in eval_samples],
            stream.child("backdoor"),
            count=attack.backdoor_count,
            avoid=[p.instance for p in poisons],
            include_key=attack.include_key,
        )
        truths: list[int] | None = None
        if isinstance(key, PatternKey):
            truths = [label for _, label in eval_samples]
            on_target = truths.count(target)
            if on_target:
                logger.info(
                    f"{on_target} of {len(truths)} backdoor instances come from "
                    f"images already labelled {target}"
                )
    with state.stage("wrong-key"):
        wrong = wrong_key_instances(
            spec,
            wrong_key,
            eval_samples,
            stream.child("wrong"),
            attack.backdoor_count,
        )
    return AttackArtifacts(spec, wrong_key, poisons, poisoned, backdoors, wrong, truths)


def _write_json(path: Path, data: dict[str, Any]) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def report_json(report: EvalReport, timing: dict[str, float]) -> str:
    """Serialised report; everything except ``timing`` is deterministic."""
    body = json.loads(canonical_json(report.to_dict()))
    text = json.dumps({"report": body, "timing": timing}, indent=2, sort_keys=True)
    return text + "\n"


def run_experiment(
    cfg: ExperimentConfig,
    attack: AttackConfig | None = None,
    point_index: int = 0,
    seed_index: int = 0,
    output_dir: str | Path | None = None,
    state: StateManager | None = None,
) -> EvalReport:
    """
    Run one attack end to end and score it against its pristine baseline.

    Args:
        cfg: Experiment configuration.
        attack: Attack point; defaults to ``cfg.attack``.
        point_index: Grid-point index used for seed derivation.
        seed_index: Seed index used for seed derivation.
        output_dir: Where to persist the report and artifacts (None = nothing).
        state: Stage tracker; a fresh one with a logging observer by default.

    Raises:
        PipelineError: Naming the stage that failed.
    """
    attack = attack or cfg.attack
    if state is None:
        state = StateManager()
        state.subscribe(LoggingObserver())
    seeds = RunSeeds.derive(cfg.seed, point_index, seed_index)
    evaluation = cfg.evaluation

    baseline = pristine_baseline(cfg, seed_index, state)
    bundle = baseline.bundle
    artifacts = prepare_attack(attack, bundle, seeds.attack, state)
    target = attack.target_label
    attack_cfg = train_config(cfg, seeds.attack_train_seed)

    if cfg.mode == "finetune":
        with state.stage("finetune"):
            model, history = finetune_last_layer(
                baseline.model, artifacts.poisoned, bundle.test, attack_cfg
            )
    else:
        with state.stage("train"):
            model, history = train(
                init_model(baseline.model.spec, seeds.attack.child("init")),
                artifacts.poisoned,
                bundle.test,
                attack_cfg,
            )

    with state.stage("evaluate"):
        pristine_report = evaluate_attack(
            baseline.model,
            artifacts.backdoors,
            bundle.test,
            target,
            artifacts.wrong_instances,
            evaluation.threshold,
            evaluation.not_sure_counts_as_error,
            backdoor_truths=artifacts.backdoor_truths,
        )
        draft = evaluate_attack(
            model,
            artifacts.backdoors,
            bundle.test,
            target,
            artifacts.wrong_instances,
            evaluation.threshold,
            evaluation.not_sure_counts_as_error,
            backdoor_truths=artifacts.backdoor_truths,
        )
        stealth = compare_to_pristine(draft, pristine_report, evaluation.stealth_budget)

    defenses: dict[str, Any] = {}
    if cfg.defenses.any_enabled:
        with state.stage("defend"):
            defenses = run_defenses(cfg, artifacts, attack_cfg, seeds, baseline, draft)

    provenance = {
        "config_hash": config_hash(cfg.semantic_dict()),
        "train_hash": bundle.train.content_hash,
        "poisoned_hash": artifacts.poisoned.combined.content_hash,
        "test_hash": bundle.test.content_hash,
        "master_seed": cfg.seed,
        "point_index": point_index,
        "seed_index": seed_index,
        "attack": {**spec_to_dict(artifacts.spec), "pattern": attack.pattern},
        "mode": cfg.mode,
        "N": artifacts.poisoned.N,
        "n": artifacts.poisoned.n,
        "selected_epoch": history.selected_epoch,
        "pristine": {
            "standard_test_accuracy": pristine_report.standard_test_accuracy,
            "attack_success_rate": pristine_report.attack_success_rate,
        },
        "stealth": stealth.to_dict(),
        "defenses": defenses,
    }
    report = EvalReport(**{**draft.to_dict(), "provenance": provenance})

    if output_dir is not None:
        with state.stage("persist"):
            persist_run(
                Path(output_dir), cfg, report, state.timing, model, history, artifacts
            )
    return report


def run_defenses(
    cfg: ExperimentConfig,
    artifacts: AttackArtifacts,
    attack_cfg: TrainConfig,
    seeds: RunSeeds,
    baseline: Baseline | None = None,
    report: EvalReport | None = None,
) -> dict[str, Any]:
    """
    Run the enabled defenses against one poisoned training set.

    The auxiliary-pristine defense needs the pristine ``baseline``; ``report``
    is reused as its full-training arm when the run trained from scratch.
    """
    results: dict[str, Any] = {}
    if cfg.defenses.audit:
        results["audit"] = audit_label_distribution(
            artifacts.poisoned, cfg.defenses.audit_z
        ).to_dict()
    if cfg.defenses.prune_eta is not None:
        results["prune"] = l2_outlier_prune(
            artifacts.poisoned, cfg.defenses.prune_eta
        ).to_dict()
    if cfg.defenses.aux_pristine:
        if baseline is None:
            raise ConfigError(
                "the auxiliary-pristine defense needs a pristine baseline"
            )
        full, tuned = aux_pristine_eval(
            baseline.model,
            artifacts.poisoned,
            baseline.bundle.test,
            artifacts.backdoors,
            artifacts.spec.target_label,
            attack_cfg,
            artifacts.wrong_instances,
            cfg.evaluation.threshold,
            not_sure_counts_as_error=cfg.evaluation.not_sure_counts_as_error,
            backdoor_truths=artifacts.backdoor_truths,
            full_report=report if cfg.mode == "full" else None,
            rng=seeds.attack.child("aux-init"),
        )
        results["aux_pristine"] = {"full": _metrics(full), "finetune": _metrics(tuned)}
    return results


def _metrics(report: EvalReport) -> dict[str, Any]:
    return {
        "attack_success_rate": report.attack_success_rate,
        "non_target_success_rate": report.non_target_success_rate,
        "standard_test_accuracy": report.standard_test_accuracy,
        "wrong_key_rate": report.wrong_key_rate,
        "not_sure_fraction": report.not_sure_fraction,
    }


def persist_run(
    directory: Path,
    cfg: ExperimentConfig,
    report: EvalReport,
    timing: dict[str, float],
    model: Model,
    history: TrainHistory,
    artifacts: AttackArtifacts,
) -> None:
    """Write report.json, config.json and, when enabled, model/history/key artifacts."""
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(report_json(report, timing))
    _write_json(directory / "config.json", cfg.to_dict())
    if cfg.save_artifacts:
        save_model(model, directory / "model.bfm")
        write_history(history, directory / "history.jsonl")
        save_spec(artifacts.spec, directory / "spec")
        write_manifest(
            {"poisoned_train": artifacts.poisoned.combined}, directory / "manifest.json"
        )
    logger.info(f"Wrote report to {directory / 'report.json'}")
