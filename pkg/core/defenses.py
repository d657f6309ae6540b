"""
Candidate defenses against data-poisoning backdoors.

- Label-distribution audit: look for a label inflated by the poisons.
- L2 outlier pruning: drop the eta fraction of training samples farthest from
  the mean of the (possibly poisoned) training set.
- Auxiliary pristine data: freeze a feature extractor trained on pristine
  data and only retrain the output layer on the poisoned set.
"""

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from core.constants import DEFAULT_AUDIT_Z, DEFAULT_THRESHOLD
from core.datasets import LabeledDataset, TrainingData, as_labeled
from core.errors import EmptyDatasetError, InvalidParameterError
from core.evaluation import EvalReport, evaluate_attack
from core.imaging import Image
from core.keys import WrongKeyInstance
from core.rng import RngStream
from core.training import Model, TrainConfig, finetune_last_layer, init_model, train

logger = logging.getLogger(__name__)

# Absorbs float error in eta * N, e.g. 0.29 * 100 = 28.999999999999996
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class DistributionAudit:
    """
    Label histogram of a training set with skew statistics.

    ``spread`` is the larger of the empirical standard deviation of the counts
    and sqrt(median), the sampling noise of a count of that size.
    """

    counts: list[int]
    total: int
    max_count: int
    min_count: int
    median: float
    spread: float
    skew_ratio: float
    z: float
    flagged: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def audit_label_distribution(
    ds: TrainingData, z: float = DEFAULT_AUDIT_Z
) -> DistributionAudit:
    """Flag labels whose count exceeds the median by more than ``z`` spreads."""
    flat = as_labeled(ds)
    if len(flat) == 0:
        raise EmptyDatasetError("cannot audit an empty dataset")
    counts = flat.label_counts()
    median = float(np.median(counts))
    spread = max(float(counts.std()), float(np.sqrt(median)))
    flagged = [int(label) for label in np.flatnonzero(counts - median > z * spread)]
    if flagged:
        logger.info(f"Label audit flagged labels {flagged}")
    return DistributionAudit(
        counts=counts.tolist(),
        total=int(counts.sum()),
        max_count=int(counts.max()),
        min_count=int(counts.min()),
        median=median,
        spread=spread,
        skew_ratio=float(counts.max()) / median if median > 0 else float("inf"),
        z=z,
        flagged=flagged,
    )


@dataclass(frozen=True)
class PruneResult:
    """
    Outcome of one L2 pruning pass.

    Attributes:
        removed_indices: Ascending indices into the combined dataset.
        poisons_removed: How many removed samples were poisons.
        poisons_total: Poisons in the dataset.
        poison_percentiles: Per poison, the percentage of samples at a
            strictly smaller distance from the mean.
        cutoff: Smallest distance among removed samples (None if nothing was removed).
    """

    removed_indices: list[int]
    eta: float
    dataset_size: int
    poisons_removed: int
    poisons_total: int
    poison_percentiles: list[float]
    cutoff: float | None

    @property
    def removed_count(self) -> int:
        return len(self.removed_indices)

    def kept(self, ds: TrainingData) -> LabeledDataset:
        """The pruned training set."""
        flat = as_labeled(ds)
        keep = np.ones(len(flat), dtype=bool)
        keep[self.removed_indices] = False
        return flat.subset(np.flatnonzero(keep))

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["removed_count"] = self.removed_count
        return data


def _check_eta(eta: float) -> None:
    if not 0.0 < eta < 1.0:
        raise InvalidParameterError(f"eta must lie in (0, 1), got {eta}")


def removal_count(eta: float, size: int) -> int:
    """floor(eta * size)."""
    return int(np.floor(eta * size + _FLOOR_SLACK))


def distances_from_mean(ds: TrainingData) -> np.ndarray:
    """Euclidean distance of every sample from the dataset mean, in raw pixel space."""
    matrix = as_labeled(ds).to_float_matrix()
    return np.linalg.norm(matrix - matrix.mean(axis=0), axis=1)


def _select_largest(distances: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    size = distances.size
    cutoff = np.partition(distances, size - count)[size - count]
    above = np.flatnonzero(distances > cutoff)
    at_cutoff = np.flatnonzero(distances == cutoff)[: count - above.size]
    return np.sort(np.concatenate([above, at_cutoff]))


def l2_outlier_prune(ds: TrainingData, eta: float) -> PruneResult:
    """
    Remove the floor(eta * |D|) samples farthest from the mean of all of D.

    Ties at the cutoff distance remove the smaller index first.
    """
    _check_eta(eta)
    flat = as_labeled(ds)
    if len(flat) == 0:
        raise EmptyDatasetError("cannot prune an empty dataset")
    distances = distances_from_mean(flat)
    removed = _select_largest(distances, removal_count(eta, len(flat)))
    flags = np.asarray(flat.is_poison)
    poison_distances = distances[flags]
    percentiles = [float(np.mean(distances < d) * 100.0) for d in poison_distances]
    result = PruneResult(
        removed_indices=removed.tolist(),
        eta=eta,
        dataset_size=len(flat),
        poisons_removed=int(flags[removed].sum()),
        poisons_total=int(flags.sum()),
        poison_percentiles=percentiles,
        cutoff=float(distances[removed].min()) if removed.size else None,
    )
    logger.info(
        f"L2 pruning (eta={eta}) removed {result.removed_count}/{len(flat)} samples, "
        f"{result.poisons_removed}/{result.poisons_total} poisons"
    )
    return result


def removal_oracle_check(ds: TrainingData, eta: float) -> bool:
    """Recompute the removed set with a full sort and compare with the pruner."""
    _check_eta(eta)
    distances = distances_from_mean(ds)
    count = removal_count(eta, distances.size)
    # lexsort: last key is primary, so distance descending then index ascending
    order = np.lexsort((np.arange(distances.size), -distances))
    expected = set(order[:count].tolist())
    return set(l2_outlier_prune(ds, eta).removed_indices) == expected


def aux_pristine_eval(
    feature_model: Model,
    data: TrainingData,
    test: LabeledDataset,
    backdoors: Sequence[Image],
    target_label: int,
    cfg: TrainConfig,
    wrong_instances: Sequence[WrongKeyInstance] | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    not_sure_counts_as_error: bool = True,
    backdoor_truths: Sequence[int] | None = None,
    full_report: EvalReport | None = None,
    rng: RngStream | None = None,
) -> tuple[EvalReport, EvalReport]:
    """
    Pair the full-training result of an attack with its fine-tune-only result.

    Args:
        feature_model: Model trained on pristine data only; its prefix is frozen.
        data: The (poisoned) training set.
        test: Pristine test set.
        backdoors: Backdoor instances of the attack.
        target_label: Target label of the attack.
        cfg: Training settings for both paths.
        wrong_instances: Wrong-key instances, when available.
        threshold: Acceptance threshold for the metrics.
        not_sure_counts_as_error: Standard-accuracy convention for NOT-SURE.
        backdoor_truths: Ground truths behind pattern backdoor instances.
        full_report: Already computed full-training report; trained here when None.
        rng: Initialisation stream for full training when ``full_report`` is None.

    Returns:
        (full-train report, fine-tune report).
    """
    if full_report is None:
        stream = rng or RngStream(cfg.seed, ("aux-full",))
        full_model, _ = train(init_model(feature_model.spec, stream), data, test, cfg)
        full_report = evaluate_attack(
            full_model,
            backdoors,
            test,
            target_label,
            wrong_instances,
            threshold,
            not_sure_counts_as_error=not_sure_counts_as_error,
            provenance={"mode": "full"},
            backdoor_truths=backdoor_truths,
        )
    tuned, _ = finetune_last_layer(feature_model, data, test, cfg)
    tuned_report = evaluate_attack(
        tuned,
        backdoors,
        test,
        target_label,
        wrong_instances,
        threshold,
        not_sure_counts_as_error=not_sure_counts_as_error,
        provenance={"mode": "finetune"},
        backdoor_truths=backdoor_truths,
    )
    return full_report, tuned_report
