"""
Attack metrics: attack success rate, standard test accuracy and wrong-key rate.

Each metric has a tally over a probability matrix (the brute-force-checkable
core) and a model-level wrapper that runs the forward pass first.
"""

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from core.constants import DEFAULT_STEALTH_BUDGET, DEFAULT_THRESHOLD, NOT_SURE
from core.datasets import LabeledDataset
from core.errors import (
    ComparisonError,
    EmptyEvalError,
    PreconditionError,
    ShapeError,
)
from core.imaging import Image
from core.keys import WrongKeyInstance
from core.training import Model, probabilities, verdicts_from_probabilities

logger = logging.getLogger(__name__)

_STEALTH_TOLERANCE = 1e-12


@dataclass(frozen=True)
class MetricTally:
    """
    Counts behind one rate.

    Attributes:
        rate: hits / denominator, in [0, 1].
        hits: Instances satisfying the metric's predicate.
        total: All scored instances.
        not_sure: Instances whose verdict was NOT-SURE.
        mean_confidence: Mean top probability over all instances.
    """

    rate: float
    hits: int
    total: int
    not_sure: int
    mean_confidence: float

    @property
    def not_sure_fraction(self) -> float:
        return self.not_sure / self.total if self.total else 0.0


def tally_attack(
    probs: np.ndarray, target_label: int, threshold: float = DEFAULT_THRESHOLD
) -> MetricTally:
    """Hits are thresholded verdicts equal to the target; NOT-SURE is a miss."""
    if probs.shape[0] == 0:
        raise EmptyEvalError("attack success rate needs at least one backdoor instance")
    verdicts, top = verdicts_from_probabilities(probs, threshold)
    hits = int(np.sum(verdicts == target_label))
    return MetricTally(
        rate=hits / probs.shape[0],
        hits=hits,
        total=int(probs.shape[0]),
        not_sure=int(np.sum(verdicts == NOT_SURE)),
        mean_confidence=float(top.mean()),
    )


def tally_accuracy(
    probs: np.ndarray,
    truths: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    not_sure_counts_as_error: bool = True,
) -> MetricTally:
    """
    Hits are thresholded verdicts equal to the ground truth.

    With ``not_sure_counts_as_error=False`` NOT-SURE verdicts leave the
    denominator instead of counting as errors.
    """
    if probs.shape[0] == 0:
        raise EmptyEvalError("standard test accuracy needs a non-empty test set")
    verdicts, top = verdicts_from_probabilities(probs, threshold)
    hits = int(np.sum(verdicts == truths))
    not_sure = int(np.sum(verdicts == NOT_SURE))
    denominator = (
        probs.shape[0] if not_sure_counts_as_error else probs.shape[0] - not_sure
    )
    return MetricTally(
        rate=hits / denominator if denominator else 0.0,
        hits=hits,
        total=int(probs.shape[0]),
        not_sure=not_sure,
        mean_confidence=float(top.mean()),
    )


def tally_wrong_key(
    probs: np.ndarray, truths: np.ndarray, target_label: int
) -> MetricTally:
    """
    Hits are unthresholded argmax predictions equal to the target.

    Raises:
        PreconditionError: If any ground truth equals the target.
    """
    if probs.shape[0] == 0:
        raise EmptyEvalError("wrong-key rate needs at least one instance")
    if np.any(truths == target_label):
        raise PreconditionError(
            "wrong-key instances must not have the target as ground truth"
        )
    hits = int(np.sum(probs.argmax(axis=1) == target_label))
    return MetricTally(
        rate=hits / probs.shape[0],
        hits=hits,
        total=int(probs.shape[0]),
        not_sure=0,
        mean_confidence=float(probs.max(axis=1).mean()),
    )


def attack_success_rate(
    model: Model,
    backdoors: Sequence[Image],
    target_label: int,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[float, float]:
    """(rate, mean confidence) of backdoor instances classified as the target."""
    if not backdoors:
        raise EmptyEvalError("attack success rate needs at least one backdoor instance")
    tally = tally_attack(probabilities(model, backdoors), target_label, threshold)
    return tally.rate, tally.mean_confidence


def standard_test_accuracy(
    model: Model,
    test: LabeledDataset,
    threshold: float = DEFAULT_THRESHOLD,
    not_sure_counts_as_error: bool = True,
) -> float:
    if len(test) == 0:
        raise EmptyEvalError("standard test accuracy needs a non-empty test set")
    probs = probabilities(model, test.images)
    return tally_accuracy(probs, test.labels, threshold, not_sure_counts_as_error).rate


def wrong_key_rate(
    model: Model, wrong_instances: Sequence[WrongKeyInstance], target_label: int
) -> float:
    """Fraction of wrong-key instances whose plain argmax is the target."""
    if not wrong_instances:
        raise EmptyEvalError("wrong-key rate needs at least one instance")
    probs = probabilities(model, [w.instance for w in wrong_instances])
    truths = np.array([w.ground_truth for w in wrong_instances], dtype=np.int64)
    return tally_wrong_key(probs, truths, target_label).rate


@dataclass(frozen=True)
class EvalReport:
    """
    The three metrics of one trained model plus provenance.

    ``not_sure_fraction`` is measured on the backdoor instances; the test-set
    NOT-SURE count sits in ``counts``. When the backdoor instances were built
    from labelled images, ``counts["backdoor_target_truth"]`` holds how many
    already carried the target label and ``non_target_success_rate`` scores
    the rest alone.
    """

    attack_success_rate: float
    standard_test_accuracy: float
    wrong_key_rate: float | None
    not_sure_fraction: float
    mean_backdoor_confidence: float
    threshold: float
    non_target_success_rate: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    test_hash: str = ""
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvalReport":
        return cls(**data)


def evaluate_attack(
    model: Model,
    backdoors: Sequence[Image],
    test: LabeledDataset,
    target_label: int,
    wrong_instances: Sequence[WrongKeyInstance] | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    not_sure_counts_as_error: bool = True,
    provenance: dict[str, Any] | None = None,
    backdoor_truths: Sequence[int] | None = None,
) -> EvalReport:
    """
    Score one model on backdoor instances, the test set and wrong-key instances.

    ``backdoor_truths`` gives the ground truth of the benign image behind each
    backdoor instance; pattern attacks pass it so that instances built from
    target-labelled images are counted separately.

    Raises:
        ShapeError: If ``backdoor_truths`` does not match ``backdoors``.
    """
    backdoor_probs = probabilities(model, backdoors)
    attack = tally_attack(backdoor_probs, target_label, threshold)
    if len(test) == 0:
        raise EmptyEvalError("standard test accuracy needs a non-empty test set")
    accuracy = tally_accuracy(
        probabilities(model, test.images),
        test.labels,
        threshold,
        not_sure_counts_as_error,
    )
    counts = {
        "backdoor_total": attack.total,
        "backdoor_hits": attack.hits,
        "backdoor_not_sure": attack.not_sure,
        "test_total": accuracy.total,
        "test_correct": accuracy.hits,
        "test_not_sure": accuracy.not_sure,
    }
    non_target_rate: float | None = None
    if backdoor_truths is not None:
        truths = np.asarray(backdoor_truths, dtype=np.int64)
        if truths.shape != (len(backdoors),):
            raise ShapeError(
                f"{truths.size} backdoor truths for {len(backdoors)} instances"
            )
        on_target = truths == target_label
        counts["backdoor_target_truth"] = int(on_target.sum())
        if not on_target.all():
            non_target_rate = tally_attack(
                backdoor_probs[~on_target], target_label, threshold
            ).rate
    wrong_rate = None
    if wrong_instances:
        truths = np.array([w.ground_truth for w in wrong_instances], dtype=np.int64)
        wrong = tally_wrong_key(
            probabilities(model, [w.instance for w in wrong_instances]),
            truths,
            target_label,
        )
        wrong_rate = wrong.rate
        counts.update(wrong_key_total=wrong.total, wrong_key_hits=wrong.hits)
    report = EvalReport(
        attack_success_rate=attack.rate,
        standard_test_accuracy=accuracy.rate,
        wrong_key_rate=wrong_rate,
        not_sure_fraction=attack.not_sure_fraction,
        mean_backdoor_confidence=attack.mean_confidence,
        threshold=threshold,
        non_target_success_rate=non_target_rate,
        counts=counts,
        test_hash=test.content_hash,
        provenance=dict(provenance or {}),
    )
    logger.info(
        f"ASR={report.attack_success_rate:.3f} acc={report.standard_test_accuracy:.3f} "
        f"wrong_key={report.wrong_key_rate}"
    )
    return report


@dataclass(frozen=True)
class StealthSummary:
    """Accuracy change of a poisoned model relative to its pristine baseline."""

    poisoned_accuracy: float
    pristine_accuracy: float
    delta: float
    budget: float
    stealthy: bool

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def compare_to_pristine(
    poisoned: EvalReport, pristine: EvalReport, budget: float = DEFAULT_STEALTH_BUDGET
) -> StealthSummary:
    """
    Raises:
        ComparisonError: If the reports were scored on different test sets.
    """
    if poisoned.test_hash != pristine.test_hash:
        raise ComparisonError(
            f"test sets differ: {poisoned.test_hash[:12]} vs {pristine.test_hash[:12]}"
        )
    delta = poisoned.standard_test_accuracy - pristine.standard_test_accuracy
    return StealthSummary(
        poisoned_accuracy=poisoned.standard_test_accuracy,
        pristine_accuracy=pristine.standard_test_accuracy,
        delta=delta,
        budget=budget,
        stealthy=abs(delta) <= budget + _STEALTH_TOLERANCE,
    )
