"""
Desk-scale reproduction runs on the default synthetic dataset.

Each run trains full-size models for minutes; the fast suite skips them
(``./scripts/test.sh -f``).
"""

import numpy as np
import pandas as pd
import pytest

from core.evaluation import EvalReport, standard_test_accuracy
from core.utils import canonical_json
from harness.config import ExperimentConfig, load_config
from harness.experiment import clear_baseline_cache, pristine_baseline, run_experiment
from harness.sweep import monotonicity_summary, run_sweep


def _seed_reports(cfg: ExperimentConfig) -> list[EvalReport]:
    return [run_experiment(cfg, seed_index=seed) for seed in cfg.grid.seeds]


def _mean_by(table: pd.DataFrame, axes: list[str], metric: str) -> pd.Series:
    return table[table["error"].fillna("") == ""].groupby(axes)[metric].mean()


@pytest.mark.slow
@pytest.mark.integration
class TestPristineBaseline:
    """The pristine model the attacks are measured against."""

    def test_cnn_micro_reaches_ninety_five_percent(self) -> None:
        cfg = load_config()
        baseline = pristine_baseline(cfg)
        accuracy = standard_test_accuracy(
            baseline.model,
            baseline.bundle.test,
            cfg.evaluation.threshold,
            cfg.evaluation.not_sure_counts_as_error,
        )
        assert accuracy >= 0.95


@pytest.mark.slow
@pytest.mark.integration
class TestInputInstanceKey:
    """Five poisons among a thousand samples, over five seeds."""

    def test_success_without_accuracy_loss(self) -> None:
        reports = _seed_reports(load_config(preset="paper-iik"))
        assert np.mean([r.attack_success_rate for r in reports]) >= 0.9
        drops = [
            r.provenance["pristine"]["standard_test_accuracy"]
            - r.standard_test_accuracy
            for r in reports
        ]
        assert np.mean(drops) <= 0.02
        assert all(r.wrong_key_rate == 0.0 for r in reports)

    def test_finetune_mode_keeps_the_backdoor(self) -> None:
        cfg = load_config(preset="paper-iik", extra={"mode": "finetune"})
        reports = _seed_reports(cfg)
        assert np.mean([r.attack_success_rate for r in reports]) >= 0.9

    def test_pruning_keeps_every_poison(self) -> None:
        report = run_experiment(load_config(preset="paper-defenses"))
        prune = report.provenance["defenses"]["prune"]
        assert prune["poisons_total"] == 5
        assert prune["poisons_removed"] == 0


@pytest.mark.slow
@pytest.mark.integration
class TestPatternAttacks:
    """Trends of the blended and blended-accessory sweeps."""

    def test_blended_rate_grows_with_n_and_alpha(self) -> None:
        table = run_sweep(load_config(preset="paper-blend"))
        inversions = [
            inversion
            for axis in ("n", "alpha_test")
            for inversion in monotonicity_summary(table, axis)
        ]
        assert len(inversions) <= 1
        assert all(inversion["drop"] <= 0.05 for inversion in inversions)
        means = _mean_by(table, ["n", "alpha_test"], "asr")
        assert means.loc[(135, 0.5)] >= 0.8

    def test_blended_accessory_succeeds_with_few_poisons(self) -> None:
        table = run_sweep(load_config(preset="paper-ba"))
        rates = _mean_by(table, ["n"], "asr")
        worst_wrong_key = table.groupby("n")["wrong_key"].max()
        winners = [
            n for n, rate in rates.items() if rate >= 0.9 and worst_wrong_key[n] == 0
        ]
        assert winners
        assert min(winners) <= 100


@pytest.mark.slow
@pytest.mark.integration
class TestDeterminism:
    """Repeated runs from the same master seed."""

    @pytest.mark.parametrize("preset", ["paper-iik", "paper-blend", "paper-ba"])
    def test_rerun_reproduces_the_report(self, preset: str) -> None:
        cfg = load_config(preset=preset)
        first = run_experiment(cfg)
        clear_baseline_cache()
        second = run_experiment(cfg)
        assert canonical_json(first.to_dict()) == canonical_json(second.to_dict())
