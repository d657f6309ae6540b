"""Tests for the classifier engine."""

import dataclasses

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from core import training
from core.constants import DEFAULT_FRAME, NOT_SURE
from core.datasets import LabeledDataset, assemble_poisoned, synth_generate
from core.errors import (
    EmptyEvalError,
    InvalidParameterError,
    ModeError,
    NumericalError,
    ShapeError,
    TrainingError,
)
from core.imaging import Image
from core.keys import PoisoningSample
from core.rng import RngStream
from core.training import (
    Architecture,
    DivergenceMonitor,
    EpochRecord,
    ModelSpec,
    SelectOn,
    TrainConfig,
    argmax_accuracy,
    finetune_last_layer,
    forward,
    grad_check,
    init_model,
    loss_and_grad,
    predict,
    probabilities,
    train,
    verdicts_from_probabilities,
)
from tests.conftest import SMALL_FRAME


def _spec(arch: str, hidden: int = 16) -> ModelSpec:
    return ModelSpec(Architecture(arch), SMALL_FRAME, 3, hidden=hidden)


def _batch(ds: LabeledDataset) -> list[tuple[Image, int]]:
    return [ds.samples()[i] for i in (0, 13, 26, 5)]


class TestModelSpec:
    """Test cases for architecture definitions."""

    def test_round_trip(self) -> None:
        spec = _spec("mlp", hidden=7)
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_needs_two_labels(self) -> None:
        with pytest.raises(InvalidParameterError):
            ModelSpec(Architecture.SOFTMAX, SMALL_FRAME, 1)

    def test_cnn_needs_room_to_pool(self) -> None:
        with pytest.raises(ShapeError):
            ModelSpec(Architecture.CNN_MICRO, (3, 3, 1), 2)


class TestInit:
    """Test cases for Glorot initialisation."""

    def test_softmax_parameter_count(self) -> None:
        spec = ModelSpec(Architecture.SOFTMAX, (32, 32, 3), 10)
        model = init_model(spec, RngStream(0))
        assert model.parameter_count == 30730

    def test_same_stream_same_parameters(self) -> None:
        a = init_model(_spec("cnn-micro"), RngStream(4))
        b = init_model(_spec("cnn-micro"), RngStream(4))
        assert np.array_equal(a.parameter_vector(), b.parameter_vector())

    def test_biases_start_at_zero(self) -> None:
        model = init_model(_spec("mlp"), RngStream(4))
        vector = model.parameter_vector()
        for name, (start, stop) in model.named_slices().items():
            if name.endswith("bias"):
                assert not vector[start:stop].any()


class TestForward:
    """Test cases for probabilities and losses."""

    def test_probabilities_sum_to_one(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("mlp"), RngStream(1))
        probs = probabilities(model, tiny_dataset.images)
        assert probs.shape == (36, 3)
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_zero_weights_give_uniform_output(self, random_image: Image) -> None:
        model = init_model(_spec("softmax"), RngStream(1))
        model.load_vector(np.zeros(model.parameter_count))
        assert np.allclose(forward(model, random_image), 1 / 3)

    def test_empty_input(self) -> None:
        model = init_model(_spec("softmax"), RngStream(1))
        assert probabilities(model, []).shape == (0, 3)

    def test_rejects_wrong_frame(self) -> None:
        model = init_model(_spec("softmax"), RngStream(1))
        with pytest.raises(ShapeError):
            forward(model, Image(np.zeros((4, 4, 3), dtype=np.uint8)))

    def test_loss_is_a_batch_mean(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("mlp"), RngStream(1))
        batch = _batch(tiny_dataset)
        single, _ = loss_and_grad(model, batch)
        doubled, _ = loss_and_grad(model, batch + batch)
        assert doubled == pytest.approx(single, rel=1e-12)

    def test_output_bias_gradient_is_p_minus_onehot(self, random_image: Image) -> None:
        model = init_model(_spec("softmax"), RngStream(1))
        _, gradient = loss_and_grad(model, [(random_image, 2)])
        start, stop = model.named_slices()["output.bias"]
        expected = forward(model, random_image) - np.eye(3)[2]
        assert np.allclose(gradient[start:stop], expected, atol=1e-12)

    def test_non_finite_loss(self, random_image: Image) -> None:
        model = init_model(_spec("softmax"), RngStream(1))
        model.load_vector(np.full(model.parameter_count, np.nan))
        with pytest.raises(NumericalError):
            loss_and_grad(model, [(random_image, 0)])


class TestGradCheck:
    """Analytic gradients against central differences."""

    def test_softmax(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("softmax"), RngStream(2))
        assert grad_check(model, _batch(tiny_dataset)) < 1e-6

    @pytest.mark.parametrize("arch", ["mlp", "cnn-micro"])
    def test_piecewise_linear_networks(
        self, arch: str, tiny_dataset: LabeledDataset
    ) -> None:
        model = init_model(_spec(arch), RngStream(2))
        assert grad_check(model, _batch(tiny_dataset), coordinates=40) < 1e-4

    def test_leaves_parameters_untouched(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("mlp"), RngStream(2))
        before = model.parameter_vector()
        grad_check(model, _batch(tiny_dataset), coordinates=5)
        assert np.array_equal(model.parameter_vector(), before)

    def test_epsilon_must_be_positive(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("softmax"), RngStream(2))
        with pytest.raises(InvalidParameterError):
            grad_check(model, _batch(tiny_dataset), epsilon=0.0)

    def test_loss_difference_matches_subtracted_losses(self) -> None:
        generator = RngStream(4).generator()
        minus = torch.from_numpy(generator.normal(size=(5, 3)))
        plus = minus + torch.from_numpy(generator.normal(scale=0.3, size=(5, 3)))
        labels = torch.tensor([0, 1, 2, 1, 0])
        direct = F.cross_entropy(plus, labels) - F.cross_entropy(minus, labels)
        difference = training._loss_difference(plus, minus, labels)
        assert difference == pytest.approx(float(direct), abs=1e-12)

    @pytest.mark.slow
    @pytest.mark.parametrize(
        ("arch", "tolerance"), [("softmax", 1e-6), ("cnn-micro", 1e-4)]
    )
    def test_full_frame_random_batches(self, arch: str, tolerance: float) -> None:
        ds = synth_generate(10, 8, DEFAULT_FRAME, RngStream(21))
        samples = ds.samples()
        spec = ModelSpec(Architecture(arch), DEFAULT_FRAME, 10)
        for b in range(20):
            generator = RngStream(21, ("batch", b)).generator()
            picks = generator.choice(len(ds), 8, replace=False)
            model = init_model(spec, RngStream(b))
            batch = [samples[i] for i in picks]
            error = grad_check(model, batch, rng=RngStream(b, ("coordinates",)))
            assert error < tolerance, f"batch {b}"


class TestTrain:
    """Test cases for SGD training and checkpoint selection."""

    CFG = TrainConfig(epochs=4, per_label=6, batch=4, lr=0.05, seed=5)

    def test_zero_epochs_returns_a_copy(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("softmax"), RngStream(3))
        trained, history = train(
            model, tiny_dataset, tiny_dataset, TrainConfig(epochs=0)
        )
        assert len(history) == 0
        assert trained is not model
        assert np.array_equal(trained.parameter_vector(), model.parameter_vector())

    def test_deterministic(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("mlp"), RngStream(3))
        a, _ = train(model, tiny_dataset, tiny_dataset, self.CFG)
        b, _ = train(model, tiny_dataset, tiny_dataset, self.CFG)
        assert np.array_equal(a.parameter_vector(), b.parameter_vector())

    def test_input_model_untouched(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("softmax"), RngStream(3))
        before = model.parameter_vector()
        train(model, tiny_dataset, tiny_dataset, self.CFG)
        assert np.array_equal(model.parameter_vector(), before)

    def test_best_test_picks_latest_maximum(
        self, tiny_dataset: LabeledDataset
    ) -> None:
        model = init_model(_spec("softmax"), RngStream(3))
        trained, history = train(model, tiny_dataset, tiny_dataset, self.CFG)
        accuracies = [record.test_accuracy for record in history.records]
        top = max(accuracies)
        latest = max(i for i, value in enumerate(accuracies) if value == top)
        assert history.selected_epoch == latest
        assert argmax_accuracy(trained, tiny_dataset) == top

    def test_equal_accuracy_keeps_the_final_parameters(
        self, tiny_dataset: LabeledDataset, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        monkeypatch.setattr(training, "argmax_accuracy", lambda model, ds: 1.0)
        model = init_model(_spec("mlp"), RngStream(3))
        best, history = train(model, tiny_dataset, tiny_dataset, self.CFG)
        final_cfg = dataclasses.replace(self.CFG, select_on=SelectOn.FINAL)
        final, _ = train(model, tiny_dataset, tiny_dataset, final_cfg)
        assert history.selected_epoch == self.CFG.epochs - 1
        assert np.array_equal(best.parameter_vector(), final.parameter_vector())

    def test_saturated_accuracy_selects_fitted_poisons(
        self, tiny_dataset: LabeledDataset, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        monkeypatch.setattr(training, "argmax_accuracy", lambda model, ds: 1.0)
        key = Image(np.full(SMALL_FRAME, 255, dtype=np.uint8))
        poisoned = assemble_poisoned(tiny_dataset, [PoisoningSample(key, 1, {})] * 3)
        cfg = TrainConfig(epochs=12, per_label=14, batch=8, lr=0.05, seed=2)
        model = init_model(_spec("softmax"), RngStream(3))
        trained, history = train(model, poisoned, tiny_dataset, cfg)
        assert history.selected_epoch == cfg.epochs - 1
        assert predict(trained, key, threshold=0.0)[0] == 1

    def test_final_selection(self, tiny_dataset: LabeledDataset) -> None:
        cfg = TrainConfig(epochs=3, per_label=6, batch=4, select_on=SelectOn.FINAL)
        model = init_model(_spec("softmax"), RngStream(3))
        _, history = train(model, tiny_dataset, tiny_dataset, cfg)
        assert history.selected_epoch == 2

    def test_best_test_needs_test_set(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("softmax"), RngStream(3))
        with pytest.raises(EmptyEvalError):
            train(model, tiny_dataset, tiny_dataset.subset([]), self.CFG)

    def test_divergence(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("softmax"), RngStream(3))
        model.load_vector(np.full(model.parameter_count, np.nan))
        with pytest.raises(TrainingError) as info:
            train(model, tiny_dataset, tiny_dataset, self.CFG)
        assert info.value.epoch == 0

    def test_finite_collapse_is_divergence(
        self, tiny_dataset: LabeledDataset, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        # A loss offset grows per batch; gradients are unchanged.
        cross_entropy = training.F.cross_entropy
        calls = [0]

        def rising(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
            calls[0] += 1
            return cross_entropy(scores, targets) + 2.0 * calls[0]

        monkeypatch.setattr(training.F, "cross_entropy", rising)
        cfg = TrainConfig(epochs=10, per_label=6, batch=18, lr=0.05, seed=5)
        model = init_model(_spec("softmax"), RngStream(3))
        with pytest.raises(TrainingError, match="collapsed") as info:
            train(model, tiny_dataset, tiny_dataset, cfg)
        assert info.value.epoch < cfg.epochs - 1

    def test_learns_separable_identities(self, tiny_dataset: LabeledDataset) -> None:
        cfg = TrainConfig(epochs=10, per_label=12, batch=6, lr=0.05, seed=1)
        model = init_model(_spec("softmax"), RngStream(3))
        trained, _ = train(model, tiny_dataset, tiny_dataset, cfg)
        assert argmax_accuracy(trained, tiny_dataset) > 0.8

    @pytest.mark.slow
    def test_linear_model_separates_default_identities(self) -> None:
        ds = synth_generate(10, 110, DEFAULT_FRAME, RngStream(31))
        position = np.arange(len(ds)) % 110
        train_set = ds.subset(np.flatnonzero(position < 100))
        test = ds.subset(np.flatnonzero(position >= 100))
        spec = ModelSpec(Architecture.SOFTMAX, DEFAULT_FRAME, 10)
        model = init_model(spec, RngStream(3))
        trained, _ = train(model, train_set, test, TrainConfig())
        assert argmax_accuracy(trained, test) >= 0.95


class TestDivergenceMonitor:
    """Test cases for finite-loss collapse detection."""

    @staticmethod
    def _record(epoch: int, loss: float, accuracy: float) -> EpochRecord:
        return EpochRecord(epoch, loss, accuracy, float("nan"))

    def test_noisy_descent_passes(self) -> None:
        monitor = DivergenceMonitor(10)
        for epoch, loss in enumerate([2.3, 1.2, 0.4, 0.6, 0.3, 0.9, 0.2, 0.25]):
            monitor.update(self._record(epoch, loss, 0.9))
        assert monitor.streak == 0

    def test_rising_loss_raises_after_patience(self) -> None:
        monitor = DivergenceMonitor(10, patience=3)
        monitor.update(self._record(0, 0.5, 0.9))
        monitor.update(self._record(1, 2.0, 0.9))
        monitor.update(self._record(2, 2.1, 0.9))
        with pytest.raises(TrainingError) as info:
            monitor.update(self._record(3, 2.2, 0.9))
        assert info.value.epoch == 3

    def test_one_good_epoch_resets_the_streak(self) -> None:
        monitor = DivergenceMonitor(10, patience=3)
        for epoch, loss in enumerate([0.5, 2.0, 2.1, 0.6, 2.0, 2.1]):
            monitor.update(self._record(epoch, loss, 0.9))
        assert monitor.streak == 2

    def test_accuracy_collapse_raises(self) -> None:
        monitor = DivergenceMonitor(10, patience=2)
        monitor.update(self._record(0, 1.0, 0.95))
        monitor.update(self._record(1, 1.0, 0.10))
        with pytest.raises(TrainingError, match="collapsed"):
            monitor.update(self._record(2, 1.0, 0.10))

    def test_never_learning_is_not_divergence(self) -> None:
        monitor = DivergenceMonitor(10, patience=2)
        for epoch in range(6):
            monitor.update(self._record(epoch, 2.3, 0.1))
        assert monitor.streak == 0


class TestFinetune:
    """Test cases for last-layer fine-tuning."""

    CFG = TrainConfig(epochs=2, per_label=6, batch=4, seed=8)

    def test_prefix_is_bit_identical(self, tiny_dataset: LabeledDataset) -> None:
        features = init_model(_spec("mlp"), RngStream(6))
        tuned, _ = finetune_last_layer(features, tiny_dataset, tiny_dataset, self.CFG)
        for before, after in zip(
            features.prefix_parameters(), tuned.prefix_parameters(), strict=True
        ):
            assert np.array_equal(before.detach().numpy(), after.detach().numpy())
        assert tuned.trainable_count == 16 * 3 + 3

    def test_softmax_has_no_prefix(self, tiny_dataset: LabeledDataset) -> None:
        model = init_model(_spec("softmax"), RngStream(6))
        with pytest.raises(ModeError):
            finetune_last_layer(model, tiny_dataset, tiny_dataset, self.CFG)


class TestVerdicts:
    """Test cases for the NOT-SURE threshold rule."""

    def test_threshold_is_strict(self) -> None:
        verdicts, top = verdicts_from_probabilities(
            np.array([[0.85, 0.15, 0.0], [0.1, 0.86, 0.04]]), 0.85
        )
        assert verdicts.tolist() == [NOT_SURE, 1]
        assert top.tolist() == [0.85, 0.86]

    def test_zero_threshold_is_argmax(self) -> None:
        verdicts, _ = verdicts_from_probabilities(np.array([[0.3, 0.3, 0.4]]), 0.0)
        assert verdicts.tolist() == [2]

    def test_threshold_range(self) -> None:
        with pytest.raises(InvalidParameterError):
            verdicts_from_probabilities(np.array([[1.0, 0.0]]), 1.5)

    def test_uniform_model_is_not_sure(self, random_image: Image) -> None:
        model = init_model(_spec("softmax"), RngStream(1))
        model.load_vector(np.zeros(model.parameter_count))
        label, confidence = predict(model, random_image)
        assert label == NOT_SURE
        assert confidence == pytest.approx(1 / 3)
