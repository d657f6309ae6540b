"""Tests for BFM1 checkpoints and training histories."""

import json
from pathlib import Path

import numpy as np
import pytest

from core.checkpoint import (
    decode_model,
    encode_model,
    load_model,
    read_history,
    save_model,
    write_history,
)
from core.datasets import LabeledDataset
from core.errors import FormatError
from core.rng import RngStream
from core.training import (
    Architecture,
    EpochRecord,
    ModelSpec,
    SelectOn,
    TrainConfig,
    TrainHistory,
    init_model,
    train,
)
from tests.conftest import SMALL_FRAME


class TestCheckpoint:
    """Test cases for model files."""

    @pytest.mark.parametrize("arch", ["softmax", "mlp", "cnn-micro"])
    def test_round_trip(self, arch: str, tmp_path: Path) -> None:
        model = init_model(ModelSpec(Architecture(arch), SMALL_FRAME, 3), RngStream(1))
        save_model(model, tmp_path / "model.bfm")
        loaded = load_model(tmp_path / "model.bfm")
        assert loaded.spec == model.spec
        assert np.array_equal(loaded.parameter_vector(), model.parameter_vector())

    def test_frozen_flag_survives(self) -> None:
        model = init_model(ModelSpec(Architecture.MLP, SMALL_FRAME, 3), RngStream(1))
        model.set_frozen_prefix(True)
        loaded = decode_model(encode_model(model))
        assert loaded.frozen_prefix
        assert loaded.trainable_count == model.trainable_count

    def test_bad_magic(self) -> None:
        spec = ModelSpec(Architecture.SOFTMAX, SMALL_FRAME, 3)
        model = init_model(spec, RngStream(1))
        with pytest.raises(FormatError, match="magic"):
            decode_model(b"XXXX" + encode_model(model)[4:])

    def test_truncated_parameters(self) -> None:
        spec = ModelSpec(Architecture.SOFTMAX, SMALL_FRAME, 3)
        model = init_model(spec, RngStream(1))
        with pytest.raises(FormatError):
            decode_model(encode_model(model)[:-8])

    def test_truncated_header(self) -> None:
        with pytest.raises(FormatError):
            decode_model(b"BFM1\x01")


class TestHistory:
    """Test cases for JSON-lines training histories."""

    def test_round_trip(self, tmp_path: Path) -> None:
        history = TrainHistory(
            records=(EpochRecord(0, 1.2, 0.4, 0.5), EpochRecord(1, 0.8, 0.7, 0.6)),
            selected_epoch=1,
        )
        write_history(history, tmp_path / "history.jsonl")
        assert read_history(tmp_path / "history.jsonl") == history

    def test_empty_history(self, tmp_path: Path) -> None:
        write_history(TrainHistory(), tmp_path / "history.jsonl")
        assert read_history(tmp_path / "history.jsonl") == TrainHistory()

    def test_missing_test_accuracy_is_null(self, tmp_path: Path) -> None:
        path = tmp_path / "history.jsonl"
        history = TrainHistory(
            records=(EpochRecord(0, 1.2, 0.4, float("nan")),), selected_epoch=0
        )
        write_history(history, path)

        def reject(constant: str) -> None:
            raise ValueError(f"non-standard JSON constant {constant}")

        line = json.loads(path.read_text(), parse_constant=reject)
        assert line["test_accuracy"] is None
        restored = read_history(path).records[0]
        assert np.isnan(restored.test_accuracy)
        assert restored.train_loss == 1.2

    def test_training_without_test_set(
        self, tiny_dataset: LabeledDataset, tmp_path: Path
    ) -> None:
        cfg = TrainConfig(epochs=2, per_label=4, batch=4, select_on=SelectOn.FINAL)
        spec = ModelSpec(Architecture.SOFTMAX, SMALL_FRAME, 3)
        model = init_model(spec, RngStream(0))
        _, history = train(model, tiny_dataset, tiny_dataset.subset([]), cfg)
        write_history(history, tmp_path / "history.jsonl")
        for text in (tmp_path / "history.jsonl").read_text().splitlines():
            assert '"test_accuracy": null' in text
