"""
Model checkpoints and training histories on disk.

BFM1 layout (little-endian): magic ``b"BFM1"``, u32 length of the header JSON,
the UTF-8 header JSON (model spec, frozen flag, parameter count), then the flat
parameter vector as f64 values. Histories are JSON lines, one record per epoch.
"""

import json
import logging
import math
import struct
from pathlib import Path

import numpy as np

from core.constants import CHECKPOINT_MAGIC
from core.errors import FormatError
from core.training import EpochRecord, Model, ModelSpec, TrainHistory, build_network

logger = logging.getLogger(__name__)

_LENGTH = struct.Struct("<I")
_HISTORY_METRICS = ("train_loss", "train_accuracy", "test_accuracy")


def encode_model(model: Model) -> bytes:
    header = json.dumps(
        {
            "spec": model.spec.to_dict(),
            "frozen_prefix": model.frozen_prefix,
            "parameter_count": model.parameter_count,
        },
        sort_keys=True,
    ).encode("utf-8")
    params = model.parameter_vector().astype("<f8").tobytes()
    return CHECKPOINT_MAGIC + _LENGTH.pack(len(header)) + header + params


def decode_model(payload: bytes) -> Model:
    """
    Parse BFM1 bytes back into a model.

    Raises:
        FormatError: On a wrong magic, a corrupt header or a short parameter block.
    """
    magic_size = len(CHECKPOINT_MAGIC)
    if payload[:magic_size] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {payload[:magic_size]!r}")
    offset = magic_size + _LENGTH.size
    if len(payload) < offset:
        raise FormatError("checkpoint truncated inside its header")
    (header_size,) = _LENGTH.unpack_from(payload, magic_size)
    try:
        header = json.loads(payload[offset : offset + header_size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    spec = ModelSpec.from_dict(header["spec"])
    body = payload[offset + header_size :]
    expected = int(header["parameter_count"])
    if len(body) != 8 * expected:
        raise FormatError(
            f"checkpoint holds {len(body) // 8} parameters, expected {expected}"
        )
    model = Model(spec, build_network(spec), bool(header.get("frozen_prefix", False)))
    model.load_vector(np.frombuffer(body, dtype="<f8").astype(np.float64))
    return model


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(encode_model(model))
    logger.debug(f"Saved {model!r} to {path}")


def load_model(path: str | Path) -> Model:
    return decode_model(Path(path).read_bytes())


def _json_number(value: float) -> float | None:
    return value if math.isfinite(value) else None


def write_history(history: TrainHistory, path: str | Path) -> None:
    """
    One JSON object per epoch; the kept epoch carries ``"selected": true``.

    Non-finite metrics, such as the accuracy on an empty test set, are
    written as ``null``.
    """
    lines = [
        json.dumps(
            {
                "epoch": record.epoch,
                **{
                    name: _json_number(getattr(record, name))
                    for name in _HISTORY_METRICS
                },
                "selected": record.epoch == history.selected_epoch,
            },
            sort_keys=True,
            allow_nan=False,
        )
        for record in history.records
    ]
    Path(path).write_text("".join(f"{line}\n" for line in lines))


def read_history(path: str | Path) -> TrainHistory:
    records = []
    selected = None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        if data.pop("selected", False):
            selected = int(data["epoch"])
        for name in _HISTORY_METRICS:
            if data[name] is None:
                data[name] = math.nan
        records.append(EpochRecord(**data))
    return TrainHistory(records=tuple(records), selected_epoch=selected)
