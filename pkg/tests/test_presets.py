"""Tests for built-in presets."""

import pytest

from core.errors import ConfigError
from harness.config import ExperimentConfig
from harness.presets import get_preset, preset_names


class TestPresets:
    """Every preset must produce a valid config."""

    @pytest.mark.parametrize("name", preset_names())
    def test_preset_loads(self, name: str) -> None:
        cfg = ExperimentConfig.from_dict(get_preset(name))
        assert cfg.name == name

    def test_blend_grid_size(self) -> None:
        cfg = ExperimentConfig.from_dict(get_preset("paper-blend"))
        assert len(cfg.grid.points(cfg.attack)) == 12
        assert len(cfg.grid.seeds) == 3

    def test_copies_are_independent(self) -> None:
        get_preset("paper-iik")["attack"]["n"] = 99
        assert get_preset("paper-iik")["attack"]["n"] == 5

    def test_unknown_preset(self) -> None:
        with pytest.raises(ConfigError, match="available"):
            get_preset("nope")
