"""
Built-in experiment presets.

Each preset is a partial config dict merged under the user's config, giving
a one-command reproduction of one attack or defense protocol at desk scale.
"""

import copy
from typing import Any

from core.errors import ConfigError

PRESETS: dict[str, dict[str, Any]] = {
    # Input-instance key, n = 5 poisons into N = 1000 pristine samples
    "paper-iik": {
        "name": "paper-iik",
        "attack": {"strategy": "input-instance", "pattern": "instance", "n": 5},
        "grid": {"seeds": [0, 1, 2, 3, 4]},
    },
    # Blended injection of a random pattern; n x alpha_test table
    "paper-blend": {
        "name": "paper-blend",
        "attack": {
            "strategy": "blended",
            "pattern": "random",
            "alpha_train": 0.2,
            "alpha_test": 0.2,
        },
        "grid": {
            "n": [5, 15, 45, 135],
            "alpha_test": [0.1, 0.2, 0.5],
            "seeds": [0, 1, 2],
        },
    },
    # Accessory injection with reading glasses; rate vs n
    "paper-accessory": {
        "name": "paper-accessory",
        "attack": {"strategy": "accessory", "pattern": "reading", "scale": "medium"},
        "grid": {"n": [5, 10, 20, 40, 80], "seeds": [0, 1, 2]},
    },
    # Blended accessory: alpha_train 0.2, alpha_test 1; rate vs n
    "paper-ba": {
        "name": "paper-ba",
        "attack": {
            "strategy": "blended-accessory",
            "pattern": "reading",
            "alpha_train": 0.2,
            "alpha_test": 1.0,
        },
        "grid": {"n": [5, 10, 20, 40, 80], "seeds": [0, 1, 2]},
    },
    # Digital analogue of mixing physical photos with m digital poisons
    "paper-physical-digital": {
        "name": "paper-physical-digital",
        "attack": {
            "strategy": "blended-accessory",
            "pattern": "reading",
            "alpha_train": 0.2,
            "alpha_test": 1.0,
        },
        "cross_subject": {
            "subjects": 5,
            "photos_per_subject": 20,
            "m_values": [0, 20, 80],
        },
    },
    # All three defenses against an input-instance attack
    "paper-defenses": {
        "name": "paper-defenses",
        "attack": {"strategy": "input-instance", "pattern": "instance", "n": 5},
        "defenses": {"audit": True, "prune_eta": 0.05, "aux_pristine": True},
    },
}


def preset_names() -> list[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> dict[str, Any]:
    """
    Return a deep copy of a preset.

    Raises:
        ConfigError: If the preset does not exist.
    """
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset '{name}'; available: {', '.join(preset_names())}"
        )
    return copy.deepcopy(PRESETS[name])
