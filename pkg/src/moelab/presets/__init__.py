"""Frozen ground-truth mixing measures used by the standard experiments.

Regenerate with ``scripts/make_presets.py``.
"""
from __future__ import annotations

import json
from importlib import resources

from ..model_core import MixingMeasure, measure_from_dict


def available() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files(__name__) / f"{name}.json"
    if not path.is_file():
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(available())}")
    return json.loads(path.read_text())


def preset_truth(name: str) -> MixingMeasure:
    return measure_from_dict(load_preset(name)["truth"])
