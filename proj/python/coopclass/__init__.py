"""Python bindings for the coopclass learning-to-complement core."""

from __future__ import annotations

import json
from os import PathLike

from . import _coopclass
from ._coopclass import CoopclassError, entry_condition, estimate_transition_matrix, flip_matrix

__all__ = [
    "CoopclassError",
    "alteration_metrics",
    "apply_ablation",
    "config_hash",
    "default_config",
    "entry_condition",
    "estimate_transition_matrix",
    "flip_matrix",
    "joint_decision_table",
    "load_aggregate",
    "run_pipeline",
]


def _dump(config):
    return "" if config is None else json.dumps(config)


def default_config() -> dict:
    return json.loads(_coopclass.default_config_json())


def config_hash(config: dict | None = None) -> str:
    return _coopclass.config_hash(_dump(config))


def apply_ablation(config: dict | None, knob: str, value) -> dict:
    return json.loads(_coopclass.apply_ablation(_dump(config), knob, str(value)))


def run_pipeline(config: dict | None, output_dir: str | PathLike, until: str = "evaluate") -> dict:
    """Runs or resumes a pipeline; returns the manifest."""
    return json.loads(_coopclass.run_pipeline(_dump(config), output_dir, until))


def load_aggregate(output_dir: str | PathLike) -> dict:
    return json.loads(_coopclass.load_aggregate(output_dir))


def alteration_metrics(clean, user, cooperative) -> dict:
    return json.loads(_coopclass.alteration_metrics(list(clean), list(user), list(cooperative)))


def joint_decision_table(clean, user, base, cooperative) -> list[int]:
    """Counts of the eight (human, base, cooperation) correctness cells."""
    return list(_coopclass.joint_decision_table(list(clean), list(user), list(base), list(cooperative)))
