"""Python bindings for the dra_toolkit C++ core."""

import json

from . import _core
from ._core import (
    ArgumentError,
    ConfigError,
    alignment,
    centered_dft_magnitude,
    cknna,
    load_dataset,
    project_linf,
    uniformity,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "alignment",
    "apply_overrides",
    "centered_dft_magnitude",
    "cknna",
    "default_config",
    "emit_report",
    "json_diff",
    "load_dataset",
    "project_linf",
    "run_pipeline",
    "uniformity",
]


def default_config():
    return json.loads(_core.default_config())


def apply_overrides(config, overrides):
    return json.loads(_core.apply_overrides(json.dumps(config), list(overrides)))


def json_diff(before, after):
    return _core.json_diff(json.dumps(before), json.dumps(after))


def run_pipeline(config, force=False, stages=()):
    return _core.run_pipeline(json.dumps(config), force, set(stages))


def emit_report(run_dir):
    return _core.emit_report(str(run_dir))
