"""Run configuration: YAML sections per stage, strict keys, seeded sub-streams."""

import copy
import logging
import os
import zlib

import numpy as np
import yaml

from errors import ConfigError, InputNotFoundError

logger = logging.getLogger(__name__)

# Built-in defaults; a config file may only override keys listed here.
DEFAULTS = {
    "run": {
        "seed": 0,
        "jobs": 1,
    },
    "segment": {
        "mode": "transcript",
        "energy_floor_db": -40.0,
        "ratio_min_db": 6.0,
        "frame_s": 0.01,
        "sad": True,
        "sad_frame_s": 0.025,
        "sad_step_s": 0.010,
        "sad_on_db": -20.0,
        "sad_off_db": -30.0,
        "sad_abs_floor_db": -60.0,
        "hangover_s": 0.2,
        "min_pause_s": 0.3,
        "min_length_s": 1.3,
        "sad_labels_step_s": 0.01,
    },
    "verify": {
        "threshold": None,
        "min_enroll_s": 10.0,
        "window_len": 512,
        "hop": 128,
    },
    "extract": {
        "sample_rate_hz": 8000,
        "float_output": False,
    },
    "pair": {
        "target_train": 20000,
        "target_cv": 5000,
        "target_test": 4000,
        "train_speakers": None,
        "cv_speakers": 0,
        "test_speakers": 0,
        "max_train_speakers": None,
        "snr_low_db": 0.0,
        "snr_high_db": 5.0,
        "shuffle": False,
    },
    "mix": {
        "mode": "min",
        "both": False,
        "float_output": False,
    },
    "separate": {
        "mask": "irm",
        "window_len": 512,
        "hop": 128,
    },
    "eval": {
        "csv": False,
    },
    "stats": {},
    "retarget": {
        "rules": [],
    },
}


def _check_type(section, key, value, default):
    """Validate a config value against the type of its default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, type(default)):
        raise ConfigError(
            f"{section}.{key}: expected {type(default).__name__}, got {value!r}")
    return value


def load_config(path=None):
    """Load a YAML config file on top of the defaults, rejecting unknown keys."""
    config = copy.deepcopy(DEFAULTS)
    if path is None:
        return config

    if not os.path.exists(path):
        raise InputNotFoundError(path, "config file")

    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}")

    if raw is None:
        return config
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")

    for section, values in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section: {section}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section} must be a mapping")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
            config[section][key] = _check_type(section, key, value, DEFAULTS[section][key])

    logger.info(f"Loaded config from {path}")
    return config


def resolve(config, section, **overrides):
    """Return a section's parameters with non-None command-line overrides applied."""
    params = dict(config[section])
    for key, value in overrides.items():
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown option for {section}: {key}")
        if value is not None:
            params[key] = _check_type(section, key, value, DEFAULTS[section][key])
    return params


def stage_rng(seed, stage):
    """Independent generator for one named stage, derived from the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(stage.encode("utf-8"))])
