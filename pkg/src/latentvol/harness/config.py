"""Run configuration: built-in defaults, TOML profiles, and ``key=value`` overrides.

A config is a two-level mapping ``{section: {key: value}}``. Sections map to
stages (``stm``, ``diffusion``, ``zerofusion``, ``concat_baseline``) or to
shared settings (``run``, ``data``, ``sample``, ``ablate``). The resolved
mapping is written next to every stage's artifacts and fully determines the
run.
"""
from __future__ import annotations

import copy
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STAGES = ("make-phantoms", "train-stm", "train-diffusion", "train-zerofusion", "sample", "evaluate", "ablate")
CONDITION_MODES = ("zerofusion", "concat_baseline", "none")

# Conventional full-scale values; the shipped "desk" profile shrinks the
# networks and budgets for a CPU run.
DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0, "out": "runs/default", "condition_mode": "zerofusion"},
    "data": {
        "n_phantoms": 8,
        "grid_shape": [32, 32, 32],
        "head_axes": [13, 14, 12],
        "tumor_count_range": [1, 2],
        "tumor_radius_range": [3.5, 5.5],
        "smooth_noise_scale": 0.08,
        "modality_tag": "flair-like",
        "intensity_range": [0.0, 1.0],
    },
    "stm": {
        "base_channels": 32,
        "channel_multipliers": [1, 2],
        "blocks_per_level": 1,
        "latent_channels": 4,
        "codebook_size": 64,
        "disc_channels": 8,
        "disc_patch_level": 3,
        "lambda_a": 0.1,
        "lambda_p": 1.0,
        "lambda_cb": 1.0,
        "lambda_cm": 0.25,
        "n_steps": 5000,
        "batch_size": 6,
        "lr": 1e-3,
        "disc_lr": 1e-4,
        "lr_decay": "none",
        "warmup_steps": 500,
        "dead_code_steps": 1000,
    },
    "diffusion": {
        "base_channels": 16,
        "channel_multipliers": [1, 1, 2, 2],
        "levels": 4,
        "resnet_blocks_per_level": 3,
        "attention_per_level": 1,
        "mid_resnet_blocks": 2,
        "mid_attention": 1,
        "time_embedding_dim": 32,
        "timesteps": 200,
        "n_steps": 2000,
        "batch_size": 6,
        "lr": 1e-4,
        "lr_decay": "none",
        "scale_latents": True,
    },
    "zerofusion": {
        "control_level": 0,
        "n_steps": 1000,
        "batch_size": 6,
        "lr": 2.5e-5,
        "lr_decay": "none",
    },
    "concat_baseline": {
        "n_steps": 1000,
        "batch_size": 6,
        "lr": 1e-4,
        "lr_decay": "none",
    },
    "sample": {"seed": 0, "montage": False},
    "ablate": {"seeds": [0, 1, 2]},
}


class ConfigError(ValueError):
    pass


def profile_path(name: str) -> Path:
    """Path of a profile shipped with the package (``"desk"``)."""
    ref = resources.files("latentvol.harness") / "profiles" / f"{name}.toml"
    return Path(str(ref))


def merge(base: Mapping, update: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for section, values in update.items():
        if not isinstance(values, Mapping):
            raise ConfigError(f"top-level key {section!r} must be a section table")
        if section not in out:
            raise ConfigError(f"unknown config section {section!r}")
        out[section] = {**out[section], **copy.deepcopy(dict(values))}
    return out


def parse_value(text: str):
    """TOML literal if it parses (``3``, ``1e-4``, ``[1, 2]``, ``true``), else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(config: Mapping, overrides: Iterable[str]) -> dict:
    out = copy.deepcopy(dict(config))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if section not in out:
            raise ConfigError(f"unknown config section {section!r}")
        out[section][name] = parse_value(value.strip())
    return out


def validate(config: Mapping) -> None:
    mode = config["run"]["condition_mode"]
    if mode not in CONDITION_MODES:
        raise ConfigError(f"condition_mode must be one of {CONDITION_MODES}, got {mode!r}")
    for section in ("stm", "diffusion", "zerofusion", "concat_baseline"):
        for key in ("n_steps", "batch_size"):
            value = config[section].get(key)
            if not isinstance(value, int) or value < (0 if key == "n_steps" else 1):
                raise ConfigError(f"{section}.{key} must be a non-negative integer, got {value!r}")
        if not config[section].get("lr", 1) > 0:
            raise ConfigError(f"{section}.lr must be positive")
    if not isinstance(config["run"]["seed"], int):
        raise ConfigError("run.seed must be an integer")


def load_config(path=None, overrides: Iterable[str] = (), seed: int | None = None, out=None) -> dict:
    """Resolve defaults, then the TOML file, then ``--seed``/``--out``, then overrides.

    ``path`` may be a file or the name of a shipped profile.
    """
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists() and p.suffix == "":
            p = profile_path(str(path))
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(p, "rb") as fh:
            try:
                config = merge(config, tomllib.load(fh))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from None
    if seed is not None:
        config["run"]["seed"] = int(seed)
    if out is not None:
        config["run"]["out"] = str(out)
    config = apply_overrides(config, overrides)
    validate(config)
    return config


def dump(config: Mapping) -> str:
    return json.dumps(config, indent=2, sort_keys=True)
