"""Run configuration: defaults, schema validation, command-line overrides."""

from __future__ import annotations

import copy
import json
import os
from importlib import resources
from pathlib import Path

import jsonschema

from .core import ParameterError

SCHEMA_VERSION = 1
SEED_ENV = "PI_OBF_SEED"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "paths": {"data_dir": "data", "model_path": "model/pinet.json", "report_dir": "report"},
    "world": {
        "height": 16,
        "width": 16,
        "d": 32,
        "m": 4,
        "num_identities": 128,
        "samples_per_identity": 16,
        "cluster_spread": 0.1,
        "identity_spread": 0.04,
        "attribute_scale": 1.5,
        "exclude_patterns": [],
        "entangled": False,
        "clamp_fraction": 0.001,
        "test_fraction": 0.2,
        "contact_sheet": 64,
    },
    "train": {
        "margin_mu": 400.0,
        "lr_theta": 3e-5,
        "lr_omega": 3e-4,
        "epochs": 600,
        "batch_size": 128,
        "hidden": 64,
        "k": 16,
        "triplets_per_anchor": 1,
        "loss_mode": "triplet_ce",
        "selected_attributes": None,
        "label_flip_rate": 0.0,
    },
    "privacy": {"epsilon": 1.0, "delta": 0.5, "beta_adj": None},
    "obfuscate": {"method": "pinet", "input_dir": None, "limit": 100, "clip_mode": "max"},
    "baselines": {"pixel_sensitivity": 1.0, "neighborhood_pixels": 1, "rank_kept": None, "sv_sensitivity": 1.0},
    "metrics": {
        "ssim_window": 7,
        "ssim_k1": 0.01,
        "ssim_k2": 0.03,
        "dynamic_range": 1.0,
        "detect_threshold": 0.25,
        "reid_metric": "euclidean",
        "preservation_vs_truth": False,
    },
    "verify": {
        "lemma1_trials": 10000,
        "radial_samples": 100000,
        "ks_alpha": 0.001,
        "histogram_samples": 1000000,
        "histogram_bins": 200,
        "pipeline_histogram_samples": 100000,
        "pipeline_histogram_bins": 20,
        "theorem1_pairs": 1000,
        "theorem1_points": 10,
        "inject_wrong_epsilon": 1.0,
    },
    "bench": {
        "epsilons": [0.5, 1.0, 2.0, 4.0, 8.0],
        "seeds": [0, 1, 2, 3, 4],
        "images": 50,
        "attribute_sets": [[0, 1, 2, 3], [0, 1]],
    },
}

# short flags accepted on the command line, mapped to dotted config keys
ALIASES = {
    "epochs": "train.epochs",
    "epsilon": "privacy.epsilon",
    "method": "obfuscate.method",
    "exclude-patterns": "world.exclude_patterns",
    "samples": "verify.histogram_samples",
    "inject-wrong-epsilon": "verify.inject_wrong_epsilon",
    "input": "obfuscate.input_dir",
    "limit": "obfuscate.limit",
    "seed": "seed",
}


def load_schema() -> dict:
    text = resources.files("piobf").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def _deep_merge(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(key: str, raw: str):
    if key == "world.exclude_patterns":
        # keep bit strings as strings so leading zeros survive
        return [s for s in raw.split(",") if s]
    if key == "verify.inject_wrong_epsilon" and raw.endswith("x"):
        raw = raw[:-1]
    if key == "train.loss_mode":
        return raw.replace("-", "_")
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply ``[(key, raw_value), ...]`` where key is dotted or a known alias."""
    cfg = copy.deepcopy(cfg)
    for key, raw in pairs:
        if key == "ablation":
            if raw.replace("-", "_") != "mse_only":
                raise ConfigError(f"--ablation accepts only 'mse-only', got {raw!r}")
            key, raw = "train.loss_mode", "mse_only"
        dotted = ALIASES.get(key, key)
        parts = dotted.split(".")
        node = cfg
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = _parse_value(dotted, raw)
    return cfg


def validate(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("config invalid:\n  " + "\n  ".join(lines))


def load_config(path=None, overrides=(), env=None) -> dict:
    """Defaults <- file <- env seed <- command-line overrides, then schema check."""
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be an object")
        # validate the raw file first so unknown keys are reported as written
        validate(_deep_merge(DEFAULTS, user))
        cfg = _deep_merge(cfg, user)
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer") from e
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def resolve_path(cfg: dict, key: str, base=None) -> Path:
    p = Path(cfg["paths"][key])
    return p if p.is_absolute() or base is None else Path(base) / p


def checkpoint_path(model_path, loss_mode: str = "triplet_ce", selected=None, m: int = 4) -> Path:
    """Checkpoint file for a (loss mode, attribute subset) variant.

    The reference variant (triplet+CE on all attributes) lives at
    ``model_path``; others get a suffix before the extension.
    """
    p = Path(model_path)
    tags = []
    if loss_mode != "triplet_ce":
        tags.append(loss_mode.replace("_", "-"))
    if selected is not None and sorted(selected) != list(range(m)):
        tags.append("attrs-" + "".join(str(a) for a in sorted(selected)))
    if not tags:
        return p
    return p.with_name(f"{p.stem}.{'.'.join(tags)}{p.suffix}")


def train_config_from(cfg: dict):
    from .core import TrainConfig

    t = cfg["train"]
    try:
        return TrainConfig(
            margin_mu=t["margin_mu"],
            lr_theta=t["lr_theta"],
            lr_omega=t["lr_omega"],
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            seed=cfg["seed"],
            hidden=t["hidden"],
            k=t["k"],
            triplets_per_anchor=t["triplets_per_anchor"],
            loss_mode=t["loss_mode"],
            selected_attributes=t["selected_attributes"],
            label_flip_rate=t["label_flip_rate"],
        )
    except ParameterError as e:
        raise ConfigError(str(e)) from e
