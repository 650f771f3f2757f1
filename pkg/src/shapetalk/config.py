"""Run configuration: one JSON document with a section per module.

Unknown keys anywhere in the document are rejected before any work starts;
every key has a default so a minimal config can be ``{}``.
"""

import json

from .finetune import LOSS_NAMES, TrainConfig
from .models.captioner import CaptionerConfig
from .models.diffuser import DiffuserConfig
from .shapeworld.dataset import DatasetConfig


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "train_size": 8000,
        "val_size": 500,
        "test_size_per_domain": 500,
        "n_refs": 5,
        "resolution": 32,
    },
    "captioner": {
        "subword_vocab": 96,
        "dim": 64,
        "n_heads": 4,
        "mlp_dim": 128,
        "enc_depth": 2,
        "dec_depth": 2,
        "patch": 4,
        "max_len": 16,
        "min_len": 3,
        "epochs": 30,
        "lr": 3e-4,
        "batch_size": 32,
    },
    "diffuser": {
        "text_dim": 64,
        "text_len": 16,
        "n_heads": 4,
        "channels": [32, 64, 128],
        "timesteps": 200,
        "time_dim": 64,
        "epochs": 60,
        "lr": 2e-4,
        "batch_size": 32,
        "cond_dropout": 0.1,
    },
    "metrics": {
        "epochs": 30,
        "batch_size": 64,
        "lr": 1e-3,
        "retrieval_target": 0.95,
        "f1_target": 0.98,
    },
    "pipeline": {
        "n": 10,
        "sampler": "top_p",
        "sampler_params": {"p": 0.9},
        "backend": "clip",
        "steps": 50,
        "guidance_scale": 3.0,
        "records": 300,
    },
    "finetune": {
        "lr": 1e-4,
        "batch_size": 8,
        "epochs": 5,
        "losses": list(LOSS_NAMES),
        "theta_groups": list(TrainConfig().theta_groups),
        "psi_groups": list(TrainConfig().psi_groups),
        "optimizer": "adam",
    },
}


def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    unknown = set(override) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under {path or '<root>'}")
    merged = {}
    for key, default in defaults.items():
        if key not in override:
            merged[key] = default
            continue
        value = override[key]
        if isinstance(default, dict) and key != "sampler_params":
            merged[key] = _merge(default, value, f"{path}{key}.")
        else:
            merged[key] = _check_type(f"{path}{key}", default, value)
    return merged


def _check_type(path, default, value):
    if isinstance(default, bool) != isinstance(value, bool):
        raise ConfigError(f"{path}: expected {type(default).__name__}")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, (list, dict)) and isinstance(value, type(default)):
        return value
    if isinstance(default, (int, float, str)) and isinstance(value, type(default)):
        return value
    raise ConfigError(
        f"{path}: expected {type(default).__name__}, got {type(value).__name__}"
    )


def validate_config(document: dict) -> dict:
    """Merge ``document`` over the defaults, rejecting unknown keys."""
    return _merge(DEFAULT_CONFIG, document)


def load_config(path) -> dict:
    try:
        with open(path) as f:
            document = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}")
    return validate_config(document)


def dataset_config(cfg) -> DatasetConfig:
    d = cfg["dataset"]
    return DatasetConfig(seed=cfg["seed"], **d)


def captioner_config(cfg, vocab_size) -> CaptionerConfig:
    c = cfg["captioner"]
    return CaptionerConfig(
        vocab_size=vocab_size, dim=c["dim"], n_heads=c["n_heads"],
        mlp_dim=c["mlp_dim"], enc_depth=c["enc_depth"], dec_depth=c["dec_depth"],
        patch=c["patch"], resolution=cfg["dataset"]["resolution"],
        max_len=c["max_len"], min_len=c["min_len"],
    )


def diffuser_config(cfg, vocab_size) -> DiffuserConfig:
    d = cfg["diffuser"]
    return DiffuserConfig(
        vocab_size=vocab_size, text_dim=d["text_dim"], text_len=d["text_len"],
        n_heads=d["n_heads"], channels=tuple(d["channels"]),
        resolution=cfg["dataset"]["resolution"], timesteps=d["timesteps"],
        time_dim=d["time_dim"],
    )


def finetune_config(cfg, seed=None) -> TrainConfig:
    f = cfg["finetune"]
    return TrainConfig(
        lr=f["lr"], batch_size=f["batch_size"], epochs=f["epochs"],
        losses=tuple(f["losses"]), theta_groups=tuple(f["theta_groups"]),
        psi_groups=tuple(f["psi_groups"]), optimizer=f["optimizer"],
        seed=cfg["seed"] if seed is None else seed,
    )
