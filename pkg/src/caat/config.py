"""Flat key=value experiment configuration with CLI-flag overrides.

Every key in DEFAULTS can appear in a config file (``key = value`` lines,
``#`` comments) and as a same-named CLI flag; flags win over the file, the
file wins over defaults. The fully resolved snapshot is written into the run
manifest so any run can be reproduced byte-for-byte from its artifacts.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .attacks import AttackSpec
from .errors import ConfigError
from .losses import LossKind
from .training import TrainConfig

ENV_DATA_DIR = "CAAT_DATA_DIR"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    text = text.strip()
    return [int(tok) for tok in text.split(",") if tok.strip() != ""] if text else []


def _float_list(text: str) -> list[float]:
    text = text.strip()
    return [float(tok) for tok in text.split(",") if tok.strip() != ""] if text else []


# key -> (default value, parser from string)
DEFAULTS: dict[str, tuple] = {
    # run plumbing
    "run_id": ("", str),
    "out_dir": ("runs", str),
    "seed": (0, int),
    "workers": (1, int),
    "svg": (False, _bool),
    # method
    "method": ("ca_at", str),
    "lambda": (0.5, float),
    "gamma": (0.8, float),
    # loss
    "loss": ("auto", str),
    "beta": (6.0, float),
    # attack
    "attack": ("pgd", str),
    "norm": ("linf", str),
    "delta": (8.0 / 255.0, float),
    "alpha": (2.0 / 255.0, float),
    "steps": (10, int),
    "random_init": (True, _bool),
    "clip_min": (0.0, float),
    "clip_max": (1.0, float),
    # optimization
    "epochs": (20, int),
    "batch_size": (128, int),
    "lr_max": (0.1, float),
    "momentum": (0.9, float),
    "lr_schedule": ("one_cycle", str),
    "lr_warmup_frac": (0.3, float),
    "lr_div": (25.0, float),
    "lr_floor_div": (1e4, float),
    "eval_limit": (0, int),
    # model
    "hidden_dims": ([], _int_list),
    "activation": ("relu", str),
    # data
    "dataset": ("blobs", str),
    "data_dir": ("", str),
    "train_images": ("train-images-idx3-ubyte", str),
    "train_labels": ("train-labels-idx1-ubyte", str),
    "test_images": ("t10k-images-idx3-ubyte", str),
    "test_labels": ("t10k-labels-idx1-ubyte", str),
    "class_a": ("", str),
    "class_b": ("", str),
    "pad_to": (0, int),
    "limit": (0, int),
    "blob_n": (200, int),
    "blob_dim": (2, int),
    "blob_sep": (6.0, float),
    # sweep
    "lambda_grid": ([0.0, 0.25, 0.5, 0.75, 1.0], _float_list),
    "gamma_grid": ([0.7, 0.75, 0.8, 0.85, 0.9, 1.0], _float_list),
    # synthetic experiment
    "delta_list": ([0.05, 0.1, 0.15, 0.2, 0.25, 0.3], _float_list),
    "bound_samples": (8, int),
    # bound-check / eval / export
    "checkpoint": ("", str),
    "samples": (100, int),
    "export_limit": (128, int),
    "split": ("test", str),
}

# keys that do not affect computed results and are left out of the run digest
_DIGEST_EXCLUDE = {"run_id", "out_dir", "workers", "svg"}

# reference full-scale recipe; resolved values that differ get recorded in
# the manifest's deviations list
_FULL_SCALE = {"epochs": 200, "lr_max": 0.4}


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; returns raw strings keyed by config name."""
    raw: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            raw[key] = value.strip()
    return raw


def _coerce(key: str, value) -> object:
    default, parser = DEFAULTS[key]
    if isinstance(value, str):
        try:
            return parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config field {key!r}: {exc}") from exc
    return value


def resolve(config_path=None, overrides: dict | None = None) -> dict:
    """Merge defaults, an optional config file, and flag overrides."""
    resolved = {key: default for key, (default, _) in DEFAULTS.items()}
    if config_path:
        if str(config_path).endswith(".json"):
            with open(config_path) as f:
                manifest = json.load(f)
            file_values = manifest.get("config", manifest)
            for key, value in file_values.items():
                if key not in DEFAULTS:
                    raise ConfigError(f"{config_path}: unknown config key {key!r}")
                resolved[key] = _coerce(key, value)
        else:
            for key, value in parse_config_file(config_path).items():
                resolved[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[key] = _coerce(key, value)
    if not resolved["data_dir"]:
        resolved["data_dir"] = os.environ.get(ENV_DATA_DIR, "")
    if not resolved["run_id"]:
        resolved["run_id"] = run_digest(resolved)
    return resolved


def run_digest(resolved: dict) -> str:
    """Deterministic run id: digest of the result-affecting config entries."""
    parts = [f"{k}={resolved[k]!r}" for k in sorted(resolved) if k not in _DIGEST_EXCLUDE]
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:12]


def config_snapshot_text(resolved: dict) -> str:
    """Flat key=value rendering of the snapshot, reusable as --config input."""
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, list):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def loss_kind_from(resolved: dict, output_head: str) -> LossKind:
    name = resolved["loss"]
    if name == "auto":
        name = "bce" if output_head == "single_logit" else "softmax_ce"
    if name == "bce":
        return LossKind.bce()
    if name == "softmax_ce":
        return LossKind.softmax_ce()
    if name == "trades":
        return LossKind.trades(resolved["beta"])
    if name == "clp":
        return LossKind.clp(resolved["beta"])
    raise ConfigError(f"config field 'loss': unknown loss {name!r}")


def attack_spec_from(resolved: dict) -> AttackSpec:
    try:
        return AttackSpec(
            family=resolved["attack"],
            norm=resolved["norm"],
            delta=resolved["delta"],
            alpha=resolved["alpha"],
            steps=resolved["steps"],
            random_init=resolved["random_init"],
            clip_min=resolved["clip_min"],
            clip_max=resolved["clip_max"],
        )
    except ValueError as exc:
        raise ConfigError(f"attack config: {exc}") from exc


def train_config_from(resolved: dict, output_head: str) -> TrainConfig:
    try:
        return TrainConfig(
            method=resolved["method"],
            lam=resolved["lambda"],
            gamma=resolved["gamma"],
            loss=loss_kind_from(resolved, output_head),
            attack=attack_spec_from(resolved),
            epochs=resolved["epochs"],
            batch_size=resolved["batch_size"],
            lr_max=resolved["lr_max"],
            momentum=resolved["momentum"],
            lr_schedule=resolved["lr_schedule"],
            lr_warmup_frac=resolved["lr_warmup_frac"],
            lr_div=resolved["lr_div"],
            lr_floor_div=resolved["lr_floor_div"],
            seed=resolved["seed"],
            eval_limit=resolved["eval_limit"],
        )
    except ValueError as exc:
        raise ConfigError(f"training config: {exc}") from exc


def deviations_from(resolved: dict) -> list[str]:
    out = []
    for key, full_value in _FULL_SCALE.items():
        if resolved[key] != full_value:
            out.append(f"{key}={resolved[key]} (full-scale recipe: {full_value})")
    out.append("dense feedforward model at desk scale (full-scale recipe: resnet-class)")
    out.append("no data augmentation")
    return out


@dataclass
class RunManifest:
    """Everything needed to identify, reproduce, and locate a run."""

    run_id: str
    config: dict
    artifacts: dict = field(default_factory=dict)
    deviations: list = field(default_factory=list)
    duration_s: float = 0.0

    def write(self, path) -> None:
        payload = {
            "run_id": self.run_id,
            "config": self.config,
            "artifacts": self.artifacts,
            "deviations": self.deviations,
            "duration_s": self.duration_s,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
