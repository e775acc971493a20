"""Flat key-value run configuration (YAML syntax).

Recognized keys::

    mode                      foc | foc-light | warmup-only
    lambda_s, lambda_u        loss weights
    r, batch_size, repetitions
    heads_per_type, k, backbone, input_channels
    epochs.warmup, epochs.finetune, epochs.main
    lr.warmup, lr.finetune, lr.main
    adam.beta1, adam.beta2
    seed
    alternate                 batch | epoch
    mi_on_labeled, inverse_on_unlabeled, class_balanced_inverse
    augmentation.crop_min, augmentation.crop_max, augmentation.flip,
    augmentation.brightness, augmentation.hue, augmentation.sobel

Nested mappings (``epochs: {main: 100}``) are flattened to dotted keys.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import yaml

from .data import ConfigError
from .sampler import AugmentationPolicy
from .trainer import TrainConfig

_FIELD_OF = {
    "epochs.warmup": "epochs_warmup", "epochs.finetune": "epochs_finetune", "epochs.main": "epochs_main",
    "lr.warmup": "lr_warmup", "lr.finetune": "lr_finetune", "lr.main": "lr_main",
    "adam.beta1": "adam_beta1", "adam.beta2": "adam_beta2",
}
_AUG_KEYS = {
    "augmentation.crop_min", "augmentation.crop_max", "augmentation.flip",
    "augmentation.brightness", "augmentation.hue", "augmentation.sobel",
}
_PLAIN = {f.name for f in fields(TrainConfig)} - set(_FIELD_OF.values()) - {"augmentation"}
KEYS = sorted(_PLAIN | set(_FIELD_OF) | _AUG_KEYS)

_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, name, value):
    kind = str(_TYPES[name])
    try:
        if "bool" in kind:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if "int" in kind:
            if value is None and "Optional" in kind:
                return None
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if "float" in kind:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: invalid value {value!r}") from None


def config_from_mapping(raw: dict) -> TrainConfig:
    flat = _flatten(raw or {})
    unknown = sorted(set(flat) - set(KEYS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    kwargs, aug = {}, {}
    for key, value in flat.items():
        if key in _AUG_KEYS:
            aug[key.split(".", 1)[1]] = value
            continue
        name = _FIELD_OF.get(key, key)
        kwargs[name] = _coerce(key, name, value)
    default_aug = AugmentationPolicy()
    try:
        kwargs["augmentation"] = AugmentationPolicy(
            crop=(float(aug.get("crop_min", default_aug.crop[0])), float(aug.get("crop_max", default_aug.crop[1]))),
            flip_prob=float(aug.get("flip", default_aug.flip_prob)),
            brightness=float(aug.get("brightness", default_aug.brightness)),
            hue=float(aug.get("hue", default_aug.hue)),
            sobel=bool(aug.get("sobel", default_aug.sobel)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"augmentation: {exc}") from None
    if kwargs.get("mode") == "foc-light":
        return TrainConfig.light(**kwargs)
    return TrainConfig(**kwargs)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a key-value document")
    return config_from_mapping(raw)


def config_to_mapping(cfg: TrainConfig) -> dict:
    out = {}
    for key in KEYS:
        if key in _AUG_KEYS:
            continue
        out[key] = getattr(cfg, _FIELD_OF.get(key, key))
    a = cfg.augmentation
    out.update({
        "augmentation.crop_min": a.crop[0], "augmentation.crop_max": a.crop[1],
        "augmentation.flip": a.flip_prob, "augmentation.brightness": a.brightness,
        "augmentation.hue": a.hue, "augmentation.sobel": a.sobel,
    })
    return out


def save_config(cfg: TrainConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_mapping(cfg), sort_keys=True), encoding="utf-8")
