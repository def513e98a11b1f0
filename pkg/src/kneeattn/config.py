"""Run configuration: one JSON file covering data generation, model
construction, training and evaluation.

Every field has a default; unknown keys are rejected (exhaustively listed,
not one at a time) so a typo cannot silently fall back to a default. CLI
flags override file values.
"""

import copy
import json

from .attention import AttentionConfig
from .models import ModelSpec
from .synthdata import DatasetManifest
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


DEFAULTS = {
    "out_dir": "runs/latest",
    "data": {
        "seed": 0,
        "counts_per_grade": [40, 40, 40, 40, 40],
        "image_size": [64, 48],
        "split_fractions": [0.63, 0.07, 0.30],
        "augment_flips": True,
        "gen_scale": 1.25,
    },
    "model": {
        "backbone": "vgg16",
        "input_size": [64, 48],
        "width_mult": 0.25,
        "branches": ["att0", "att1"],
        "fusion": "multi-loss",
        "loss_weights": [1.0, 0.8],
        "classes": 5,
        "attention_widths": [32, 16],
        "seed": 0,
    },
    "train": {
        "batch_size": 16,
        "lr0": 1e-5,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "plateau_factor": 0.1,
        "plateau_patience": 2,
        "early_stop_patience": 3,
        "max_epochs": 50,
        "seed": 0,
        "min_improvement": 1e-6,
        "shuffle": True,
    },
    "grid": {
        "w0": [0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        "w1": [0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        "budget_epochs": 15,
    },
    "eval": {
        "ensemble": True,
        "batch_size": 64,
        "export_masks": 8,  # how many test masks per branch to dump
    },
}


def _merge(defaults, user, path, problems):
    out = copy.deepcopy(defaults)
    if not isinstance(user, dict):
        problems.append(f"{path or 'config'}: expected an object, got {type(user).__name__}")
        return out
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            problems.append(f"unknown key: {here}")
            continue
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, here, problems)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Resolve defaults + optional file + CLI overrides into one dict.

    ``overrides`` maps dotted paths ("train.seed") to values. All unknown-key
    problems are collected and raised together.
    """
    user = {}
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
    problems = []
    cfg = _merge(DEFAULTS, user, "", problems)
    if problems:
        raise ConfigError(problems)
    for dotted, value in (overrides or {}).items():
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return cfg


def echo_config(cfg, out_dir):
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def build_manifest(cfg):
    d = cfg["data"]
    return DatasetManifest(
        seed=int(d["seed"]),
        counts_per_grade=tuple(int(c) for c in d["counts_per_grade"]),
        image_hw=tuple(int(v) for v in d["image_size"]),
        split_fractions=tuple(float(f) for f in d["split_fractions"]),
        augment_flips=bool(d["augment_flips"]),
        gen_scale=float(d["gen_scale"]),
    )


def build_model_spec(cfg):
    m = cfg["model"]
    weights = m["loss_weights"]
    return ModelSpec(
        backbone=m["backbone"],
        input_hw=tuple(int(v) for v in m["input_size"]),
        classes=int(m["classes"]),
        width_mult=float(m["width_mult"]),
        branches=tuple(m["branches"]),
        fusion=m["fusion"],
        loss_weights=tuple(float(w) for w in weights) if weights is not None else None,
        attention=AttentionConfig(conv_widths=tuple(int(w) for w in m["attention_widths"])),
        seed=int(m["seed"]),
    )


def build_train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        batch_size=int(t["batch_size"]),
        lr0=float(t["lr0"]),
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        eps=float(t["eps"]),
        plateau_factor=float(t["plateau_factor"]),
        plateau_patience=int(t["plateau_patience"]),
        early_stop_patience=int(t["early_stop_patience"]),
        max_epochs=int(t["max_epochs"]),
        seed=int(t["seed"]),
        min_improvement=float(t["min_improvement"]),
        shuffle=bool(t["shuffle"]),
    )
