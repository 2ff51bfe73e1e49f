"""Run configuration: one JSON document with per-stage sections.

Every field defaults to the desk-scale experiment values; unknown keys are
rejected so typos fail loudly. The resolved document is echoed into each
output directory as config.lock.json.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .dataset import DatasetConfig
from .dubins import KinematicLimits
from .evaluation import EvalConfig
from .expert import PlannerParams
from .policy import PolicyConfig
from .terrain import ElevationBand
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 7,
    "terrain": {
        "extent": 200.0,
        "cell_size": 1.0,
        "relief": 60.0,
    },
    "expert": {
        "alpha": 1.0,
        "beta": 0.1,
        "band_min": 5.0,
        "band_max": 15.0,
        "turn_radius": 3.0,
        "max_climb_angle": 0.6,
        "cruise_speed": 5.0,
        "rrt_range": 40.0,
        "validity_resolution": 2.0,
        "goal_radius": 5.0,
        "max_iterations": 700,
        "time_budget": 45.0,
        "goal_bias": 0.05,
        "n_demos": 100,
        "min_separation": 50.0,
        "max_separation": 100.0,
        "train_region": [0.0, 0.0, 100.0, 100.0],
        "retries": 2,
    },
    "dataset": {
        "anchor_spacing": 10.0,
        "heading_steps": 750,
        "n_points": 10,
        "h_const": 100.0,
        "depth_scale": 10.0,
        "shade_scale": 1.0,
        "fine_step": 0.15,
        "image_size": 64,
        "horizontal_fov": math.pi / 2,
        "max_range": 40.0,
        "down_tilt": -math.pi / 6,
        "train_fraction": 0.8,
    },
    "policy": {
        "image_size": 64,
        "modes": 3,
        "n_points": 10,
        "enc_channels": [16, 32, 64, 128],
        "feature_dim": 256,
        "embed_dim": 64,
        "head_hidden": [256, 128],
        "output_scale": 100.0,
    },
    "training": {
        "batch_size": 32,
        "lr0": 1e-4,
        "weight_decay": 1e-5,
        "epochs": 130,
        "early_stop_patience": 15,
        "depth_pretrain_epochs": 0,
        "k_bc": 0.5,
        "k_c": 2.0,
        "k_alt": 1.0,
        "k_depth": 1e6,
        "k_terrain": 1e3,
        "k_elevation": 1.0,
        "eps_wta": 0.05,
        "dz_des": 5.0,
    },
    "eval": {
        "n_pairs": 20,
        "min_separation": 50.0,
        "max_separation": 100.0,
        "goal_radius": 5.0,
        "exec_points": 3,
        "max_replans": 60,
        "edge_margin": 8.0,
        "train_region": [0.0, 0.0, 100.0, 100.0],
    },
}


def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"section '{path or '<root>'}' must be an object")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{path + key}'")
        if isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def load_config(path=None, seed_override=None) -> dict:
    """Defaults merged with an optional JSON file; unknown keys rejected."""
    if path is None:
        cfg = copy.deepcopy(DEFAULT_CONFIG)
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}")
        cfg = _merge(DEFAULT_CONFIG, raw)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def write_lock(cfg: dict, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.lock.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def make_band(cfg) -> ElevationBand:
    e = cfg["expert"]
    return ElevationBand(e["band_min"], e["band_max"])


def make_limits(cfg) -> KinematicLimits:
    e = cfg["expert"]
    return KinematicLimits(e["turn_radius"], e["max_climb_angle"], e["cruise_speed"])


def make_planner_params(cfg) -> PlannerParams:
    e = cfg["expert"]
    return PlannerParams(
        alpha=e["alpha"],
        beta=e["beta"],
        band=make_band(cfg),
        rrt_range=e["rrt_range"],
        validity_resolution=e["validity_resolution"],
        goal_radius=e["goal_radius"],
        max_iterations=e["max_iterations"],
        time_budget=e["time_budget"],
        rng_seed=cfg["seed"],
        goal_bias=e["goal_bias"],
        fine_step=cfg["dataset"]["fine_step"],
        limits=make_limits(cfg),
    )


def make_dataset_config(cfg) -> DatasetConfig:
    return DatasetConfig(**cfg["dataset"])


def make_policy_config(cfg) -> PolicyConfig:
    p = dict(cfg["policy"])
    p["enc_channels"] = tuple(p["enc_channels"])
    p["head_hidden"] = tuple(p["head_hidden"])
    return PolicyConfig(**p)


def make_loss_weights(cfg) -> LossWeights:
    t = cfg["training"]
    return LossWeights(
        bc=t["k_bc"], c=t["k_c"], alt=t["k_alt"], depth=t["k_depth"],
        terrain=t["k_terrain"], elevation=t["k_elevation"],
        eps_wta=t["eps_wta"], dz_des=t["dz_des"],
    )


def make_train_config(cfg) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(
        batch_size=t["batch_size"],
        lr0=t["lr0"],
        weight_decay=t["weight_decay"],
        epochs=t["epochs"],
        early_stop_patience=t["early_stop_patience"],
        seed=cfg["seed"],
        depth_pretrain_epochs=t["depth_pretrain_epochs"],
        weights=make_loss_weights(cfg),
        policy=make_policy_config(cfg),
    )


def make_eval_config(cfg) -> EvalConfig:
    e = dict(cfg["eval"])
    e["train_region"] = tuple(e["train_region"])
    return EvalConfig(seed=cfg["seed"], **e)
