"""Flat key-value run configuration with sectioned prefixes.

The format is one ``key = value`` per line, ``#`` comments allowed.  Every
key has a registered default and type; unknown keys are configuration
errors.  The fully resolved mapping (defaults plus overrides) is what gets
digested and echoed into the run manifest, so "what ran" is never ambiguous.
"""

from __future__ import annotations

import hashlib

from .datasets import NORM_WINDOW_DEFAULT
from .errors import ConfigError
from .geoscene import SceneConfig
from .pipeline import BenchmarkConfig, TrainConfig
from .propsim import PropagationParams

# key -> default value; the default's type is the key's type.
DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    # scene generation
    "scene.extent_x": 480.0,
    "scene.extent_y": 480.0,
    "scene.n_buildings": 40,
    "scene.building_side_min": 15.0,
    "scene.building_side_max": 60.0,
    "scene.building_height_min": 8.0,
    "scene.building_height_max": 35.0,
    "scene.n_transmitters": 8,
    "scene.tx_min_separation": 110.0,
    "scene.mast_height_min": 25.0,
    "scene.mast_height_max": 25.0,
    "scene.tx_power": 30.0,
    "scene.frequency": 2.6,
    "scene.terrain_spacing": 100.0,
    "scene.terrain_amplitude": 0.0,
    "scene.terrain_period": 500.0,
    "scene.adjacency_max_dist": 400.0,
    # propagation surrogate + domain shift
    "prop.pl_exponent_los": 2.0,
    "prop.pl_exponent_nlos": 3.2,
    "prop.reference_loss": 40.0,
    "prop.wall_penetration": 15.0,
    "prop.max_counted_walls": 3,
    "prop.shadowing_sigma": 0.0,
    "prop.shadowing_corr_len": 50.0,
    "prop.rsrp_floor": -140.0,
    "prop.cell_size": 10.0,
    "prop.n_levels": 16,
    "prop.shift_nlos": 0.4,
    "prop.shift_wall": 5.0,
    "prop.shift_sigma": 4.0,
    # masking
    "mask.r1": 150.0,
    "mask.r2": 400.0,
    "mask.p_near": 0.8,
    "mask.p_mid": 0.2,
    "mask.p_far": 0.1,
    # dataset synthesis
    "data.n_ground_per_cell": 1500,
    "data.aerial_keep_prob": 0.5,
    "data.aerial_max_ratio": 0.001,
    "data.n_routes": 6,
    "data.route_alt_min": 60.0,
    "data.route_alt_max": 140.0,
    "data.route_spacing": 10.0,
    "data.norm_lo": NORM_WINDOW_DEFAULT[0],
    "data.norm_hi": NORM_WINDOW_DEFAULT[1],
    # training
    "train.pretrain": True,
    "train.adda": True,
    "train.finetune": True,
    "train.dual_cell": True,
    "train.lr_pretrain": 1e-3,
    "train.lr_adapt": 1e-4,
    "train.lr_disc": 1e-4,
    "train.lr_finetune": 1e-4,
    "train.epochs_pretrain": 40,
    "train.epochs_adapt": 20,
    "train.epochs_finetune": 60,
    "train.batch_size": 1,
    "train.adda_batch": 4,
    "train.adda_draws": 6,
    "train.adda_subsample": 0.8,
    "train.adam_beta1": 0.9,
    "train.adam_beta2": 0.999,
    "train.adam_eps": 1e-8,
    "train.base_channels": 16,
    "train.depth": 3,
    "train.attention": "full",
    # evaluation / figures
    "eval.slice_level": 5,
    "eval.profile_route": 0,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Resolved configuration: defaults, then file values, then overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
                key, raw = (s.strip() for s in line.split("=", 1))
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
                cfg[key] = _parse_value(key, raw)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def canonical_lines(cfg: dict) -> list[str]:
    return [f"{k} = {cfg[k]!r}" for k in sorted(cfg)]


def config_digest(cfg: dict) -> str:
    return hashlib.sha256("\n".join(canonical_lines(cfg)).encode()).hexdigest()


def scene_config(cfg: dict) -> SceneConfig:
    return SceneConfig(
        extent_x=cfg["scene.extent_x"],
        extent_y=cfg["scene.extent_y"],
        n_buildings=cfg["scene.n_buildings"],
        building_side_min=cfg["scene.building_side_min"],
        building_side_max=cfg["scene.building_side_max"],
        building_height_min=cfg["scene.building_height_min"],
        building_height_max=cfg["scene.building_height_max"],
        n_transmitters=cfg["scene.n_transmitters"],
        tx_min_separation=cfg["scene.tx_min_separation"],
        mast_height_min=cfg["scene.mast_height_min"],
        mast_height_max=cfg["scene.mast_height_max"],
        tx_power=cfg["scene.tx_power"],
        frequency=cfg["scene.frequency"],
        terrain_spacing=cfg["scene.terrain_spacing"],
        terrain_amplitude=cfg["scene.terrain_amplitude"],
        terrain_period=cfg["scene.terrain_period"],
    )


def prop_params(cfg: dict) -> PropagationParams:
    return PropagationParams(
        pl_exponent_los=cfg["prop.pl_exponent_los"],
        pl_exponent_nlos=cfg["prop.pl_exponent_nlos"],
        reference_loss=cfg["prop.reference_loss"],
        wall_penetration=cfg["prop.wall_penetration"],
        max_counted_walls=cfg["prop.max_counted_walls"],
        shadowing_sigma=cfg["prop.shadowing_sigma"],
        shadowing_corr_len=cfg["prop.shadowing_corr_len"],
        rsrp_floor=cfg["prop.rsrp_floor"],
    )


def benchmark_config(cfg: dict) -> BenchmarkConfig:
    return BenchmarkConfig(
        scene=scene_config(cfg),
        prop=prop_params(cfg),
        cell_size=cfg["prop.cell_size"],
        n_levels=cfg["prop.n_levels"],
        adjacency_max_dist=cfg["scene.adjacency_max_dist"],
        n_ground_per_cell=cfg["data.n_ground_per_cell"],
        aerial_keep_prob=cfg["data.aerial_keep_prob"],
        aerial_max_ratio=cfg["data.aerial_max_ratio"],
        n_routes=cfg["data.n_routes"],
        route_altitude=(cfg["data.route_alt_min"], cfg["data.route_alt_max"]),
        route_spacing=cfg["data.route_spacing"],
        norm=(cfg["data.norm_lo"], cfg["data.norm_hi"]),
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        pretrain=cfg["train.pretrain"],
        adda=cfg["train.adda"],
        finetune=cfg["train.finetune"],
        dual_cell=cfg["train.dual_cell"],
        lr_pretrain=cfg["train.lr_pretrain"],
        lr_adapt=cfg["train.lr_adapt"],
        lr_disc=cfg["train.lr_disc"],
        lr_finetune=cfg["train.lr_finetune"],
        epochs_pretrain=cfg["train.epochs_pretrain"],
        epochs_adapt=cfg["train.epochs_adapt"],
        epochs_finetune=cfg["train.epochs_finetune"],
        batch_size=cfg["train.batch_size"],
        adda_batch=cfg["train.adda_batch"],
        adda_draws=cfg["train.adda_draws"],
        adda_subsample=cfg["train.adda_subsample"],
        seed=cfg["run.seed"],
        mask_r1=cfg["mask.r1"],
        mask_r2=cfg["mask.r2"],
        mask_probs=(cfg["mask.p_near"], cfg["mask.p_mid"], cfg["mask.p_far"]),
        adam_beta1=cfg["train.adam_beta1"],
        adam_beta2=cfg["train.adam_beta2"],
        adam_eps=cfg["train.adam_eps"],
        base_channels=cfg["train.base_channels"],
        depth=cfg["train.depth"],
        attention=cfg["train.attention"],
    )
