"""Run-configuration presets and merging.

A run is configured by one JSON document. It starts from a profile preset
(desk: trains on a CPU in minutes; paper: the full-scale settings),
deep-merged under the user's config file and any explicit CLI overrides.
Unknown keys are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

from .denoiser import DESK_CONFIG, PAPER_CONFIG, DenoiserConfig
from .errors import ConfigError
from .evaluate import EvalConfig
from .refine import RefineConfig
from .scene import PerturbationModel, SceneSpec
from .training import TrainConfig

# scene.classes maps class names (free-form keys), so it merges as one value
_LEAF_PATHS = {"scene.classes", "refine.mean_size", "eval.ranges", "eval.recall_grid"}

_DESK_MEAN_SIZE = (1.9, 4.6, 1.7)


def desk_preset() -> dict:
    return {
        "profile": "desk",
        "seed": 0,
        "scene": SceneSpec().to_dict(),
        "detector": {"sigma_det": 1.0, "fp_rate": 0.1, "fn_rate": 0.05},
        "perturbation": PerturbationModel().to_dict(),
        "model": DESK_CONFIG.to_dict(),
        "train": {
            "batch_size": 32,
            "learning_rate": 3e-4,
            "total_steps": 5000,
            "ln_sigma_mean": -1.2,
            "ln_sigma_std": 1.2,
            "sigma_max": 80.0,
            "context": 4.0,
            "log_interval": 50,
            "checkpoint_interval": 1000,
        },
        "refine": RefineConfig(mean_size=_DESK_MEAN_SIZE).to_dict(),
        "eval": EvalConfig().to_dict(),
        "gen": {"train_scenes": 2000, "val_scenes": 200},
    }


def paper_preset() -> dict:
    preset = desk_preset()
    preset["profile"] = "paper"
    preset["model"] = PAPER_CONFIG.to_dict()
    preset["train"].update({"batch_size": 128, "learning_rate": 1e-4, "total_steps": 100_000})
    return preset


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge override into base; keys absent from base are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        full = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key: {full}")
        if isinstance(out[key], dict) and full not in _LEAF_PATHS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {full} must be a mapping")
            out[key] = merge_config(out[key], value, path=full + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(profile: str = "desk", overrides: dict | None = None) -> dict:
    if profile not in PRESETS:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[profile]()
    if overrides:
        cfg = merge_config(cfg, overrides)
    return cfg


@dataclass(frozen=True)
class RunBundle:
    """Typed views over one resolved run-config document."""

    raw: dict
    seed: int
    spec: SceneSpec
    perturbation: PerturbationModel
    model: DenoiserConfig
    train: TrainConfig
    refine: RefineConfig
    eval: EvalConfig
    detector: dict
    gen: dict


def build_bundle(cfg: dict) -> RunBundle:
    try:
        train = TrainConfig(
            perturbation=PerturbationModel.from_dict(cfg["perturbation"]),
            seed=int(cfg["seed"]),
            profile=cfg["profile"],
            **cfg["train"],
        )
        return RunBundle(
            raw=cfg,
            seed=int(cfg["seed"]),
            spec=SceneSpec.from_dict(cfg["scene"]),
            perturbation=PerturbationModel.from_dict(cfg["perturbation"]),
            model=DenoiserConfig.from_dict(cfg["model"]),
            train=train,
            refine=RefineConfig.from_dict(cfg["refine"]),
            eval=EvalConfig.from_dict(cfg["eval"]),
            detector=dict(cfg["detector"]),
            gen=dict(cfg["gen"]),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed run config: {exc}") from exc
