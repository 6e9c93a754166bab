"""Run configuration: every stage knob in one serializable record."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class RunConfig:
    # stage iteration counts
    stage1_iterations: int = 100000
    stage2_iterations: int = 15000
    stage2_bias_iterations: int = 1000
    stage2_texture_iterations: int = 10000
    distill_steps: int = 2000
    # resolutions
    train_image_size: int = 512
    texture_resolution: int = 512
    texture_hires_resolution: int = 2048
    grid_resolution: int = 256
    env_resolution: int = 64
    # loss weights (lambda_1 .. lambda_5)
    eikonal_weight: float = 0.1
    curvature_weight: float = 0.65
    offset_weight: float = 0.02
    light_weight: float = 0.005
    smooth_weight: float = 0.002
    color_weight: float = 1.0
    consistency_weight: float = 1.0
    # fusion
    fusion_views: int = 50
    fusion_image_size: int = 512
    fusion_radius: float = 2.2
    fusion_pose_frame: int = -1  # -1 = rest pose
    pseudo_mix: float = 1.0
    # stage-1 sampling
    rays_per_batch: int = 192
    n_samples: int = 64
    n_importance: int = 16
    learning_rate: float = 5e-4
    lr_decay: float = 1.0
    stage2_learning_rate: float = 5e-3
    distill_learning_rate: float = 0.01
    # model dims
    latent_dim: int = 64
    feature_dim: int = 256
    sdf_hidden: int = 256
    sdf_layers: int = 8
    color_hidden: int = 256
    color_layers: int = 4
    deform_hidden: int = 128
    deform_layers: int = 4
    weight_grid_res: int = 64
    offset_radius: float = 0.05
    # misc
    seed: int = 0
    desk_preset: bool = False
    denoiser: str = "analytic"  # analytic | remote
    denoiser_endpoint: str = ""
    synth_preset: str = "capsule-rotate"
    synth_frames: int = 60
    joint_restrict_radius: float = 0.30

    def overrides(self) -> dict:
        """Fields that differ from the paper-scale defaults (for run logs)."""
        base = RunConfig()
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if getattr(self, f.name) != getattr(base, f.name)
        }


PRESETS = ("desk", "paper")


def apply_preset(config: RunConfig, preset: str) -> RunConfig:
    """Desk preset: CI-scale schedule; paper preset keeps the defaults."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}'")
    if preset == "paper":
        return config
    config.desk_preset = True
    config.stage1_iterations = 8000
    config.stage2_iterations = 3000
    config.stage2_bias_iterations = 300
    config.stage2_texture_iterations = 2700
    config.distill_steps = 1000
    config.train_image_size = 128
    config.fusion_image_size = 128
    config.fusion_views = 20
    config.grid_resolution = 128
    config.env_resolution = 32
    config.rays_per_batch = 128
    config.n_samples = 20
    config.n_importance = 10
    config.learning_rate = 2e-3
    config.lr_decay = 0.9998
    config.stage2_learning_rate = 8e-3
    config.latent_dim = 16
    config.feature_dim = 64
    config.sdf_hidden = 64
    config.sdf_layers = 4
    config.color_hidden = 64
    config.color_layers = 3
    config.deform_hidden = 48
    config.deform_layers = 3
    config.weight_grid_res = 48
    config.synth_frames = 48
    return config


def to_json(config: RunConfig) -> str:
    return json.dumps(asdict(config), indent=1, sort_keys=True)


def from_json(text: str) -> RunConfig:
    doc = json.loads(text)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**doc)


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        return from_json(f.read())


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        f.write(to_json(config))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:16]


def model_config(config: RunConfig):
    from ..model import ModelConfig

    return ModelConfig(
        latent_dim=config.latent_dim,
        feature_dim=config.feature_dim,
        sdf_hidden=config.sdf_hidden,
        sdf_layers=config.sdf_layers,
        sdf_skip=max(config.sdf_layers // 2, 1),
        sdf_pe_octaves=6 if not config.desk_preset else 4,
        color_hidden=config.color_hidden,
        color_layers=config.color_layers,
        dir_octaves=4 if not config.desk_preset else 2,
        deform_hidden=config.deform_hidden,
        deform_layers=config.deform_layers,
        offset_radius=config.offset_radius,
        weight_grid_res=config.weight_grid_res,
    )
