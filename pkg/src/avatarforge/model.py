"""Stage-1 avatar model: deformation + SDF + color fields over one ParamStore."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .bodymodel import DeformationModel, Skeleton
from .diffcore import ParamStore, load_checkpoint, save_checkpoint
from .implicitsurface import ColorField, DensityParams, SdfField


@dataclass
class ModelConfig:
    latent_dim: int = 64
    feature_dim: int = 256
    sdf_hidden: int = 256
    sdf_layers: int = 8
    sdf_skip: int = 4
    sdf_pe_octaves: int = 6
    sdf_radius: float = 0.5
    color_hidden: int = 256
    color_layers: int = 4
    dir_octaves: int = 4
    deform_hidden: int = 128
    deform_layers: int = 4
    offset_radius: float = 0.05
    alpha_init: float = 10.0
    beta_init: float = 0.1
    weight_grid_res: int = 0  # 0 = exact nearest-surface coarse weights

    def desk(self) -> "ModelConfig":
        return ModelConfig(
            latent_dim=16,
            feature_dim=64,
            sdf_hidden=64,
            sdf_layers=4,
            sdf_skip=2,
            sdf_pe_octaves=4,
            sdf_radius=self.sdf_radius,
            color_hidden=64,
            color_layers=3,
            dir_octaves=2,
            deform_hidden=48,
            deform_layers=3,
            offset_radius=self.offset_radius,
            alpha_init=self.alpha_init,
            beta_init=self.beta_init,
            weight_grid_res=48,
        )


class AvatarModel:
    """Bundles the trainable fields; owns their shared parameter store."""

    def __init__(self, skeleton: Skeleton, num_frames: int, config: ModelConfig = None, seed: int = 0,
                 store: ParamStore = None, bind: bool = False):
        self.skeleton = skeleton
        self.num_frames = num_frames
        self.config = config or ModelConfig()
        cfg = self.config
        if bind:
            self.store = store
            self.deform = DeformationModel.bind(
                self.store, skeleton, num_frames, latent_dim=cfg.latent_dim,
                pe_octaves=cfg.sdf_pe_octaves, hidden=cfg.deform_hidden,
                layers=cfg.deform_layers, offset_radius=cfg.offset_radius,
                weight_grid_res=cfg.weight_grid_res,
            )
            self.sdf = SdfField.bind(
                self.store, feature_dim=cfg.feature_dim, hidden=cfg.sdf_hidden, layers=cfg.sdf_layers,
                skip_at=(cfg.sdf_skip,), pe_octaves=cfg.sdf_pe_octaves, radius=cfg.sdf_radius,
            )
            self.color = ColorField.bind(
                self.store, feature_dim=cfg.feature_dim, latent_dim=cfg.latent_dim,
                hidden=cfg.color_hidden, layers=cfg.color_layers,
                pe_octaves=cfg.sdf_pe_octaves, dir_octaves=cfg.dir_octaves,
            )
            self.density = DensityParams(self.store)
            return
        rng = np.random.default_rng(seed)
        self.store = store or ParamStore()
        self.deform = DeformationModel(
            self.store, skeleton, num_frames, latent_dim=cfg.latent_dim,
            pe_octaves=cfg.sdf_pe_octaves, hidden=cfg.deform_hidden,
            layers=cfg.deform_layers, offset_radius=cfg.offset_radius, rng=rng,
            weight_grid_res=cfg.weight_grid_res,
        )
        self.sdf = SdfField(
            self.store, feature_dim=cfg.feature_dim, hidden=cfg.sdf_hidden, layers=cfg.sdf_layers,
            skip_at=(cfg.sdf_skip,), pe_octaves=cfg.sdf_pe_octaves, radius=cfg.sdf_radius, rng=rng,
        )
        self.color = ColorField(
            self.store, feature_dim=cfg.feature_dim, latent_dim=cfg.latent_dim,
            hidden=cfg.color_hidden, layers=cfg.color_layers,
            pe_octaves=cfg.sdf_pe_octaves, dir_octaves=cfg.dir_octaves, rng=rng,
        )
        self.density = DensityParams(self.store, alpha=cfg.alpha_init, beta=cfg.beta_init)

    def save(self, dirpath: str) -> None:
        os.makedirs(dirpath, exist_ok=True)
        save_checkpoint(self.store, os.path.join(dirpath, "params.bin"))
        meta = {"num_frames": self.num_frames, "config": asdict(self.config)}
        tmp = os.path.join(dirpath, "model.json.tmp")
        with open(tmp, "w") as f:
            json.dump(meta, f, indent=1)
        os.replace(tmp, os.path.join(dirpath, "model.json"))

    @staticmethod
    def load(dirpath: str, skeleton: Skeleton) -> "AvatarModel":
        with open(os.path.join(dirpath, "model.json")) as f:
            meta = json.load(f)
        store = load_checkpoint(os.path.join(dirpath, "params.bin"))
        cfg = ModelConfig(**meta["config"])
        return AvatarModel(skeleton, meta["num_frames"], cfg, store=store, bind=True)
