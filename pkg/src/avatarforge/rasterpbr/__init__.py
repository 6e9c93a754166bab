"""Differentiable rasterization and split-sum physically-based shading."""

from .envlight import EnvLight, PrefilteredEnv, sample_cubemap
from .raster import GBuffer, interpolate, rasterize, soft_mask
from .shading import (
    LUT_BIAS_BOUND,
    MaterialNetwork,
    MaterialSample,
    MaterialTextures,
    linear_to_srgb,
    loss_light,
    loss_render,
    loss_smooth,
    material_eval,
    shade_splitsum,
    srgb_to_linear,
)
