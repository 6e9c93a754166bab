"""Material model and split-sum shading, plus the stage-2 loss terms.

Material ranges: albedo in [0,1], roughness in [0.04,1], metalness in [0,1];
specular color is k_s = (1-m)*0.04 + m*k_d exactly. Rendering is linear;
losses compare after a fixed linear->sRGB transfer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import DenseNet, ParamStore, Tensor
from ..diffcore import tensor as T
from .envlight import PrefilteredEnv

ROUGHNESS_MIN = 0.04
LUT_BIAS_BOUND = 0.2  # documented cap of the pre-integrated bias term


def linear_to_srgb(x):
    if isinstance(x, Tensor):
        lo = T.mul(x, T.constant(12.92))
        safe = T.maximum(x, T.constant(1e-7))
        hi = T.sub(T.mul(T.power(safe, 1.0 / 2.4), T.constant(1.055)), T.constant(0.055))
        return T.where(x.data > 0.0031308, hi, lo)
    x = np.asarray(x)
    return np.where(x > 0.0031308, 1.055 * np.power(np.maximum(x, 1e-7), 1 / 2.4) - 0.055, 12.92 * x)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0.04045, np.power((x + 0.055) / 1.055, 2.4), x / 12.92)


@dataclass
class MaterialSample:
    kd: Tensor  # (N,3) in [0,1]
    roughness: Tensor  # (N,1) in [ROUGHNESS_MIN, 1]
    metalness: Tensor  # (N,1) in [0,1]

    def specular_color(self) -> Tensor:
        """k_s = (1-m)*0.04 + m*k_d (exact identity)."""
        one = T.constant(1.0)
        return T.add(
            T.mul(T.sub(one, self.metalness), T.constant(0.04)),
            T.mul(self.metalness, self.kd),
        )


class MaterialNetwork:
    """f_t: surface point -> (k_d, roughness, metalness), range-mapped heads."""

    def __init__(self, store: ParamStore, prefix: str = "material", hidden: int = 64, layers: int = 4,
                 pe_octaves: int = 5, rng=None):
        rng = rng or np.random.default_rng(2)
        self.pe_octaves = pe_octaves
        in_dim = 3 + 6 * pe_octaves
        self.net = DenseNet(store, prefix, [in_dim] + [hidden] * (layers - 1) + [5],
                            activation="leaky_relu", rng=rng)

    def __call__(self, points) -> MaterialSample:
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float32))
        raw = self.net(T.positional_encoding(x, self.pe_octaves))
        kd = T.sigmoid(T.getitem(raw, (slice(None), slice(0, 3))))
        rough = T.add(
            T.mul(T.sigmoid(T.getitem(raw, (slice(None), slice(3, 4)))), T.constant(1.0 - ROUGHNESS_MIN)),
            T.constant(ROUGHNESS_MIN),
        )
        metal = T.sigmoid(T.getitem(raw, (slice(None), slice(4, 5))))
        return MaterialSample(kd, rough, metal)


class MaterialTextures:
    """Baked 2-D maps with a per-texel validity mask (seam-padded)."""

    def __init__(self, kd: Tensor, roughness: Tensor, metalness: Tensor, validity: np.ndarray):
        self.kd = kd
        self.roughness = roughness
        self.metalness = metalness
        self.validity = validity.astype(bool)

    @property
    def resolution(self) -> int:
        return self.kd.data.shape[0]

    def sample(self, uv) -> MaterialSample:
        uv_t = uv if isinstance(uv, Tensor) else Tensor(np.asarray(uv, dtype=np.float32))
        kd = T.clamp(T.image_sample(self.kd, uv_t), 0.0, 1.0)
        rough = T.clamp(T.image_sample(self.roughness, uv_t), ROUGHNESS_MIN, 1.0)
        metal = T.clamp(T.image_sample(self.metalness, uv_t), 0.0, 1.0)
        return MaterialSample(kd, rough, metal)

    def project(self) -> None:
        """Clamp stored texels back into their material ranges (in place)."""
        np.clip(self.kd.data, 0.0, 1.0, out=self.kd.data)
        np.clip(self.roughness.data, ROUGHNESS_MIN, 1.0, out=self.roughness.data)
        np.clip(self.metalness.data, 0.0, 1.0, out=self.metalness.data)


def material_eval(backend, query) -> MaterialSample:
    """Evaluate whichever material backend is active.

    Network backends take surface points (N,3); texture backends take UVs
    (N,2), clamped to the atlas edge.
    """
    if isinstance(backend, MaterialNetwork):
        return backend(query)
    if isinstance(backend, MaterialTextures):
        q = query.data if isinstance(query, Tensor) else np.asarray(query)
        if isinstance(query, Tensor):
            query = T.clamp(query, 0.0, 1.0)
        else:
            query = np.clip(q, 0.0, 1.0)
        return backend.sample(query)
    raise TypeError(f"unknown material backend {type(backend)!r}")


def shade_splitsum(normals, view_dirs, materials: MaterialSample, pre: PrefilteredEnv) -> Tensor:
    """Split-sum shading of surface samples; linear RGB >= 0.

    diffuse = k_d (1-m) irradiance(n); specular = prefiltered(reflect(v,n), r)
    * (k_s * scale + bias). `view_dirs` point from the surface toward the eye.
    """
    n = normals if isinstance(normals, Tensor) else Tensor(np.asarray(normals, dtype=np.float32))
    v = view_dirs if isinstance(view_dirs, Tensor) else Tensor(np.asarray(view_dirs, dtype=np.float32))
    one = T.constant(1.0)

    diffuse = T.mul(T.mul(materials.kd, T.sub(one, materials.metalness)), pre.sample_irradiance(n))

    ndotv = T.clamp(T.dot(n, v), 1e-4, 1.0)
    refl = T.sub(T.mul(T.mul(ndotv, n), T.constant(2.0)), v)
    spec_light = pre.sample_specular(refl, materials.roughness)
    scale, bias = pre.lut_lookup(ndotv, materials.roughness)
    ks = materials.specular_color()
    specular = T.mul(spec_light, T.add(T.mul(ks, scale), bias))
    return T.maximum(T.add(diffuse, specular), T.constant(0.0))


def shade_background(camera, pre: PrefilteredEnv, pixels: np.ndarray) -> np.ndarray:
    """Environment lookup along the view rays of the given pixels (data only)."""
    _, dirs = camera.rays_for_pixels(pixels)
    with T.no_grad():
        vals = T.reshape(
            T.take(T.reshape(pre.env.base, (-1, 3)), _nearest_texel(pre.env, dirs)), (len(pixels), 3)
        )
    return vals.data


def env_background(env, camera, pixels: np.ndarray):
    """Differentiable env radiance along view rays (for full-image losses)."""
    from .envlight import sample_cubemap

    _, dirs = camera.rays_for_pixels(pixels)
    return sample_cubemap(env.base, dirs)


def _nearest_texel(env, dirs: np.ndarray) -> np.ndarray:
    from .envlight import dir_to_cube

    res = env.resolution
    f, u, v = dir_to_cube(dirs)
    x = np.clip((u * res).astype(np.int64), 0, res - 1)
    y = np.clip((v * res).astype(np.int64), 0, res - 1)
    return f * res * res + y * res + x


# -- stage-2 losses --


def loss_render(pred_linear: Tensor, target_srgb, weight: float = 1.0) -> Tensor:
    """Mean L1 between the sRGB-transferred render and the reference."""
    tgt = target_srgb if isinstance(target_srgb, Tensor) else Tensor(np.asarray(target_srgb, dtype=np.float32))
    if pred_linear.data.shape != tgt.data.shape:
        raise ValueError("shape mismatch in render loss")
    return T.mul(T.constant(weight), T.reduce_mean(T.absolute(T.sub(linear_to_srgb(pred_linear), tgt))))


def loss_light(env, weight: float = 0.005) -> Tensor:
    """weight * (1/3) sum_i |c_i - mean_j c_j| over per-channel env means."""
    base = env.base if hasattr(env, "base") else env
    flat = T.reshape(base, (-1, 3))
    means = T.reduce_mean(flat, axis=0, keepdims=True)  # (1,3)
    grand = T.reduce_mean(means, axis=1, keepdims=True)
    dev = T.reduce_sum(T.absolute(T.sub(means, grand)))
    return T.mul(T.constant(weight / 3.0), dev)


def loss_smooth(kd_a: Tensor, kd_b: Tensor, weight: float = 0.002) -> Tensor:
    """weight * mean |k_d(x) - k_d(x + eps)| between paired surface samples."""
    return T.mul(T.constant(weight), T.reduce_mean(T.absolute(T.sub(kd_a, kd_b))))
