"""Learnable environment cubemap with split-sum prefiltering.

The GGX specular prefilter and the cosine irradiance integral are linear in
the level-0 radiance, so they are built once as sparse operators (fixed
128-sample importance sets) and applied per step as exact, differentiable
sparse matmuls. The BRDF scale/bias lookup table is a fixed pre-integration
over (n.v, roughness).
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from ..diffcore import Tensor
from ..diffcore import tensor as T

ROUGHNESS_BINS = (0.04, 0.2, 0.4, 0.7, 1.0)
PREFILTER_SAMPLES = 128
LUT_RES = 64
LUT_SAMPLES = 1024

# face axis tables: dir = normalize(axis + (2u-1)*u_axis + (2v-1)*v_axis)
_FACE_AXES = np.array(
    [
        [[1, 0, 0], [0, 0, -1], [0, -1, 0]],  # +x
        [[-1, 0, 0], [0, 0, 1], [0, -1, 0]],  # -x
        [[0, 1, 0], [1, 0, 0], [0, 0, 1]],  # +y
        [[0, -1, 0], [1, 0, 0], [0, 0, -1]],  # -y
        [[0, 0, 1], [1, 0, 0], [0, -1, 0]],  # +z
        [[0, 0, -1], [-1, 0, 0], [0, -1, 0]],  # -z
    ],
    dtype=np.float64,
)


def dir_to_cube(dirs: np.ndarray):
    """Directions (N,3) -> (face (N,), u (N,), v (N,)) with u,v in [0,1]."""
    d = np.asarray(dirs, dtype=np.float64)
    ax = np.abs(d)
    major = ax.argmax(axis=1)
    sign = np.take_along_axis(d, major[:, None], axis=1)[:, 0] >= 0
    face = major * 2 + (~sign).astype(np.int64)
    fa = _FACE_AXES[face]
    ma = np.abs(np.einsum("nj,nj->n", d, fa[:, 0]))
    sc = np.einsum("nj,nj->n", d, fa[:, 1])
    tc = np.einsum("nj,nj->n", d, fa[:, 2])
    u = 0.5 * (sc / np.maximum(ma, 1e-12) + 1.0)
    v = 0.5 * (tc / np.maximum(ma, 1e-12) + 1.0)
    return face, u, v


def cube_to_dir(face: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    fa = _FACE_AXES[np.asarray(face, dtype=np.int64)]
    d = fa[:, 0] + (2 * u - 1)[:, None] * fa[:, 1] + (2 * v - 1)[:, None] * fa[:, 2]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def texel_directions(res: int) -> np.ndarray:
    """Unit directions of all 6*res*res texel centers, face-major order."""
    grid = (np.arange(res) + 0.5) / res
    uu, vv = np.meshgrid(grid, grid, indexing="xy")
    dirs = []
    for f in range(6):
        face = np.full(res * res, f)
        dirs.append(cube_to_dir(face, uu.reshape(-1), vv.reshape(-1)))
    return np.concatenate(dirs)


def _bilinear_taps(face, u, v, res):
    """4 taps (flat indices into 6*res*res) + weights, clamp-to-edge per face."""
    x = np.clip(u * res - 0.5, 0, res - 1)
    y = np.clip(v * res - 0.5, 0, res - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(res - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(res - 2, 0))
    fx = x - x0
    fy = y - y0
    base = face * res * res
    idx = np.stack(
        [
            base + y0 * res + x0,
            base + y0 * res + np.minimum(x0 + 1, res - 1),
            base + np.minimum(y0 + 1, res - 1) * res + x0,
            base + np.minimum(y0 + 1, res - 1) * res + np.minimum(x0 + 1, res - 1),
        ],
        axis=1,
    )
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def sample_cubemap(env, dirs) -> Tensor:
    """Bilinear cubemap sample, differentiable in the radiance (and in the
    directions when given as a Tensor)."""
    env_t = env if isinstance(env, Tensor) else Tensor(np.asarray(env, dtype=np.float32))
    res = env_t.data.shape[1]
    flat = T.reshape(env_t, (6 * res * res, env_t.data.shape[3]))
    if not isinstance(dirs, Tensor):
        face, u, v = dir_to_cube(dirs)
        idx, w = _bilinear_taps(face, u, v, res)
        out = None
        for k in range(4):
            term = T.mul(T.take(flat, idx[:, k]), Tensor(w[:, k : k + 1].astype(np.float32)))
            out = term if out is None else T.add(out, term)
        return out

    # graph path: face choice is frozen from the data, uv stays differentiable
    face, _, _ = dir_to_cube(dirs.data)
    fa = _FACE_AXES[face].astype(np.float32)
    ma = T.absolute(T.dot(dirs, Tensor(fa[:, 0])))
    sc = T.dot(dirs, Tensor(fa[:, 1]))
    tc = T.dot(dirs, Tensor(fa[:, 2]))
    half = T.constant(0.5)
    u_t = T.mul(half, T.add(T.div(sc, ma), T.constant(1.0)))
    v_t = T.mul(half, T.add(T.div(tc, ma), T.constant(1.0)))

    x = T.clamp(T.sub(T.mul(u_t, T.constant(float(res))), half), 0.0, res - 1)
    y = T.clamp(T.sub(T.mul(v_t, T.constant(float(res))), half), 0.0, res - 1)
    x0 = np.clip(np.floor(x.data[:, 0]).astype(np.int64), 0, max(res - 2, 0))
    y0 = np.clip(np.floor(y.data[:, 0]).astype(np.int64), 0, max(res - 2, 0))
    fx = T.sub(x, Tensor(x0[:, None].astype(np.float32)))
    fy = T.sub(y, Tensor(y0[:, None].astype(np.float32)))
    one = T.constant(1.0)
    base = face * res * res
    x1 = np.minimum(x0 + 1, res - 1)
    y1 = np.minimum(y0 + 1, res - 1)
    taps = (
        (base + y0 * res + x0, T.mul(T.sub(one, fx), T.sub(one, fy))),
        (base + y0 * res + x1, T.mul(fx, T.sub(one, fy))),
        (base + y1 * res + x0, T.mul(T.sub(one, fx), fy)),
        (base + y1 * res + x1, T.mul(fx, fy)),
    )
    out = None
    for idx, w in taps:
        term = T.mul(T.take(flat, idx), w)
        out = term if out is None else T.add(out, term)
    return out


def sparse_apply(matrix: sparse.csr_matrix, matrix_t: sparse.csr_matrix, x: Tensor) -> Tensor:
    """Differentiable out = matrix @ x for a constant sparse matrix."""

    def vjp(g):
        return (sparse_apply(matrix_t, matrix, g),)

    data = matrix @ x.data
    return Tensor._result(data.astype(x.data.dtype), (x,), vjp, "sparse_matmul")


def _hammersley(n: int) -> np.ndarray:
    i = np.arange(n)
    bits = i.astype(np.uint32)
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    return np.stack([i / n, bits.astype(np.float64) * 2.3283064365386963e-10], axis=1)


def _tangent_frame(n: np.ndarray):
    up = np.where(np.abs(n[:, 2:3]) < 0.999, np.array([0.0, 0, 1]), np.array([1.0, 0, 0]))
    t = np.cross(up, n)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n, t)
    return t, b


def ggx_sample_dirs(n: np.ndarray, roughness: float, count: int):
    """Reflection-space GGX importance directions (N=V=R) and n.l weights."""
    alpha = roughness * roughness
    xi = _hammersley(count)
    phi = 2 * np.pi * xi[:, 0]
    cos_t = np.sqrt((1 - xi[:, 1]) / (1 + (alpha * alpha - 1) * xi[:, 1]))
    sin_t = np.sqrt(np.maximum(1 - cos_t * cos_t, 0))
    h_local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    t, b = _tangent_frame(n)
    h = h_local[None, :, 0:1] * t[:, None, :] + h_local[None, :, 1:2] * b[:, None, :] + h_local[None, :, 2:3] * n[:, None, :]
    ndoth = np.einsum("nsj,nj->ns", h, n)
    l = 2 * ndoth[..., None] * h - n[:, None, :]
    w = np.maximum(np.einsum("nsj,nj->ns", l, n), 0.0)
    return l, w


def cosine_sample_dirs(n: np.ndarray, count: int):
    xi = _hammersley(count)
    phi = 2 * np.pi * xi[:, 0]
    cos_t = np.sqrt(1 - xi[:, 1])
    sin_t = np.sqrt(xi[:, 1])
    l_local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    t, b = _tangent_frame(n)
    return (
        l_local[None, :, 0:1] * t[:, None, :]
        + l_local[None, :, 1:2] * b[:, None, :]
        + l_local[None, :, 2:3] * n[:, None, :]
    )


def _build_operator(base_res: int, out_res: int, dirs_fn) -> sparse.csr_matrix:
    """Rows: output texels; cols: base texels; weighted bilinear taps."""
    out_dirs = texel_directions(out_res)
    l, w = dirs_fn(out_dirs)
    n_out, n_s = w.shape
    face, u, v = dir_to_cube(l.reshape(-1, 3))
    idx, bw = _bilinear_taps(face, u, v, base_res)
    rows = np.repeat(np.arange(n_out), n_s * 4)
    cols = idx.reshape(-1)
    vals = (bw * w.reshape(-1)[:, None]).reshape(-1)
    mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n_out, 6 * base_res * base_res)).tocsr()
    norm = np.asarray(mat.sum(axis=1)).reshape(-1)
    norm[norm <= 0] = 1.0
    return sparse.diags(1.0 / norm) @ mat


_OPERATOR_CACHE: dict = {}


def prefilter_operators(base_res: int, bins=ROUGHNESS_BINS, irradiance_res: int = 16):
    """(specular operator list, level resolutions, irradiance operator)."""
    key = (base_res, tuple(bins), irradiance_res)
    if key in _OPERATOR_CACHE:
        return _OPERATOR_CACHE[key]
    spec_ops = []
    level_res = []
    for k, r in enumerate(bins):
        res = max(base_res >> k, 8)
        level_res.append(res)
        op = _build_operator(base_res, res, lambda n, r=r: ggx_sample_dirs(n, r, PREFILTER_SAMPLES))
        spec_ops.append((op, sparse.csr_matrix(op.T)))
    cos_op = _build_operator(
        base_res, irradiance_res, lambda n: (cosine_sample_dirs(n, PREFILTER_SAMPLES), np.ones((len(n), PREFILTER_SAMPLES)))
    )
    result = (spec_ops, level_res, (cos_op, sparse.csr_matrix(cos_op.T)))
    _OPERATOR_CACHE[key] = result
    return result


_LUT_CACHE: dict = {}


def brdf_lut(res: int = LUT_RES, samples: int = LUT_SAMPLES) -> np.ndarray:
    """Pre-integrated (scale, bias) over (n.v, roughness), Karis split sum."""
    key = (res, samples)
    if key in _LUT_CACHE:
        return _LUT_CACHE[key]
    nov = (np.arange(res) + 0.5) / res
    rough = (np.arange(res) + 0.5) / res
    out = np.zeros((res, res, 2))
    xi = _hammersley(samples)
    for j, r in enumerate(rough):
        alpha = max(r * r, 1e-4)
        phi = 2 * np.pi * xi[:, 0]
        cos_t = np.sqrt((1 - xi[:, 1]) / (1 + (alpha * alpha - 1) * xi[:, 1]))
        sin_t = np.sqrt(np.maximum(1 - cos_t**2, 0))
        h = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)  # (S,3)
        v = np.stack([np.sqrt(1 - nov**2), np.zeros_like(nov), nov], axis=1)  # (R,3)
        vdoth = v @ h.T  # (R,S)
        l_z = 2 * vdoth * h[None, :, 2] - v[:, 2:3]
        ndotl = np.maximum(l_z, 0.0)
        ndoth = np.maximum(h[None, :, 2], 0.0)
        k = alpha / 2.0
        g_v = nov[:, None] / (nov[:, None] * (1 - k) + k)
        g_l = ndotl / (ndotl * (1 - k) + k + 1e-9)
        g = g_v * g_l
        g_vis = np.where(ndotl > 0, g * np.maximum(vdoth, 0) / np.maximum(ndoth * nov[:, None], 1e-6), 0.0)
        fc = np.power(1 - np.clip(vdoth, 0, 1), 5.0)
        out[:, j, 0] = ((1 - fc) * g_vis).mean(axis=1)
        out[:, j, 1] = (fc * g_vis).mean(axis=1)
    out = out.astype(np.float32)  # indexed as (nov, rough, 2)
    _LUT_CACHE[key] = out
    return out


class EnvLight:
    """Trainable cubemap radiance plus its derived split-sum tables."""

    def __init__(self, store=None, resolution: int = 64, init_value=0.5, name: str = "env.base",
                 tensor: Tensor = None):
        if tensor is not None:
            self.base = tensor
        else:
            data = np.full((6, resolution, resolution, 3), init_value, dtype=np.float32)
            if store is not None:
                if name in store:
                    self.base = store[name]
                else:
                    self.base = store.add(name, Tensor(data))
            else:
                self.base = Tensor(data)
        self.name = name

    @property
    def resolution(self) -> int:
        return self.base.data.shape[1]

    def clamp_nonnegative(self) -> None:
        np.maximum(self.base.data, 0.0, out=self.base.data)

    def prefilter(self):
        """Returns PrefilteredEnv with levels/irradiance as graph tensors."""
        spec_ops, level_res, (cos_op, cos_op_t) = prefilter_operators(self.resolution)
        flat = T.reshape(self.base, (6 * self.resolution * self.resolution, 3))
        levels = []
        for (op, op_t), res in zip(spec_ops, level_res):
            levels.append(T.reshape(sparse_apply(op, op_t, flat), (6, res, res, 3)))
        irr_res = int(np.sqrt(cos_op.shape[0] // 6))
        irr = T.reshape(sparse_apply(cos_op, cos_op_t, flat), (6, irr_res, irr_res, 3))
        return PrefilteredEnv(self, levels, list(ROUGHNESS_BINS), irr, brdf_lut())


class PrefilteredEnv:
    def __init__(self, env: EnvLight, levels, bins, irradiance, lut):
        self.env = env
        self.levels = levels
        self.bins = np.asarray(bins)
        self.irradiance = irradiance
        self.lut = lut

    def sample_specular(self, dirs, roughness) -> Tensor:
        """Prefiltered radiance toward `dirs` at per-sample roughness.

        Linear interpolation between the two neighboring roughness bins;
        differentiable in radiance, direction, and roughness.
        """
        r = roughness if isinstance(roughness, Tensor) else Tensor(np.asarray(roughness, dtype=np.float32))
        rd = np.clip(r.data.reshape(-1), self.bins[0], self.bins[-1])
        hi = np.clip(np.searchsorted(self.bins, rd, side="right"), 1, len(self.bins) - 1)
        lo = hi - 1
        span = (self.bins[hi] - self.bins[lo]).astype(np.float32)
        r_col = T.reshape(r, (len(rd), 1))
        w_hi = T.clamp(
            T.div(T.sub(r_col, Tensor(self.bins[lo].astype(np.float32)[:, None])), Tensor(span[:, None])),
            0.0,
            1.0,
        )
        lo_vals = _gather_levels(self.levels, lo, dirs)
        hi_vals = _gather_levels(self.levels, hi, dirs)
        one = T.constant(1.0)
        return T.add(T.mul(lo_vals, T.sub(one, w_hi)), T.mul(hi_vals, w_hi))

    def sample_irradiance(self, normals) -> Tensor:
        return sample_cubemap(self.irradiance, normals)

    def lut_lookup(self, ndotv, roughness):
        """(scale, bias) tensors; bilinear over the pre-integrated table."""
        n = ndotv if isinstance(ndotv, Tensor) else Tensor(np.asarray(ndotv, dtype=np.float32))
        r = roughness if isinstance(roughness, Tensor) else Tensor(np.asarray(roughness, dtype=np.float32))
        q = T.concatenate([T.reshape(r, (-1, 1)), T.reshape(n, (-1, 1))], axis=1)  # u=rough, v=nov
        vals = T.image_sample(Tensor(self.lut), q)
        return T.getitem(vals, (slice(None), slice(0, 1))), T.getitem(vals, (slice(None), slice(1, 2)))


def _gather_levels(levels, level_idx: np.ndarray, dirs) -> Tensor:
    """Sample per-row levels: rows grouped by level, results re-scattered."""
    n = len(level_idx)
    pieces = []
    index_rows = []
    for li in np.unique(level_idx):
        rows = np.flatnonzero(level_idx == li)
        sub_dirs = dirs if not isinstance(dirs, Tensor) else None
        if isinstance(dirs, Tensor):
            sub = T.take(dirs, rows)
        else:
            sub = np.asarray(dirs)[rows]
        pieces.append(sample_cubemap(levels[li], sub))
        index_rows.append(rows)
    order = np.concatenate(index_rows)
    stacked = T.concatenate(pieces, axis=0)
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    return T.take(stacked, inverse)
