"""Stage-2 optimization: silhouette bias correction, then materials and
environment light (network first, baked textures afterward) under the
pseudo multi-view supervision, with optional small vertex refinement.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .. import geom
from ..bodymodel import clamp_offset
from ..diffcore import NonFiniteError, OptimConfig, ParamStore, Tensor, adam_step
from ..diffcore import tensor as T
from .envlight import EnvLight, sample_cubemap, sparse_apply
from .raster import interpolate, rasterize
from .shading import (
    MaterialNetwork,
    MaterialTextures,
    linear_to_srgb,
    loss_light,
    loss_render,
    loss_smooth,
    material_eval,
    shade_splitsum,
)


def render_view_linear(mesh, atlas, material_backend, camera, env_pre, vertices=None):
    """Rasterize one view and shade the covered pixels.

    Returns (linear rgb (P,3) Tensor, covered pixels (P,2), H, W). `vertices`
    may be a Tensor (vertex refinement) or defaults to the mesh vertices.
    """
    verts = vertices if vertices is not None else Tensor(mesh.vertices.astype(np.float32))
    gb = rasterize(verts.data, mesh.faces, camera)
    pixels = gb.pixels
    if len(pixels) == 0:
        return None, pixels, camera.height, camera.width

    normals_v = geom.vertex_normals(verts.data.astype(np.float64), mesh.faces).astype(np.float32)
    attrs = interpolate(gb, verts, mesh.faces, camera, {"position": verts, "normal": normals_v})
    n_px = T.normalize(attrs["normal"])
    pos_px = attrs["position"]
    vdir = camera.center[None, :] - pos_px.data
    vdir = (vdir / np.linalg.norm(vdir, axis=1, keepdims=True)).astype(np.float32)

    if isinstance(material_backend, MaterialTextures):
        tri = gb.tri_id[pixels[:, 0], pixels[:, 1]]
        bary = attrs["bary"]
        corner_uv = atlas.uvs[tri].astype(np.float32)  # (P,3,2)
        uv = None
        for k in range(3):
            term = T.mul(T.getitem(bary, (slice(None), slice(k, k + 1))), Tensor(corner_uv[:, k, :]))
            uv = term if uv is None else T.add(uv, term)
        mats = material_eval(material_backend, uv)
    else:
        mats = material_eval(material_backend, pos_px.data.astype(np.float32))
    rgb = shade_splitsum(n_px, vdir, mats, env_pre)
    return rgb, pixels, camera.height, camera.width


def _uniform_laplacian(vertices: np.ndarray, faces: np.ndarray) -> sparse.csr_matrix:
    v = len(vertices)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(v, v)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    deg[deg == 0] = 1.0
    return sparse.diags(1.0 / deg) @ adj - sparse.identity(v)


@dataclass
class Stage2Config:
    iterations: int = 15000  # total budget: bias + texture phases
    bias_iterations: int = 1000
    texture_iterations: int = 10000
    network_fraction: float = 0.4  # f_t network phase before baking
    bake_resolution: int = 512
    learning_rate: float = 5e-3
    env_resolution: int = 64
    light_weight: float = 0.005  # lambda_4
    smooth_weight: float = 0.002  # lambda_5
    smooth_eps: float = 0.01
    smooth_points: int = 128
    vertex_refine: bool = True
    vertex_limit: float = 0.01
    laplacian_weight: float = 10.0
    material_hidden: int = 64
    material_layers: int = 4
    bias_views: int = 8
    seed: int = 0
    log_every: int = 100


def train_stage2(mesh, atlas, views, config: Stage2Config, out_dir: str, quiet: bool = True):
    """Returns (refined mesh, MaterialTextures, EnvLight, info dict)."""
    from ..meshex import Mesh, optimize_bias
    from ..uvtex import bake_textures

    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    log_f = open(os.path.join(out_dir, "stage2_log.jsonl"), "a")
    t0 = time.time()

    # phase 1: boundary bias on the silhouettes of ~8 evenly spaced views
    step = max(len(views) // config.bias_views, 1)
    bias_views = views[::step][: config.bias_views]
    f0, mesh = optimize_bias(
        mesh,
        [v.mask.astype(np.float32) for v in bias_views],
        [v.camera for v in bias_views],
        iterations=config.bias_iterations,
    )
    log_f.write(json.dumps({"event": "bias_done", "f0": f0}) + "\n")
    log_f.flush()

    # phase 2: material network + env (+ small vertex refinement)
    store = ParamStore()
    net = MaterialNetwork(store, hidden=config.material_hidden, layers=config.material_layers,
                          rng=np.random.default_rng(config.seed + 1))
    env = EnvLight(store, resolution=config.env_resolution)
    verts0 = Tensor(mesh.vertices.astype(np.float32))
    if config.vertex_refine:
        vdelta = store.add("mesh.delta", np.zeros_like(mesh.vertices, dtype=np.float32))
        lap = _uniform_laplacian(mesh.vertices, mesh.faces)
        lap_t = sparse.csr_matrix(lap.T)
    optim = OptimConfig(learning_rate=config.learning_rate)

    net_iters = int(config.network_fraction * config.texture_iterations)
    tex_iters = config.texture_iterations - net_iters
    backend = net
    textures = None

    def current_vertices():
        if not config.vertex_refine:
            return verts0
        return T.add(verts0, clamp_offset(vdelta, config.vertex_limit))

    def surface_backend_points(count):
        idx = rng.integers(len(mesh.faces), size=count)
        b = rng.dirichlet((1.0, 1.0, 1.0), size=count)
        return np.einsum("nc,ncj->nj", b, mesh.vertices[mesh.faces[idx]]).astype(np.float32)

    def one_iteration(it, backend, textures):
        vi = int(rng.integers(len(views)))
        view = views[vi]
        verts_t = current_vertices()
        pre = env.prefilter()
        rgb, pixels, H, W = render_view_linear(mesh, atlas, backend, view.camera, pre, vertices=verts_t)
        losses = {}
        if rgb is not None:
            fg = view.mask[pixels[:, 0], pixels[:, 1]]
            if fg.any():
                sel = np.flatnonzero(fg)
                target = view.image[pixels[sel, 0], pixels[sel, 1]]
                losses["render"] = loss_render(T.take(rgb, sel), target)
        losses["light"] = loss_light(env, config.light_weight)
        if config.smooth_points > 0:
            pts = surface_backend_points(config.smooth_points)
            eps_pts = pts + rng.normal(0, config.smooth_eps, pts.shape).astype(np.float32)
            if isinstance(backend, MaterialTextures):
                kd_a = backend.sample(_points_to_uv(mesh, atlas, pts)).kd
                kd_b = backend.sample(_points_to_uv(mesh, atlas, eps_pts)).kd
            else:
                kd_a = material_eval(backend, pts).kd
                kd_b = material_eval(backend, eps_pts).kd
            losses["smooth"] = loss_smooth(kd_a, kd_b, config.smooth_weight)
        if config.vertex_refine:
            smoothed = sparse_apply(lap, lap_t, clamp_offset(vdelta, config.vertex_limit))
            losses["laplacian"] = T.mul(T.constant(config.laplacian_weight),
                                        T.reduce_mean(T.mul(smoothed, smoothed)))
        total = None
        for v in losses.values():
            total = v if total is None else T.add(total, v)
        store.zero_grad()
        total.backward()
        adam_step(store, optim)
        env.clamp_nonnegative()
        if isinstance(backend, MaterialTextures):
            backend.project()
        if it % config.log_every == 0:
            entry = {"iter": it, "phase": "texture" if isinstance(backend, MaterialTextures) else "network"}
            entry.update({k: float(v.data) for k, v in losses.items()})
            log_f.write(json.dumps(entry) + "\n")
            log_f.flush()
            if not quiet:
                print(f"[stage2 {it}] " + " ".join(f"{k}={float(v.data):.4f}" for k, v in losses.items()))

    try:
        for it in range(net_iters):
            one_iteration(it, backend, None)

        textures = bake_textures(net, mesh, atlas, config.bake_resolution)
        for name, tex in (("tex.kd", textures.kd), ("tex.rough", textures.roughness), ("tex.metal", textures.metalness)):
            store.params[name] = tex
            tex.requires_grad = True
            store.m[name] = np.zeros_like(tex.data)
            store.v[name] = np.zeros_like(tex.data)
            store.steps[name] = 0
        store.set_trainable("material.", False)
        backend = textures

        for it in range(net_iters, net_iters + tex_iters):
            one_iteration(it, backend, textures)
    except NonFiniteError as exc:
        log_f.write(json.dumps({"event": "diverged", "error": str(exc)}) + "\n")
        log_f.close()
        raise

    if config.vertex_refine:
        final_verts = current_vertices().data.astype(np.float64)
        mesh = Mesh(final_verts, mesh.faces, uvs=mesh.uvs)
    if textures is None:
        textures = bake_textures(net, mesh, atlas, config.bake_resolution)
    log_f.write(json.dumps({"event": "done", "secs": time.time() - t0, "f0": f0}) + "\n")
    log_f.close()
    return mesh, textures, env, {"f0": f0}


_UV_CACHE: dict = {}


def _points_to_uv(mesh, atlas, points: np.ndarray) -> np.ndarray:
    """Project points to the nearest surface point and return its UV."""
    from scipy.spatial import cKDTree

    key = id(mesh)
    tree = _UV_CACHE.get(key)
    if tree is None:
        tree = cKDTree(mesh.vertices[mesh.faces].mean(axis=1))
        if len(_UV_CACHE) > 8:
            _UV_CACHE.clear()
        _UV_CACHE[key] = tree
    face_idx, bary, _ = geom.nearest_on_mesh(points, mesh.vertices, mesh.faces, tree)
    corner_uv = atlas.uvs[face_idx]  # (N,3,2)
    return np.einsum("nc,ncj->nj", bary, corner_uv).astype(np.float32)
