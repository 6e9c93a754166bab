"""Deferred-shading rasterizer.

Visibility (triangle id + depth per pixel) is resolved with a vectorized
z-buffer in plain numpy; differentiability comes from recomputing
perspective-correct barycentrics for the covered pixels as tensor ops, so
gradients reach vertex positions and vertex attributes. Silhouette gradients
are provided separately by soft_mask (sigmoid of signed 2-D distance to the
silhouette).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..cameras import Camera
from ..diffcore import Tensor
from ..diffcore import tensor as T

Z_EPS = 1e-6


@dataclass
class GBuffer:
    tri_id: np.ndarray  # (H,W) int, -1 = background
    bary: np.ndarray  # (H,W,3) perspective-correct barycentrics
    depth: np.ndarray  # (H,W) camera-space depth (finite on coverage)
    mask: np.ndarray  # (H,W) bool

    @property
    def pixels(self) -> np.ndarray:
        """Covered pixel coordinates (P,2) as (row, col), row-major order."""
        return np.argwhere(self.mask)


def _project(vertices: np.ndarray, camera: Camera):
    cam = vertices @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    u = camera.intrinsics[0, 0] * cam[:, 0] / np.maximum(z, Z_EPS) + camera.intrinsics[0, 2]
    v = camera.intrinsics[1, 1] * cam[:, 1] / np.maximum(z, Z_EPS) + camera.intrinsics[1, 2]
    return u, v, z


def rasterize(vertices, faces: np.ndarray, camera: Camera) -> GBuffer:
    """Nearest-depth rasterization with perspective-correct barycentrics.

    Faces with any vertex at or behind the camera plane are dropped.
    """
    verts = vertices.data if isinstance(vertices, Tensor) else np.asarray(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    H, W = camera.height, camera.width
    tri_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3), dtype=np.float64)
    depth = np.full((H, W), np.inf)
    if len(faces) == 0 or len(verts) == 0:
        return GBuffer(tri_id, bary, depth, np.zeros((H, W), bool))

    u, v, z = _project(verts, camera)
    fu, fv, fz = u[faces], v[faces], z[faces]  # (F,3)
    ok = (fz > Z_EPS).all(axis=1)
    x0 = np.clip(np.floor(fu.min(axis=1) - 0.5), 0, W - 1).astype(np.int64)
    x1 = np.clip(np.ceil(fu.max(axis=1) + 0.5), 0, W).astype(np.int64)
    y0 = np.clip(np.floor(fv.min(axis=1) - 0.5), 0, H - 1).astype(np.int64)
    y1 = np.clip(np.ceil(fv.max(axis=1) + 0.5), 0, H).astype(np.int64)
    wspan = np.maximum(x1 - x0, 0)
    hspan = np.maximum(y1 - y0, 0)
    counts = np.where(ok, wspan * hspan, 0)
    if counts.sum() == 0:
        return GBuffer(tri_id, bary, depth, np.zeros((H, W), bool))

    # ragged fragment expansion without a per-face python loop
    f_idx = np.repeat(np.arange(len(faces)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    px = x0[f_idx] + local % np.maximum(wspan[f_idx], 1)
    py = y0[f_idx] + local // np.maximum(wspan[f_idx], 1)

    cx = px + 0.5
    cy = py + 0.5
    ax, ay = fu[f_idx, 0], fv[f_idx, 0]
    bx, by = fu[f_idx, 1], fv[f_idx, 1]
    qx, qy = fu[f_idx, 2], fv[f_idx, 2]
    area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
    w0 = (bx - cx) * (qy - cy) - (by - cy) * (qx - cx)
    w1 = (qx - cx) * (ay - cy) - (qy - cy) * (ax - cx)
    w2 = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    denom = np.where(np.abs(area) < 1e-12, 1.0, area)
    l0 = w0 / denom
    l1 = w1 / denom
    l2 = w2 / denom
    inside = (np.abs(area) > 1e-12) & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    if not inside.any():
        return GBuffer(tri_id, bary, depth, np.zeros((H, W), bool))

    f_idx = f_idx[inside]
    px, py = px[inside], py[inside]
    l0, l1, l2 = l0[inside], l1[inside], l2[inside]
    inv_z = l0 / fz[f_idx, 0] + l1 / fz[f_idx, 1] + l2 / fz[f_idx, 2]
    frag_depth = 1.0 / inv_z
    p0 = l0 / fz[f_idx, 0] * frag_depth
    p1 = l1 / fz[f_idx, 1] * frag_depth
    p2 = l2 / fz[f_idx, 2] * frag_depth

    pix = py * W + px
    order = np.lexsort((frag_depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    rows, cols = pix[win] // W, pix[win] % W
    tri_id[rows, cols] = f_idx[win]
    bary[rows, cols, 0] = p0[win]
    bary[rows, cols, 1] = p1[win]
    bary[rows, cols, 2] = p2[win]
    depth[rows, cols] = frag_depth[win]
    return GBuffer(tri_id, bary, depth, tri_id >= 0)


def interpolate(gbuffer: GBuffer, vertices, faces: np.ndarray, camera: Camera, attributes: dict):
    """Differentiable perspective-correct interpolation on covered pixels.

    `attributes` maps name -> (V,C) Tensor (or array). Returns a dict of
    (P,C) tensors, plus 'position' is always available when requested via the
    attributes dict. Gradients flow into vertex positions (through the
    barycentric computation) and into the attribute tensors.
    """
    pixels = gbuffer.pixels
    tri = gbuffer.tri_id[pixels[:, 0], pixels[:, 1]]
    faces = np.asarray(faces, dtype=np.int64)
    i0, i1, i2 = faces[tri, 0], faces[tri, 1], faces[tri, 2]
    verts = vertices if isinstance(vertices, Tensor) else Tensor(np.asarray(vertices, dtype=np.float32))

    R = Tensor(camera.rotation.T.astype(np.float32))
    t = Tensor(camera.translation.astype(np.float32))
    K = camera.intrinsics

    def proj(idx):
        cam = T.add(T.matmul(T.take(verts, idx), R), t)
        x = T.getitem(cam, (slice(None), slice(0, 1)))
        y = T.getitem(cam, (slice(None), slice(1, 2)))
        z = T.getitem(cam, (slice(None), slice(2, 3)))
        u = T.add(T.mul(T.div(x, z), T.constant(K[0, 0])), T.constant(K[0, 2]))
        v = T.add(T.mul(T.div(y, z), T.constant(K[1, 1])), T.constant(K[1, 2]))
        return u, v, z

    au, av, az = proj(i0)
    bu, bv, bz = proj(i1)
    qu, qv, qz = proj(i2)
    cx = Tensor((pixels[:, 1] + 0.5).astype(np.float32)[:, None])
    cy = Tensor((pixels[:, 0] + 0.5).astype(np.float32)[:, None])

    def edge(x1, y1, x2, y2):
        return T.sub(T.mul(T.sub(x1, cx), T.sub(y2, cy)), T.mul(T.sub(y1, cy), T.sub(x2, cx)))

    w0 = edge(bu, bv, qu, qv)
    w1 = edge(qu, qv, au, av)
    w2 = edge(au, av, bu, bv)
    area = T.add(T.add(w0, w1), w2)
    l0 = T.div(w0, area)
    l1 = T.div(w1, area)
    l2 = T.div(w2, area)
    g0 = T.div(l0, az)
    g1 = T.div(l1, bz)
    g2 = T.div(l2, qz)
    inv_z = T.add(T.add(g0, g1), g2)
    p0 = T.div(g0, inv_z)
    p1 = T.div(g1, inv_z)
    p2 = T.div(g2, inv_z)

    out = {"bary": T.concatenate([p0, p1, p2], axis=1), "depth": T.div(T.constant(1.0), inv_z)}
    for name, attr in attributes.items():
        at = attr if isinstance(attr, Tensor) else Tensor(np.asarray(attr, dtype=np.float32))
        out[name] = T.add(
            T.add(T.mul(T.take(at, i0), p0), T.mul(T.take(at, i1), p1)),
            T.mul(T.take(at, i2), p2),
        )
    return out


# -- soft silhouette --


_EDGE_CACHE: dict = {}


def _edge_topology(faces: np.ndarray):
    key = (faces.shape[0], faces.ctypes.data)
    cached = _EDGE_CACHE.get(key)
    if cached is not None:
        return cached
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    owner = np.tile(np.arange(len(faces)), 3)
    e_sorted = np.sort(e, axis=1)
    uniq, inv, counts = np.unique(e_sorted, axis=0, return_inverse=True, return_counts=True)
    f1 = np.full(len(uniq), -1, dtype=np.int64)
    f2 = np.full(len(uniq), -1, dtype=np.int64)
    for row, edge_id in enumerate(inv):
        if f1[edge_id] < 0:
            f1[edge_id] = owner[row]
        else:
            f2[edge_id] = owner[row]
    result = (uniq, f1, f2)
    if len(_EDGE_CACHE) > 16:
        _EDGE_CACHE.clear()
    _EDGE_CACHE[key] = result
    return result


def soft_mask(vertices, faces: np.ndarray, camera: Camera, sharpness: float = 2.0, band: float = None) -> Tensor:
    """sigmoid(sharpness * signed pixel distance to the silhouette).

    Pixels inside the coverage are positive. Within a band around the
    silhouette the distance is the differentiable point-to-segment distance
    to the nearest silhouette edge, so gradients reach vertex positions; far
    pixels take their (saturated) constant value from a distance transform.
    """
    faces = np.asarray(faces, dtype=np.int64)
    verts_t = vertices if isinstance(vertices, Tensor) else Tensor(np.asarray(vertices, dtype=np.float32))
    H, W = camera.height, camera.width
    gb = rasterize(verts_t.data, faces, camera)
    cover = gb.mask
    if not cover.any():
        return T.mul(Tensor(np.full((H, W), -100.0, dtype=np.float32)), T.constant(0.0))  # all ~0, no grads

    inside_d = ndimage.distance_transform_edt(cover)
    outside_d = ndimage.distance_transform_edt(~cover)
    signed = np.where(cover, inside_d, -outside_d).astype(np.float64)

    if band is None:
        band = 6.0 / sharpness + 1.5
    band_mask = np.abs(signed) <= band
    base = 1.0 / (1.0 + np.exp(-np.clip(sharpness * signed, -60, 60)))

    # silhouette edges: front/back transitions plus open boundaries
    u, v, z = _project(verts_t.data, camera)
    fu, fv = u[faces], v[faces]
    area2 = (fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0]) - (fv[:, 1] - fv[:, 0]) * (fu[:, 2] - fu[:, 0])
    front = area2 > 0
    edges, f1, f2 = _edge_topology(faces)
    sil = np.flatnonzero((f2 < 0) | (front[f1] != np.where(f2 >= 0, front[f2], front[f1])))
    if len(sil) == 0:
        return T.sigmoid(T.mul(Tensor(signed.astype(np.float32)), T.constant(float(sharpness))))

    # keep only edges whose projected midpoint lies near the coverage boundary
    mid_u = 0.5 * (u[edges[sil, 0]] + u[edges[sil, 1]])
    mid_v = 0.5 * (v[edges[sil, 0]] + v[edges[sil, 1]])
    mu = np.clip(mid_v - 0.5, 0, H - 1).astype(np.int64)
    mv = np.clip(mid_u - 0.5, 0, W - 1).astype(np.int64)
    near_boundary = np.abs(signed[mu, mv]) <= 3.0
    sil = sil[near_boundary] if near_boundary.any() else sil

    band_px = np.argwhere(band_mask)
    pcx = band_px[:, 1] + 0.5
    pcy = band_px[:, 0] + 0.5

    # nearest edge per band pixel (selection fixed, distance differentiable)
    a_u, a_v = u[edges[sil, 0]], v[edges[sil, 0]]
    b_u, b_v = u[edges[sil, 1]], v[edges[sil, 1]]
    eu, ev = b_u - a_u, b_v - a_v
    L2 = np.maximum(eu * eu + ev * ev, 1e-12)
    tpar = ((pcx[:, None] - a_u) * eu + (pcy[:, None] - a_v) * ev) / L2
    tpar = np.clip(tpar, 0.0, 1.0)
    dx = pcx[:, None] - (a_u + tpar * eu)
    dy = pcy[:, None] - (a_v + tpar * ev)
    nearest = np.argmin(dx * dx + dy * dy, axis=1)

    sel = sil[nearest]
    i0 = edges[sel, 0]
    i1 = edges[sel, 1]

    R = Tensor(camera.rotation.T.astype(np.float32))
    tt = Tensor(camera.translation.astype(np.float32))
    K = camera.intrinsics

    def proj_t(idx):
        cam = T.add(T.matmul(T.take(verts_t, idx), R), tt)
        x = T.getitem(cam, (slice(None), slice(0, 1)))
        y = T.getitem(cam, (slice(None), slice(1, 2)))
        zz = T.getitem(cam, (slice(None), slice(2, 3)))
        uu = T.add(T.mul(T.div(x, zz), T.constant(K[0, 0])), T.constant(K[0, 2]))
        vv = T.add(T.mul(T.div(y, zz), T.constant(K[1, 1])), T.constant(K[1, 2]))
        return uu, vv

    au_t, av_t = proj_t(i0)
    bu_t, bv_t = proj_t(i1)
    px_t = Tensor(pcx.astype(np.float32)[:, None])
    py_t = Tensor(pcy.astype(np.float32)[:, None])
    eu_t = T.sub(bu_t, au_t)
    ev_t = T.sub(bv_t, av_t)
    len2 = T.add(T.add(T.mul(eu_t, eu_t), T.mul(ev_t, ev_t)), T.constant(1e-9))
    tp = T.clamp(
        T.div(T.add(T.mul(T.sub(px_t, au_t), eu_t), T.mul(T.sub(py_t, av_t), ev_t)), len2), 0.0, 1.0
    )
    ddx = T.sub(px_t, T.add(au_t, T.mul(tp, eu_t)))
    ddy = T.sub(py_t, T.add(av_t, T.mul(tp, ev_t)))
    dist = T.sqrt(T.add(T.add(T.mul(ddx, ddx), T.mul(ddy, ddy)), T.constant(1e-12)))
    sign = Tensor(np.where(cover[band_px[:, 0], band_px[:, 1]], 1.0, -1.0).astype(np.float32)[:, None])
    band_vals = T.sigmoid(T.mul(T.mul(dist, sign), T.constant(float(sharpness))))

    flat_idx = band_px[:, 0] * W + band_px[:, 1]
    scattered = T.reshape(_scatter_rows(band_vals, flat_idx, H * W), (H, W))
    keep = np.where(band_mask, 0.0, base).astype(np.float32)
    return T.add(scattered, Tensor(keep))


def _scatter_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    from ..diffcore.tensor import _bincount_scatter

    return _bincount_scatter(values, idx, (n_rows, values.data.shape[1]))
