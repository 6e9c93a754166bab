"""Shared small-geometry helpers (plain numpy, no autodiff)."""

from __future__ import annotations

import numpy as np


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (...,3) to rotation matrices (...,3,3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    single = aa.ndim == 1
    aa = np.atleast_2d(aa)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-12
    axis = np.where(theta > 1e-12, aa / np.maximum(theta, 1e-12), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zeros = np.zeros_like(x)
    K = np.stack(
        [
            np.stack([zeros, -z, y], axis=-1),
            np.stack([z, zeros, -x], axis=-1),
            np.stack([-y, x, zeros], axis=-1),
        ],
        axis=-2,
    )
    th = theta[..., None]
    R = np.eye(3) + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)
    R[small] = np.eye(3)
    R = R.astype(np.float64)
    return R[0] if single else R


def compose(Ra, ta, Rb, tb):
    """(Ra,ta) o (Rb,tb): first apply b, then a."""
    return Ra @ Rb, Ra @ tb + ta


def invert(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -(Rt @ t[..., None])[..., 0]


def triangle_normals(vertices: np.ndarray, faces: np.ndarray, normalized: bool = True) -> np.ndarray:
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    n = np.cross(b - a, c - a)
    if normalized:
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.maximum(ln, 1e-20)
    return n


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    n = triangle_normals(vertices, faces, normalized=False)
    return 0.5 * np.linalg.norm(n, axis=1)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals, unit length."""
    fn = triangle_normals(vertices, faces, normalized=False)
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    ln = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.maximum(ln, 1e-20)


def closest_point_on_triangles(points: np.ndarray, tri: np.ndarray):
    """Closest point on each triangle for each point.

    points (N,3), tri (N,3,3) -> (closest (N,3), barycentric (N,3), dist (N,)).
    Vectorized region test (Ericson, Real-Time Collision Detection).
    """
    p = points.astype(np.float64)
    a, b, c = tri[:, 0].astype(np.float64), tri[:, 1].astype(np.float64), tri[:, 2].astype(np.float64)
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    uvw = np.zeros((len(p), 3))
    out = np.zeros_like(p)
    done = np.zeros(len(p), dtype=bool)

    def settle(mask, point, bary):
        m = mask & ~done
        if not m.any():
            return
        out[m] = point[m]
        b = np.asarray(bary, dtype=np.float64)
        uvw[m] = b[m] if b.ndim > 1 else b
        done[m] = True

    # vertex regions
    settle((d1 <= 0) & (d2 <= 0), a, (1.0, 0.0, 0.0))
    settle((d3 >= 0) & (d4 <= d3), b, (0.0, 1.0, 0.0))
    settle((d6 >= 0) & (d5 <= d6), c, (0.0, 0.0, 1.0))

    # edge AB
    vc = d1 * d4 - d3 * d2
    v = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=(d1 - d3) != 0)
    mask = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    bary = np.stack([1 - v, v, np.zeros_like(v)], axis=1)
    settle(mask, a + v[:, None] * ab, bary)

    # edge AC
    vb = d5 * d2 - d1 * d6
    w = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=(d2 - d6) != 0)
    mask = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    bary = np.stack([1 - w, np.zeros_like(w), w], axis=1)
    settle(mask, a + w[:, None] * ac, bary)

    # edge BC
    va = d3 * d6 - d5 * d4
    den = (d4 - d3) + (d5 - d6)
    w2 = np.divide(d4 - d3, den, out=np.zeros_like(den), where=den != 0)
    mask = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    bary = np.stack([np.zeros_like(w2), 1 - w2, w2], axis=1)
    settle(mask, b + w2[:, None] * (c - b), bary)

    # interior
    denom = va + vb + vc
    denom = np.where(denom == 0, 1.0, denom)
    v_in = vb / denom
    w_in = vc / denom
    bary = np.stack([1 - v_in - w_in, v_in, w_in], axis=1)
    settle(np.ones(len(p), dtype=bool), a + v_in[:, None] * ab + w_in[:, None] * ac, bary)

    dist = np.linalg.norm(p - out, axis=1)
    return out, uvw, dist


def nearest_on_mesh(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, tree=None, k: int = 6):
    """Nearest surface point on a triangle mesh via centroid-KDTree shortlist.

    Returns (face index, barycentric (N,3), distance (N,)). Pass a cKDTree
    over face centroids to reuse it across calls.
    """
    from scipy.spatial import cKDTree

    centroids = vertices[faces].mean(axis=1)
    if tree is None:
        tree = cKDTree(centroids)
    k = min(k, len(faces))
    _, cand = tree.query(points, k=k)
    cand = np.atleast_2d(cand)
    if cand.shape[0] != len(points):
        cand = cand.reshape(len(points), -1)
    n, kk = cand.shape
    flat_faces = cand.reshape(-1)
    tri = vertices[faces[flat_faces]]
    rep_points = np.repeat(points, kk, axis=0)
    _, bary, dist = closest_point_on_triangles(rep_points, tri)
    dist = dist.reshape(n, kk)
    best = np.argmin(dist, axis=1)
    rows = np.arange(n)
    face_idx = cand[rows, best]
    bary = bary.reshape(n, kk, 3)[rows, best]
    return face_idx, bary, dist[rows, best]


def sample_surface(vertices: np.ndarray, faces: np.ndarray, count: int, rng) -> np.ndarray:
    """Area-weighted uniform surface samples."""
    areas = triangle_areas(vertices, faces)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area")
    probs = areas / total
    pick = rng.choice(len(faces), size=count, p=probs)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    tri = vertices[faces[pick]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def ray_box(origins: np.ndarray, dirs: np.ndarray, box_min, box_max):
    """Slab intersection. Returns (tnear, tfar); tnear > tfar means miss."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, np.copysign(1e-12, dirs), dirs)
    t0 = (np.asarray(box_min) - origins) * inv
    t1 = (np.asarray(box_max) - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    return tmin, tmax


def look_at(eye, center, up=(0.0, 1.0, 0.0)):
    """World-to-camera rotation/translation, +z forward, +y down convention."""
    eye = np.asarray(eye, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    f = center - eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(r)
    if nr < 1e-9:  # looking along up: pick an arbitrary right vector
        r = np.cross(f, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(r)
    r = r / nr
    d = np.cross(f, r)
    R = np.stack([r, d, f], axis=0)
    t = -R @ eye
    return R, t
