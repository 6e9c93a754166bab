"""Mesh extraction from the canonical SDF: joint-restricted grid sampling,
marching cubes over the classic 256-case tables, floater removal, and the
along-normal bias correction of the extracted surface.

Cubes are processed in lattice order with vertices deduplicated by a global
edge key, so shared crossings become shared vertices and closed surfaces come
out watertight.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph

from . import geom
from ._mc_tables import EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .bodymodel import Skeleton
from .diffcore import OptimConfig, ParamStore, Tensor, adam_step
from .diffcore import tensor as T

SENTINEL = 1.0e3  # value assigned to cells outside the joint-restricted region


@dataclass
class SdfGrid:
    values: np.ndarray  # (R,R,R) scalar field at lattice points
    box_min: np.ndarray
    box_max: np.ndarray
    valid: np.ndarray  # (R,R,R) bool, False cells hold the sentinel

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def lattice_axes(self):
        r = self.values.shape
        return [np.linspace(self.box_min[i], self.box_max[i], r[i]) for i in range(3)]


@dataclass
class Mesh:
    vertices: np.ndarray  # (V,3) meters
    faces: np.ndarray  # (F,3) int
    normals: np.ndarray = None  # (V,3) unit
    uvs: np.ndarray = None  # (F,3,2) per-corner texture coordinates

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")
        if self.normals is None and len(self.faces):
            self.normals = geom.vertex_normals(self.vertices, self.faces)

    def __len__(self):
        return len(self.faces)

    def validate(self, min_area: float = 1e-12) -> None:
        if len(self.faces) == 0:
            return
        areas = geom.triangle_areas(self.vertices, self.faces)
        if (areas <= min_area).any():
            raise ValueError("degenerate triangle present")
        if self.normals is not None:
            n = np.linalg.norm(self.normals, axis=1)
            if np.abs(n - 1.0).max() > 1e-5:
                raise ValueError("vertex normals must be unit length")

    def edge_face_counts(self) -> np.ndarray:
        """Occurrences of each undirected edge across faces (2 == watertight)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts


def _segment_distances(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    """Min distance from each point to any segment (B segments)."""
    d = seg_b - seg_a  # (B,3)
    L2 = np.maximum((d * d).sum(1), 1e-18)
    best = np.full(len(points), np.inf)
    for b in range(len(seg_a)):
        t = np.clip((points - seg_a[b]) @ d[b] / L2[b], 0.0, 1.0)
        c = seg_a[b] + t[:, None] * d[b]
        best = np.minimum(best, np.linalg.norm(points - c, axis=1))
    return best


def sample_sdf_grid(
    sdf_field,
    skeleton: Skeleton,
    radius: float = 0.30,
    resolution: int = 256,
    box_min=None,
    box_max=None,
    margin: float = 0.15,
    chunk: int = 65536,
) -> SdfGrid:
    """Evaluate the SDF on a lattice, restricted to cells near the bones.

    Cells farther than `radius` from every bone segment carry the sentinel.
    The box defaults to the rest-pose template bounds plus margin.
    """
    if box_min is None or box_max is None:
        box_min = skeleton.template_vertices.min(axis=0) - margin
        box_max = skeleton.template_vertices.max(axis=0) + margin
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)

    axes = [np.linspace(box_min[i], box_max[i], resolution) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    rest = skeleton.rest_positions
    seg_a, seg_b = [], []
    for j in range(skeleton.num_joints):
        p = skeleton.parents[j]
        seg_a.append(rest[p] if p >= 0 else rest[j])
        seg_b.append(rest[j])
    dist = _segment_distances(pts, np.asarray(seg_a), np.asarray(seg_b))
    valid = dist <= radius
    if not valid.any():
        raise ValueError("joint restriction removed every grid cell")

    values = np.full(len(pts), SENTINEL, dtype=np.float32)
    sel = np.flatnonzero(valid)
    for start in range(0, len(sel), chunk):
        idx = sel[start : start + chunk]
        with T.no_grad():
            s, _ = sdf_field(Tensor(pts[idx].astype(np.float32)))
        values[idx] = s.data[:, 0]
    shape = (resolution, resolution, resolution)
    return SdfGrid(values.reshape(shape), box_min, box_max, valid.reshape(shape))


def smooth_isolated_flips(values: np.ndarray) -> np.ndarray:
    """Erase single-cell sign islands (3^3 neighborhood max/min pooling)."""
    pos = values > 0
    pos_all = ndimage.minimum_filter(pos.astype(np.uint8), size=3, mode="nearest") > 0
    neg_all = ndimage.maximum_filter(pos.astype(np.uint8), size=3, mode="nearest") == 0
    # neighborhood filters include the center; recompute excluding it via counts
    ones = np.ones_like(values, dtype=np.uint8)
    nbr_pos = ndimage.uniform_filter(pos.astype(np.float32), size=3, mode="nearest") * 27 - pos
    nbr_cnt = ndimage.uniform_filter(ones.astype(np.float32), size=3, mode="nearest") * 27 - 1
    isolated_neg = ~pos & (np.round(nbr_pos) >= np.round(nbr_cnt))
    isolated_pos = pos & (np.round(nbr_pos) <= 1e-6)
    out = values.copy()
    if isolated_neg.any():
        out[isolated_neg] = ndimage.maximum_filter(values, size=3, mode="nearest")[isolated_neg]
    if isolated_pos.any():
        out[isolated_pos] = ndimage.minimum_filter(values, size=3, mode="nearest")[isolated_pos]
    return out


# local edge -> (axis, corner offset of the edge's anchor lattice point)
_EDGE_AXIS = np.zeros(12, dtype=np.int64)
_EDGE_OFFSET = np.zeros((12, 3), dtype=np.int64)
_CORNER_OFFSETS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
)
for _e, (_a, _b) in enumerate(EDGE_CORNERS):
    ca, cb = _CORNER_OFFSETS[_a], _CORNER_OFFSETS[_b]
    _EDGE_AXIS[_e] = int(np.flatnonzero(ca != cb)[0])
    _EDGE_OFFSET[_e] = np.minimum(ca, cb)

_TRI16 = np.full((256, 16), -1, dtype=np.int64)
for _c, _row in enumerate(TRI_TABLE):
    _TRI16[_c, : len(_row)] = _row


def marching_cubes(grid: SdfGrid, isolevel: float = 0.0, smooth_flips: bool = True) -> Mesh:
    """Standard 256-case marching cubes with edge-keyed vertex sharing.

    Faces are wound so normals point toward positive field values. A grid
    without both signs yields an empty mesh.
    """
    values = grid.values.astype(np.float64)
    if smooth_flips:
        values = smooth_isolated_flips(values)
    r = grid.resolution
    inside = values < isolevel
    if not inside.any() or inside.all():
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), normals=np.zeros((0, 3)))

    c = r - 1  # cubes per axis
    case = np.zeros((c, c, c), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
        case |= inside[dx : dx + c, dy : dy + c, dz : dz + c].astype(np.int64) << bit
    active = np.flatnonzero((case.reshape(-1) != 0) & (case.reshape(-1) != 255))
    if len(active) == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), normals=np.zeros((0, 3)))
    cidx = case.reshape(-1)[active]
    ci = active // (c * c)
    cj = (active // c) % c
    ck = active % c

    tri = _TRI16[cidx]  # (A,16) local edge ids, -1 padded
    tri_counts = (tri >= 0).sum(axis=1) // 3
    a_rows = np.repeat(np.arange(len(active)), tri_counts * 3)
    flat_entries = tri[tri >= 0]  # in row-major order matches repeat order

    # global edge key for every referenced (cube, local edge)
    axis = _EDGE_AXIS[flat_entries]
    off = _EDGE_OFFSET[flat_entries]
    ei = ci[a_rows] + off[:, 0]
    ej = cj[a_rows] + off[:, 1]
    ek = ck[a_rows] + off[:, 2]
    key = ((axis * r + ei) * r + ej) * r + ek

    uniq, inv = np.unique(key, return_inverse=True)
    # interpolate vertex positions along each unique edge
    u_axis = uniq // (r * r * r)
    rem = uniq % (r * r * r)
    ui = rem // (r * r)
    uj = (rem // r) % r
    uk = rem % r
    step = np.array(
        [
            (grid.box_max[0] - grid.box_min[0]) / (r - 1),
            (grid.box_max[1] - grid.box_min[1]) / (r - 1),
            (grid.box_max[2] - grid.box_min[2]) / (r - 1),
        ]
    )
    p0 = np.stack(
        [grid.box_min[0] + ui * step[0], grid.box_min[1] + uj * step[1], grid.box_min[2] + uk * step[2]],
        axis=1,
    )
    di = (u_axis == 0).astype(np.int64)
    dj = (u_axis == 1).astype(np.int64)
    dk = (u_axis == 2).astype(np.int64)
    v0 = values[ui, uj, uk] - isolevel
    v1 = values[ui + di, uj + dj, uk + dk] - isolevel
    denom = v1 - v0
    denom = np.where(np.abs(denom) < 1e-30, 1e-30, denom)
    t = np.clip(-v0 / denom, 0.0, 1.0)
    offset = np.zeros((len(uniq), 3))
    offset[:, 0] = di * t * step[0]
    offset[:, 1] = dj * t * step[1]
    offset[:, 2] = dk * t * step[2]
    vertices = p0 + offset

    faces = inv.reshape(-1, 3)
    # the classic tables with inside==below-isolevel wind faces inward; flip
    # so normals point toward positive field values
    faces = faces[:, [0, 2, 1]]

    areas = geom.triangle_areas(vertices, faces)
    faces = faces[areas > 1e-14]
    used = np.unique(faces.reshape(-1))
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(vertices[used], remap[faces])


def remove_floaters(mesh: Mesh) -> Mesh:
    """Keep only the largest connected component (by triangle count).

    Ties keep the component containing the lowest vertex index.
    """
    if len(mesh.faces) == 0:
        return mesh
    v = len(mesh.vertices)
    rows = np.concatenate([mesh.faces[:, 0], mesh.faces[:, 1], mesh.faces[:, 2]])
    cols = np.concatenate([mesh.faces[:, 1], mesh.faces[:, 2], mesh.faces[:, 0]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(v, v))
    n_comp, labels = csgraph.connected_components(adj, directed=False)
    if n_comp == 1:
        return mesh
    face_labels = labels[mesh.faces[:, 0]]
    counts = np.bincount(face_labels, minlength=n_comp)
    best = counts.max()
    candidates = np.flatnonzero(counts == best)
    min_vertex = np.full(n_comp, v, dtype=np.int64)
    np.minimum.at(min_vertex, labels, np.arange(v))
    keep = candidates[np.argmin(min_vertex[candidates])]
    faces = mesh.faces[face_labels == keep]
    used = np.unique(faces.reshape(-1))
    remap = np.full(v, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[faces])


@dataclass
class BiasOffset:
    value: float = 0.0
    limit: float = 0.05

    def clamped(self) -> float:
        return float(np.clip(self.value, -self.limit, self.limit))


def apply_bias(mesh: Mesh, f0: float) -> Mesh:
    """Displace vertices by exactly -f0 along their normals (topology kept)."""
    return Mesh(mesh.vertices - f0 * mesh.normals, mesh.faces.copy(), uvs=mesh.uvs)


def optimize_bias(
    mesh: Mesh,
    masks,  # list of (H,W) float arrays in [0,1]
    cameras,
    f0_init: float = 0.0,
    iterations: int = 400,
    learning_rate: float = 2e-3,
    limit: float = 0.05,
    sharpness: float = 40.0,
    patience: int = 200,
):
    """Fit the scalar boundary-bias offset by matching soft silhouettes.

    Returns (f0, corrected mesh). Warns and stops early when the loss has not
    improved for `patience` iterations.
    """
    from .rasterpbr.raster import soft_mask

    store = ParamStore()
    f0 = store.add("f0", np.array([f0_init], dtype=np.float32))
    cfg = OptimConfig(learning_rate=learning_rate)
    targets = [np.asarray(m, dtype=np.float32) for m in masks]
    verts = Tensor(mesh.vertices.astype(np.float32))
    normals = Tensor(mesh.normals.astype(np.float32))

    best = np.inf
    best_f0 = f0_init
    since_best = 0
    for it in range(iterations):
        moved = T.sub(verts, T.mul(f0, normals))
        total = None
        for cam, target in zip(cameras, targets):
            m_hat = soft_mask(moved, mesh.faces, cam, sharpness=sharpness)
            term = T.reduce_mean(T.power(T.sub(m_hat, Tensor(target)), 2.0))
            total = term if total is None else T.add(total, term)
        val = float(total.data)
        if val < best - 1e-9:
            best = val
            best_f0 = float(f0.data[0])
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                warnings.warn("bias optimization stalled; stopping early")
                break
        store.zero_grad()
        total.backward()
        adam_step(store, cfg)
        f0.data[:] = np.clip(f0.data, -limit, limit)

    final = float(np.clip(best_f0, -limit, limit))
    return final, apply_bias(mesh, final)


# -- OBJ interchange --


def save_obj(mesh: Mesh, path: str, mtl_name: str = None, texture_name: str = None) -> None:
    lines = []
    if mtl_name:
        lines.append(f"mtllib {mtl_name}")
        lines.append("usemtl material0")
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    if mesh.normals is not None:
        for n in mesh.normals:
            lines.append(f"vn {n[0]:.8f} {n[1]:.8f} {n[2]:.8f}")
    has_uv = mesh.uvs is not None
    if has_uv:
        for corner_uv in mesh.uvs.reshape(-1, 2):
            lines.append(f"vt {corner_uv[0]:.8f} {corner_uv[1]:.8f}")
    for fi, f in enumerate(mesh.faces):
        if has_uv:
            c = 3 * fi
            lines.append(
                f"f {f[0]+1}/{c+1}/{f[0]+1} {f[1]+1}/{c+2}/{f[1]+1} {f[2]+1}/{c+3}/{f[2]+1}"
            )
        elif mesh.normals is not None:
            lines.append(f"f {f[0]+1}//{f[0]+1} {f[1]+1}//{f[1]+1} {f[2]+1}//{f[2]+1}")
        else:
            lines.append(f"f {f[0]+1} {f[1]+1} {f[2]+1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path: str) -> Mesh:
    verts, norms, uvs = [], [], []
    faces, face_uv = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.strip().split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                idxs = []
                uv_idx = []
                for token in parts[1:4]:
                    fields = token.split("/")
                    idxs.append(int(fields[0]) - 1)
                    if len(fields) > 1 and fields[1]:
                        uv_idx.append(int(fields[1]) - 1)
                faces.append(idxs)
                if len(uv_idx) == 3:
                    face_uv.append(uv_idx)
    mesh_uvs = None
    if face_uv and uvs:
        uv_arr = np.asarray(uvs)
        mesh_uvs = uv_arr[np.asarray(face_uv)]
    normals = np.asarray(norms) if norms else None
    return Mesh(np.asarray(verts), np.asarray(faces), normals=normals, uvs=mesh_uvs)
