"""UV parameterization and 2-D material textures.

Charts come from clustering faces by dominant normal axis and splitting into
connected components; each chart is flattened with least-squares conformal
mapping (two pinned vertices, sparse least squares), rescaled to its 3-D
area, and shelf-packed with a guaranteed inter-chart gutter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import lsqr

from . import geom
from .diffcore import Tensor
from .diffcore import tensor as T
from .meshex import Mesh
from .rasterpbr.shading import MaterialTextures

GUTTER_TEXELS = 2.0
GUTTER_REFERENCE_RES = 512


class UnwrapError(RuntimeError):
    pass


@dataclass
class Chart:
    faces: np.ndarray  # indices into mesh.faces
    uvs: np.ndarray  # (F,3,2) chart-local, pre-packing


@dataclass
class UvAtlas:
    uvs: np.ndarray  # (F,3,2) final per-corner coordinates in [0,1]^2
    face_chart: np.ndarray  # (F,) chart id per face
    num_charts: int
    utilization: float  # fraction of the unit square covered by charts

    def validate(self, mesh: Mesh, res: int = GUTTER_REFERENCE_RES) -> None:
        if (self.uvs < -1e-6).any() or (self.uvs > 1 + 1e-6).any():
            raise UnwrapError("uv out of unit square")
        areas = _uv_areas(self.uvs)
        if (areas <= 0).any():
            raise UnwrapError("folded face in uv space")
        _, collisions = atlas_occupancy(self, res)
        if collisions:
            raise UnwrapError(f"{collisions} texels claimed by two charts")


def _uv_areas(uvs: np.ndarray) -> np.ndarray:
    e1 = uvs[:, 1] - uvs[:, 0]
    e2 = uvs[:, 2] - uvs[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _face_adjacency(faces: np.ndarray, cluster: np.ndarray) -> sparse.coo_matrix:
    """Adjacency between faces sharing an edge within the same cluster."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    owner = np.tile(np.arange(len(faces)), 3)
    order = np.lexsort((e[:, 1], e[:, 0]))
    es = e[order]
    os_ = owner[order]
    same = (es[1:] == es[:-1]).all(axis=1)
    f1 = os_[:-1][same]
    f2 = os_[1:][same]
    keep = cluster[f1] == cluster[f2]
    return sparse.coo_matrix(
        (np.ones(keep.sum()), (f1[keep], f2[keep])), shape=(len(faces), len(faces))
    )


def lscm_chart(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Least-squares conformal flattening of one chart.

    Returns per-vertex uv (V,2) in chart-local units. Raises UnwrapError on
    degenerate geometry (zero-area chart).
    """
    v_ids = np.unique(faces.reshape(-1))
    remap = np.full(vertices.shape[0], -1, dtype=np.int64)
    remap[v_ids] = np.arange(len(v_ids))
    local_faces = remap[faces]
    pts = vertices[v_ids]
    nv = len(v_ids)
    if nv < 3:
        raise UnwrapError("chart too small")

    # triangle-local frames
    p0, p1, p2 = pts[local_faces[:, 0]], pts[local_faces[:, 1]], pts[local_faces[:, 2]]
    e1 = p1 - p0
    x1 = np.linalg.norm(e1, axis=1)
    bad = x1 < 1e-12
    if bad.any():
        raise UnwrapError("degenerate edge in chart")
    xdir = e1 / x1[:, None]
    d2 = p2 - p0
    x2 = np.einsum("ij,ij->i", d2, xdir)
    y2 = np.linalg.norm(d2 - x2[:, None] * xdir, axis=1)
    area = 0.5 * x1 * y2
    if (area < 1e-14).any() or area.sum() < 1e-12:
        raise UnwrapError("zero-area face in chart")

    scale = 1.0 / np.sqrt(area)
    # conformality residual coefficients per corner (complex weights)
    w0 = (x2 - x1) + 1j * y2
    w1 = -x2 - 1j * y2
    w2 = x1 + 1j * 0.0
    rows = np.repeat(np.arange(len(local_faces)), 3)
    cols = local_faces.reshape(-1)
    vals = (np.stack([w0, w1, w2], axis=1) * scale[:, None]).reshape(-1)
    M = sparse.coo_matrix((vals, (rows, cols)), shape=(len(local_faces), nv)).tocsr()

    # pin the two most distant vertices (approximately) to fix the 4 dof
    d_from0 = np.linalg.norm(pts - pts[0], axis=1)
    pin_b = int(d_from0.argmax())
    d_from_b = np.linalg.norm(pts - pts[pin_b], axis=1)
    pin_a = int(d_from_b.argmax())
    if pin_a == pin_b:
        raise UnwrapError("chart collapsed to a point")
    pins = np.array([pin_a, pin_b])
    pin_uv = np.array([[0.0, 0.0], [np.linalg.norm(pts[pin_b] - pts[pin_a]), 0.0]])

    free = np.setdiff1d(np.arange(nv), pins)
    Mf = M[:, free]
    Mp = M[:, pins]
    A = sparse.bmat([[Mf.real, -Mf.imag], [Mf.imag, Mf.real]], format="csr")
    rhs_c = Mp @ (pin_uv[:, 0] + 1j * pin_uv[:, 1])
    b = -np.concatenate([rhs_c.real, rhs_c.imag])
    sol = lsqr(A, b, atol=1e-10, btol=1e-10, iter_lim=4000)[0]
    uv = np.zeros((nv, 2))
    uv[free, 0] = sol[: len(free)]
    uv[free, 1] = sol[len(free):]
    uv[pins] = pin_uv

    out = uv[local_faces]
    if _uv_areas(out).sum() < 1e-14:
        raise UnwrapError("flattening collapsed")
    return out


def _split_faces(vertices: np.ndarray, faces: np.ndarray):
    """Split a face set in two along the longest centroid axis."""
    cen = vertices[faces].mean(axis=1)
    axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
    cut = np.median(cen[:, axis])
    left = cen[:, axis] <= cut
    if left.all() or not left.any():
        half = len(faces) // 2
        left = np.zeros(len(faces), bool)
        left[:half] = True
    return faces[left], faces[~left], left


def unwrap(mesh: Mesh, max_retries: int = 3) -> UvAtlas:
    """Normal-clustered charts, LSCM flattening, shelf packing with gutters."""
    if len(mesh.faces) == 0:
        raise UnwrapError("empty mesh")
    fn = geom.triangle_normals(mesh.vertices, mesh.faces)
    cluster = np.abs(fn).argmax(axis=1) * 2 + (np.take_along_axis(fn, np.abs(fn).argmax(axis=1)[:, None], 1)[:, 0] < 0)
    adj = _face_adjacency(mesh.faces, cluster)
    n_comp, labels = csgraph.connected_components(adj, directed=False)

    charts: list[Chart] = []
    face_chart = np.zeros(len(mesh.faces), dtype=np.int64)
    queue = [np.flatnonzero(labels == c) for c in range(n_comp)]
    retries: dict[int, int] = {}
    while queue:
        fidx = queue.pop(0)
        if len(fidx) == 0:
            continue
        tries = retries.get(id(fidx), 0)
        try:
            uv = lscm_chart(mesh.vertices, mesh.faces[fidx])
        except UnwrapError:
            if tries >= max_retries:
                raise
            fa, fb, left = _split_faces(mesh.vertices, mesh.faces[fidx])
            a_idx, b_idx = fidx[left], fidx[~left]
            retries[id(a_idx)] = tries + 1
            retries[id(b_idx)] = tries + 1
            queue.insert(0, b_idx)
            queue.insert(0, a_idx)
            continue
        # rescale so uv area matches 3-D area
        area3 = geom.triangle_areas(mesh.vertices, mesh.faces[fidx]).sum()
        area_uv = _uv_areas(uv).sum()
        uv = uv * np.sqrt(area3 / max(area_uv, 1e-18))
        charts.append(Chart(fidx, uv))

    uvs, n_charts, utilization = _pack_charts(mesh, charts, face_chart)
    atlas = UvAtlas(uvs, face_chart, n_charts, utilization)
    return atlas


def _pack_charts(mesh: Mesh, charts, face_chart: np.ndarray):
    """Shelf packing; iterates padding so the final gutter stays >= 2 texels
    at the reference resolution."""
    sizes = []
    for ch in charts:
        ch.uvs = _min_bbox_rotate(ch.uvs)
        lo = ch.uvs.reshape(-1, 2).min(axis=0)
        ch.uvs = ch.uvs - lo
        hi = ch.uvs.reshape(-1, 2).max(axis=0)
        if hi[1] > hi[0]:  # landscape orientation packs shelves tighter
            ch.uvs = np.stack([hi[1] - ch.uvs[..., 1], ch.uvs[..., 0]], axis=-1)
            hi = hi[::-1]
        sizes.append(hi)
    sizes = np.array(sizes)

    pad = GUTTER_TEXELS / GUTTER_REFERENCE_RES
    for _ in range(4):
        placements, extent = _shelf_positions(sizes, pad)
        scale = 1.0 / extent
        if pad * scale >= GUTTER_TEXELS / GUTTER_REFERENCE_RES - 1e-9:
            break
        pad = (GUTTER_TEXELS / GUTTER_REFERENCE_RES) / scale * 1.05

    uvs = np.zeros((len(mesh.faces), 3, 2))
    for ci, (ch, place) in enumerate(zip(charts, placements)):
        uvs[ch.faces] = (ch.uvs + place) * scale
        face_chart[ch.faces] = ci
    covered = sum(_uv_areas(ch.uvs).sum() for ch in charts) * scale * scale
    return uvs, len(charts), covered


def _min_bbox_rotate(uvs: np.ndarray, steps: int = 36) -> np.ndarray:
    """Rotate a chart to (approximately) minimize its bounding-box area."""
    pts = uvs.reshape(-1, 2)
    best = None
    for ang in np.linspace(0, np.pi / 2, steps, endpoint=False):
        c, s = np.cos(ang), np.sin(ang)
        rot = pts @ np.array([[c, -s], [s, c]])
        ext = rot.max(axis=0) - rot.min(axis=0)
        area = ext[0] * ext[1]
        if best is None or area < best[0]:
            best = (area, rot)
    return best[1].reshape(uvs.shape)


def _shelf_fill(sizes: np.ndarray, pad: float, width: float):
    order = np.argsort(-sizes[:, 1])
    placements = np.zeros_like(sizes)
    x = pad
    y = pad
    shelf_h = 0.0
    used_w = 0.0
    for i in order:
        w, h = sizes[i]
        if x + w + pad > width and x > pad:
            y += shelf_h + pad
            x = pad
            shelf_h = 0.0
        placements[i] = (x, y)
        x += w + pad
        used_w = max(used_w, x)
        shelf_h = max(shelf_h, h)
    height = y + shelf_h + pad
    return placements, max(used_w, height)


def _shelf_positions(sizes: np.ndarray, pad: float):
    """Shelf packing over a sweep of shelf widths; keeps the squarest result."""
    total_area = float(((sizes[:, 0] + pad) * (sizes[:, 1] + pad)).sum())
    base = max(np.sqrt(total_area), sizes[:, 0].max() + 2 * pad)
    best = None
    for factor in (0.8, 0.9, 1.0, 1.1, 1.25, 1.45):
        placements, extent = _shelf_fill(sizes, pad, base * factor)
        if best is None or extent < best[1]:
            best = (placements, extent)
    return best


# -- occupancy / baking --


def _uv_fragments(atlas: UvAtlas, res: int):
    """Texel coverage of every face: (face idx, row, col, barycentric)."""
    uv = atlas.uvs * res  # texel units
    x = uv[..., 0]
    y = uv[..., 1]
    x0 = np.clip(np.floor(x.min(axis=1) - 0.5), 0, res - 1).astype(np.int64)
    x1 = np.clip(np.ceil(x.max(axis=1) + 0.5), 0, res).astype(np.int64)
    y0 = np.clip(np.floor(y.min(axis=1) - 0.5), 0, res - 1).astype(np.int64)
    y1 = np.clip(np.ceil(y.max(axis=1) + 0.5), 0, res).astype(np.int64)
    wspan = np.maximum(x1 - x0, 0)
    hspan = np.maximum(y1 - y0, 0)
    counts = wspan * hspan
    f_idx = np.repeat(np.arange(len(uv)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    px = x0[f_idx] + local % np.maximum(wspan[f_idx], 1)
    py = y0[f_idx] + local // np.maximum(wspan[f_idx], 1)
    cx = px + 0.5
    cy = py + 0.5
    ax, ay = x[f_idx, 0], y[f_idx, 0]
    bx, by = x[f_idx, 1], y[f_idx, 1]
    qx, qy = x[f_idx, 2], y[f_idx, 2]
    area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
    w0 = (bx - cx) * (qy - cy) - (by - cy) * (qx - cx)
    w1 = (qx - cx) * (ay - cy) - (qy - cy) * (ax - cx)
    w2 = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    denom = np.where(np.abs(area) < 1e-12, 1.0, area)
    l0, l1, l2 = w0 / denom, w1 / denom, w2 / denom
    eps = -1e-9
    inside = (np.abs(area) > 1e-12) & (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
    return f_idx[inside], py[inside], px[inside], np.stack([l0, l1, l2], axis=1)[inside]


def atlas_occupancy(atlas: UvAtlas, res: int):
    """(chart-id image (res,res), texels claimed by more than one chart)."""
    f_idx, rows, cols, _ = _uv_fragments(atlas, res)
    owner = np.full((res, res), -1, dtype=np.int64)
    collisions = 0
    chart = atlas.face_chart[f_idx]
    flat = rows * res + cols
    order = np.argsort(flat, kind="stable")
    flat_s = flat[order]
    chart_s = chart[order]
    first = np.ones(len(flat_s), bool)
    first[1:] = flat_s[1:] != flat_s[:-1]
    owner.reshape(-1)[flat_s[first]] = chart_s[first]
    # a texel collides when two entries in its group carry different charts
    if len(flat_s) > 1:
        pair_conflict = (flat_s[1:] == flat_s[:-1]) & (chart_s[1:] != chart_s[:-1])
        collisions = len(np.unique(flat_s[1:][pair_conflict]))
    return owner, collisions


def texel_surface_points(mesh: Mesh, atlas: UvAtlas, res: int):
    """(validity (res,res), points (P,3), rows, cols) for texel centers."""
    f_idx, rows, cols, bary = _uv_fragments(atlas, res)
    flat = rows * res + cols
    order = np.argsort(flat, kind="stable")
    keep = np.ones(len(order), bool)
    keep[1:] = flat[order][1:] != flat[order][:-1]
    sel = order[keep]
    tri = mesh.vertices[mesh.faces[f_idx[sel]]]
    pts = np.einsum("nc,ncj->nj", bary[sel], tri)
    validity = np.zeros((res, res), bool)
    validity[rows[sel], cols[sel]] = True
    return validity, pts, rows[sel], cols[sel]


def seam_dilate(image: np.ndarray, validity: np.ndarray, iterations: int = 4) -> np.ndarray:
    """Flood invalid texels with their nearest valid neighbors (in place safe)."""
    out = image.copy()
    valid = validity.copy()
    for _ in range(iterations):
        if valid.all():
            break
        grown = ndimage.binary_dilation(valid)
        ring = grown & ~valid
        if not ring.any():
            break
        idx = ndimage.distance_transform_edt(~valid, return_distances=False, return_indices=True)
        out[ring] = out[idx[0][ring], idx[1][ring]]
        valid = grown
    return out


def bake_textures(material_backend, mesh: Mesh, atlas: UvAtlas, resolution: int = 512,
                  chunk: int = 65536) -> MaterialTextures:
    """Evaluate the material model at every valid texel's surface point."""
    from .rasterpbr.shading import material_eval

    validity, pts, rows, cols = texel_surface_points(mesh, atlas, resolution)
    kd = np.zeros((resolution, resolution, 3), np.float32)
    rough = np.full((resolution, resolution, 1), 0.5, np.float32)
    metal = np.zeros((resolution, resolution, 1), np.float32)
    for start in range(0, len(pts), chunk):
        sl = slice(start, start + chunk)
        with T.no_grad():
            m = material_eval(material_backend, pts[sl].astype(np.float32))
        kd[rows[sl], cols[sl]] = m.kd.data
        rough[rows[sl], cols[sl]] = m.roughness.data
        metal[rows[sl], cols[sl]] = m.metalness.data
    kd = seam_dilate(kd, validity)
    rough = seam_dilate(rough, validity)
    metal = seam_dilate(metal, validity)
    return MaterialTextures(Tensor(kd), Tensor(rough), Tensor(metal), validity)


def sample_texture(texture, uv) -> Tensor:
    """Bilinear texture sample; exactly linear in the texel values."""
    tex = texture if isinstance(texture, Tensor) else Tensor(np.asarray(texture, dtype=np.float32))
    uv_t = uv if isinstance(uv, Tensor) else Tensor(np.asarray(uv, dtype=np.float32))
    return T.image_sample(tex, uv_t)


def upsample(texture, factor: int = 4) -> np.ndarray:
    """Bilinear upsampling of (H,W,C) by an integer factor."""
    arr = texture.data if isinstance(texture, Tensor) else np.asarray(texture)
    H, W, C = arr.shape
    out_h, out_w = H * factor, W * factor
    ys = (np.arange(out_h) + 0.5) / factor - 0.5
    xs = (np.arange(out_w) + 0.5) / factor - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 2)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 2)
    fy = np.clip(ys - y0, 0, 1)[:, None, None]
    fx = np.clip(xs - x0, 0, 1)[None, :, None]
    a = arr[y0][:, x0]
    b = arr[y0][:, x0 + 1]
    c = arr[y0 + 1][:, x0]
    d = arr[y0 + 1][:, x0 + 1]
    return ((1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)).astype(arr.dtype)


def downsample_box(arr: np.ndarray, factor: int = 4) -> np.ndarray:
    H, W, C = arr.shape
    return arr.reshape(H // factor, factor, W // factor, factor, C).mean(axis=(1, 3)).astype(arr.dtype)


def upsample_textures(tex: MaterialTextures, factor: int = 4, all_maps: bool = False) -> MaterialTextures:
    """4x bilinear upsample: k_d always; roughness/metalness only on request."""
    kd = Tensor(upsample(tex.kd, factor))
    validity = np.kron(tex.validity, np.ones((factor, factor), dtype=bool))
    if all_maps:
        rough = Tensor(upsample(tex.roughness, factor))
        metal = Tensor(upsample(tex.metalness, factor))
    else:
        rough = Tensor(tex.roughness.data.copy())
        metal = Tensor(tex.metalness.data.copy())
    return MaterialTextures(kd, rough, metal, validity)
