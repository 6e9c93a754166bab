"""Image and geometry metrics: PSNR, SSIM, chamfer, P2S, normal error."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .. import geom
from ..meshex import Mesh
from ..rasterpbr.raster import rasterize

PSNR_CAP = 99.0


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    chamfer_cm: float = None
    p2s_cm: float = None
    normal_degrees: float = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray = None, cap: float = PSNR_CAP) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        a = a[mask]
        b = b[mask]
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return cap
    return min(-10.0 * np.log10(mse), cap)


def ssim(a: np.ndarray, b: np.ndarray, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, data range 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    c1 = k1**2
    c2 = k2**2
    truncate = 5.0 / sigma  # 11-tap window
    vals = []
    for ch in range(a.shape[2]):
        x = a[..., ch]
        y = b[..., ch]
        f = lambda img: ndimage.gaussian_filter(img, sigma, truncate=truncate, mode="reflect")
        mu_x = f(x)
        mu_y = f(y)
        var_x = f(x * x) - mu_x**2
        var_y = f(y * y) - mu_y**2
        cov = f(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def _points_to_surface(points: np.ndarray, mesh: Mesh, tree: cKDTree = None) -> np.ndarray:
    _, _, dist = geom.nearest_on_mesh(points, mesh.vertices, mesh.faces, tree)
    return dist


def chamfer_p2s(recon: Mesh, reference: Mesh, samples: int = 100000, seed: int = 0):
    """(chamfer cm, point-to-surface cm) via area-weighted surface samples.

    Chamfer averages both directions; P2S measures reconstruction -> reference.
    """
    rng = np.random.default_rng(seed)
    pts_r = geom.sample_surface(recon.vertices, recon.faces, samples, rng)
    pts_g = geom.sample_surface(reference.vertices, reference.faces, samples, rng)
    tree_g = cKDTree(reference.vertices[reference.faces].mean(axis=1))
    tree_r = cKDTree(recon.vertices[recon.faces].mean(axis=1))
    d_rg = _points_to_surface(pts_r, reference, tree_g)
    d_gr = _points_to_surface(pts_g, recon, tree_r)
    chamfer_m = 0.5 * (d_rg.mean() + d_gr.mean())
    return float(chamfer_m * 100.0), float(d_rg.mean() * 100.0)


def render_normal_map(mesh: Mesh, camera) -> tuple:
    """(normals (H,W,3), mask) with barycentric-interpolated vertex normals."""
    gb = rasterize(mesh.vertices, mesh.faces, camera)
    vn = mesh.normals if mesh.normals is not None else geom.vertex_normals(mesh.vertices, mesh.faces)
    H, W = gb.mask.shape
    out = np.zeros((H, W, 3))
    pix = gb.pixels
    if len(pix):
        tri = gb.tri_id[pix[:, 0], pix[:, 1]]
        bary = gb.bary[pix[:, 0], pix[:, 1]]
        n = np.einsum("nc,ncj->nj", bary, vn[mesh.faces[tri]])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        out[pix[:, 0], pix[:, 1]] = n
    return out, gb.mask


def normal_degrees(recon: Mesh, reference: Mesh, cameras) -> float:
    """Mean angular difference of rendered normal maps on shared coverage."""
    angles = []
    for cam in cameras:
        n_r, m_r = render_normal_map(recon, cam)
        n_g, m_g = render_normal_map(reference, cam)
        shared = m_r & m_g
        if not shared.any():
            continue
        dots = np.clip((n_r[shared] * n_g[shared]).sum(axis=1), -1.0, 1.0)
        angles.append(np.degrees(np.arccos(dots)))
    if not angles:
        return float("nan")
    return float(np.concatenate(angles).mean())
