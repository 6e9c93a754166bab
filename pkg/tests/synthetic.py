"""Shared synthetic fixtures: sphere bodies and analytic view sets."""

import numpy as np
from scipy.spatial import ConvexHull

from avatarforge.bodymodel import BodyPose, Skeleton
from avatarforge.cameras import Camera

SPHERE_R = 0.3


def sphere_mesh(n=500, radius=SPHERE_R, seed=7):
    rng = np.random.default_rng(seed)
    verts = rng.normal(size=(n, 3))
    verts = radius * verts / np.linalg.norm(verts, axis=1, keepdims=True)
    faces = ConvexHull(verts).simplices
    ctr = verts[faces].mean(axis=1)
    nrm = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    flip = (nrm * ctr).sum(1) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return verts, faces


def sphere_skeleton(n=500, radius=SPHERE_R):
    verts, faces = sphere_mesh(n, radius)
    return Skeleton(["root"], [-1], [[0, 0, 0]], verts, faces, np.ones((len(verts), 1)))


def analytic_sphere_views(n_views=20, size=64, radius=SPHERE_R, supersample=4):
    """Anti-aliased analytic renders of a smoothly colored sphere."""
    cams, images, masks, poses = [], [], [], []
    hi = size * supersample
    for i in range(n_views):
        az = 2 * np.pi * i / n_views
        el = 0.35 * np.sin(1.7 * i)
        eye = 1.1 * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cam = Camera.looking_at(eye, [0, 0, 0], size, size, focal=1.05 * size)
        cam_hi = Camera.looking_at(eye, [0, 0, 0], hi, hi, focal=1.05 * hi)
        rows, cols = np.meshgrid(np.arange(hi), np.arange(hi), indexing="ij")
        pix = np.stack([rows.reshape(-1), cols.reshape(-1)], 1)
        o, d = cam_hi.rays_for_pixels(pix)
        b = (o * d).sum(1)
        c = (o * o).sum(1) - radius * radius
        disc = b * b - c
        hit = disc > 0
        t = -b - np.sqrt(np.maximum(disc, 0))
        hit &= t > 0
        p = o + t[:, None] * d
        img = np.zeros((hi * hi, 3), np.float32)
        nrm = p / radius
        light = np.array([0.4, 0.8, 0.45])
        lam = np.clip(nrm @ light / np.linalg.norm(light), 0, 1)
        col = 0.5 + 0.45 * np.stack(
            [np.sin(6 * p[:, 0]) * np.cos(3 * p[:, 1]), np.sin(5 * p[:, 1]), np.cos(4 * p[:, 2])], 1
        )
        shade = (0.35 + 0.65 * lam)[:, None] * col
        img[hit] = np.clip(shade[hit], 0, 1)
        img = img.reshape(hi, hi, 3).reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
        cover = hit.reshape(hi, hi).reshape(size, supersample, size, supersample).mean(axis=(1, 3))
        images.append(img.astype(np.float32))
        masks.append(cover > 0.5)
        cams.append(cam)
        poses.append(BodyPose(i, np.zeros((1, 3)), np.zeros(3)))
    return cams, images, masks, poses
