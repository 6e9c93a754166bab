"""Tuning scratch: sphere-body stage-1 mini-training (will become a test)."""

import time

import numpy as np
from scipy.spatial import ConvexHull

from avatarforge.bodymodel import BodyPose, Skeleton
from avatarforge.cameras import Camera
from avatarforge.model import AvatarModel, ModelConfig
from avatarforge.volumerender import (
    Stage1Config,
    StageOneLossWeights,
    TrainScene,
    render_image,
    train_stage1,
)

R = 0.3


def sphere_skeleton(n=500):
    rng = np.random.default_rng(7)
    verts = rng.normal(size=(n, 3))
    verts = R * verts / np.linalg.norm(verts, axis=1, keepdims=True)
    faces = ConvexHull(verts).simplices
    # fix winding outward
    ctr = verts[faces].mean(axis=1)
    nrm = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    flip = (nrm * ctr).sum(1) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return Skeleton(["root"], [-1], [[0, 0, 0]], verts, faces, np.ones((len(verts), 1)))


def analytic_views(n_views=20, size=64, ss=4):
    """Anti-aliased analytic renders of a smoothly colored sphere."""
    cams, images, masks, poses = [], [], [], []
    hi = size * ss
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
        c = (o * o).sum(1) - R * R
        disc = b * b - c
        hit = disc > 0
        t = -b - np.sqrt(np.maximum(disc, 0))
        hit &= t > 0
        p = o + t[:, None] * d
        img = np.zeros((hi * hi, 3), np.float32)
        nrm = p / R
        lam = np.clip(nrm @ np.array([0.4, 0.8, 0.45]) / np.linalg.norm([0.4, 0.8, 0.45]), 0, 1)
        col = 0.5 + 0.45 * np.stack(
            [np.sin(6 * p[:, 0]) * np.cos(3 * p[:, 1]), np.sin(5 * p[:, 1]), np.cos(4 * p[:, 2])], 1
        )
        shade = (0.35 + 0.65 * lam)[:, None] * col
        img[hit] = np.clip(shade[hit], 0, 1)
        img = img.reshape(hi, hi, 3).reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
        cover = hit.reshape(hi, hi).reshape(size, ss, size, ss).mean(axis=(1, 3))
        images.append(img.astype(np.float32))
        masks.append(cover > 0.5)
        cams.append(cam)
        poses.append(BodyPose(i, np.zeros((1, 3)), np.zeros(3)))
    return cams, images, masks, poses


def main():
    sk = sphere_skeleton()
    cams, images, masks, poses = analytic_views(20, 64)
    scene = TrainScene(images, masks, cams, poses, sk)
    mc = ModelConfig().desk()
    mc.sdf_radius = 0.3
    cfg = Stage1Config(
        iterations=int(__import__("sys").argv[1]) if len(__import__("sys").argv) > 1 else 1500,
        rays_per_batch=96,
        n_samples=16,
        n_importance=8,
        learning_rate=2e-3,
        lr_decay=0.9997,
        eikonal_points=128,
        curvature_points=32,
        consistency_points=48,
        checkpoint_every=100000,
        log_every=200,
        seed=0,
    )
    t0 = time.time()
    model, info = train_stage1(scene, cfg, "/tmp/sphere_run", model_config=mc, quiet=False)
    print(f"train time: {time.time()-t0:.0f}s")
    # eval mask-region PSNR on a training view
    for vi in (0, 5):
        rgb, acc = render_image(model, cams[vi], poses[vi], n_samples=24, n_importance=12)
        m = masks[vi]
        mse = float(np.mean((rgb[m] - images[vi][m]) ** 2))
        print(f"view {vi}: mask PSNR {-10*np.log10(mse):.2f} dB")


if __name__ == "__main__":
    main()
