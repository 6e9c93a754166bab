"""Synthetic capsule-person datasets with full ground truth.

A 16-joint skeleton carries a capsule-union body; the body surface is
extracted once from the analytic SDF (so the ground-truth mesh is a clean
outer shell), textured procedurally, and rendered through the same
rasterizer/shader the pipeline optimizes against, so re-rendering the stored
ground truth reproduces the frames exactly.
"""

from __future__ import annotations

import os

import numpy as np

from .. import geom
from ..bodymodel import BodyPose, Skeleton
from ..cameras import Camera
from ..diffcore import Tensor
from ..diffcore import tensor as T
from ..meshex import Mesh, SdfGrid, marching_cubes, remove_floaters
from ..rasterpbr.envlight import EnvLight, texel_directions
from ..rasterpbr.shading import MaterialTextures, linear_to_srgb
from ..rasterpbr.stage2 import render_view_linear
from ..uvtex import texel_surface_points, seam_dilate, unwrap
from .config import RunConfig
from .dataset import save_dataset

PRESETS = ("capsule-static", "capsule-rotate", "capsule-dance")

# joints: name, parent, rest position (pelvis at the origin, y up, meters)
_JOINTS = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, 0.20, 0.0)),
    ("chest", 1, (0.0, 0.40, 0.0)),
    ("head", 2, (0.0, 0.62, 0.0)),
    ("l_shoulder", 2, (0.20, 0.50, 0.0)),
    ("l_elbow", 4, (0.45, 0.33, 0.0)),
    ("l_wrist", 5, (0.66, 0.17, 0.0)),
    ("r_shoulder", 2, (-0.20, 0.50, 0.0)),
    ("r_elbow", 7, (-0.45, 0.33, 0.0)),
    ("r_wrist", 8, (-0.66, 0.17, 0.0)),
    ("l_hip", 0, (0.10, -0.05, 0.0)),
    ("l_knee", 10, (0.12, -0.45, 0.0)),
    ("l_ankle", 11, (0.13, -0.87, 0.0)),
    ("r_hip", 0, (-0.10, -0.05, 0.0)),
    ("r_knee", 13, (-0.12, -0.45, 0.0)),
    ("r_ankle", 14, (-0.13, -0.87, 0.0)),
]

# capsule radii per bone (indexed by child joint)
_BONE_RADIUS = {
    1: 0.12, 2: 0.12, 3: 0.055,
    4: 0.055, 5: 0.045, 6: 0.040,
    7: 0.055, 8: 0.045, 9: 0.040,
    10: 0.075, 11: 0.070, 12: 0.055,
    13: 0.075, 14: 0.070, 15: 0.055,
}
_HEAD_CENTER = np.array([0.0, 0.70, 0.0])
_HEAD_RADIUS = 0.105


def _capsule_sdf(points: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    d = b - a
    L2 = max(float(d @ d), 1e-12)
    t = np.clip((points - a) @ d / L2, 0.0, 1.0)
    closest = a + t[:, None] * d
    return np.linalg.norm(points - closest, axis=1) - radius


def body_sdf(points: np.ndarray) -> np.ndarray:
    """Analytic capsule-union signed distance of the rest-pose body."""
    rest = np.array([j[2] for j in _JOINTS])
    parents = np.array([j[1] for j in _JOINTS])
    s = np.linalg.norm(points - _HEAD_CENTER, axis=1) - _HEAD_RADIUS
    for child, radius in _BONE_RADIUS.items():
        s = np.minimum(s, _capsule_sdf(points, rest[parents[child]], rest[child], radius))
    return s


def build_body_mesh(resolution: int = 72) -> Mesh:
    lo = np.array([-0.85, -1.05, -0.30])
    hi = np.array([0.85, 0.90, 0.30])
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], -1).reshape(-1, 3)
    values = body_sdf(pts).reshape(resolution, resolution, resolution).astype(np.float32)
    grid = SdfGrid(values, lo, hi, np.ones_like(values, dtype=bool))
    return remove_floaters(marching_cubes(grid))


def skin_weights_for(points: np.ndarray) -> np.ndarray:
    """Smooth inverse-distance bone weights over the 16 joints."""
    rest = np.array([j[2] for j in _JOINTS])
    parents = np.array([j[1] for j in _JOINTS])
    K = len(_JOINTS)
    d = np.full((len(points), K), 1e6)
    for child, radius in _BONE_RADIUS.items():
        d[:, child] = np.maximum(_capsule_sdf(points, rest[parents[child]], rest[child], radius) + radius, 0.0)
    d[:, 3] = np.minimum(d[:, 3], np.maximum(np.linalg.norm(points - _HEAD_CENTER, axis=1), 0.0))
    d[:, 0] = d[:, [1, 10, 13]].min(axis=1) + 0.02  # pelvis shares its children's reach
    sigma = 0.06
    w = np.exp(-((d / sigma) ** 2))
    order = np.argsort(-w, axis=1)
    keep = order[:, :4]
    sparse_w = np.zeros_like(w)
    rows = np.arange(len(points))[:, None]
    sparse_w[rows, keep] = w[rows, keep]
    total = sparse_w.sum(axis=1, keepdims=True)
    flat = total[:, 0] < 1e-12
    if flat.any():  # far points snap to the nearest bone rigidly
        nearest = d[flat].argmin(axis=1)
        sparse_w[np.flatnonzero(flat), nearest] = 1.0
        total = sparse_w.sum(axis=1, keepdims=True)
    return sparse_w / total


def build_skeleton(resolution: int = 72) -> tuple:
    mesh = build_body_mesh(resolution)
    weights = skin_weights_for(mesh.vertices)
    skeleton = Skeleton(
        names=[j[0] for j in _JOINTS],
        parents=[j[1] for j in _JOINTS],
        rest_positions=[j[2] for j in _JOINTS],
        template_vertices=mesh.vertices,
        template_faces=mesh.faces,
        template_weights=weights,
    )
    return skeleton, mesh


# -- procedural ground-truth materials --


def gt_albedo(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points)
    y = p[:, 1]
    skin = np.array([0.87, 0.62, 0.48])
    shirt = np.array([0.18, 0.35, 0.72])
    pants = np.array([0.50, 0.30, 0.16])
    base = np.where(y[:, None] > 0.55, skin, np.where(y[:, None] > -0.05, shirt, pants))
    stripes = 0.18 * np.sin(16.0 * p[:, 0]) * np.cos(11.0 * p[:, 1])
    checker = 0.10 * np.sign(np.sin(9.0 * p[:, 1]) * np.sin(9.0 * p[:, 2]))
    detail = 0.06 * np.sin(31.0 * p[:, 0]) * np.sin(27.0 * p[:, 2])
    mod = (stripes + checker + detail)[:, None] * np.array([1.0, 0.9, 0.8])
    mod = np.where(y[:, None] > 0.55, 0.35 * mod, mod)  # calmer face
    return np.clip(base + mod, 0.02, 0.98).astype(np.float32)


def gt_roughness(points: np.ndarray) -> np.ndarray:
    y = np.asarray(points)[:, 1]
    r = np.where(y > 0.55, 0.5, np.where(y > -0.05, 0.35, 0.68))
    return np.clip(r + 0.05 * np.sin(12 * np.asarray(points)[:, 0]), 0.05, 0.95).astype(np.float32)[:, None]


def gt_metalness(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points)
    badge = np.exp(-(((p[:, 0] - 0.08) / 0.05) ** 2 + ((p[:, 1] - 0.38) / 0.05) ** 2 + ((p[:, 2] - 0.11) / 0.06) ** 2))
    return np.clip(0.9 * (badge > 0.45).astype(np.float32), 0.0, 1.0).astype(np.float32)[:, None]


def bake_gt_textures(mesh: Mesh, atlas, resolution: int = 512) -> MaterialTextures:
    validity, pts, rows, cols = texel_surface_points(mesh, atlas, resolution)
    kd = np.full((resolution, resolution, 3), 0.5, np.float32)
    rough = np.full((resolution, resolution, 1), 0.5, np.float32)
    metal = np.zeros((resolution, resolution, 1), np.float32)
    kd[rows, cols] = gt_albedo(pts)
    rough[rows, cols] = gt_roughness(pts)
    metal[rows, cols] = gt_metalness(pts)
    return MaterialTextures(
        Tensor(seam_dilate(kd, validity)),
        Tensor(seam_dilate(rough, validity)),
        Tensor(seam_dilate(metal, validity)),
        validity,
    )


def gt_environment(resolution: int = 64) -> EnvLight:
    """Smooth sky: ambient + warm sun lobe + cool horizon band."""
    dirs = texel_directions(resolution)
    sun = np.array([0.45, 0.75, 0.48])
    sun /= np.linalg.norm(sun)
    lobe = np.maximum(dirs @ sun, 0.0) ** 6
    up = np.clip(dirs[:, 1], -1, 1)
    sky = 0.35 + 0.25 * (up * 0.5 + 0.5)
    base = np.stack([
        sky + 1.6 * lobe + 0.05 * (1 - np.abs(up)),
        sky + 1.5 * lobe + 0.06 * (1 - np.abs(up)),
        sky * 1.15 + 1.2 * lobe,
    ], axis=1)
    return EnvLight(tensor=Tensor(base.reshape(6, resolution, resolution, 3).astype(np.float32)))


# -- poses and cameras per preset --


def preset_poses(preset: str, frames: int, num_joints: int = 16) -> list:
    poses = []
    for i in range(frames):
        rot = np.zeros((num_joints, 3))
        if preset == "capsule-rotate":
            rot[0, 1] = 2.0 * np.pi * i / frames
        elif preset == "capsule-dance":
            rot[0, 1] = 2.0 * np.pi * i / frames
            wave = 0.45 * np.sin(2 * np.pi * i / max(frames, 1) * 3)
            rot[5, 2] = wave  # left elbow
            rot[8, 2] = -wave
        poses.append(BodyPose(i, rot, np.zeros(3)))
    return poses


def preset_cameras(preset: str, frames: int, size: int, center, radius: float = 2.2) -> list:
    if preset in ("capsule-rotate", "capsule-dance"):
        cam = Camera.looking_at(np.asarray(center) + [0, 0.05, radius], center, size, size, focal=1.2 * size)
        return [cam] * frames
    cams = []
    for i in range(frames):  # capsule-static: the camera orbits instead
        az = 2 * np.pi * i / frames
        el = 0.12 * np.sin(3 * az)
        eye = np.asarray(center) + radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera.looking_at(eye, center, size, size, focal=1.2 * size))
    return cams


def posed_mesh(mesh: Mesh, skeleton: Skeleton, pose: BodyPose) -> Mesh:
    from ..bodymodel import forward_kinematics, skin_points

    tf = forward_kinematics(skeleton, pose)
    verts = skin_points(mesh.vertices, skeleton.template_weights, tf.skin_rot, tf.skin_trans)
    return Mesh(verts, mesh.faces, uvs=mesh.uvs)


def render_gt_frame(mesh: Mesh, atlas, textures: MaterialTextures, env_pre, camera: Camera,
                    skeleton: Skeleton = None, pose: BodyPose = None):
    """sRGB frame over black background plus the coverage mask."""
    shaped = mesh if pose is None else posed_mesh(mesh, skeleton, pose)
    with T.no_grad():
        rgb, pixels, H, W = render_view_linear(shaped, atlas, textures, camera, env_pre)
    frame = np.zeros((H, W, 3), dtype=np.float32)
    mask = np.zeros((H, W), dtype=bool)
    if rgb is not None:
        frame[pixels[:, 0], pixels[:, 1]] = np.clip(linear_to_srgb(rgb.data), 0.0, 1.0)
        mask[pixels[:, 0], pixels[:, 1]] = True
    return frame, mask


def synth_generate(preset: str, out_dir: str, config: RunConfig = None):
    """Build the dataset (frames, masks, cameras, poses, skeleton, gt/)."""
    from .export import export_asset

    if preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}' (use one of {PRESETS})")
    config = config or RunConfig()
    size = config.train_image_size
    frames = config.synth_frames

    skeleton, mesh = build_skeleton()
    atlas = unwrap(mesh)
    mesh.uvs = atlas.uvs
    textures = bake_gt_textures(mesh, atlas, config.texture_resolution)
    env = gt_environment(config.env_resolution)
    env_pre = env.prefilter()

    center = mesh.vertices.mean(axis=0)
    poses = preset_poses(preset, frames)
    cameras = preset_cameras(preset, frames, size, center)
    images, masks = [], []
    for i in range(frames):
        frame, mask = render_gt_frame(mesh, atlas, textures, env_pre, cameras[i], skeleton, poses[i])
        images.append(frame)
        masks.append(mask)

    os.makedirs(out_dir, exist_ok=True)
    unique_cams = [cameras[0]] if preset in ("capsule-rotate", "capsule-dance") else cameras
    save_dataset(out_dir, images, masks, unique_cams, poses, skeleton)
    export_asset(mesh, textures, env, os.path.join(out_dir, "gt"), note="ground truth")
    from .dataset import load_dataset

    return load_dataset(out_dir)
