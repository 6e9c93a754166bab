"""Virtual camera placement and pseudo multi-view synthesis.

After stage 1 the deformable fields hold the fused appearance of every frame;
rendering them from a ring of virtual viewpoints in one well-behaved pose
turns temporal coverage into spatial supervision for the explicit stage.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .bodymodel import BodyPose
from .cameras import Camera
from .model import AvatarModel
from .volumerender import render_image

ELEVATION_RANGE = (np.deg2rad(-30.0), np.deg2rad(45.0))
MASK_THRESHOLD = 0.5


@dataclass
class ViewEntry:
    image: np.ndarray  # (H,W,3) float32 sRGB in [0,1]
    mask: np.ndarray  # (H,W) bool
    camera: Camera
    provenance: str  # "real" | "pseudo"


@dataclass
class PseudoViewSet:
    entries: list
    pose: BodyPose

    def __len__(self):
        return len(self.entries)


def sample_viewpoints(
    count: int,
    center=(0.0, 0.0, 0.0),
    radius: float = 2.0,
    image_size: int = 512,
    focal: float = None,
    elevation_range=ELEVATION_RANGE,
    azimuth_offset: float = 0.0,
) -> list:
    """Spherical-Fibonacci cameras in an elevation band, all looking at center.

    count=1 yields a single frontal camera at zero elevation.
    """
    if count < 1:
        raise ValueError("need at least one viewpoint")
    center = np.asarray(center, dtype=np.float64)
    focal = focal or 1.2 * image_size
    lo, hi = elevation_range
    cams = []
    if count == 1:
        elevations = np.array([0.0])
        azimuths = np.array([0.0])
    else:
        golden = np.pi * (3.0 - np.sqrt(5.0))
        idx = np.arange(count)
        s = (idx + 0.5) / count
        elevations = np.arcsin(np.sin(lo) + s * (np.sin(hi) - np.sin(lo)))
        azimuths = idx * golden
    for el, az in zip(elevations, azimuths + azimuth_offset):
        eye = center + radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera.looking_at(eye, center, image_size, image_size, focal))
    return cams


def synthesize_views(
    model: AvatarModel,
    cameras,
    pose: BodyPose,
    n_samples: int = 64,
    n_importance: int = 16,
    background=(0.0, 0.0, 0.0),
    seed: int = 0,
) -> PseudoViewSet:
    """Volume-render each camera; masks threshold accumulated opacity at 0.5."""
    if pose.rotations.shape[0] != model.skeleton.num_joints:
        raise ValueError("pose joint count does not match the checkpoint skeleton")
    entries = []
    for cam in cameras:
        rgb, acc = render_image(
            model, cam, pose, n_samples=n_samples, n_importance=n_importance,
            background=background, seed=seed,
        )
        entries.append(ViewEntry(rgb.astype(np.float32), acc > MASK_THRESHOLD, cam, "pseudo"))
    return PseudoViewSet(entries, pose)


def pose_distance(a: BodyPose, b: BodyPose) -> float:
    """Crude pose metric: mean joint axis-angle difference plus root offset."""
    rot = float(np.linalg.norm(a.rotations - b.rotations, axis=1).mean())
    trans = float(np.linalg.norm(a.root_translation - b.root_translation))
    return rot + trans


def nearest_real_frames(poses, target: BodyPose, threshold: float = 0.08, at_least: int = 1):
    """Indices of real frames whose pose is closest to the fusion pose."""
    dists = np.array([pose_distance(p, target) for p in poses])
    close = np.flatnonzero(dists <= threshold)
    if len(close) < at_least:
        close = np.argsort(dists)[:at_least]
    return np.sort(close)


def assemble_training_set(real_entries, pseudo: PseudoViewSet, mix: float = 1.0):
    """Merge real and pseudo views with provenance tags.

    `mix` scales the pseudo contribution; 0 drops pseudo views entirely.
    Empty pseudo input degrades to real-only with a warning.
    """
    import warnings

    entries = list(real_entries)
    if pseudo is None or len(pseudo) == 0:
        warnings.warn("no pseudo views available; proceeding with real views only")
        return entries
    if mix > 0:
        entries = entries + list(pseudo.entries)
    return entries


# -- persistence (dataset pseudo/ subtree) --


def save_pseudo_views(views: PseudoViewSet, dirpath: str) -> None:
    from PIL import Image

    os.makedirs(dirpath, exist_ok=True)
    cams = []
    for i, e in enumerate(views.entries):
        img8 = np.clip(e.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(img8).save(os.path.join(dirpath, f"frame_{i:04d}.png"))
        Image.fromarray((e.mask * 255).astype(np.uint8)).save(os.path.join(dirpath, f"mask_{i:04d}.png"))
        cams.append(e.camera.to_json())
    doc = {
        "cameras": cams,
        "pose": {
            "rotations": views.pose.rotations.tolist(),
            "root_translation": views.pose.root_translation.tolist(),
        },
    }
    tmp = os.path.join(dirpath, "cameras_pseudo.json.tmp")
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, os.path.join(dirpath, "cameras_pseudo.json"))


def load_pseudo_views(dirpath: str) -> PseudoViewSet:
    from PIL import Image

    with open(os.path.join(dirpath, "cameras_pseudo.json")) as f:
        doc = json.load(f)
    entries = []
    for i, cam_doc in enumerate(doc["cameras"]):
        img = np.asarray(Image.open(os.path.join(dirpath, f"frame_{i:04d}.png")), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(os.path.join(dirpath, f"mask_{i:04d}.png"))) > 127
        entries.append(ViewEntry(img, mask, Camera.from_json(cam_doc), "pseudo"))
    pose = BodyPose(0, np.array(doc["pose"]["rotations"]), np.array(doc["pose"]["root_translation"]))
    return PseudoViewSet(entries, pose)
