"""On-disk dataset layout and loaders.

    root/
      frames/frame_0000.png   8-bit sRGB
      masks/mask_0000.png     8-bit, 0/255
      cameras.json            one camera or one per frame
      poses.json              per-frame axis-angle rotations + root translation
      skeleton.json
      pseudo/                 optional fusion views
      gt/                     optional ground truth (mesh, materials, env)

World units are meters; cameras follow +z forward, +y down.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..bodymodel import Skeleton, load_poses, load_skeleton, save_poses, save_skeleton
from ..cameras import Camera
from ..volumerender import TrainScene


class DatasetError(RuntimeError):
    pass


def save_image_u8(path: str, array: np.ndarray) -> None:
    """Float [0,1] -> 8-bit PNG (values are stored as-is, no transfer)."""
    img8 = np.clip(np.asarray(array) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img8).save(path)


def load_image_u8(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def save_mask(path: str, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask, bool) * 255).astype(np.uint8)).save(path)


def load_mask(path: str) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


@dataclass
class Dataset:
    root: str
    images: list
    masks: list
    cameras: list  # one per frame (may repeat the same camera)
    poses: list
    skeleton: Skeleton
    background: np.ndarray

    @property
    def num_frames(self) -> int:
        return len(self.images)

    def scene(self) -> TrainScene:
        return TrainScene(self.images, self.masks, self.cameras, self.poses, self.skeleton, self.background)

    def gt_dir(self):
        path = os.path.join(self.root, "gt")
        return path if os.path.isdir(path) else None


def save_dataset(root: str, images, masks, cameras, poses, skeleton: Skeleton) -> None:
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for i, (img, mask) in enumerate(zip(images, masks)):
        save_image_u8(os.path.join(root, "frames", f"frame_{i:04d}.png"), img)
        save_mask(os.path.join(root, "masks", f"mask_{i:04d}.png"), mask)
    cams = cameras if isinstance(cameras, list) else [cameras]
    with open(os.path.join(root, "cameras.json"), "w") as f:
        json.dump({"cameras": [c.to_json() for c in cams]}, f)
    save_poses(poses, os.path.join(root, "poses.json"))
    save_skeleton(skeleton, os.path.join(root, "skeleton.json"))


def load_dataset(root: str) -> Dataset:
    frame_dir = os.path.join(root, "frames")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(frame_dir):
        raise DatasetError(f"missing frames/ under {root}")
    frame_files = sorted(f for f in os.listdir(frame_dir) if f.endswith(".png"))
    mask_files = sorted(f for f in os.listdir(mask_dir) if f.endswith(".png"))
    poses = load_poses(os.path.join(root, "poses.json"))
    if not (len(frame_files) == len(mask_files) == len(poses)):
        raise DatasetError(
            f"count mismatch: {len(frame_files)} frames, {len(mask_files)} masks, {len(poses)} poses"
        )
    with open(os.path.join(root, "cameras.json")) as f:
        cam_doc = json.load(f)
    cams = [Camera.from_json(c) for c in cam_doc["cameras"]]
    if len(cams) == 1:
        cams = cams * len(frame_files)
    elif len(cams) != len(frame_files):
        raise DatasetError("camera count must be 1 or match the frame count")
    images = [load_image_u8(os.path.join(frame_dir, f)) for f in frame_files]
    masks = [load_mask(os.path.join(mask_dir, f)) for f in mask_files]
    skeleton = load_skeleton(os.path.join(root, "skeleton.json"))
    return Dataset(root, images, masks, cams, poses, skeleton, np.zeros(3, dtype=np.float32))
