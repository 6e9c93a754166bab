"""Avatar asset export: OBJ + MTL, material PNGs with float sidecars, the
environment as an equirectangular float binary, and a hashed manifest."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
from PIL import Image

from ..diffcore import Tensor
from ..meshex import Mesh, load_obj, save_obj
from ..rasterpbr.envlight import EnvLight, dir_to_cube, _bilinear_taps
from ..rasterpbr.shading import MaterialTextures, linear_to_srgb, srgb_to_linear

ASSET_VERSION = 1


def write_float_binary(path: str, array: np.ndarray, **meta) -> None:
    """Self-describing binary: one JSON header line, then raw little-endian f32."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = {"shape": list(arr.shape), "dtype": "<f4", "order": "C"}
    header.update(meta)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(arr.tobytes())


def read_float_binary(path: str):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        data = np.frombuffer(f.read(), dtype="<f4").reshape(header["shape"]).copy()
    return data, header


def cubemap_to_equirect(base: np.ndarray, height: int = 128) -> np.ndarray:
    """(6,S,S,3) cubemap -> (H, 2H, 3) equirectangular (latitude rows)."""
    width = 2 * height
    v, u = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    elevation = (0.5 - v) * np.pi
    azimuth = (u * 2.0 - 1.0) * np.pi
    dirs = np.stack(
        [np.cos(elevation) * np.sin(azimuth), np.sin(elevation), np.cos(elevation) * np.cos(azimuth)], axis=-1
    ).reshape(-1, 3)
    res = base.shape[1]
    face, uu, vv = dir_to_cube(dirs)
    idx, w = _bilinear_taps(face, uu, vv, res)
    flat = base.reshape(-1, 3)
    vals = (flat[idx.reshape(-1)].reshape(-1, 4, 3) * w[..., None]).sum(axis=1)
    return vals.reshape(height, width, 3).astype(np.float32)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def export_asset(mesh: Mesh, textures: MaterialTextures, env: EnvLight, out_dir: str,
                 config_hash: str = "", metrics: dict = None, note: str = "") -> dict:
    """Write the engine-ready asset bundle; returns the manifest."""
    if mesh.uvs is None:
        raise ValueError("mesh must carry texture coordinates before export")
    os.makedirs(out_dir, exist_ok=True)

    save_obj(mesh, os.path.join(out_dir, "mesh.obj"), mtl_name="material0.mtl")
    with open(os.path.join(out_dir, "material0.mtl"), "w") as f:
        f.write("newmtl material0\nKa 1.0 1.0 1.0\nKd 1.0 1.0 1.0\nmap_Kd kd.png\n")

    kd = np.clip(textures.kd.data, 0.0, 1.0)
    kd_srgb = np.clip(linear_to_srgb(kd) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(kd_srgb).save(os.path.join(out_dir, "kd.png"))
    write_float_binary(os.path.join(out_dir, "kd.f32"), kd, colorspace="linear")

    res = textures.roughness.data.shape[0]
    orm = np.zeros((res, res, 3), dtype=np.float32)
    orm[..., 0] = 1.0  # occlusion placeholder
    orm[..., 1] = textures.roughness.data[..., 0]
    orm[..., 2] = textures.metalness.data[..., 0]
    Image.fromarray(np.clip(orm * 255.0 + 0.5, 0, 255).astype(np.uint8)).save(os.path.join(out_dir, "orm.png"))
    write_float_binary(os.path.join(out_dir, "orm.f32"), orm, channels="occlusion,roughness,metalness")
    Image.fromarray((textures.validity * 255).astype(np.uint8)).save(os.path.join(out_dir, "valid.png"))

    eq = cubemap_to_equirect(env.base.data)
    write_float_binary(os.path.join(out_dir, "env.bin"), eq, mapping="equirectangular")
    write_float_binary(os.path.join(out_dir, "env_cubemap.f32"), env.base.data, mapping="cubemap")
    preview = np.clip(linear_to_srgb(np.clip(eq, 0, 1)) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(preview).save(os.path.join(out_dir, "env_preview.png"))

    files = [
        "mesh.obj", "material0.mtl", "kd.png", "kd.f32", "orm.png", "orm.f32",
        "valid.png", "env.bin", "env_cubemap.f32", "env_preview.png",
    ]
    manifest = {
        "version": ASSET_VERSION,
        "config_hash": config_hash,
        "note": note,
        "lpips": "excluded (needs a pretrained perceptual network)",
        "metrics": metrics or {},
        "files": {name: _sha256(os.path.join(out_dir, name)) for name in files},
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def validate_manifest(asset_dir: str) -> bool:
    with open(os.path.join(asset_dir, "manifest.json")) as f:
        manifest = json.load(f)
    for name, digest in manifest["files"].items():
        actual = _sha256(os.path.join(asset_dir, name))
        if actual != digest:
            raise ValueError(f"hash mismatch for {name}")
    return True


def load_asset(asset_dir: str):
    """Reload (mesh, MaterialTextures, EnvLight) exactly from the sidecars."""
    mesh = load_obj(os.path.join(asset_dir, "mesh.obj"))
    kd, _ = read_float_binary(os.path.join(asset_dir, "kd.f32"))
    orm, _ = read_float_binary(os.path.join(asset_dir, "orm.f32"))
    validity = np.asarray(Image.open(os.path.join(asset_dir, "valid.png"))) > 127
    textures = MaterialTextures(
        Tensor(kd.astype(np.float32)),
        Tensor(orm[..., 1:2].astype(np.float32)),
        Tensor(orm[..., 2:3].astype(np.float32)),
        validity,
    )
    cube, _ = read_float_binary(os.path.join(asset_dir, "env_cubemap.f32"))
    env = EnvLight(tensor=Tensor(cube.astype(np.float32)))
    return mesh, textures, env
