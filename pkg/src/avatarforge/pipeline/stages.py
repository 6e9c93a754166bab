"""Stage orchestration with file contracts and completion markers.

Order: synth/ingest -> stage1 -> extract -> fuse -> stage2 -> distill ->
export -> eval. Every stage reads its inputs from disk and leaves a marker
carrying the config hash, so reruns are idempotent and prerequisites are
checkable by name.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from ..bodymodel import BodyPose
from ..diffcore import Tensor
from ..fusionviews import (
    ViewEntry,
    assemble_training_set,
    load_pseudo_views,
    nearest_real_frames,
    sample_viewpoints,
    save_pseudo_views,
    synthesize_views,
)
from ..meshex import Mesh, load_obj, marching_cubes, remove_floaters, sample_sdf_grid, save_obj
from ..model import AvatarModel
from ..rasterpbr.envlight import EnvLight
from ..rasterpbr.shading import MaterialTextures
from ..rasterpbr.stage2 import Stage2Config, train_stage2
from ..srdistill import DenoiserHandle, DistillConfig, build_schedule, distill_texture
from ..uvtex import UvAtlas, unwrap, upsample_textures
from ..volumerender import Stage1Config, StageOneLossWeights, train_stage1
from . import metrics as M
from .config import RunConfig, config_hash, model_config
from .dataset import load_dataset
from .export import export_asset, load_asset, read_float_binary, write_float_binary
from .synth import render_gt_frame, synth_generate

STAGE_ORDER = ("synth", "stage1", "extract", "fuse", "stage2", "distill", "export", "eval")
EVAL_VIEW_STRIDE = 8
TRAIN_AZIMUTH_OFFSET = 0.35  # keeps training fusion views off the eval ring


class StageError(RuntimeError):
    pass


def _marker_path(out_dir: str, stage: str) -> str:
    return os.path.join(out_dir, "markers", f"{stage}.json")


def write_marker(out_dir: str, stage: str, config: RunConfig, info: dict = None) -> dict:
    os.makedirs(os.path.join(out_dir, "markers"), exist_ok=True)
    marker = {"stage": stage, "hash": config_hash(config), "info": info or {}}
    tmp = _marker_path(out_dir, stage) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(marker, f, indent=1, sort_keys=True)
    os.replace(tmp, _marker_path(out_dir, stage))
    return marker


def read_marker(out_dir: str, stage: str):
    path = _marker_path(out_dir, stage)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return json.load(f)


def _require(out_dir: str, stage: str, what: str) -> None:
    if read_marker(out_dir, stage) is None:
        raise StageError(f"missing {stage} {what} (run the '{stage}' stage first)")


def fusion_pose(config: RunConfig, dataset) -> BodyPose:
    if config.fusion_pose_frame >= 0:
        p = dataset.poses[config.fusion_pose_frame]
        return BodyPose(p.frame_index, p.rotations, p.root_translation)
    return BodyPose.identity(dataset.skeleton.num_joints, frame_index=0)


def eval_cameras(config: RunConfig, center, count: int = 50):
    """Every 8th view of the canonical 50-view ring, fixed across runs."""
    ring = sample_viewpoints(count, center=center, radius=config.fusion_radius,
                             image_size=config.train_image_size)
    return ring[::EVAL_VIEW_STRIDE]


def _stage1_config(config: RunConfig) -> Stage1Config:
    return Stage1Config(
        iterations=config.stage1_iterations,
        rays_per_batch=config.rays_per_batch,
        n_samples=config.n_samples,
        n_importance=config.n_importance,
        learning_rate=config.learning_rate,
        lr_decay=config.lr_decay,
        weights=StageOneLossWeights(
            eikonal=config.eikonal_weight,
            curvature=config.curvature_weight,
            offset=config.offset_weight,
            color=config.color_weight,
            consistency=config.consistency_weight,
        ),
        seed=config.seed,
    )


def _stage2_config(config: RunConfig) -> Stage2Config:
    texture_iters = min(config.stage2_texture_iterations,
                        max(config.stage2_iterations - config.stage2_bias_iterations, 0))
    return Stage2Config(
        iterations=config.stage2_iterations,
        bias_iterations=config.stage2_bias_iterations,
        texture_iterations=texture_iters,
        bake_resolution=config.texture_resolution,
        learning_rate=config.stage2_learning_rate,
        env_resolution=config.env_resolution,
        light_weight=config.light_weight,
        smooth_weight=config.smooth_weight,
        seed=config.seed,
    )


def _load_extracted(out_dir: str):
    mesh = load_obj(os.path.join(out_dir, "mesh_coarse.obj"))
    data = np.load(os.path.join(out_dir, "atlas.npz"))
    atlas = UvAtlas(data["uvs"], data["face_chart"], int(data["num_charts"]), float(data["utilization"]))
    mesh.uvs = atlas.uvs
    return mesh, atlas


def _save_stage2_artifacts(out_dir: str, mesh: Mesh, textures: MaterialTextures, env: EnvLight) -> None:
    save_obj(mesh, os.path.join(out_dir, "mesh_refined.obj"))
    write_float_binary(os.path.join(out_dir, "tex_kd.f32"), textures.kd.data)
    write_float_binary(os.path.join(out_dir, "tex_rough.f32"), textures.roughness.data)
    write_float_binary(os.path.join(out_dir, "tex_metal.f32"), textures.metalness.data)
    np.save(os.path.join(out_dir, "tex_valid.npy"), textures.validity)
    write_float_binary(os.path.join(out_dir, "env_cubemap.f32"), env.base.data)


def _load_stage2_artifacts(out_dir: str):
    mesh = load_obj(os.path.join(out_dir, "mesh_refined.obj"))
    kd, _ = read_float_binary(os.path.join(out_dir, "tex_kd.f32"))
    rough, _ = read_float_binary(os.path.join(out_dir, "tex_rough.f32"))
    metal, _ = read_float_binary(os.path.join(out_dir, "tex_metal.f32"))
    valid = np.load(os.path.join(out_dir, "tex_valid.npy"))
    textures = MaterialTextures(Tensor(kd), Tensor(rough), Tensor(metal), valid)
    cube, _ = read_float_binary(os.path.join(out_dir, "env_cubemap.f32"))
    return mesh, textures, EnvLight(tensor=Tensor(cube))


def _stage2_views(config: RunConfig, dataset, out_dir: str):
    pose = fusion_pose(config, dataset)
    pseudo = None
    pseudo_dir = os.path.join(dataset.root, "pseudo")
    if os.path.isdir(pseudo_dir) and config.pseudo_mix > 0:
        pseudo = load_pseudo_views(pseudo_dir)
    near = nearest_real_frames(dataset.poses, pose)
    real = [
        ViewEntry(dataset.images[i], dataset.masks[i], dataset.cameras[i], "real")
        for i in near
    ]
    views = assemble_training_set(real, pseudo, config.pseudo_mix)
    return views, pose


def run_stage(stage: str, config: RunConfig, data_dir: str, out_dir: str, quiet: bool = True) -> dict:
    if stage not in STAGE_ORDER:
        raise StageError(f"unknown stage '{stage}'")
    os.makedirs(out_dir, exist_ok=True)
    info: dict = {}

    if stage == "synth":
        synth_generate(config.synth_preset, data_dir, config)
        info = {"preset": config.synth_preset, "frames": config.synth_frames}

    elif stage == "stage1":
        dataset = load_dataset(data_dir)
        scene = dataset.scene()
        model, result = train_stage1(scene, _stage1_config(config), out_dir,
                                     model_config=model_config(config), quiet=quiet)
        info = {k: v for k, v in result.items() if isinstance(v, (int, float, str))}

    elif stage == "extract":
        if not os.path.exists(os.path.join(out_dir, "stage1_ckpt", "params.bin")):
            raise StageError("missing stage1 checkpoint (run the 'stage1' stage first)")
        dataset = load_dataset(data_dir)
        model = AvatarModel.load(os.path.join(out_dir, "stage1_ckpt"), dataset.skeleton)
        grid = sample_sdf_grid(model.sdf, dataset.skeleton, radius=config.joint_restrict_radius,
                               resolution=config.grid_resolution)
        mesh = remove_floaters(marching_cubes(grid))
        if len(mesh.faces) == 0:
            raise StageError("extraction produced an empty mesh")
        atlas = unwrap(mesh)
        mesh.uvs = atlas.uvs
        save_obj(mesh, os.path.join(out_dir, "mesh_coarse.obj"))
        np.savez(os.path.join(out_dir, "atlas.npz"), uvs=atlas.uvs, face_chart=atlas.face_chart,
                 num_charts=atlas.num_charts, utilization=atlas.utilization)
        info = {"vertices": len(mesh.vertices), "faces": len(mesh.faces), "charts": atlas.num_charts}

    elif stage == "fuse":
        _require(out_dir, "stage1", "checkpoint")
        dataset = load_dataset(data_dir)
        model = AvatarModel.load(os.path.join(out_dir, "stage1_ckpt"), dataset.skeleton)
        pose = fusion_pose(config, dataset)
        center = dataset.skeleton.template_vertices.mean(axis=0)
        cams = sample_viewpoints(config.fusion_views, center=center, radius=config.fusion_radius,
                                 image_size=config.fusion_image_size, azimuth_offset=TRAIN_AZIMUTH_OFFSET)
        pseudo = synthesize_views(model, cams, pose, n_samples=config.n_samples,
                                  n_importance=config.n_importance * 2, seed=config.seed)
        save_pseudo_views(pseudo, os.path.join(data_dir, "pseudo"))
        info = {"views": len(pseudo)}

    elif stage == "stage2":
        _require(out_dir, "extract", "mesh")
        dataset = load_dataset(data_dir)
        mesh, atlas = _load_extracted(out_dir)
        views, pose = _stage2_views(config, dataset, out_dir)
        mesh2, textures, env, res = train_stage2(mesh, atlas, views, _stage2_config(config), out_dir, quiet=quiet)
        mesh2.uvs = atlas.uvs
        _save_stage2_artifacts(out_dir, mesh2, textures, env)
        info = {"f0": res["f0"], "views": len(views)}

    elif stage == "distill":
        _require(out_dir, "stage2", "artifacts")
        dataset = load_dataset(data_dir)
        mesh, atlas = _load_extracted(out_dir)
        mesh2, textures, env = _load_stage2_artifacts(out_dir)
        mesh2.uvs = atlas.uvs
        views, pose = _stage2_views(config, dataset, out_dir)
        hi = upsample_textures(textures, config.texture_hires_resolution // config.texture_resolution)
        schedule = build_schedule(1000)
        if config.denoiser == "remote":
            handle = DenoiserHandle("remote", endpoint=config.denoiser_endpoint)
            targets = None
        else:
            handle = DenoiserHandle("analytic", target=views[0].image)
            targets = {i: v.image for i, v in enumerate(views)}
        dcfg = DistillConfig(steps=config.distill_steps, learning_rate=config.distill_learning_rate,
                             seed=config.seed)
        hi = distill_texture(mesh2, atlas, hi, views, env.prefilter(), handle, schedule, dcfg, targets=targets)
        write_float_binary(os.path.join(out_dir, "tex_kd_hires.f32"), hi.kd.data)
        np.save(os.path.join(out_dir, "tex_valid_hires.npy"), hi.validity)
        info = {"steps": config.distill_steps, "resolution": hi.kd.data.shape[0]}

    elif stage == "export":
        _require(out_dir, "stage2", "artifacts")
        mesh2, textures, env = _load_stage2_artifacts(out_dir)
        mesh_final, atlas = _load_extracted(out_dir)
        mesh2.uvs = atlas.uvs
        hi_path = os.path.join(out_dir, "tex_kd_hires.f32")
        if os.path.exists(hi_path):
            kd_hi, _ = read_float_binary(hi_path)
            valid_hi = np.load(os.path.join(out_dir, "tex_valid_hires.npy"))
            textures = MaterialTextures(Tensor(kd_hi), textures.roughness, textures.metalness, valid_hi)
        metrics_path = os.path.join(out_dir, "metrics.json")
        metrics = None
        if os.path.exists(metrics_path):
            with open(metrics_path) as f:
                metrics = json.load(f)
        manifest = export_asset(mesh2, textures, env, os.path.join(out_dir, "avatar"),
                                config_hash=config_hash(config), metrics=metrics)
        info = {"files": len(manifest["files"])}

    elif stage == "eval":
        _require(out_dir, "stage2", "artifacts")
        dataset = load_dataset(data_dir)
        report = evaluate_against_gt(config, dataset, out_dir)
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            json.dump(report.as_dict(), f, indent=1, sort_keys=True)
        info = report.as_dict()

    return write_marker(out_dir, stage, config, info)


def _asset_pieces(out_dir: str):
    mesh, atlas = _load_extracted(out_dir)
    mesh2, textures, env = _load_stage2_artifacts(out_dir)
    mesh2.uvs = atlas.uvs
    hi_path = os.path.join(out_dir, "tex_kd_hires.f32")
    if os.path.exists(hi_path):
        kd_hi, _ = read_float_binary(hi_path)
        valid_hi = np.load(os.path.join(out_dir, "tex_valid_hires.npy"))
        textures = MaterialTextures(Tensor(kd_hi), textures.roughness, textures.metalness, valid_hi)
    return mesh2, atlas, textures, env


def evaluate_against_gt(config: RunConfig, dataset, out_dir: str) -> M.MetricsReport:
    """Held-out-view metrics against the dataset's ground truth bundle.

    Renders both the reconstructed asset and the ground truth at the fixed
    eval cameras; PSNR runs over the union of foregrounds, SSIM over the
    full black-composited frames.
    """
    mesh2, atlas, textures, env = _asset_pieces(out_dir)
    env_pre = env.prefilter()

    gt_dir = dataset.gt_dir()
    center = dataset.skeleton.template_vertices.mean(axis=0)
    cams = eval_cameras(config, center)

    psnrs, ssims = [], []
    if gt_dir is not None:
        gt_mesh, gt_tex, gt_env = load_asset(gt_dir)
        gt_atlas_shim = type("A", (), {"uvs": gt_mesh.uvs})()
        gt_pre = gt_env.prefilter()
        for cam in cams:
            pred, pm = render_gt_frame(mesh2, atlas, textures, env_pre, cam)
            ref, rm = render_gt_frame(gt_mesh, gt_atlas_shim, gt_tex, gt_pre, cam)
            union = pm | rm
            if union.any():
                psnrs.append(M.psnr(pred, ref, union))
            ssims.append(M.ssim(pred, ref))
        chamfer_cm, p2s_cm = M.chamfer_p2s(mesh2, gt_mesh)
        ndeg = M.normal_degrees(mesh2, gt_mesh, cams)
        return M.MetricsReport(float(np.mean(psnrs)), float(np.mean(ssims)), chamfer_cm, p2s_cm, ndeg)

    # no ground truth: image metrics against the real frames nearest the pose
    views, pose = _stage2_views(config, dataset, out_dir)
    for v in views[: max(len(views) // EVAL_VIEW_STRIDE, 1)]:
        pred, pm = render_gt_frame(mesh2, atlas, textures, env_pre, v.camera)
        union = pm | v.mask
        if union.any():
            psnrs.append(M.psnr(pred, v.image, union))
        ssims.append(M.ssim(pred, v.image))
    return M.MetricsReport(float(np.mean(psnrs)), float(np.mean(ssims)))


def run_all(config: RunConfig, data_dir: str, out_dir: str, stages=None, quiet: bool = True) -> dict:
    results = {}
    for stage in stages or STAGE_ORDER:
        results[stage] = run_stage(stage, config, data_dir, out_dir, quiet=quiet)
    return results
