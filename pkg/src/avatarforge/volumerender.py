"""Ray sampling, transmittance compositing, stage-1 losses, and training.

Sample intervals are the Voronoi cells of the depth samples inside
[near, far], so interval lengths always telescope to far - near exactly.
Compositing runs in log-transmittance space: T_n = exp(-cumsum(sigma*delta)),
which keeps the weight simplex bounds exact.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geom
from .bodymodel import BodyPose, Skeleton, forward_kinematics, skin_points, weight_consistency_loss
from .cameras import Camera
from .diffcore import NonFiniteError, OptimConfig, ParamStore, Tensor, adam_step
from .diffcore import tensor as T
from .implicitsurface import density_from_sdf
from .model import AvatarModel


@dataclass
class RayBundle:
    origins: np.ndarray  # (N,3)
    dirs: np.ndarray  # (N,3) unit
    near: np.ndarray  # (N,)
    far: np.ndarray  # (N,)
    pixels: np.ndarray = None  # (N,2) row,col
    frame_index: int = 0

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64)
        self.dirs = np.asarray(self.dirs, dtype=np.float64)
        self.near = np.asarray(self.near, dtype=np.float64)
        self.far = np.asarray(self.far, dtype=np.float64)
        norms = np.linalg.norm(self.dirs, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("ray directions must be unit length")
        if (self.near >= self.far).any():
            raise ValueError("near must be < far")

    def __len__(self):
        return len(self.origins)


def stratified_depths(near: np.ndarray, far: np.ndarray, count: int, rng=None, jitter: bool = True) -> np.ndarray:
    """Stratified uniform depths, one sample per bin of [near, far]."""
    n = len(near)
    if jitter:
        u = rng.random((n, count))
    else:
        u = np.full((n, count), 0.5)
    steps = (np.arange(count) + u) / count
    return near[:, None] + (far - near)[:, None] * steps


def sample_pdf(bins: np.ndarray, weights: np.ndarray, count: int, rng) -> np.ndarray:
    """Inverse-CDF samples from a piecewise-constant pdf over `bins` edges."""
    w = weights + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(w), 1)), np.cumsum(pdf, axis=1)], axis=1)
    u = rng.random((len(w), count))
    idx = np.stack([np.searchsorted(cdf[i], u[i], side="right") for i in range(len(w))])
    below = np.clip(idx - 1, 0, cdf.shape[1] - 1)
    above = np.clip(idx, 0, cdf.shape[1] - 1)
    cdf_b = np.take_along_axis(cdf, below, axis=1)
    cdf_a = np.take_along_axis(cdf, above, axis=1)
    bin_b = np.take_along_axis(bins, np.clip(below, 0, bins.shape[1] - 1), axis=1)
    bin_a = np.take_along_axis(bins, np.clip(above, 0, bins.shape[1] - 1), axis=1)
    denom = np.where(cdf_a - cdf_b < 1e-9, 1.0, cdf_a - cdf_b)
    t = (u - cdf_b) / denom
    return bin_b + t * (bin_a - bin_b)


def interval_lengths(depths: np.ndarray, near: np.ndarray, far: np.ndarray) -> np.ndarray:
    """Voronoi interval of each sorted sample within [near, far]; sums to far-near."""
    mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
    lo = np.concatenate([near[:, None], mids], axis=1)
    hi = np.concatenate([mids, far[:, None]], axis=1)
    return hi - lo


@dataclass
class RaySampleSet:
    depths: np.ndarray  # (N,S) sorted
    deltas: np.ndarray  # (N,S) > 0
    points: np.ndarray  # (N,S,3) pose-space positions

    def __post_init__(self):
        if (self.deltas <= 0).any():
            raise ValueError("sample intervals must be positive")
        if (np.diff(self.depths, axis=1) < 0).any():
            raise ValueError("samples must be sorted by depth")


def sample_ray(bundle: RayBundle, count: int = 64, rng=None, jitter: bool = True) -> RaySampleSet:
    rng = rng or np.random.default_rng(0)
    depths = stratified_depths(bundle.near, bundle.far, count, rng, jitter)
    deltas = interval_lengths(depths, bundle.near, bundle.far)
    points = bundle.origins[:, None, :] + depths[..., None] * bundle.dirs[:, None, :]
    return RaySampleSet(depths, deltas, points)


def composite(sigma: Tensor, colors: Tensor, deltas, background):
    """Transmittance compositing (alpha_n = 1 - exp(-sigma_n delta_n)).

    Returns (rgb (N,3), weights (N,S), acc (N,)). Weights are non-negative
    and sum to at most 1; leftover transmittance hits the background.
    """
    n, s = sigma.data.shape
    if not isinstance(deltas, Tensor):
        deltas = Tensor(np.asarray(deltas, dtype=np.float32))
    if not isinstance(background, Tensor):
        background = Tensor(np.asarray(background, dtype=np.float32))
    sd = T.mul(sigma, deltas)
    cs = T.cumsum(sd, axis=1)
    excl = T.sub(cs, sd)
    trans = T.exp(T.neg(excl))
    alpha = T.sub(T.constant(1.0, sd), T.exp(T.neg(sd)))
    w = T.mul(trans, alpha)
    rgb = T.reduce_sum(T.mul(T.reshape(w, (n, s, 1)), colors), axis=1)
    t_end = T.exp(T.neg(T.getitem(cs, (slice(None), slice(s - 1, s)))))
    rgb = T.add(rgb, T.mul(t_end, background))
    acc = T.reduce_sum(w, axis=1)
    return rgb, w, acc


def _cross(a: Tensor, b: np.ndarray) -> Tensor:
    """Cross product of tensor rows with constant rows."""
    ax = T.getitem(a, (slice(None), slice(0, 1)))
    ay = T.getitem(a, (slice(None), slice(1, 2)))
    az = T.getitem(a, (slice(None), slice(2, 3)))
    bx, by, bz = (Tensor(b[:, i : i + 1].astype(np.float32)) for i in range(3))
    return T.concatenate(
        [
            T.sub(T.mul(ay, bz), T.mul(az, by)),
            T.sub(T.mul(az, bx), T.mul(ax, bz)),
            T.sub(T.mul(ax, by), T.mul(ay, bx)),
        ],
        axis=1,
    )


# -- losses --


@dataclass
class StageOneLossWeights:
    eikonal: float = 0.1  # lambda_1
    curvature: float = 0.65  # lambda_2
    offset: float = 0.02  # lambda_3
    color: float = 1.0
    consistency: float = 1.0

    def __post_init__(self):
        if min(self.eikonal, self.curvature, self.offset, self.color, self.consistency) < 0:
            raise ValueError("loss weights must be non-negative")


def loss_color(pred: Tensor, gt, weight: float = 1.0) -> Tensor:
    if not isinstance(gt, Tensor):
        gt = Tensor(np.asarray(gt, dtype=np.float32))
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {gt.data.shape}")
    return T.mul(T.constant(weight), T.reduce_mean(T.absolute(T.sub(pred, gt))))


def loss_eikonal(sdf_field, points: np.ndarray, weight: float = 0.1) -> Tensor:
    """weight * mean (|grad s| - 1)^2 at the given points."""
    x = Tensor(np.asarray(points, dtype=np.float32), requires_grad=True)
    s, _ = sdf_field(x)
    g = T.grad(s, x, seed=Tensor(np.ones_like(s.data)), create_graph=True)
    gn = T.norm(g, axis=1, keepdims=False, eps=1e-12)
    return T.mul(T.constant(weight), T.reduce_mean(T.power(T.sub(gn, T.constant(1.0)), 2.0)))


@dataclass
class CurvatureProbes:
    base: np.ndarray  # (M,3)
    normals: Tensor  # (M,3) at base, unit
    tangents: np.ndarray  # (M,3) random unit vectors
    eps: float
    perturbed: np.ndarray  # (M,3) = base + eps * (n x tau), detached
    normals_eps: Tensor  # (M,3) at perturbed points, unit


def build_curvature_probes(sdf_field, points: np.ndarray, eps: float, rng) -> CurvatureProbes:
    points = np.asarray(points, dtype=np.float32)
    tau = rng.normal(size=points.shape)
    tau /= np.linalg.norm(tau, axis=1, keepdims=True)

    x = Tensor(points, requires_grad=True)
    s, _ = sdf_field(x)
    g = T.grad(s, x, seed=Tensor(np.ones_like(s.data)), create_graph=True)
    n = T.normalize(g)
    direction = _cross(n, tau)
    perturbed = (points + eps * direction.data).astype(np.float32)

    x_eps = Tensor(perturbed, requires_grad=True)
    s_eps, _ = sdf_field(x_eps)
    g_eps = T.grad(s_eps, x_eps, seed=Tensor(np.ones_like(s_eps.data)), create_graph=True)
    n_eps = T.normalize(g_eps)
    return CurvatureProbes(points, n, tau, eps, perturbed, n_eps)


def loss_curvature(probes: CurvatureProbes, weight: float = 0.65) -> Tensor:
    ndot = T.dot(probes.normals, probes.normals_eps, keepdims=False)
    return T.mul(T.constant(weight), T.reduce_mean(T.power(T.sub(ndot, T.constant(1.0)), 2.0)))


def loss_offset(delta: Tensor, weight: float = 0.02) -> Tensor:
    """weight * mean L2 norm of the non-rigid offsets."""
    return T.mul(T.constant(weight), T.reduce_mean(T.norm(delta, axis=1, keepdims=False, eps=1e-12)))


# -- rendering through the deformable model --


def scene_aabb(skeleton: Skeleton, pose: BodyPose, margin: float = 0.15):
    tf = forward_kinematics(skeleton, pose)
    verts = skin_points(skeleton.template_vertices, skeleton.template_weights, tf.skin_rot, tf.skin_trans)
    return verts.min(axis=0) - margin, verts.max(axis=0) + margin


class BoneSpheres:
    """Per-bone bounding spheres of the posed template, for tight ray clipping."""

    def __init__(self, skeleton: Skeleton, margin: float = 0.08):
        self.skeleton = skeleton
        self.margin = margin
        K = skeleton.num_joints
        owner = skeleton.template_weights.argmax(axis=1)
        rest = skeleton.rest_positions
        self._rest_extra = np.zeros(K)
        for j in range(K):
            verts = skeleton.template_vertices[owner == j]
            if len(verts) == 0:
                continue
            p = rest[skeleton.parents[j]] if skeleton.parents[j] >= 0 else rest[j]
            seg = rest[j] - p
            L2 = max(float(seg @ seg), 1e-12)
            t = np.clip((verts - p) @ seg / L2, 0.0, 1.0)
            closest = p + t[:, None] * seg
            self._rest_extra[j] = np.linalg.norm(verts - closest, axis=1).max()
        self._cache = {}

    def posed(self, pose: BodyPose):
        key = pose.frame_index
        entry = self._cache.get(key)
        if entry is None:
            tf = forward_kinematics(self.skeleton, pose)
            joints = tf.joint_positions
            parents = self.skeleton.parents
            K = self.skeleton.num_joints
            centers = np.zeros((K, 3))
            radii = np.zeros(K)
            rest = self.skeleton.rest_positions
            for j in range(K):
                p = joints[parents[j]] if parents[j] >= 0 else joints[j]
                centers[j] = 0.5 * (joints[j] + p)
                half = 0.5 * np.linalg.norm(rest[j] - (rest[parents[j]] if parents[j] >= 0 else rest[j]))
                radii[j] = half + self._rest_extra[j] + self.margin
            entry = (centers, radii)
            self._cache[key] = entry
        return entry

    def clip(self, origins: np.ndarray, dirs: np.ndarray, pose: BodyPose, eps: float = 1e-4):
        """Union of per-sphere [t0,t1] intervals. Returns (near, far, hit)."""
        centers, radii = self.posed(pose)
        oc = origins[:, None, :] - centers[None, :, :]  # (N,K,3)
        b = np.einsum("nkj,nj->nk", oc, dirs)
        c = np.einsum("nkj,nkj->nk", oc, oc) - radii[None, :] ** 2
        disc = b * b - c
        ok = disc > 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = np.where(ok, -b - sq, np.inf)
        t1 = np.where(ok, -b + sq, -np.inf)
        near = np.maximum(t0.min(axis=1), eps)
        far = t1.max(axis=1)
        hit = (far > near) & np.isfinite(near) & np.isfinite(far)
        return near, far, hit


def clip_rays(origins, dirs, box_min, box_max, eps: float = 1e-4):
    tnear, tfar = geom.ray_box(origins, dirs, box_min, box_max)
    tnear = np.maximum(tnear, eps)
    hit = tnear < tfar
    return tnear, tfar, hit


def render_rays(
    model: AvatarModel,
    bundle: RayBundle,
    pose: BodyPose,
    n_samples: int = 64,
    n_importance: int = 16,
    rng=None,
    background=(0.0, 0.0, 0.0),
    jitter: bool = True,
    inference: bool = False,
):
    """Volume-render a ray bundle through the deformable fields.

    Returns a dict with rgb/acc/weights tensors plus the deformation sample
    for loss terms. `inference=True` detaches everything except the SDF
    gradient needed for shading normals.
    """
    rng = rng or np.random.default_rng(0)
    n = len(bundle)
    bg = np.asarray(background, dtype=np.float32)

    # coarse pass for importance sampling (no gradient)
    coarse = sample_ray(bundle, n_samples, rng, jitter)
    depths = coarse.depths
    if n_importance > 0:
        with T.no_grad():
            sigma_c = _density_at(model, coarse.points, pose)
        dc = Tensor(coarse.deltas.astype(np.float32))
        w = (
            np.exp(-np.cumsum(sigma_c.data * dc.data, axis=1) + sigma_c.data * dc.data)
            * (1.0 - np.exp(-sigma_c.data * dc.data))
        )
        mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
        extra = sample_pdf(mids, w[:, 1:-1], n_importance, rng)
        depths = np.sort(np.concatenate([depths, extra], axis=1), axis=1)

    deltas = interval_lengths(depths, bundle.near, bundle.far)
    points = bundle.origins[:, None, :] + depths[..., None] * bundle.dirs[:, None, :]
    samples = RaySampleSet(depths, deltas, points)
    s_total = depths.shape[1]
    flat = points.reshape(-1, 3)

    if inference:
        with T.no_grad():
            sample_out = model.deform.canonical_map(flat, pose)
        x_prime = Tensor(sample_out.x_prime.data, requires_grad=True)
    else:
        sample_out = model.deform.canonical_map(flat, pose)
        x_prime = sample_out.x_prime
    s, z = model.sdf(x_prime)
    g = T.grad(s, x_prime, seed=Tensor(np.ones_like(s.data)), create_graph=not inference)
    normals = T.normalize(g)

    # view direction carried into canonical space by the blended rotations
    tf = forward_kinematics(model.skeleton, pose)
    dirs_rep = np.repeat(bundle.dirs, s_total, axis=0)
    per_joint_dir = np.einsum("kij,nj->nki", tf.unskin_rot, dirs_rep).astype(np.float32)
    v_can = T.normalize(T.weighted_blend(sample_out.weights, Tensor(per_joint_dir)))

    psi = T.take(model.deform.latents, np.full(len(flat), pose.frame_index, dtype=np.int64))
    if inference:
        ctx = T.no_grad()
    else:
        ctx = _NullCtx()
    with ctx:
        rgb_samples = model.color(x_prime, normals, v_can, z, psi)
        sigma = density_from_sdf(s, model.density.alpha(), model.density.beta())
        rgb, weights, acc = composite(
            T.reshape(sigma, (n, s_total)),
            T.reshape(rgb_samples, (n, s_total, 3)),
            deltas.astype(np.float32),
            bg,
        )
    return {
        "rgb": rgb,
        "acc": acc,
        "weights": weights,
        "samples": samples,
        "deform": sample_out,
        "sdf": s,
        "x_prime": x_prime,
        "depths": depths,
    }


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


def _density_at(model: AvatarModel, points: np.ndarray, pose: BodyPose) -> Tensor:
    """Approximate density for importance sampling: quick rigid canonical map."""
    flat = points.reshape(-1, 3)
    x_prime = model.deform.quick_canonical(flat, pose).astype(np.float32)
    s, _ = model.sdf(Tensor(x_prime))
    sigma = density_from_sdf(s, model.density.alpha(), model.density.beta())
    return T.reshape(sigma, points.shape[:2])


def render_image(
    model: AvatarModel,
    camera: Camera,
    pose: BodyPose,
    n_samples: int = 64,
    n_importance: int = 16,
    background=(0.0, 0.0, 0.0),
    chunk: int = 2048,
    seed: int = 0,
    margin: float = 0.15,
):
    """Full-frame deterministic render. Returns (rgb (H,W,3), acc (H,W))."""
    H, W = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pixels = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)
    origins, dirs = camera.rays_for_pixels(pixels)
    tnear, tfar, hit = BoneSpheres(model.skeleton, margin=margin).clip(origins, dirs, pose)

    rgb = np.tile(np.asarray(background, dtype=np.float32), (H * W, 1))
    acc = np.zeros(H * W, dtype=np.float32)
    idx = np.flatnonzero(hit)
    rng = np.random.default_rng(seed)
    for start in range(0, len(idx), chunk):
        sel = idx[start : start + chunk]
        bundle = RayBundle(origins[sel], dirs[sel], tnear[sel], tfar[sel], frame_index=pose.frame_index)
        out = render_rays(
            model, bundle, pose, n_samples, n_importance, rng,
            background=background, jitter=False, inference=True,
        )
        rgb[sel] = out["rgb"].data
        acc[sel] = out["acc"].data
    return rgb.reshape(H, W, 3), acc.reshape(H, W)


# -- training --


@dataclass
class TrainScene:
    images: list  # (H,W,3) float32 in [0,1]
    masks: list  # (H,W) bool
    cameras: list  # Camera per frame (or a single shared Camera)
    poses: list  # BodyPose per frame
    skeleton: Skeleton
    background: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))

    def camera_for(self, i: int) -> Camera:
        if isinstance(self.cameras, Camera):
            return self.cameras
        if len(self.cameras) == 1:
            return self.cameras[0]
        return self.cameras[i]

    @property
    def num_frames(self) -> int:
        return len(self.images)


@dataclass
class Stage1Config:
    iterations: int = 100000
    rays_per_batch: int = 192
    n_samples: int = 64
    n_importance: int = 16
    learning_rate: float = 5e-4
    lr_decay: float = 1.0
    weights: StageOneLossWeights = field(default_factory=StageOneLossWeights)
    eikonal_points: int = 256
    curvature_points: int = 64
    curvature_eps: float = 0.01
    curvature_every: int = 2
    consistency_points: int = 128
    consistency_every: int = 4
    background_ray_fraction: float = 0.1
    mask_dilation: int = 4
    checkpoint_every: int = 2000
    log_every: int = 50
    seed: int = 0
    aabb_margin: float = 0.15


def _pixel_pools(scene: TrainScene, dilation: int):
    pools = []
    for i in range(scene.num_frames):
        mask = scene.masks[i].astype(bool)
        dil = ndimage.binary_dilation(mask, iterations=dilation) if dilation > 0 else mask
        fg = np.argwhere(dil)
        bg = np.argwhere(~dil)
        pools.append((fg, bg))
    return pools


def train_stage1(scene: TrainScene, config: Stage1Config, out_dir: str, model: AvatarModel = None,
                 model_config=None, quiet: bool = True):
    """Joint optimization of deformation, SDF, color, and density parameters.

    Writes line-delimited JSON logs and periodic checkpoints under out_dir;
    aborts on divergence, keeping the last good checkpoint.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = AvatarModel(scene.skeleton, scene.num_frames, model_config, seed=config.seed)
    optim = OptimConfig(learning_rate=config.learning_rate, decay=config.lr_decay)
    pools = _pixel_pools(scene, config.mask_dilation)
    spheres = BoneSpheres(scene.skeleton)
    canon_min, canon_max = scene_aabb(scene.skeleton, BodyPose.identity(scene.skeleton.num_joints), 0.1)

    ckpt_dir = os.path.join(out_dir, "stage1_ckpt")
    model.save(ckpt_dir)
    log_path = os.path.join(out_dir, "stage1_log.jsonl")
    log_f = open(log_path, "a")
    t_start = time.time()

    for it in range(config.iterations):
        frame = int(rng.integers(scene.num_frames))
        pose = scene.poses[frame]
        camera = scene.camera_for(frame)
        image = scene.images[frame]
        fg, bg = pools[frame]

        n_bg = int(config.rays_per_batch * config.background_ray_fraction)
        n_fg = config.rays_per_batch - n_bg
        pick_fg = fg[rng.integers(len(fg), size=n_fg)]
        pix = pick_fg if n_bg == 0 or len(bg) == 0 else np.concatenate(
            [pick_fg, bg[rng.integers(len(bg), size=n_bg)]]
        )

        origins, dirs = camera.rays_for_pixels(pix)
        tnear, tfar, hit = spheres.clip(origins, dirs, pose)
        gt = image[pix[:, 0], pix[:, 1]].astype(np.float32)

        try:
            losses = {}
            if hit.any():
                bundle = RayBundle(origins[hit], dirs[hit], tnear[hit], tfar[hit], frame_index=frame)
                out = render_rays(
                    model, bundle, pose, config.n_samples, config.n_importance, rng,
                    background=scene.background,
                )
                losses["color"] = loss_color(out["rgb"], gt[hit], config.weights.color)

                # eikonal: uniform canonical-box points plus near-surface jitter
                m_uni = config.eikonal_points
                uni = rng.uniform(canon_min, canon_max, size=(m_uni, 3))
                near_idx = rng.integers(len(out["x_prime"].data), size=m_uni // 2)
                near_pts = out["x_prime"].data[near_idx] + rng.normal(0, 0.02, size=(m_uni // 2, 3))
                eik_pts = np.concatenate([uni, near_pts]).astype(np.float32)
                losses["eikonal"] = loss_eikonal(model.sdf, eik_pts, config.weights.eikonal)

                if it % config.curvature_every == 0:
                    surf_idx = _near_surface_indices(out["sdf"].data[:, 0], config.curvature_points, rng)
                    if len(surf_idx):
                        probes = build_curvature_probes(
                            model.sdf, out["x_prime"].data[surf_idx], config.curvature_eps, rng
                        )
                        losses["curvature"] = loss_curvature(probes, config.weights.curvature)
                losses["offset"] = loss_offset(out["deform"].delta, config.weights.offset)

                if it % config.consistency_every == 0:
                    cons = min(config.consistency_points, len(out["x_prime"].data))
                    cidx = rng.integers(len(out["x_prime"].data), size=cons)
                    w_pose = T.take(T.reshape(out["deform"].weights, (-1, model.skeleton.num_joints)), cidx)
                    w_can = model.deform.canonical_weights(out["x_prime"].data[cidx], frame)
                    losses["consistency"] = T.mul(
                        T.constant(config.weights.consistency), weight_consistency_loss(w_pose, w_can)
                    )

            total = None
            for v in losses.values():
                total = v if total is None else T.add(total, v)
            if total is None:
                continue
            model.store.zero_grad()
            total.backward()
            adam_step(model.store, optim)
        except NonFiniteError as exc:
            log_f.write(json.dumps({"iter": it, "event": "diverged", "error": str(exc)}) + "\n")
            log_f.close()
            return AvatarModel.load(ckpt_dir, scene.skeleton), {"diverged_at": it, "checkpoint": ckpt_dir}

        if it % config.log_every == 0 or it == config.iterations - 1:
            mse = float(np.mean((out["rgb"].data - gt[hit]) ** 2)) if hit.any() else float("nan")
            psnr = float(-10.0 * np.log10(max(mse, 1e-12)))
            entry = {"iter": it, "lr": optim.learning_rate * optim.decay ** it, "psnr_train": psnr}
            entry.update({k: float(v.data) for k, v in losses.items()})
            log_f.write(json.dumps(entry) + "\n")
            log_f.flush()
            if not quiet:
                print(f"[stage1 {it}] " + " ".join(f"{k}={float(v.data):.4f}" for k, v in losses.items()))
        if it > 0 and it % config.checkpoint_every == 0:
            model.save(ckpt_dir)

    model.save(ckpt_dir)
    log_f.write(json.dumps({"event": "done", "iters": config.iterations, "secs": time.time() - t_start}) + "\n")
    log_f.close()
    return model, {"checkpoint": ckpt_dir, "iterations": config.iterations}


def _near_surface_indices(sdf_values: np.ndarray, count: int, rng) -> np.ndarray:
    near = np.flatnonzero(np.abs(sdf_values) < 0.05)
    if len(near) == 0:
        near = np.argsort(np.abs(sdf_values))[: count * 2]
    if len(near) > count:
        near = near[rng.integers(len(near), size=count)]
    return near
