"""Articulated skeleton, skinning weights, and pose->canonical deformation.

The rest pose is the canonical space. forward_kinematics produces both the
skinning transforms (canonical -> pose) and their inverses; the canonical map
consumes the inverse set, so a pose-space sample x lands at
x_hat = sum_j w_j (R_j x + t_j), then a small learned offset is added on top.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import geom
from .diffcore import DenseNet, ParamStore, Tensor
from .diffcore import tensor as T

TEMPLATE_DIST_THRESHOLD = 0.20  # meters; beyond this coarse weights are flagged


@dataclass
class Skeleton:
    names: list
    parents: np.ndarray  # (K,) int, parents[0] == -1
    rest_positions: np.ndarray  # (K,3) meters
    template_vertices: np.ndarray  # (V,3)
    template_faces: np.ndarray  # (F,3) int
    template_weights: np.ndarray  # (V,K), rows on the simplex

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64)
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.template_faces = np.asarray(self.template_faces, dtype=np.int64)
        self.template_weights = np.asarray(self.template_weights, dtype=np.float64)
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j in range(1, self.num_joints):
            if not 0 <= self.parents[j] < j:
                raise ValueError("parent indices must form a tree ordered root-first")
        w = self.template_weights
        if (w < -1e-9).any() or not np.allclose(w.sum(axis=1), 1.0, atol=1e-5):
            raise ValueError("template weights must be non-negative and sum to 1")

    @property
    def num_joints(self) -> int:
        return len(self.parents)


@dataclass
class BodyPose:
    frame_index: int
    rotations: np.ndarray  # (K,3) axis-angle, radians
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if not np.isfinite(self.rotations).all() or not np.isfinite(self.root_translation).all():
            raise ValueError("non-finite pose")

    @staticmethod
    def identity(num_joints: int, frame_index: int = 0) -> "BodyPose":
        return BodyPose(frame_index, np.zeros((num_joints, 3)), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotations.reshape(-1), self.root_translation]).astype(np.float32)


@dataclass
class JointTransforms:
    """Per-joint rigid transforms between canonical (rest) and pose space."""

    skin_rot: np.ndarray  # (K,3,3) canonical -> pose
    skin_trans: np.ndarray  # (K,3)
    unskin_rot: np.ndarray  # (K,3,3) pose -> canonical
    unskin_trans: np.ndarray  # (K,3)
    joint_positions: np.ndarray  # (K,3) posed joint positions

    def __post_init__(self):
        det = np.linalg.det(self.skin_rot)
        if not np.allclose(det, 1.0, atol=1e-5):
            raise ValueError("joint rotations must be proper (det +1)")


def forward_kinematics(skeleton: Skeleton, pose: BodyPose) -> JointTransforms:
    """Compose parent-to-child transforms from axis-angle joint rotations."""
    rots = geom.rodrigues(pose.rotations)
    if not np.isfinite(rots).all():
        raise ValueError("non-finite joint rotation")
    K = skeleton.num_joints
    rest = skeleton.rest_positions
    A_R = np.zeros((K, 3, 3))
    A_t = np.zeros((K, 3))
    A_R[0] = rots[0]
    A_t[0] = rest[0] + pose.root_translation
    for j in range(1, K):
        p = skeleton.parents[j]
        A_R[j] = A_R[p] @ rots[j]
        A_t[j] = A_R[p] @ (rest[j] - rest[p]) + A_t[p]
    skin_R = A_R
    skin_t = A_t - np.einsum("kij,kj->ki", A_R, rest)
    unskin_R, unskin_t = geom.invert(skin_R, skin_t)
    return JointTransforms(skin_R, skin_t, unskin_R, unskin_t, A_t)


def skin_points(points: np.ndarray, weights: np.ndarray, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Plain (non-differentiable) LBS: sum_j w_j (R_j p + t_j)."""
    per_joint = np.einsum("kij,nj->nki", rot, points) + trans[None, :, :]
    return np.einsum("nk,nki->ni", weights, per_joint)


@dataclass
class DeformationSample:
    x: np.ndarray  # pose-space input points (N,3)
    x_hat: Tensor  # rigid image (N,3)
    delta: Tensor  # non-rigid offset (N,3), norm-clamped
    x_prime: Tensor  # x_hat + delta, exactly
    weights: Tensor  # final blend weights (N,K)
    coarse: np.ndarray  # template-derived weights (N,K)
    template_dist: np.ndarray  # (N,) distance to the posed template surface
    far_flags: np.ndarray  # (N,) bool, beyond TEMPLATE_DIST_THRESHOLD


class DeformationModel:
    """Blend-weight deviation field, non-rigid offset field, frame latents."""

    def __init__(
        self,
        store: ParamStore,
        skeleton: Skeleton,
        num_frames: int,
        latent_dim: int = 64,
        pe_octaves: int = 6,
        hidden: int = 128,
        layers: int = 4,
        offset_radius: float = 0.05,
        rng=None,
        weight_grid_res: int = 0,
    ):
        rng = rng or np.random.default_rng(0)
        self.skeleton = skeleton
        self.num_frames = num_frames
        self.latent_dim = latent_dim
        self.pe_octaves = pe_octaves
        self.offset_radius = offset_radius
        self.weight_grid_res = weight_grid_res
        K = skeleton.num_joints
        enc_dim = 3 + 6 * pe_octaves
        pose_dim = 3 * K + 3
        self.latents = store.add(
            "deform.psi", Tensor(0.01 * rng.standard_normal((num_frames, latent_dim)).astype(np.float32))
        )
        self.dw_net = DenseNet(
            store, "deform.dw", [enc_dim + latent_dim] + [hidden] * (layers - 1) + [K],
            activation="leaky_relu", rng=rng, final_zero=True,
        )
        self.tn_net = DenseNet(
            store, "deform.tn", [enc_dim + pose_dim] + [hidden] * (layers - 1) + [3],
            activation="leaky_relu", rng=rng, final_zero=True,
        )
        self._posed_cache: dict = {}
        rest_posed = skeleton.template_vertices
        self._rest_entry = (rest_posed, cKDTree(rest_posed[skeleton.template_faces].mean(axis=1)))

    @classmethod
    def bind(cls, store, skeleton, num_frames, latent_dim=64, pe_octaves=6, hidden=128, layers=4,
             offset_radius=0.05, weight_grid_res=0):
        model = cls.__new__(cls)
        model.skeleton = skeleton
        model.num_frames = num_frames
        model.latent_dim = latent_dim
        model.pe_octaves = pe_octaves
        model.offset_radius = offset_radius
        model.weight_grid_res = weight_grid_res
        K = skeleton.num_joints
        enc_dim = 3 + 6 * pe_octaves
        pose_dim = 3 * K + 3
        model.latents = store["deform.psi"]
        model.dw_net = DenseNet.bind(
            store, "deform.dw", [enc_dim + latent_dim] + [hidden] * (layers - 1) + [K], activation="leaky_relu"
        )
        model.tn_net = DenseNet.bind(
            store, "deform.tn", [enc_dim + pose_dim] + [hidden] * (layers - 1) + [3], activation="leaky_relu"
        )
        model._posed_cache = {}
        rest_posed = skeleton.template_vertices
        model._rest_entry = (rest_posed, cKDTree(rest_posed[skeleton.template_faces].mean(axis=1)))
        return model

    # -- template lookups --

    def _posed_template(self, pose: BodyPose):
        key = pose.frame_index
        entry = self._posed_cache.get(key)
        if entry is None:
            tf = forward_kinematics(self.skeleton, pose)
            verts = skin_points(
                self.skeleton.template_vertices, self.skeleton.template_weights, tf.skin_rot, tf.skin_trans
            )
            tree = cKDTree(verts[self.skeleton.template_faces].mean(axis=1))
            entry = (verts, tree, tf)
            self._posed_cache[key] = entry
        return entry

    def quick_canonical(self, x: np.ndarray, pose: BodyPose) -> np.ndarray:
        """Cheap non-differentiable pose->canonical map for importance sampling:
        nearest-template-vertex weights, rigid LBS only, no learned offset."""
        verts, _, tf = self._posed_template(pose)
        key = ("vtree", pose.frame_index)
        vtree = self._posed_cache.get(key)
        if vtree is None:
            vtree = cKDTree(verts)
            self._posed_cache[key] = vtree
        _, nearest = vtree.query(np.asarray(x, dtype=np.float64), k=1)
        w = self.skeleton.template_weights[nearest]
        return skin_points(np.asarray(x, dtype=np.float64), w, tf.unskin_rot, tf.unskin_trans)

    def _weight_lattice(self, pose: BodyPose = None):
        """Cached lattice of nearest-vertex template weights for fast lookup."""
        key = ("grid", None if pose is None else pose.frame_index)
        entry = self._posed_cache.get(key)
        if entry is None:
            verts = self._rest_entry[0] if pose is None else self._posed_template(pose)[0]
            lo = verts.min(axis=0) - 0.3
            hi = verts.max(axis=0) + 0.3
            res = self.weight_grid_res
            axes = [np.linspace(lo[i], hi[i], res) for i in range(3)]
            gx, gy, gz = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([gx, gy, gz], -1).reshape(-1, 3)
            dist, nearest = cKDTree(verts).query(pts, k=1)
            K = self.skeleton.num_joints
            W = self.skeleton.template_weights[nearest].astype(np.float32).reshape(res, res, res, K)
            D = dist.astype(np.float32).reshape(res, res, res)
            entry = (lo, hi, W, D)
            self._posed_cache[key] = entry
        return entry

    def coarse_weights_fast(self, x: np.ndarray, pose: BodyPose = None):
        """Lattice-interpolated coarse weights (training fast path).

        Falls back to the exact nearest-surface lookup when no lattice
        resolution was configured.
        """
        if self.weight_grid_res <= 0:
            return self.coarse_weights(x, pose)
        lo, hi, W, D = self._weight_lattice(pose)
        res = self.weight_grid_res
        x = np.asarray(x, dtype=np.float64)
        u = (x - lo) / (hi - lo) * (res - 1)
        u = np.clip(u, 0, res - 1 - 1e-6)
        i0 = u.astype(np.int64)
        f = (u - i0).astype(np.float32)
        out_w = 0.0
        out_d = 0.0
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    coef = (wx * wy * wz)[:, None]
                    ii = (np.minimum(i0[:, 0] + dx, res - 1), np.minimum(i0[:, 1] + dy, res - 1),
                          np.minimum(i0[:, 2] + dz, res - 1))
                    out_w = out_w + coef * W[ii]
                    out_d = out_d + coef[:, 0] * D[ii]
        out_w = np.maximum(out_w, 0.0)
        out_w /= out_w.sum(axis=1, keepdims=True)
        return out_w.astype(np.float32), out_d, out_d > TEMPLATE_DIST_THRESHOLD

    def coarse_weights(self, x: np.ndarray, pose: BodyPose = None):
        """Nearest-surface-point weights on the posed (or rest) template.

        Returns (w_hat (N,K), dist (N,), far_flags (N,)). Points beyond the
        distance threshold still get the nearest weights but are flagged.
        """
        skel = self.skeleton
        if pose is None:
            verts, tree = self._rest_entry
        else:
            verts, tree, _ = self._posed_template(pose)
        face_idx, bary, dist = geom.nearest_on_mesh(np.asarray(x, dtype=np.float64), verts, skel.template_faces, tree)
        w_vert = skel.template_weights[skel.template_faces[face_idx]]  # (N,3,K)
        w_hat = np.einsum("nc,nck->nk", bary, w_vert)
        w_hat = np.maximum(w_hat, 0.0)
        w_hat /= w_hat.sum(axis=1, keepdims=True)
        return w_hat.astype(np.float32), dist, dist > TEMPLATE_DIST_THRESHOLD

    # -- fields --

    def _latent_rows(self, frame_index: int, n: int) -> Tensor:
        return T.take(self.latents, np.full(n, frame_index, dtype=np.int64))

    def blend_weights(self, x: np.ndarray, w_hat: np.ndarray, frame_index: int) -> Tensor:
        """w = simplex-normalized relu(w_hat + dw); all-zero rows fall back to w_hat."""
        n = len(x)
        enc = T.positional_encoding(Tensor(np.asarray(x, dtype=np.float32)), self.pe_octaves)
        dw = self.dw_net(T.concatenate([enc, self._latent_rows(frame_index, n)], axis=1))
        return combine_blend_weights(Tensor(np.asarray(w_hat, dtype=np.float32)), dw)

    def canonical_map(self, x: np.ndarray, pose: BodyPose, with_offset: bool = True) -> DeformationSample:
        """Map pose-space points into canonical space (rigid LBS + clamped offset)."""
        x = np.asarray(x, dtype=np.float64)
        n = len(x)
        verts, tree, tf = self._posed_template(pose)
        w_hat, dist, flags = self.coarse_weights_fast(x, pose)
        w = self.blend_weights(x, w_hat, pose.frame_index)

        per_joint = np.einsum("kij,nj->nki", tf.unskin_rot, x) + tf.unskin_trans[None, :, :]
        x_hat = T.weighted_blend(w, Tensor(per_joint.astype(np.float32)))

        if with_offset:
            enc = T.positional_encoding(x_hat, self.pe_octaves)
            pose_tile = Tensor(np.tile(pose.as_vector(), (n, 1)))
            raw = self.tn_net(T.concatenate([enc, pose_tile], axis=1))
            delta = clamp_offset(raw, self.offset_radius)
        else:
            delta = Tensor(np.zeros((n, 3), dtype=np.float32))
        x_prime = T.add(x_hat, delta)
        return DeformationSample(x, x_hat, delta, x_prime, w, w_hat, dist, flags)

    def canonical_weights(self, x_prime: np.ndarray, frame_index: int) -> Tensor:
        """Blend-weight field evaluated in canonical space (rest template)."""
        w_hat, _, _ = self.coarse_weights_fast(x_prime, pose=None)
        return self.blend_weights(x_prime, w_hat, frame_index)


def combine_blend_weights(w_hat: Tensor, dw: Tensor) -> Tensor:
    """normalize_simplex(relu(w_hat + dw)) with all-zero fallback to w_hat."""
    pre = T.relu(T.add(w_hat, dw))
    sums = T.reduce_sum(pre, axis=1, keepdims=True)
    zero_rows = sums.data <= 0.0
    if zero_rows.any():
        pre = T.where(np.broadcast_to(zero_rows, pre.shape), w_hat, pre)
        sums = T.reduce_sum(pre, axis=1, keepdims=True)
    return T.div(pre, sums)


def clamp_offset(raw: Tensor, radius: float) -> Tensor:
    """Smooth norm clamp: delta = raw * radius*tanh(|raw|/radius)/|raw|."""
    n = T.norm(raw, axis=-1, keepdims=True, eps=1e-12)
    scale = T.div(T.mul(T.constant(radius, raw), T.tanh(T.div(n, T.constant(radius, raw)))), n)
    return T.mul(raw, scale)


def weight_consistency_loss(w_pose: Tensor, w_canonical: Tensor) -> Tensor:
    """Mean over samples of the per-sample L1 distance between weight vectors."""
    return T.reduce_mean(T.reduce_sum(T.absolute(T.sub(w_pose, w_canonical)), axis=1))


# -- file formats --


def save_skeleton(skeleton: Skeleton, path: str) -> None:
    doc = {
        "joints": [
            {"name": skeleton.names[j], "parent": int(skeleton.parents[j]), "rest_position": skeleton.rest_positions[j].tolist()}
            for j in range(skeleton.num_joints)
        ],
        "template": {
            "vertices": skeleton.template_vertices.tolist(),
            "faces": skeleton.template_faces.tolist(),
            "weights": skeleton.template_weights.tolist(),
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_skeleton(path: str) -> Skeleton:
    with open(path) as f:
        doc = json.load(f)
    joints = doc["joints"]
    return Skeleton(
        names=[j["name"] for j in joints],
        parents=np.array([j["parent"] for j in joints]),
        rest_positions=np.array([j["rest_position"] for j in joints]),
        template_vertices=np.array(doc["template"]["vertices"]),
        template_faces=np.array(doc["template"]["faces"]),
        template_weights=np.array(doc["template"]["weights"]),
    )


def save_poses(poses: list, path: str) -> None:
    doc = [
        {"rotations": p.rotations.tolist(), "root_translation": p.root_translation.tolist()}
        for p in poses
    ]
    with open(path, "w") as f:
        json.dump(doc, f)


def load_poses(path: str) -> list:
    with open(path) as f:
        doc = json.load(f)
    return [BodyPose(i, np.array(p["rotations"]), np.array(p["root_translation"])) for i, p in enumerate(doc)]
