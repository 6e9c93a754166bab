"""Skeleton kinematics, blend weights, and the pose->canonical map."""

import numpy as np
import pytest

from avatarforge.bodymodel import (
    BodyPose,
    DeformationModel,
    Skeleton,
    clamp_offset,
    combine_blend_weights,
    forward_kinematics,
    load_poses,
    load_skeleton,
    save_poses,
    save_skeleton,
    skin_points,
    weight_consistency_loss,
)
from avatarforge.diffcore import ParamStore, Tensor
from avatarforge.diffcore import tensor as T


def three_joint_chain():
    # 0 -- 1 -- 2 along +x, unit bones; template is a thin band of triangles
    rest = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    verts = []
    weights = []
    for i, x in enumerate(np.linspace(0.0, 2.0, 9)):
        for y in (-0.05, 0.05):
            verts.append([x, y, 0.0])
            w = np.zeros(3)
            j = min(int(x), 1)  # bone segment ownership
            t = x - j
            w[j] = 1 - t * 0.0
            weights.append(w / w.sum())
    faces = []
    for i in range(8):
        a = 2 * i
        faces.append([a, a + 1, a + 2])
        faces.append([a + 1, a + 3, a + 2])
    return Skeleton(
        names=["root", "elbow", "tip"],
        parents=[-1, 0, 1],
        rest_positions=rest,
        template_vertices=np.array(verts),
        template_faces=np.array(faces),
        template_weights=np.array(weights),
    )


def square_template_skeleton(K=2):
    """Two-joint skeleton with a unit-square template (4 verts, 2 faces)."""
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    weights = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    return Skeleton(
        names=["a", "b"],
        parents=[-1, 0],
        rest_positions=np.array([[0.0, 0, 0], [1.0, 0, 0]]),
        template_vertices=verts,
        template_faces=faces,
        template_weights=weights,
    )


# -- forward kinematics --


def test_fk_identity_pose_is_identity():
    sk = three_joint_chain()
    tf = forward_kinematics(sk, BodyPose.identity(3))
    assert np.allclose(tf.skin_rot, np.eye(3)[None], atol=1e-12)
    assert np.allclose(tf.skin_trans, 0.0, atol=1e-12)
    assert np.allclose(tf.joint_positions, sk.rest_positions, atol=1e-12)


def test_fk_root_rotation_rotates_all_joints():
    sk = three_joint_chain()
    pose = BodyPose(0, [[0, 0, np.pi / 2], [0, 0, 0], [0, 0, 0]], [0, 0, 0])
    tf = forward_kinematics(sk, pose)
    Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    expect = (Rz @ sk.rest_positions.T).T
    assert np.allclose(tf.joint_positions, expect, atol=1e-12)


def test_fk_elbow_bend_hand_composed():
    sk = three_joint_chain()
    pose = BodyPose(0, [[0, 0, 0], [0, 0, np.pi / 2], [0, 0, 0]], [0, 0, 0])
    tf = forward_kinematics(sk, pose)
    assert np.allclose(tf.joint_positions[2], [1.0, 1.0, 0.0], atol=1e-12)


def test_fk_inverse_roundtrip():
    sk = three_joint_chain()
    rng = np.random.default_rng(0)
    pose = BodyPose(0, rng.uniform(-1, 1, (3, 3)), rng.uniform(-0.5, 0.5, 3))
    tf = forward_kinematics(sk, pose)
    x = rng.uniform(-2, 2, (10, 3))
    fwd = np.einsum("kij,nj->nki", tf.skin_rot, x) + tf.skin_trans[None]
    back = np.einsum("kij,nkj->nki", tf.unskin_rot, fwd) + tf.unskin_trans[None]
    assert np.abs(back - x[:, None, :]).max() < 1e-6


def test_fk_rejects_nonfinite_pose():
    with pytest.raises(ValueError):
        BodyPose(0, [[np.nan, 0, 0]], [0, 0, 0])


# -- coarse weights --


def test_coarse_weights_on_vertex_and_edge_midpoint():
    sk = square_template_skeleton()
    store = ParamStore()
    model = DeformationModel(store, sk, num_frames=1, hidden=16, layers=2, pe_octaves=2, latent_dim=4)

    w, dist, far = model.coarse_weights(sk.template_vertices[[1]], BodyPose.identity(2))
    assert np.allclose(w, [[0.0, 1.0]], atol=1e-6)
    assert dist[0] < 1e-9 and not far[0]

    mid = 0.5 * (sk.template_vertices[0] + sk.template_vertices[1])
    w, _, _ = model.coarse_weights(mid[None], BodyPose.identity(2))
    assert np.allclose(w, [[0.5, 0.5]], atol=1e-6)


def test_coarse_weights_simplex_invariant_and_far_flag():
    sk = square_template_skeleton()
    store = ParamStore()
    model = DeformationModel(store, sk, num_frames=1, hidden=16, layers=2, pe_octaves=2, latent_dim=4)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2, 2, (100, 3))
    w, dist, far = model.coarse_weights(pts, BodyPose.identity(2))
    assert (w >= 0).all()
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-6
    assert far[np.linalg.norm(pts - np.array([0.5, 0.5, 0.0]), axis=1) > 2.0].all()


# -- blend weight field --


def test_blend_weights_zero_deviation_identity():
    sk = square_template_skeleton()
    store = ParamStore()
    model = DeformationModel(store, sk, num_frames=1, hidden=16, layers=2, pe_octaves=2, latent_dim=4)
    pts = np.array([[0.2, 0.3, 0.0], [0.8, 0.9, 0.0]])
    w_hat, _, _ = model.coarse_weights(pts, BodyPose.identity(2))
    w = model.blend_weights(pts, w_hat, frame_index=0)
    # final layer zero-init => deviation is exactly zero
    assert np.allclose(w.data, w_hat, atol=1e-7)


def test_blend_weight_combination_formula():
    w_hat = Tensor(np.array([[0.5, 0.5]], np.float32))
    dw = Tensor(np.array([[0.1, -0.1]], np.float32))
    w = combine_blend_weights(w_hat, dw)
    assert np.allclose(w.data, [[0.6, 0.4]], atol=1e-6)


def test_blend_weight_all_zero_fallback():
    w_hat = Tensor(np.array([[0.3, 0.7]], np.float32))
    dw = Tensor(np.array([[-5.0, -5.0]], np.float32))
    w = combine_blend_weights(w_hat, dw)
    assert np.allclose(w.data, [[0.3, 0.7]], atol=1e-6)


def test_blend_weight_gradients_match_fd():
    sk = square_template_skeleton()
    store = ParamStore()
    model = DeformationModel(store, sk, num_frames=1, hidden=8, layers=2, pe_octaves=2, latent_dim=4)
    # run the graph in float64 so the FD oracle is not rounding-limited
    for name in store.names():
        store[name].data = store[name].data.astype(np.float64)
    # give the zero-initialized output layer some structure
    rng = np.random.default_rng(2)
    wlast = store["deform.dw.w1"]
    wlast.data = 0.1 * rng.standard_normal(wlast.data.shape)

    pts = rng.uniform(0, 1, (5, 3))
    pts[:, 2] = 0.1
    w_hat, _, _ = model.coarse_weights(pts, BodyPose.identity(2))
    proj = rng.standard_normal((5, 2))

    def loss_value():
        w = model.blend_weights(pts, w_hat, 0)
        return w, float((w.data * proj).sum())

    w, _ = loss_value()
    store.zero_grad()
    T.reduce_sum(T.mul(w, Tensor(proj))).backward()

    eps = 1e-6
    for name in ("deform.dw.w0", "deform.dw.w1", "deform.dw.b1"):
        p = store[name]
        flat = p.data.reshape(-1)
        analytic = p.grad.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            hi = loss_value()[1]
            flat[j] = orig - eps
            lo = loss_value()[1]
            flat[j] = orig
            fd = (hi - lo) / (2 * eps)
            assert abs(analytic[j] - fd) / (abs(fd) + 1e-8) < 1e-4


# -- canonical map --


def test_canonical_map_identity():
    sk = square_template_skeleton()
    store = ParamStore()
    model = DeformationModel(store, sk, num_frames=1, hidden=16, layers=2, pe_octaves=2, latent_dim=4)
    pts = np.array([[0.2, 0.4, 0.0], [0.9, 0.1, 0.0]])
    sample = model.canonical_map(pts, BodyPose.identity(2))
    assert np.abs(sample.x_prime.data - pts).max() < 1e-6
    assert np.abs(sample.delta.data).max() == 0.0


def test_canonical_map_inverts_root_translation():
    sk = square_template_skeleton()
    store = ParamStore()
    model = DeformationModel(store, sk, num_frames=1, hidden=16, layers=2, pe_octaves=2, latent_dim=4)
    t = np.array([0.3, -0.2, 0.1])
    pose = BodyPose(0, np.zeros((2, 3)), t)
    pts = np.array([[0.5, 0.5, 0.0]]) + t
    sample = model.canonical_map(pts, pose, with_offset=False)
    # pose -> canonical subtracts the root translation
    assert np.allclose(sample.x_prime.data, pts - t, atol=1e-6)


def test_lbs_convex_combination():
    pts = np.array([[0.25, 0.5, 0.0]])
    rot = np.stack([np.eye(3), np.eye(3)])
    trans = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    w = np.array([[0.5, 0.5]])
    out = skin_points(pts, w, rot, trans)
    assert np.allclose(out, pts + np.array([0.5, 0, 0]), atol=1e-12)


def test_offset_clamp_radius():
    raw = Tensor(np.array([[10.0, 0.0, 0.0], [3.0, 4.0, 0.0], [1e-4, 0, 0]], np.float32))
    d = clamp_offset(raw, 0.05)
    norms = np.linalg.norm(d.data, axis=1)
    assert (norms <= 0.05 + 1e-7).all()
    assert np.allclose(d.data[2], raw.data[2], rtol=1e-3)  # small offsets pass through


def test_x_prime_identity_exact():
    sk = square_template_skeleton()
    store = ParamStore()
    model = DeformationModel(store, sk, num_frames=1, hidden=16, layers=2, pe_octaves=2, latent_dim=4)
    # force a non-zero offset net
    rng = np.random.default_rng(0)
    store["deform.tn.w1"].data = 0.05 * rng.standard_normal(store["deform.tn.w1"].data.shape).astype(np.float32)
    pose = BodyPose(0, np.zeros((2, 3)), np.zeros(3))
    sample = model.canonical_map(rng.uniform(0, 1, (7, 3)), pose)
    assert np.array_equal(sample.x_prime.data, (T.add(sample.x_hat, sample.delta)).data)


# -- weight consistency loss --


def test_weight_consistency_zero_and_direct():
    w = Tensor(np.array([[0.5, 0.5]], np.float32))
    assert weight_consistency_loss(w, w).item() == 0.0
    a = Tensor(np.array([[1.0, 0.0]], np.float32))
    b = Tensor(np.array([[0.0, 1.0]], np.float32))
    assert np.isclose(weight_consistency_loss(a, b).item(), 2.0, atol=1e-7)


def test_weight_consistency_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    a = rng.random((10, 5)).astype(np.float32)
    b = rng.random((10, 5)).astype(np.float32)
    got = weight_consistency_loss(Tensor(a), Tensor(b)).item()
    expect = float(np.mean(np.abs(a - b).sum(axis=1)))
    assert np.isclose(got, expect, rtol=1e-6)


# -- file formats --


def test_skeleton_pose_json_roundtrip(tmp_path):
    sk = three_joint_chain()
    path = str(tmp_path / "skeleton.json")
    save_skeleton(sk, path)
    loaded = load_skeleton(path)
    assert loaded.names == sk.names
    assert np.allclose(loaded.rest_positions, sk.rest_positions)
    assert np.allclose(loaded.template_weights, sk.template_weights)
    assert np.array_equal(loaded.template_faces, sk.template_faces)

    poses = [
        BodyPose(0, np.zeros((3, 3)), np.zeros(3)),
        BodyPose(1, 0.1 * np.ones((3, 3)), np.array([0.0, 0.1, 0.2])),
    ]
    ppath = str(tmp_path / "poses.json")
    save_poses(poses, ppath)
    loaded_poses = load_poses(ppath)
    assert len(loaded_poses) == 2
    assert np.allclose(loaded_poses[1].rotations, 0.1)
    assert loaded_poses[1].frame_index == 1


def test_skeleton_validation():
    with pytest.raises(ValueError, match="root"):
        Skeleton(["a"], [0], [[0, 0, 0]], np.zeros((3, 3)), [[0, 1, 2]], np.ones((3, 1)))
    with pytest.raises(ValueError, match="sum to 1"):
        square_bad = square_template_skeleton()
        Skeleton(
            square_bad.names,
            square_bad.parents,
            square_bad.rest_positions,
            square_bad.template_vertices,
            square_bad.template_faces,
            np.full((4, 2), 0.7),
        )
