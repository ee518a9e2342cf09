import numpy as np
import pytest

from poserefine import diffmath as dm
from poserefine.body import (BodyModel, BodyShape, Mesh, PoseSequence, Skeleton, axis_angle_to_matrix, body_from_dict,
                             bone_vectors, canonical_joints, default_skeleton, forward_kinematics, load_pose_sequence,
                             matrix_to_axis_angle, pose_mesh, Pose, rasterize_silhouette, rotation_matrix_np,
                             save_body_config, load_body_config, save_pose_sequence)
from poserefine.renderer import CameraModel

BODY = BodyModel.default()


def random_pose(rng, B=16, scale=0.6):
    return rng.normal(scale=scale, size=(B, 3)), rng.normal(scale=0.2, size=3)


def test_default_rig():
    sk, shape = default_skeleton()
    assert sk.bone_count == 16
    assert BODY.vertex_count > 1000
    np.testing.assert_allclose(BODY.skin_weights.sum(1), 1.0)
    assert BODY.skin_weights.min() >= 0


def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton(["a"], [-1], np.zeros((1, 3)), np.zeros((1, 3)), [-1])
    with pytest.raises(ValueError):
        Skeleton(["a", "b", "c"], [-1, 2, 1], np.zeros((3, 3)), np.zeros((3, 3)), [-1, -1, -1])
    with pytest.raises(ValueError):
        BodyShape([0.1, -0.1], [1.0, 1.0])
    with pytest.raises(ValueError):
        BodyShape([0.1, 0.1], [1.0, 2.5])


def test_rodrigues_and_inverse():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = rng.normal(size=3)
        r *= rng.uniform(0, 3.0) / np.linalg.norm(r)
        R = rotation_matrix_np(r)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(matrix_to_axis_angle(R), r, atol=1e-8)
    np.testing.assert_allclose(rotation_matrix_np(np.zeros(3)), np.eye(3))
    np.testing.assert_allclose(rotation_matrix_np([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rodrigues_gradient_including_near_zero():
    w = np.random.default_rng(1).normal(size=(3, 3, 3))
    for r in (np.array([[0.3, -0.7, 1.1], [1e-5, 2e-5, -1e-5], [0.0, 0.0, 0.0]])):
        tape = dm.Tape()
        leaf = tape.leaf(r, "r")
        g = tape.backward(dm.sum(axis_angle_to_matrix(leaf) * w[0]))["r"]
        num = dm.numerical_grad(lambda z: float((axis_angle_to_matrix(z).data * w[0]).sum()), r, 1e-7)
        np.testing.assert_allclose(g, num, atol=1e-7)


def test_identity_pose_joints_are_cumulative_offsets():
    sk, shape = BODY.skeleton, BODY.shape
    tf = forward_kinematics(sk, np.zeros((16, 3)), np.zeros(3), shape)
    expected = np.zeros((16, 3))
    for b in sk.order:
        p = sk.parent[b]
        expected[b] = sk.rest_offsets[b] if p < 0 else expected[p] + sk.rest_offsets[b]
    np.testing.assert_allclose(tf.T.data, expected, atol=1e-15)
    np.testing.assert_allclose(tf.R.data, np.broadcast_to(np.eye(3), (16, 3, 3)))


def chain_oracle(sk, shape, rot, root):
    """Joint positions from explicit products along each root-to-bone chain."""
    out = np.zeros((sk.bone_count, 3))
    for b in range(sk.bone_count):
        chain = []
        c = b
        while c >= 0:
            chain.append(c)
            c = sk.parent[c]
        chain = chain[::-1]
        pos = root + sk.rest_offsets[chain[0]]
        R = np.eye(3)
        for prev, c in zip(chain[:-1], chain[1:]):
            R = R @ rotation_matrix_np(rot[prev])
            pos = pos + R @ (sk.rest_offsets[c] * shape.length_scales[c])
        out[b] = pos
    return out


def test_fk_matches_chain_oracle():
    rng = np.random.default_rng(2)
    shape = BodyShape(BODY.shape.radii, rng.uniform(0.7, 1.4, 16))
    for _ in range(20):
        rot, root = random_pose(rng)
        tf = forward_kinematics(BODY.skeleton, rot, root, shape)
        np.testing.assert_allclose(tf.T.data, chain_oracle(BODY.skeleton, shape, rot, root), atol=1e-10)


def test_fk_orthonormal_for_1000_poses():
    rng = np.random.default_rng(3)
    rot = rng.normal(scale=1.0, size=(1000, 16, 3))
    R = forward_kinematics(BODY.skeleton, rot, np.zeros((1000, 3)), BODY.shape).R.data
    np.testing.assert_allclose(np.einsum("...ji,...jk->...ik", R, R), np.broadcast_to(np.eye(3), R.shape), atol=1e-9)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_root_rotation_rotates_joints():
    rot = np.zeros((16, 3))
    rot[0] = [0, 0, np.pi / 2]
    Rz = rotation_matrix_np(rot[0])
    base = forward_kinematics(BODY.skeleton, np.zeros((16, 3)), np.zeros(3), BODY.shape).T.data
    turned = forward_kinematics(BODY.skeleton, rot, np.zeros(3), BODY.shape).T.data
    np.testing.assert_allclose(turned - turned[0], (base - base[0]) @ Rz.T, atol=1e-12)


def test_wrong_rotation_count_rejected():
    with pytest.raises(ValueError):
        forward_kinematics(BODY.skeleton, np.zeros((15, 3)), np.zeros(3), BODY.shape)


def test_identity_pose_mesh_is_template():
    m = pose_mesh(BODY, Pose(np.zeros((16, 3)), np.zeros(3)))
    np.testing.assert_allclose(m.vertices, BODY.template, atol=1e-12)


def two_bone_body():
    data = {"bones": [
        {"name": "a", "parent": -1, "offset": [0, 0, 0], "radius": 0.05},
        {"name": "b", "parent": 0, "offset": [0, 0.5, 0], "tip": [0, 0.4, 0], "radius": 0.05},
    ]}
    return BodyModel(*body_from_dict(data))


def test_pure_translation_shifts_vertices():
    body = two_bone_body()
    t = np.array([0.3, -0.2, 1.0])
    m = pose_mesh(body, Pose(np.zeros((2, 3)), t))
    np.testing.assert_allclose(m.vertices, body.template + t, atol=1e-12)


def test_rotated_child_vertex_hand_computed():
    body = two_bone_body()
    rot = np.zeros((2, 3))
    rot[1] = [0, 0, np.pi / 2]
    verts = pose_mesh(body, Pose(rot, np.zeros(3))).vertices
    i = int(np.nonzero((body.skin_weights[:, 0] == 1) & (body.owner == 1))[0][-1])
    joint = np.array([0, 0.5, 0])
    Rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    np.testing.assert_allclose(verts[i], joint + Rz @ (body.template[i] - joint), atol=1e-12)


def test_mesh_commutes_with_global_motion():
    rng = np.random.default_rng(4)
    rot, root = random_pose(rng)
    Q = rotation_matrix_np(rng.normal(size=3))
    t = rng.normal(size=3)
    verts = BODY.skin(BODY.transforms(rot, root)).data
    moved_rot = rot.copy()
    moved_rot[0] = matrix_to_axis_angle(Q @ rotation_matrix_np(rot[0]))
    pelvis = BODY.skeleton.rest_offsets[0]
    moved_root = Q @ (root + pelvis) + t - pelvis
    moved = BODY.skin(BODY.transforms(moved_rot, moved_root)).data
    np.testing.assert_allclose(moved, verts @ Q.T + t, atol=1e-9)


def test_bone_vectors_lengths():
    rng = np.random.default_rng(5)
    vec, lengths, ids = bone_vectors(BODY.skeleton, np.zeros((16, 3)), np.zeros(3), BODY.shape)
    np.testing.assert_allclose(lengths.data, np.linalg.norm(BODY.skeleton.rest_offsets[ids], axis=1))
    rot, root = random_pose(rng)
    v2, l2, _ = bone_vectors(BODY.skeleton, rot, root, BODY.shape)
    np.testing.assert_allclose(l2.data, lengths.data, atol=1e-12)
    J = forward_kinematics(BODY.skeleton, rot, root, BODY.shape).T.data
    np.testing.assert_allclose(v2.data, J[ids] - J[BODY.skeleton.parent[ids]], atol=1e-12)


def test_pose_sequence_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    seq = PoseSequence(rng.normal(size=(4, 16, 3)), rng.normal(size=(4, 3)))
    save_pose_sequence(tmp_path / "p.txt", seq)
    back = load_pose_sequence(tmp_path / "p.txt")
    assert back.rotations.tobytes() == seq.rotations.tobytes()
    assert back.root_translation.tobytes() == seq.root_translation.tobytes()


def test_body_config_roundtrip(tmp_path):
    save_body_config(tmp_path / "b.json", BODY.skeleton, BODY.shape)
    sk, shape = load_body_config(tmp_path / "b.json")
    assert BodyModel(sk, shape).hash() == BODY.hash()
    np.testing.assert_array_equal(canonical_joints(sk, shape), canonical_joints(BODY.skeleton, BODY.shape))


def camera(w=64, h=64, f=80.0):
    return CameraModel(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h)


def test_single_triangle_silhouette():
    tri = np.array([[-0.5, -0.5, 2.0], [0.5, -0.5, 2.0], [0.0, 0.5, 2.0]])
    sil, meta = rasterize_silhouette(Mesh(tri, np.array([[0, 1, 2]]), None, None, None), camera())
    assert sil[32, 32] and not sil[0, 0] and not sil[63, 63]
    assert not meta["behind_camera"]


def test_empty_and_behind_camera():
    sil, _ = rasterize_silhouette(Mesh(np.zeros((0, 3)), np.zeros((0, 3), int), None, None, None), camera())
    assert not sil.any()
    tri = np.array([[-1.0, -1.0, -2.0], [1.0, -1.0, -2.0], [0.0, 1.0, -2.0]])
    sil, meta = rasterize_silhouette(Mesh(tri, np.array([[0, 1, 2]]), None, None, None), camera())
    assert not sil.any() and meta["behind_camera"]


def test_capsule_silhouette_area_matches_projection():
    data = {"bones": [
        {"name": "a", "parent": -1, "offset": [0, 0, 0], "tip": [0, 0.01, 0], "radius": 0.01},
        {"name": "b", "parent": 0, "offset": [-0.3, 0.0, 0], "tip": [0.6, 0.0, 0], "radius": 0.1},
    ]}
    body = BodyModel(*body_from_dict(data))
    cam = CameraModel.look_at([0, 0, 3.0], [0, 0, 0], [0, 1, 0], 150, 150, 128, 128)
    sil, _ = rasterize_silhouette(pose_mesh(body, Pose(np.zeros((2, 3)), np.zeros(3))), cam)
    # capsule seen side-on at depth 3: rectangle plus two half-disks, scaled by (f / z)^2
    L, r = 0.6, 0.1
    analytic = (2 * r * L + np.pi * r * r) * (150 / 3.0) ** 2
    assert abs(sil.sum() - analytic) / analytic < 0.1


def test_silhouette_monotone_in_radius():
    cam = CameraModel.look_at([0, 1.0, 4.0], [0, 0.9, 0], [0, 1, 0], 120, 120, 64, 64)
    rng = np.random.default_rng(7)
    rot, root = random_pose(rng, scale=0.3)
    sk, shape = default_skeleton()
    thin = BodyModel(sk, shape)
    fat = BodyModel(sk, BodyShape(shape.radii * 1.3, shape.length_scales))
    s1, _ = rasterize_silhouette(pose_mesh(thin, Pose(rot, root)), cam)
    s2, _ = rasterize_silhouette(pose_mesh(fat, Pose(rot, root)), cam)
    assert np.all(s2[s1])
