import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.schemas.pose import PoseFrame
from app.utils.errors import DegenerateGeometryError, InvalidInputError
from app.utils.skeleton import (
    BONES,
    NUM_BONES,
    PARENTS,
    REST_JOINTS,
    JointId,
    Pose3D,
    SimilarityTransform,
    bone_lengths,
    check_joint_limits,
    denormalize,
    flatten,
    forward_kinematics,
    global_bone_rotations,
    joint_limit_violations,
    load_pose_records,
    load_poses,
    normalize_pose,
    pck_curve,
    pose_error,
    save_poses,
    similarity_align,
    unflatten,
)


def test_topology_parents_precede_children():
    assert PARENTS[0] == 0
    for parent, child in BONES:
        assert parent < child
    assert len(BONES) == NUM_BONES


def test_pose_rejects_wrong_shape_and_nan():
    with pytest.raises(InvalidInputError):
        Pose3D(np.zeros((14, 3)))
    joints = REST_JOINTS.copy()
    joints[3, 1] = np.nan
    with pytest.raises(InvalidInputError):
        Pose3D(joints)


def test_flatten_unflatten_preserves_joint_order():
    pose = Pose3D(REST_JOINTS)
    vector = flatten(pose)
    assert vector.values.shape == (45,)
    np.testing.assert_array_equal(vector.values[3 * JointId.l_wrist:3 * JointId.l_wrist + 3], REST_JOINTS[5])
    assert unflatten(vector) == pose
    with pytest.raises(InvalidInputError):
        unflatten(np.zeros(44))


def test_normalize_pose_sums_bone_lengths_to_one(rng, pose_factory):
    for _ in range(20):
        pose = pose_factory(rng)
        scaled = pose.with_joints(pose.pelvis + 3.7 * (pose.joints - pose.pelvis))
        normalized = normalize_pose(scaled)
        assert bone_lengths(normalized).sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(normalized.pelvis, scaled.pelvis)


def test_normalize_rejects_degenerate_bone():
    joints = REST_JOINTS.copy()
    joints[JointId.l_elbow] = joints[JointId.l_shoulder]
    with pytest.raises(DegenerateGeometryError):
        normalize_pose(Pose3D(joints))


def test_denormalize_inverts_normalize(rng, pose_factory):
    pose = pose_factory(rng)
    scale = float(bone_lengths(pose).sum())
    restored = denormalize(normalize_pose(pose), scale)
    np.testing.assert_allclose(restored.joints, pose.joints, atol=1e-12)
    with pytest.raises(InvalidInputError):
        denormalize(pose, 0.0)


def test_similarity_align_recovers_random_transforms(rng, pose_factory):
    for _ in range(1000):
        source = pose_factory(rng)
        rotation = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
        truth = SimilarityTransform(float(rng.uniform(0.2, 5.0)), rotation, rng.normal(0.0, 3.0, 3))
        target = Pose3D(truth.apply(source.joints))
        transform, aligned = similarity_align(source, target)
        assert transform.scale == pytest.approx(truth.scale, rel=1e-9)
        np.testing.assert_allclose(transform.rotation, truth.rotation, atol=1e-8)
        _, residual = pose_error(aligned, target)
        assert residual < 1e-8


def test_similarity_align_identity_and_reflection_guard(rng, pose_factory):
    pose = pose_factory(rng)
    transform, _ = similarity_align(pose, pose)
    assert transform.scale == pytest.approx(1.0)
    np.testing.assert_allclose(transform.rotation, np.eye(3), atol=1e-9)

    mirrored = Pose3D(pose.joints * np.array([-1.0, 1.0, 1.0]))
    transform, _ = similarity_align(pose, mirrored)
    assert np.linalg.det(transform.rotation) == pytest.approx(1.0)


def test_similarity_align_rejects_collinear_source():
    line = np.zeros((15, 3))
    line[:, 0] = np.arange(15)
    with pytest.raises(DegenerateGeometryError):
        similarity_align(Pose3D(line), Pose3D(REST_JOINTS))


def test_pose_error_requires_matching_frames():
    body = Pose3D(REST_JOINTS)
    camera = Pose3D(REST_JOINTS, PoseFrame.camera)
    with pytest.raises(InvalidInputError):
        pose_error(body, camera)
    per_joint, total = pose_error(body, body.with_joints(REST_JOINTS + [0.0, 0.0, 0.1]))
    np.testing.assert_allclose(per_joint, 0.1)
    assert total == pytest.approx(1.5)


def test_pck_curve_counts_errors_at_or_below_threshold():
    errors = [np.array([0.0, 0.1]), np.array([0.2, 0.4])]
    curve = pck_curve(errors, [0.0, 0.1, 0.3, 0.5])
    np.testing.assert_allclose(curve, [0.25, 0.5, 0.75, 1.0])
    with pytest.raises(InvalidInputError):
        pck_curve(errors, [0.2, 0.1])
    with pytest.raises(InvalidInputError):
        pck_curve([], [0.1])


def test_forward_kinematics_identity_returns_rest():
    joints, rotations = forward_kinematics(REST_JOINTS, np.tile(np.eye(3), (NUM_BONES, 1, 1)))
    np.testing.assert_allclose(joints, REST_JOINTS)
    np.testing.assert_allclose(rotations, np.tile(np.eye(3), (NUM_BONES, 1, 1)))


def test_global_rotations_reproduce_bone_directions(rng, pose_factory):
    pose = pose_factory(rng)
    rotations = global_bone_rotations(pose.joints)
    rest_vectors = REST_JOINTS[[c for _, c in BONES]] - REST_JOINTS[[p for p, _ in BONES]]
    posed_vectors = pose.joints[[c for _, c in BONES]] - pose.joints[[p for p, _ in BONES]]
    for b in range(NUM_BONES):
        np.testing.assert_allclose(rotations[b] @ rest_vectors[b], posed_vectors[b], atol=1e-9)


def test_joint_limits_accept_rest_and_plausible_poses(rng, pose_factory):
    assert check_joint_limits(Pose3D(REST_JOINTS))
    for _ in range(50):
        assert joint_limit_violations(pose_factory(rng)) == []


def test_joint_limits_flag_hyperextended_knee():
    joints = REST_JOINTS.copy()
    knee = joints[JointId.l_knee]
    shin = np.linalg.norm(joints[JointId.l_ankle] - knee)
    angle = np.radians(30.0)
    joints[JointId.l_ankle] = knee + shin * np.array([0.0, -np.cos(angle), np.sin(angle)])
    assert joint_limit_violations(Pose3D(joints)) == ["l_shin"]
    assert not check_joint_limits(Pose3D(joints))


def test_joint_limits_report_degenerate_pose():
    joints = REST_JOINTS.copy()
    joints[JointId.head] = joints[JointId.neck]
    assert joint_limit_violations(Pose3D(joints)) == ["degenerate"]


def test_pose_files_json_and_jsonl(tmp_path, rng, pose_factory):
    poses = [pose_factory(rng) for _ in range(3)]
    save_poses(tmp_path / "poses.json", poses, ["a", "b", "c"])
    records = load_pose_records(tmp_path / "poses.json")
    assert [r.id for r in records] == ["a", "b", "c"]
    np.testing.assert_allclose(load_poses(tmp_path / "poses.json")[1].joints, poses[1].joints)

    lines = "\n".join(p.to_record().model_dump_json() for p in poses)
    (tmp_path / "poses.jsonl").write_text(lines + "\n", encoding="utf-8")
    assert len(load_poses(tmp_path / "poses.jsonl")) == 3


def test_malformed_pose_file_raises(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"joints": [[0, 0, 0]]}', encoding="utf-8")
    with pytest.raises(InvalidInputError):
        load_poses(path)
