import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.schemas.mesh import Gender, Region, ShapeParams
from app.utils.body_mesh import (
    FEMALE_SCALE,
    BoneRotations,
    apply_shape,
    export_obj,
    load_template,
    pose_mesh,
    sample_shape,
    save_template,
    signed_volume,
    skin_mesh,
    solve_ik,
    split_parts,
)
from app.utils.errors import AssetError, DegenerateGeometryError, InvalidInputError
from app.utils.skeleton import REST_JOINTS, JointId, Pose3D, forward_kinematics


def test_template_channels_are_consistent(template):
    n = len(template.vertices)
    assert template.uvs.shape == (n, 2)
    assert template.weights.shape == (n, 14)
    np.testing.assert_allclose(template.weights.sum(axis=1), 1.0)
    assert np.all(template.weights >= 0)
    assert set(np.unique(template.labels)) == {int(r) for r in Region}
    assert np.all((template.uvs >= 0) & (template.uvs <= 1))
    assert template.triangles.max() < n


def test_template_winding_is_outward(templates):
    for template in templates.values():
        assert signed_volume(template) > 0


def test_atlas_layout_shared_by_genders(templates):
    male, female = templates[Gender.male], templates[Gender.female]
    assert male.atlas_size == female.atlas_size
    assert [t.block for t in male.tubes] == [t.block for t in female.tubes]
    np.testing.assert_allclose(male.uvs, female.uvs)
    np.testing.assert_allclose(female.rest_joints, REST_JOINTS * FEMALE_SCALE)


def test_rest_pose_ik_is_identity(template):
    rotations = solve_ik(template, template.rest_pose)
    np.testing.assert_allclose(rotations.quaternions, BoneRotations.identity().quaternions, atol=1e-12)
    mesh = skin_mesh(template, rotations)
    np.testing.assert_allclose(mesh.vertices, template.vertices, atol=1e-12)


def test_pose_mesh_reaches_target_joints(template, rng, pose_factory):
    for _ in range(10):
        pose = pose_factory(rng)
        mesh = pose_mesh(template, pose)
        np.testing.assert_allclose(mesh.joints, pose.joints, atol=1e-9)


def test_rigid_root_rotation_moves_mesh_rigidly(template):
    rotation = Rotation.from_rotvec([0.2, 0.9, -0.3]).as_matrix()
    local = np.tile(np.eye(3), (14, 1, 1))
    local[0] = rotation
    mesh = skin_mesh(template, BoneRotations.from_matrices(local))
    pelvis = template.rest_joints[JointId.pelvis]
    expected = (template.vertices - pelvis) @ rotation.T + pelvis
    np.testing.assert_allclose(mesh.vertices, expected, atol=1e-9)


def test_solve_ik_rejects_degenerate_target(template):
    joints = REST_JOINTS.copy()
    joints[JointId.l_wrist] = joints[JointId.l_elbow]
    with pytest.raises(DegenerateGeometryError):
        solve_ik(template, Pose3D(joints))


def test_bone_rotations_validate_quaternions():
    with pytest.raises(InvalidInputError):
        BoneRotations(np.ones((14, 4)))
    with pytest.raises(InvalidInputError):
        BoneRotations(np.zeros((3, 4)))


def test_apply_shape_scales_height_and_girth(templates):
    slim = apply_shape(templates, ShapeParams(gender=Gender.male, fitness=0.0, height=1.6))
    broad = apply_shape(templates, ShapeParams(gender=Gender.male, fitness=1.0, height=1.6))
    assert slim.height == pytest.approx(1.6)
    assert broad.height == pytest.approx(1.6)
    cloth = slim.labels == Region.upper_cloth
    slim_radius = np.linalg.norm((slim.vertices - slim.axis_points)[cloth], axis=1).mean()
    broad_radius = np.linalg.norm((broad.vertices - broad.axis_points)[cloth], axis=1).mean()
    assert broad_radius > slim_radius
    np.testing.assert_allclose(slim.rest_joints, REST_JOINTS * 1.6 / templates[Gender.male].height)


def test_sample_shape_ranges():
    rng = np.random.default_rng(0)
    shapes = [sample_shape(rng) for _ in range(500)]
    assert {s.gender for s in shapes} == {Gender.male, Gender.female}
    assert all(0.0 <= s.fitness <= 1.0 for s in shapes)
    assert all(1.3 <= s.height <= 2.1 for s in shapes)
    assert np.mean([s.height for s in shapes]) == pytest.approx(1.70, abs=0.02)


def test_shaped_template_still_reaches_poses(templates, rng, pose_factory):
    shaped = apply_shape(templates, ShapeParams(gender=Gender.female, fitness=0.8, height=1.9))
    pose = pose_factory(rng)
    mesh = pose_mesh(shaped, pose)
    target_dirs = pose.joints[1:] - pose.joints[[0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13]]
    mesh_dirs = mesh.joints[1:] - mesh.joints[[0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13]]
    cos = np.einsum("ij,ij->i", target_dirs, mesh_dirs) / (
        np.linalg.norm(target_dirs, axis=1) * np.linalg.norm(mesh_dirs, axis=1)
    )
    np.testing.assert_allclose(cos, 1.0, atol=1e-9)


def test_split_parts_overlap_at_the_waist(template):
    upper, lower = split_parts(template)
    shared = np.intersect1d(upper.vertex_indices, lower.vertex_indices)
    assert shared.size > 0
    heights = template.vertices[shared, 1]
    assert np.all(np.abs(heights - template.waist_height) <= template.waist_band + 1e-12)
    assert not np.isin(np.flatnonzero(template.labels == Region.head), upper.vertex_indices).any()


def test_save_and_load_template(tmp_path, template):
    save_template(template, tmp_path / "male")
    loaded = load_template(tmp_path / "male")
    np.testing.assert_array_equal(loaded.vertices, template.vertices)
    np.testing.assert_array_equal(loaded.triangles, template.triangles)
    np.testing.assert_array_equal(loaded.labels, template.labels)
    assert loaded.atlas_size == template.atlas_size
    assert [t.name for t in loaded.tubes] == [t.name for t in template.tubes]
    with pytest.raises(AssetError):
        load_template(tmp_path / "female")


def test_export_obj_of_posed_mesh(tmp_path, template, rng, pose_factory):
    mesh = pose_mesh(template, pose_factory(rng))
    export_obj(mesh, tmp_path / "posed.obj")
    lines = (tmp_path / "posed.obj").read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == len(mesh.vertices)
    assert sum(line.startswith("f ") for line in lines) == len(mesh.triangles)


def test_forward_kinematics_with_template_rest(templates):
    female = templates[Gender.female]
    joints, _ = forward_kinematics(female.rest_joints, np.tile(np.eye(3), (14, 1, 1)))
    np.testing.assert_allclose(joints, female.rest_joints)
