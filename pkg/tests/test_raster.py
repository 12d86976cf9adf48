import numpy as np
import pytest

from app.schemas.render import CameraParams
from app.utils.errors import DegenerateGeometryError, InvalidInputError
from app.utils.raster import (
    bilinear_sample,
    camera_center,
    camera_rotation,
    project_points,
    rasterize_triangles,
    silhouette_mask,
    to_uint8,
    vertex_normals,
    world_to_camera,
)

CAMERA = CameraParams(focal=160.0, image_size=(128, 128))


def square(half: float, z: float, offset: int = 0):
    points = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]]) + offset
    return points, triangles


def test_default_camera_looks_down_negative_z():
    np.testing.assert_allclose(camera_center(CAMERA), [0.0, 0.9, 4.0])
    rotation = camera_rotation(CAMERA)
    np.testing.assert_allclose(rotation, [[1, 0, 0], [0, -1, 0], [0, 0, -1]], atol=1e-12)
    np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)


def test_target_projects_to_principal_point():
    for elevation, azimuth, roll in [(0, 0, 0), (30, 120, 10), (-20, -45, 90)]:
        camera = CAMERA.model_copy(update={"elevation": elevation, "azimuth": azimuth, "in_plane": roll})
        pixel = project_points(world_to_camera(np.array([camera.target]), camera), camera)
        np.testing.assert_allclose(pixel[0], camera.principal, atol=1e-9)


def test_projection_of_offset_point():
    point = world_to_camera(np.array([[0.1, 0.9, 0.0]]), CAMERA)
    np.testing.assert_allclose(point, [[0.1, 0.0, 4.0]], atol=1e-12)
    np.testing.assert_allclose(project_points(point, CAMERA), [[64.0 + 160.0 * 0.1 / 4.0, 64.0]])


def test_projection_rejects_points_behind_camera():
    with pytest.raises(InvalidInputError):
        project_points(np.array([[0.0, 0.0, -1.0]]), CAMERA)


def test_rasterize_square_covers_expected_pixels():
    points, triangles = square(0.5, 2.0)
    fragments = rasterize_triangles(points, triangles, CAMERA)
    # 0.5 m at 2 m with f=160 spans pixels [24, 104)
    assert fragments.mask.sum() == 80 * 80
    assert fragments.mask[24:104, 24:104].all()
    np.testing.assert_allclose(fragments.depth[fragments.mask], 2.0)
    np.testing.assert_allclose(fragments.barycentric[fragments.mask].sum(axis=1), 1.0)


def test_depth_test_keeps_nearest_surface():
    far, far_tri = square(0.5, 3.0)
    near, near_tri = square(0.2, 2.0, offset=4)
    fragments = rasterize_triangles(np.vstack([far, near]), np.vstack([far_tri, near_tri]), CAMERA)
    center = fragments.triangle[64, 64]
    assert center in (2, 3)
    assert fragments.depth[64, 64] == pytest.approx(2.0)
    corner_row, corner_col = 44, 44
    assert fragments.triangle[corner_row, corner_col] in (0, 1)
    assert fragments.depth[corner_row, corner_col] == pytest.approx(3.0)


def test_perspective_correct_depth_on_tilted_plane():
    # plane z = 2 + 0.5 x in camera coordinates
    xs = np.array([-0.6, 0.6, 0.6, -0.6])
    ys = np.array([-0.6, -0.6, 0.6, 0.6])
    points = np.column_stack([xs, ys, 2.0 + 0.5 * xs])
    fragments = rasterize_triangles(points, np.array([[0, 1, 2], [0, 2, 3]]), CAMERA)
    rows, cols = np.nonzero(fragments.mask)
    u = (cols + 0.5 - 64.0) / 160.0
    expected = 2.0 / (1.0 - 0.5 * u)
    np.testing.assert_allclose(fragments.depth[rows, cols], expected, rtol=1e-9)


def test_triangles_crossing_near_plane_are_dropped():
    points = np.array([[0.0, 0.0, -1.0], [0.5, 0.0, 2.0], [0.0, 0.5, 2.0]])
    fragments = rasterize_triangles(points, np.array([[0, 1, 2]]), CAMERA)
    assert not fragments.mask.any()


def test_silhouette_mask_errors():
    points, triangles = square(0.5, -2.0)
    with pytest.raises(DegenerateGeometryError):
        silhouette_mask(points, triangles, CAMERA)
    offscreen, triangles = square(0.1, 2.0)
    with pytest.raises(DegenerateGeometryError):
        silhouette_mask(offscreen + [10.0, 0.0, 0.0], triangles, CAMERA)


def test_vertex_normals_follow_winding():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    normals = vertex_normals(vertices, np.array([[0, 1, 2]]))
    np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (3, 1)))


def test_to_uint8_rounds_half_up_and_clips():
    values = to_uint8(np.array([-0.1, 0.0, 0.5, 1.0, 1.2]))
    np.testing.assert_array_equal(values, [0, 0, 128, 255, 255])


def test_bilinear_sample_at_pixel_centers():
    image = np.arange(4 * 5 * 3, dtype=np.float64).reshape(4, 5, 3)
    sampled = bilinear_sample(image, np.array([0.5, 2.5]), np.array([1.5, 3.5]))
    np.testing.assert_allclose(sampled, image[[1, 3], [0, 2]])
    midway = bilinear_sample(image, np.array([1.0]), np.array([0.5]))
    np.testing.assert_allclose(midway[0], (image[0, 0] + image[0, 1]) / 2.0)
