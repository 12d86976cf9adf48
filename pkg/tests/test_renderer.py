import numpy as np
import pytest

from app.schemas.mesh import Region
from app.schemas.pipeline import CameraConfig, LightConfig, SkinConfig
from app.schemas.render import CameraParams, LightRig, PointLight
from app.utils.body_mesh import Mesh, pose_mesh
from app.utils.errors import AssetError, InvalidInputError
from app.utils.raster import to_uint8, world_to_camera
from app.utils.renderer import (
    UNTEXTURED_COLOR,
    composite,
    crop_background,
    frame_camera,
    load_backgrounds,
    load_rgb,
    perturb_camera,
    perturb_skin_tone,
    project_joints,
    rasterize,
    render_overlay,
    sample_lights,
    save_png,
)
from app.utils.skeleton import Pose3D, PoseFrame
from app.utils.texture import TextureAtlas

CAMERA = CameraParams(focal=160.0, image_size=(128, 128))


def facing_square(half: float = 0.5, z: float = 2.0) -> Mesh:
    """Camera-frame square whose normals point back at the camera."""
    vertices = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    return Mesh(vertices=vertices, triangles=np.array([[0, 2, 1], [0, 3, 2]]), uvs=np.full((4, 2), 0.75))


def small_atlas() -> TextureAtlas:
    colors = np.array([[[0.1, 0.2, 0.3], [0.9, 0.5, 0.1]], [[0.4, 0.4, 0.4], [0.2, 0.6, 0.8]]])
    labels = np.array([[Region.upper_cloth, Region.head], [Region.hands, Region.lower_cloth]])
    return TextureAtlas(colors=colors, filled=np.ones((2, 2), bool), labels=labels, tubes=[])


def test_perturb_camera_matches_configured_spread():
    config = CameraConfig(elevation_range=(-89.0, 89.0))
    rng = np.random.default_rng(0)
    cameras = [perturb_camera(CAMERA, rng, config) for _ in range(10_000)]
    elevation = np.array([c.elevation for c in cameras])
    azimuth = np.array([c.azimuth for c in cameras])
    roll = np.array([c.in_plane for c in cameras])
    assert elevation.std() == pytest.approx(15.0, rel=0.05)
    assert azimuth.std() == pytest.approx(45.0, rel=0.05)
    assert roll.std() == pytest.approx(15.0, rel=0.05)
    assert abs(azimuth.mean()) < 3.0


def test_perturb_camera_clamps_elevation():
    config = CameraConfig(sigma_elevation=100.0)
    rng = np.random.default_rng(1)
    elevations = [perturb_camera(CAMERA, rng, config).elevation for _ in range(500)]
    assert min(elevations) >= -30.0
    assert max(elevations) <= 80.0


def test_perturb_camera_without_noise_is_identity():
    config = CameraConfig(sigma_elevation=0.0, sigma_azimuth=0.0, sigma_in_plane=0.0)
    camera = perturb_camera(CAMERA, np.random.default_rng(2), config)
    assert camera == CAMERA


def test_sample_lights_respects_config():
    rng = np.random.default_rng(3)
    counts = set()
    for _ in range(200):
        rig = sample_lights(rng)
        counts.add(len(rig.lights))
        assert 0.2 <= rig.ambient <= 0.5
        for light in rig.lights:
            assert light.direction[2] <= 0.0
            assert 0.3 <= light.intensity <= 0.8
    assert counts == {1, 2, 3, 4}
    single = sample_lights(rng, LightConfig(min_lights=2, max_lights=2))
    assert len(single.lights) == 2
    a = sample_lights(np.random.default_rng(5))
    b = sample_lights(np.random.default_rng(5))
    assert a == b


def test_frame_camera_keeps_body_in_frame(template, rng, pose_factory):
    config = CameraConfig()
    base = CameraParams(image_size=(64, 64), focal=80.0)
    for _ in range(20):
        mesh = pose_mesh(template, pose_factory(rng))
        camera = frame_camera(perturb_camera(base, rng, config), mesh.vertices, config.frame_fill)
        pixels = project_joints(Pose3D(mesh.joints), camera)
        assert np.all((pixels >= 0) & (pixels <= 64))
        assert camera.distance >= base.distance


def test_untextured_ambient_render_is_flat_gray(template):
    camera = frame_camera(CAMERA, template.vertices)
    result = rasterize(template, None, camera)
    covered = result.alpha > 0
    assert covered.any()
    np.testing.assert_allclose(result.rgba[covered, :3], np.tile(UNTEXTURED_COLOR, (covered.sum(), 1)))
    assert set(np.unique(result.alpha)) == {0.0, 1.0}
    assert np.all(np.isinf(result.depth[~covered]))


def test_lambert_shading_and_texel_lookup():
    rig = LightRig(ambient=0.3, lights=[PointLight(direction=(0.0, 0.0, -1.0), intensity=0.5)])
    result = rasterize(facing_square(), small_atlas(), CAMERA, rig, in_camera_frame=True)
    covered = result.alpha > 0
    # uv (0.75, 0.75) -> row 1, col 1
    expected = np.array([0.2, 0.6, 0.8]) * 0.8
    np.testing.assert_allclose(result.rgba[covered, :3], np.tile(expected, (covered.sum(), 1)))

    behind = LightRig(ambient=0.3, lights=[PointLight(direction=(0.0, 0.0, 1.0), intensity=0.5)])
    dark = rasterize(facing_square(), small_atlas(), CAMERA, behind, in_camera_frame=True)
    np.testing.assert_allclose(dark.rgba[covered, :3], np.tile(expected * 0.3 / 0.8, (covered.sum(), 1)))


def test_perturb_skin_tone_touches_only_skin():
    atlas = small_atlas()
    toned = perturb_skin_tone(atlas, np.random.default_rng(4), SkinConfig(value_range=0.5))
    skin = atlas.region_mask(Region.head, Region.hands)
    np.testing.assert_array_equal(toned.colors[~skin], atlas.colors[~skin])
    assert not np.allclose(toned.colors[skin], atlas.colors[skin])
    assert set(toned.provenance["skin"]) == {"hue", "saturation", "value"}
    assert "skin" not in atlas.provenance

    untouched = perturb_skin_tone(atlas, np.random.default_rng(4),
                                  SkinConfig(hue_range=0.0, saturation_range=0.0, value_range=0.0))
    np.testing.assert_array_equal(untouched.colors, atlas.colors)


def test_composite_alpha_over():
    render = np.zeros((4, 4, 4))
    render[:2, :, :3] = 1.0
    render[:2, :, 3] = 1.0
    background = np.full((4, 4, 3), 0.25)
    out = composite(render, background)
    np.testing.assert_allclose(out[:2], 1.0)
    np.testing.assert_allclose(out[2:], 0.25)
    with pytest.raises(InvalidInputError):
        composite(render, np.zeros((5, 4, 3)))


def test_crop_background_sizes():
    rng = np.random.default_rng(6)
    background = rng.uniform(size=(40, 50, 3))
    crop = crop_background(background, (20, 10), rng)
    assert crop.shape == (10, 20, 3)
    np.testing.assert_array_equal(crop_background(background, (50, 40), rng), background)
    with pytest.raises(AssetError):
        crop_background(background, (60, 10), rng)
    out = composite(np.zeros((10, 20, 4)), background, rng)
    assert out.shape == (10, 20, 3)


def test_project_joints_accepts_either_frame(rng, pose_factory):
    pose = pose_factory(rng)
    world = project_joints(pose, CAMERA)
    camera_pose = Pose3D(world_to_camera(pose.joints, CAMERA), PoseFrame.camera)
    np.testing.assert_allclose(project_joints(camera_pose, CAMERA), world)
    np.testing.assert_allclose(project_joints(camera_pose.joints, CAMERA), world)


def test_render_overlay_blending():
    image = np.full((128, 128, 3), 0.5)
    untouched = render_overlay(image, facing_square(), CAMERA, alpha=0.0, in_camera_frame=True)
    np.testing.assert_allclose(untouched, image)
    full = render_overlay(image, facing_square(), CAMERA, alpha=1.0, in_camera_frame=True)
    np.testing.assert_allclose(full[64, 64], UNTEXTURED_COLOR)
    np.testing.assert_allclose(full[0, 0], 0.5)
    with pytest.raises(InvalidInputError):
        render_overlay(image, facing_square(), CAMERA, alpha=1.5, in_camera_frame=True)


def test_png_io_and_background_loading(tmp_path):
    image = np.random.default_rng(7).uniform(size=(12, 16, 3))
    save_png(image, tmp_path / "bg" / "b.png")
    save_png(image[::-1], tmp_path / "bg" / "a.png")
    np.testing.assert_array_equal(to_uint8(load_rgb(tmp_path / "bg" / "b.png")), to_uint8(image))
    names = [name for name, _ in load_backgrounds(tmp_path / "bg")]
    assert names == ["a.png", "b.png"]
    (tmp_path / "empty").mkdir()
    with pytest.raises(AssetError):
        load_backgrounds(tmp_path / "empty")
    with pytest.raises(AssetError):
        load_rgb(tmp_path / "missing.png")
