import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from app.schemas.mesh import SKIN_REGIONS
from app.schemas.pipeline import CameraConfig, LightConfig, SkinConfig
from app.schemas.render import CameraParams, LightRig, PointLight
from app.utils.body_mesh import Mesh
from app.utils.errors import AssetError, DegenerateGeometryError, InvalidInputError
from app.utils.raster import (
    Fragments,
    project_points,
    rasterize_triangles,
    to_uint8,
    vertex_normals,
    world_to_camera,
)
from app.utils.skeleton import Pose3D, PoseFrame
from app.utils.texture import TextureAtlas

logger = logging.getLogger(__name__)

UNTEXTURED_COLOR = (0.7, 0.7, 0.7)


@dataclass
class RenderResult:
    rgba: np.ndarray   # (H, W, 4) float in [0, 1]
    depth: np.ndarray  # (H, W), inf where empty
    fragments: Fragments

    @property
    def alpha(self) -> np.ndarray:
        return self.rgba[..., 3]


def perturb_camera(
    base: CameraParams,
    rng: np.random.Generator,
    config: Optional[CameraConfig] = None,
) -> CameraParams:
    """Gaussian jitter on elevation, azimuth and in-plane rotation; elevation clamped to the configured range."""
    config = config or CameraConfig()
    d_elev, d_azim, d_roll = rng.normal(0.0, 1.0, 3) * np.array(
        [config.sigma_elevation, config.sigma_azimuth, config.sigma_in_plane]
    )
    lo, hi = config.elevation_range
    elevation = float(np.clip(base.elevation + d_elev, lo, hi))
    return base.model_copy(update={
        "elevation": elevation,
        "azimuth": base.azimuth + float(d_azim),
        "in_plane": base.in_plane + float(d_roll),
    })


def sample_lights(rng: np.random.Generator, config: Optional[LightConfig] = None) -> LightRig:
    """Random rig: uniform light count, directions in the hemisphere facing the camera."""
    config = config or LightConfig()
    count = int(rng.integers(config.min_lights, config.max_lights + 1))
    ambient = float(rng.uniform(*config.ambient_range))
    lights = []
    for _ in range(count):
        direction = rng.normal(size=3)
        direction[2] = -abs(direction[2])
        if np.linalg.norm(direction) < 1e-9:
            direction = np.array([0.0, 0.0, -1.0])
        lights.append(PointLight(direction=tuple(direction), intensity=float(rng.uniform(*config.intensity_range))))
    return LightRig(ambient=ambient, lights=lights)


def frame_camera(camera: CameraParams, vertices: np.ndarray, frame_fill: float = 0.8) -> CameraParams:
    """Aim at the bounding-box center and back off until the bounding sphere fits ``frame_fill`` of the image."""
    vertices = np.asarray(vertices, dtype=np.float64)
    center = (vertices.min(axis=0) + vertices.max(axis=0)) / 2.0
    radius = float(np.linalg.norm(vertices - center, axis=1).max())
    r_px = frame_fill * min(camera.image_size) / 2.0
    distance = max(camera.distance, radius * np.sqrt(1.0 + (camera.focal / r_px) ** 2))
    return camera.model_copy(update={"target": tuple(float(c) for c in center), "distance": float(distance)})


def _texel_colors(atlas: Optional[TextureAtlas], uv: np.ndarray) -> np.ndarray:
    if atlas is None:
        return np.broadcast_to(np.asarray(UNTEXTURED_COLOR), (len(uv), 3))
    rows, cols = atlas.colors.shape[:2]
    c = np.clip(np.floor(uv[:, 0] * cols).astype(np.int64), 0, cols - 1)
    r = np.clip(np.floor(uv[:, 1] * rows).astype(np.int64), 0, rows - 1)
    return atlas.colors[r, c]


def rasterize(
    mesh: Mesh,
    atlas: Optional[TextureAtlas],
    camera: CameraParams,
    lights: Optional[LightRig] = None,
    in_camera_frame: bool = False,
) -> RenderResult:
    """Textured, Lambert-shaded render; alpha is pixel coverage.

    Texture lookup is nearest-texel. With ``atlas=None`` the mesh is drawn in a flat gray.
    """
    lights = lights or LightRig.ambient_only()
    points_cam = np.asarray(mesh.vertices, dtype=np.float64)
    if not in_camera_frame:
        points_cam = world_to_camera(points_cam, camera)
    fragments = rasterize_triangles(points_cam, mesh.triangles, camera)
    covered = fragments.mask
    if not covered.any():
        raise DegenerateGeometryError("projected extent is empty")

    rows, cols = np.nonzero(covered)
    tri = mesh.triangles[fragments.triangle[rows, cols]]
    bary = fragments.barycentric[rows, cols]
    uv = np.einsum("pk,pkd->pd", bary, mesh.uvs[tri])
    normals = vertex_normals(points_cam, mesh.triangles)
    n = np.einsum("pk,pkd->pd", bary, normals[tri])
    n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)

    shade = np.full(len(rows), lights.ambient)
    for light in lights.lights:
        shade += np.maximum(0.0, n @ np.asarray(light.direction)) * light.intensity
    color = np.clip(_texel_colors(atlas, uv) * shade[:, None], 0.0, 1.0)

    height, width = covered.shape
    rgba = np.zeros((height, width, 4))
    rgba[rows, cols, :3] = color
    rgba[rows, cols, 3] = 1.0
    return RenderResult(rgba, fragments.depth, fragments)


def perturb_skin_tone(
    atlas: TextureAtlas,
    rng: np.random.Generator,
    config: Optional[SkinConfig] = None,
) -> TextureAtlas:
    """Random HSV offset applied to skin-labeled texels only."""
    config = config or SkinConfig()
    result = atlas.copy()
    if config.hue_range == 0 and config.saturation_range == 0 and config.value_range == 0:
        return result
    dh = rng.uniform(-config.hue_range, config.hue_range)
    ds = rng.uniform(-config.saturation_range, config.saturation_range)
    dv = rng.uniform(-config.value_range, config.value_range)
    skin = atlas.region_mask(*SKIN_REGIONS)
    if not skin.any():
        return result
    hsv = rgb_to_hsv(np.clip(atlas.colors[skin], 0.0, 1.0))
    hsv[:, 0] = np.mod(hsv[:, 0] + dh, 1.0)
    hsv[:, 1] = np.clip(hsv[:, 1] + ds, 0.0, 1.0)
    hsv[:, 2] = np.clip(hsv[:, 2] + dv, 0.0, 1.0)
    result.colors[skin] = hsv_to_rgb(hsv)
    result.provenance["skin"] = {"hue": float(dh), "saturation": float(ds), "value": float(dv)}
    return result


def crop_background(background: np.ndarray, size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Random crop at a random scale, resized to ``size`` (width, height)."""
    width, height = size
    bg_h, bg_w = background.shape[:2]
    if bg_w < width or bg_h < height:
        raise AssetError(f"background {bg_w}x{bg_h} is smaller than the {width}x{height} render")
    max_scale = min(bg_w / width, bg_h / height)
    scale = float(rng.uniform(1.0, max_scale)) if max_scale > 1.0 else 1.0
    crop_w = min(bg_w, int(round(width * scale)))
    crop_h = min(bg_h, int(round(height * scale)))
    x0 = int(rng.integers(0, bg_w - crop_w + 1))
    y0 = int(rng.integers(0, bg_h - crop_h + 1))
    crop = background[y0:y0 + crop_h, x0:x0 + crop_w, :3]
    if (crop_w, crop_h) == (width, height):
        return np.asarray(crop, dtype=np.float64)
    resized = Image.fromarray(to_uint8(crop), mode="RGB").resize((width, height), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


def composite(
    render: np.ndarray,
    background: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Alpha-over blend ``a * fg + (1 - a) * bg``; with an rng the background is randomly cropped first."""
    render = np.asarray(render, dtype=np.float64)
    height, width = render.shape[:2]
    background = np.asarray(background, dtype=np.float64)
    if rng is not None:
        background = crop_background(background, (width, height), rng)
    elif background.shape[:2] != (height, width):
        raise InvalidInputError(f"background shape {background.shape[:2]} does not match render {(height, width)}")
    alpha = render[..., 3:4]
    return alpha * render[..., :3] + (1.0 - alpha) * background[..., :3]


def project_joints(pose: Union[Pose3D, np.ndarray], camera: CameraParams) -> np.ndarray:
    """Pixel coordinates of camera-frame (or world-frame body) joints."""
    if isinstance(pose, Pose3D):
        joints = pose.joints if pose.frame == PoseFrame.camera else world_to_camera(pose.joints, camera)
    else:
        joints = np.asarray(pose, dtype=np.float64)
    return project_points(joints, camera)


def render_overlay(
    image: np.ndarray,
    mesh: Mesh,
    camera: CameraParams,
    alpha: float = 0.5,
    atlas: Optional[TextureAtlas] = None,
    lights: Optional[LightRig] = None,
    in_camera_frame: bool = False,
) -> np.ndarray:
    """Blend a render of ``mesh`` over ``image`` with opacity ``alpha`` wherever the mesh covers."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"overlay alpha must lie in [0, 1], got {alpha}")
    image = np.asarray(image, dtype=np.float64)[..., :3]
    if (image.shape[1], image.shape[0]) != tuple(camera.image_size):
        camera = camera.model_copy(update={"image_size": (image.shape[1], image.shape[0])})
    rendered = rasterize(mesh, atlas, camera, lights, in_camera_frame)
    weight = alpha * rendered.alpha[..., None]
    return weight * rendered.rgba[..., :3] + (1.0 - weight) * image


def save_png(image: np.ndarray, path: Union[str, Path]) -> Path:
    """RGB8 PNG, rounding half up."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(np.asarray(image)[..., :3]), mode="RGB").save(path)
    return path


def load_rgb(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise AssetError(f"cannot read image {path}: {e}")


def load_backgrounds(directory: Union[str, Path]) -> List[Tuple[str, np.ndarray]]:
    """All PNG/JPEG images in a directory, sorted by name."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise AssetError(f"no background images in {directory}")
    return [(p.name, load_rgb(p)) for p in files]
