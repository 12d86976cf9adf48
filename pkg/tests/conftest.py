from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from scipy.spatial.transform import Rotation

from app.schemas.mesh import Gender
from app.schemas.pipeline import TemplateConfig, TextureConfig
from app.utils.body_mesh import build_template, build_templates, pose_mesh, split_parts
from app.utils.raster import silhouette_mask, to_uint8, world_to_camera
from app.utils.skeleton import REST_JOINTS, Pose3D, forward_kinematics, save_poses
from app.utils.texture import SegmentedClothImage, candidate_poses, frontal_camera

SMALL_TEMPLATE = TemplateConfig(segments=8, rings=4)

# bones whose swing axis must stay perpendicular to the rest direction (zero twist)
_SWING_PLANES = {
    1: (1.0, 0.0, 1.0),   # head
    3: (0.0, 1.0, 1.0),   # l_upper_arm
    4: (0.0, 1.0, 1.0),   # l_forearm
    6: (0.0, 1.0, 1.0),   # r_upper_arm
    7: (0.0, 1.0, 1.0),   # r_forearm
    9: (1.0, 0.0, 1.0),   # l_thigh
    12: (1.0, 0.0, 1.0),  # r_thigh
}


def make_pose(rng: np.random.Generator, spread: float = 0.3, tilt: float = 0.2, rest=REST_JOINTS) -> Pose3D:
    """Plausible pose by forward kinematics: a rigid body tilt, limb swings and knee flexion."""
    local = np.tile(np.eye(3), (14, 1, 1))
    local[0] = Rotation.from_rotvec(rng.normal(0.0, tilt, 3)).as_matrix()
    for bone, plane in _SWING_PLANES.items():
        rotvec = np.clip(rng.normal(0.0, spread, 3), -0.5, 0.5) * np.asarray(plane)
        local[bone] = Rotation.from_rotvec(rotvec).as_matrix()
    for shin in (10, 13):
        local[shin] = Rotation.from_rotvec([rng.uniform(0.0, 1.0), 0.0, 0.0]).as_matrix()
    joints, _ = forward_kinematics(rest, local)
    return Pose3D(joints)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pose_factory():
    return make_pose


@pytest.fixture(scope="session")
def template():
    return build_template(Gender.male, SMALL_TEMPLATE)


@pytest.fixture(scope="session")
def templates():
    return build_templates(SMALL_TEMPLATE)


def _stripes(height: int, width: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, 3)
    image = np.broadcast_to(base, (height, width, 3)).copy()
    image[(np.arange(height) // 4) % 2 == 0] *= 0.5
    return np.clip(image, 0.0, 1.0)


def garment_from_silhouette(template, category: str, size: int = 128, seed: int = 0) -> SegmentedClothImage:
    """Cloth photo whose mask is the template's own candidate silhouette."""
    camera = frontal_camera(template, size)
    mesh = pose_mesh(template, candidate_poses(template, category)[0])
    upper, lower = split_parts(mesh)
    part = upper if category == "upper" else lower
    mask = silhouette_mask(world_to_camera(mesh.vertices, camera), part.triangles, camera)
    return SegmentedClothImage(_stripes(size, size, seed), mask, category, f"{category}_{seed}")


@pytest.fixture(scope="session")
def garments(template):
    return {
        "upper": garment_from_silhouette(template, "upper", TextureConfig().candidate_size, 1),
        "lower": garment_from_silhouette(template, "lower", TextureConfig().candidate_size, 2),
    }


@pytest.fixture(scope="session")
def extremity_assets():
    rng = np.random.default_rng(7)
    return {name: [rng.uniform(0.3, 0.9, (8, 8, 3))] for name in ("head", "hands", "feet")}


def _save_rgb(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(array), mode="RGB").save(path)


def _save_garment(garment: SegmentedClothImage, directory: Path) -> None:
    _save_rgb(garment.image, directory / f"{garment.source}.png")
    mask = Image.fromarray(garment.mask.astype(np.uint8) * 255, mode="L")
    mask.save(directory / f"{garment.source}_mask.png")


@pytest.fixture(scope="session")
def asset_root(tmp_path_factory, template, garments, extremity_assets):
    """Every on-disk input of the pipeline: poses, cloth, extremities, backgrounds."""
    root = tmp_path_factory.mktemp("assets")
    rng = np.random.default_rng(99)

    save_poses(root / "poses" / "mocap.json", [make_pose(rng) for _ in range(30)])
    save_poses(root / "poses" / "inferred.json", [make_pose(rng) for _ in range(10)])

    for category, garment in garments.items():
        _save_garment(garment, root / "cloth" / category)

    for name, textures in extremity_assets.items():
        for k, texture in enumerate(textures):
            _save_rgb(texture, root / "assets" / name / f"{name}_{k}.png")

    for k in range(2):
        _save_rgb(rng.uniform(0.0, 1.0, (96, 96, 3)), root / "backgrounds" / f"bg_{k}.png")
    return root


@pytest.fixture(scope="session")
def pipeline_config_data(asset_root):
    """Config JSON (minus output) for a small, fast end-to-end run."""
    return {
        "seed": 42,
        "paths": {
            "poses": str(asset_root / "poses"),
            "cloth": str(asset_root / "cloth"),
            "assets": str(asset_root / "assets"),
            "backgrounds": str(asset_root / "backgrounds"),
        },
        "counts": {"bodies": 3, "textures": 2, "images": 4, "poses": 5},
        "camera": {"base": {"image_size": [64, 64], "focal": 80.0}},
        "template": SMALL_TEMPLATE.model_dump(),
        "texture": {"nearest_fill": True},
        "prior": {"bandwidth": 0.02},
    }


@pytest.fixture(scope="session")
def varied_cloth(tmp_path_factory, template):
    """Cloth library with eight differently colored garments per category."""
    root = tmp_path_factory.mktemp("varied_cloth")
    size = TextureConfig().candidate_size
    for category in ("upper", "lower"):
        for seed in range(8):
            _save_garment(garment_from_silhouette(template, category, size, 100 + seed), root / category)
    return root
