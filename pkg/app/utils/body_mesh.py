"""Procedural skinned body templates, shape variation, IK and linear blend skinning.

Each body segment is a capped tube around its bone axis. Tube vertices form a
(rings + 1) x (segments + 1) grid with a duplicated seam column, followed by the
two cap centers; every tube owns one rectangular block of the texture atlas.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.spatial.transform import Rotation

from app.schemas.mesh import Gender, Region, ShapeParams, TemplateSidecar, TubeSpec
from app.schemas.pipeline import TemplateConfig
from app.schemas.pose import PoseFrame
from app.utils.errors import AssetError, InvalidInputError
from app.utils.raster import vertex_normals
from app.utils.skeleton import (
    BONES,
    NUM_BONES,
    PARENT_BONE,
    REST_JOINTS,
    Pose3D,
    bone_directions,
    forward_kinematics,
    global_bone_rotations,
)

logger = logging.getLogger(__name__)

FEMALE_SCALE = 0.94
WAIST_HEIGHT = 1.02
BLEND_SPAN = 0.2
GIRTH_RANGE = (0.9, 1.15)

_PARENT_JOINT = np.array([p for p, _ in BONES])


@dataclass(frozen=True)
class BoneRotations:
    """14 local unit quaternions (x, y, z, w) in hierarchy order."""

    quaternions: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternions, dtype=np.float64)
        if q.shape != (NUM_BONES, 4):
            raise InvalidInputError(f"expected (14, 4) quaternions, got {q.shape}")
        if not np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9):
            raise InvalidInputError("bone rotations must be unit quaternions")
        object.__setattr__(self, "quaternions", q)

    @classmethod
    def identity(cls) -> "BoneRotations":
        q = np.zeros((NUM_BONES, 4))
        q[:, 3] = 1.0
        return cls(q)

    @classmethod
    def from_matrices(cls, matrices: np.ndarray) -> "BoneRotations":
        q = Rotation.from_matrix(matrices).as_quat()
        q = np.where(q[:, 3:4] < 0, -q, q)
        return cls(q / np.linalg.norm(q, axis=1, keepdims=True))

    def as_matrices(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternions).as_matrix()


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray

    @property
    def normals(self) -> np.ndarray:
        return vertex_normals(self.vertices, self.triangles)


@dataclass
class TemplateMesh(Mesh):
    weights: np.ndarray = None
    labels: np.ndarray = None
    rest_joints: np.ndarray = None
    axis_points: np.ndarray = None
    tubes: List[TubeSpec] = field(default_factory=list)
    atlas_size: Tuple[int, int] = (0, 0)
    gender: Gender = Gender.male
    waist_height: float = WAIST_HEIGHT
    height: float = 0.0
    waist_band: float = 0.03

    @property
    def rest_pose(self) -> Pose3D:
        return Pose3D(self.rest_joints, PoseFrame.body)

    def tube(self, name: str) -> TubeSpec:
        for tube in self.tubes:
            if tube.name == name:
                return tube
        raise KeyError(name)


@dataclass
class ArticulatedMesh(Mesh):
    joints: np.ndarray = None
    template: TemplateMesh = None
    rotations: Optional[BoneRotations] = None
    bone_transforms: Optional[np.ndarray] = None

    @property
    def labels(self) -> np.ndarray:
        return self.template.labels

    @property
    def pose(self) -> Pose3D:
        return Pose3D(self.joints, PoseFrame.body)

    def transformed(self, scale: float, rotation: np.ndarray, translation: np.ndarray) -> "ArticulatedMesh":
        """Apply x -> s R x + t to vertices and joints."""
        return replace(
            self,
            vertices=scale * self.vertices @ rotation.T + translation,
            joints=scale * self.joints @ rotation.T + translation,
        )


@dataclass
class SubMesh:
    """Vertex subset of a mesh; triangles keep the original vertex indices."""

    mesh: Mesh
    vertex_indices: np.ndarray
    triangles: np.ndarray


def _tube_table(rest: np.ndarray) -> List[dict]:
    """Segment tubes for a rest skeleton; left side listed first, right side mirrored."""
    j = rest

    def lift(p):
        return tuple(float(c) for c in p)

    specs = [
        dict(name="torso", region=None, bone=0,
             start=(0.0, j[9][1] - 0.06, 0.0), end=(0.0, j[1][1] + 0.02, 0.0),
             profile=[(0.0, 0.10, 0.16), (0.24, 0.095, 0.14), (0.65, 0.11, 0.16),
                      (0.88, 0.09, 0.17), (1.0, 0.06, 0.08)],
             mirror="torso"),
        dict(name="head", region=Region.head, bone=1, proximal_bone=0,
             start=lift(j[1]), end=(0.0, j[2][1] + 0.12, 0.0),
             profile=[(0.0, 0.05, 0.05), (0.25, 0.06, 0.06), (0.45, 0.10, 0.085),
                      (0.8, 0.09, 0.08), (1.0, 0.03, 0.03)],
             mirror="head"),
    ]
    for side, sign, (sh, el, wr, hip, kn, an), (clav, upper, fore, pel, thigh, shin) in (
        ("l", 1.0, (3, 4, 5, 9, 10, 11), (2, 3, 4, 8, 9, 10)),
        ("r", -1.0, (6, 7, 8, 12, 13, 14), (5, 6, 7, 11, 12, 13)),
    ):
        other = "r" if side == "l" else "l"
        hand_len = 0.18 / 0.26 * (j[wr][0] - j[el][0])
        specs += [
            dict(name=f"{side}_upper_arm", region=Region.upper_cloth, bone=upper,
                 proximal_bone=clav, distal_bone=fore,
                 start=(j[sh][0] - sign * 0.02, j[sh][1], j[sh][2]), end=lift(j[el]),
                 profile=[(0.0, 0.055, 0.055), (1.0, 0.042, 0.042)],
                 mirror=f"{other}_upper_arm"),
            dict(name=f"{side}_forearm", region=Region.upper_cloth, bone=fore, proximal_bone=upper,
                 start=lift(j[el]), end=lift(j[wr]),
                 profile=[(0.0, 0.042, 0.042), (1.0, 0.032, 0.03)],
                 mirror=f"{other}_forearm"),
            dict(name=f"{side}_hand", region=Region.hands, bone=fore,
                 start=lift(j[wr]), end=(j[wr][0] + hand_len, j[wr][1], j[wr][2]),
                 profile=[(0.0, 0.025, 0.03), (0.5, 0.018, 0.04), (1.0, 0.012, 0.02)],
                 mirror=f"{other}_hand"),
            dict(name=f"{side}_thigh", region=Region.lower_cloth, bone=thigh,
                 proximal_bone=pel, distal_bone=shin,
                 start=lift(j[hip]), end=lift(j[kn]),
                 profile=[(0.0, 0.085, 0.085), (1.0, 0.055, 0.055)],
                 mirror=f"{other}_thigh"),
            dict(name=f"{side}_shin", region=Region.lower_cloth, bone=shin, proximal_bone=thigh,
                 start=lift(j[kn]), end=(j[an][0], j[an][1] - 0.01, j[an][2]),
                 profile=[(0.0, 0.055, 0.055), (0.3, 0.055, 0.05), (1.0, 0.04, 0.04)],
                 mirror=f"{other}_shin"),
            dict(name=f"{side}_foot", region=Region.feet, bone=shin,
                 start=(j[an][0], j[an][1] - 0.04, j[an][2] - 0.05),
                 end=(j[an][0], j[an][1] - 0.06, j[an][2] + 0.19),
                 profile=[(0.0, 0.04, 0.045), (1.0, 0.03, 0.045)],
                 mirror=f"{other}_foot"),
        ]
    return specs


def _layout_blocks(specs: List[dict], config: TemplateConfig) -> Tuple[List[Tuple[int, int, int, int]], Tuple[int, int]]:
    """Shelf-pack one atlas block per tube; columns are 4k + 1 so quarter turns land on texels."""
    sizes = []
    for spec in specs:
        length = float(np.linalg.norm(np.subtract(spec["end"], spec["start"])))
        radius = max(max(p[1], p[2]) for p in spec["profile"])
        rows = max(8, int(round(length * config.texels_per_meter)))
        cols = 4 * max(2, int(np.ceil(2 * np.pi * radius * config.texels_per_meter / 4))) + 1
        sizes.append((rows, cols))
    width = max(config.atlas_width, max(c for _, c in sizes))
    blocks = []
    row = col = shelf = 0
    for rows, cols in sizes:
        if col + cols > width:
            row += shelf
            col = shelf = 0
        blocks.append((row, col, rows, cols))
        col += cols
        shelf = max(shelf, rows)
    return blocks, (row + shelf, width)


def tube_frame(start: np.ndarray, end: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(axis, forward, side) orthonormal frame of a tube."""
    axis = np.asarray(end, dtype=np.float64) - np.asarray(start, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    ref = np.array([0.0, 1.0, 0.0]) if abs(axis[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
    forward = ref - np.dot(ref, axis) * axis
    forward = forward / np.linalg.norm(forward)
    side = np.cross(axis, forward)
    return axis, forward, side


def _blend_weights(tube: TubeSpec, s: np.ndarray) -> np.ndarray:
    weights = np.zeros((s.size, NUM_BONES))
    primary = np.ones(s.size)
    if tube.proximal_bone is not None:
        near = s < BLEND_SPAN
        w = np.where(near, 0.5 + 0.5 * s / BLEND_SPAN, 1.0)
        weights[:, tube.proximal_bone] += np.where(near, 1.0 - w, 0.0)
        primary = w
    if tube.distal_bone is not None:
        far = s > 1.0 - BLEND_SPAN
        w_child = np.where(far, 0.5 * (s - (1.0 - BLEND_SPAN)) / BLEND_SPAN, 0.0)
        weights[:, tube.distal_bone] += w_child
        primary = primary - w_child
    weights[:, tube.bone] += primary
    return weights


def build_template(gender: Gender = Gender.male, config: Optional[TemplateConfig] = None) -> TemplateMesh:
    """Procedural low-poly template for one gender; the atlas layout is shared by both genders."""
    config = config or TemplateConfig()
    gender = Gender(gender)
    male_specs = _tube_table(REST_JOINTS)
    blocks, atlas_size = _layout_blocks(male_specs, config)

    if gender == Gender.male:
        rest = REST_JOINTS.copy()
        specs = male_specs
    else:
        rest = REST_JOINTS * FEMALE_SCALE
        specs = _tube_table(rest)
    rows_n, segs_n = config.rings, config.segments
    n_grid = (rows_n + 1) * (segs_n + 1)

    vertices, uvs, weights, labels, axis_points, triangles, tubes = [], [], [], [], [], [], []
    offset = 0
    atlas_rows, atlas_cols = atlas_size
    for spec, block in zip(specs, blocks):
        profile = spec["profile"]
        if gender == Gender.female:
            if spec["name"] == "torso":
                profile = [(0.0, 0.10, 0.16), (0.24, 0.085, 0.12), (0.65, 0.10, 0.14),
                           (0.88, 0.08, 0.15), (1.0, 0.055, 0.07)]
            else:
                profile = [(s, rf * 0.9, rl * 0.9) for s, rf, rl in profile]
        tube = TubeSpec(
            **{k: v for k, v in spec.items() if k != "profile"},
            profile=[tuple(float(c) for c in p) for p in profile],
            vertex_offset=offset, rings=rows_n, segments=segs_n, block=block,
        )
        start, end = np.asarray(tube.start), np.asarray(tube.end)
        axis, forward, side = tube_frame(start, end)
        prof = np.asarray(tube.profile)

        s = np.repeat(np.arange(rows_n + 1) / rows_n, segs_n + 1)
        frac = np.tile(np.arange(segs_n + 1) / segs_n, rows_n + 1)
        phi = 2 * np.pi * frac
        r_f = np.interp(s, prof[:, 0], prof[:, 1])
        r_l = np.interp(s, prof[:, 0], prof[:, 2])
        centers = start + s[:, None] * (end - start)
        grid = centers + (r_f * np.cos(phi))[:, None] * forward + (r_l * np.sin(phi))[:, None] * side
        caps = np.vstack([start, end])
        s_all = np.concatenate([s, [0.0, 1.0]])
        frac_all = np.concatenate([frac, [0.5, 0.5]])

        tube_vertices = np.vstack([grid, caps])
        vertices.append(tube_vertices)
        axis_points.append(np.vstack([centers, caps]))

        r0, c0, nr, nc = block
        u = (c0 + 0.5 + frac_all * (nc - 1)) / atlas_cols
        v = (r0 + 0.5 + s_all * (nr - 1)) / atlas_rows
        uvs.append(np.column_stack([u, v]))
        weights.append(_blend_weights(tube, s_all))

        if tube.region is None:
            tube_labels = np.where(tube_vertices[:, 1] >= rest_waist(gender), Region.upper_cloth, Region.lower_cloth)
        else:
            tube_labels = np.full(len(tube_vertices), int(tube.region))
        labels.append(tube_labels.astype(np.int64))

        i, k = np.meshgrid(np.arange(rows_n), np.arange(segs_n), indexing="ij")
        a = offset + i * (segs_n + 1) + k
        b = a + 1
        c = a + segs_n + 2
        d = a + segs_n + 1
        quads = np.concatenate([
            np.stack([a, b, c], axis=-1).reshape(-1, 3),
            np.stack([a, c, d], axis=-1).reshape(-1, 3),
        ])
        ring0 = offset + np.arange(segs_n)
        ring_last = offset + rows_n * (segs_n + 1) + np.arange(segs_n)
        start_cap = np.column_stack([np.full(segs_n, offset + n_grid), ring0 + 1, ring0])
        end_cap = np.column_stack([np.full(segs_n, offset + n_grid + 1), ring_last, ring_last + 1])
        triangles.append(np.vstack([quads, start_cap, end_cap]))

        tubes.append(tube)
        offset += n_grid + 2

    all_vertices = np.vstack(vertices)
    template = TemplateMesh(
        vertices=all_vertices,
        triangles=np.vstack(triangles).astype(np.int64),
        uvs=np.vstack(uvs),
        weights=np.vstack(weights),
        labels=np.concatenate(labels),
        rest_joints=rest,
        axis_points=np.vstack(axis_points),
        tubes=tubes,
        atlas_size=atlas_size,
        gender=gender,
        waist_height=rest_waist(gender),
        height=float(all_vertices[:, 1].max()),
        waist_band=config.waist_band,
    )
    logger.debug(f"Built {gender.value} template: {len(all_vertices)} vertices, {len(template.triangles)} triangles")
    return template


def rest_waist(gender: Gender) -> float:
    return WAIST_HEIGHT * (FEMALE_SCALE if Gender(gender) == Gender.female else 1.0)


def build_templates(config: Optional[TemplateConfig] = None) -> Dict[Gender, TemplateMesh]:
    return {g: build_template(g, config) for g in Gender}


def sample_shape(rng: np.random.Generator) -> ShapeParams:
    """Gender uniform, fitness uniform in [0, 1], height ~ N(1.70, 0.08) clamped."""
    gender = Gender.female if rng.random() < 0.5 else Gender.male
    return ShapeParams(gender=gender, fitness=float(rng.random()), height=float(rng.normal(1.70, 0.08)))


def apply_shape(
    templates: Union[TemplateMesh, Mapping[Gender, TemplateMesh]],
    params: ShapeParams,
) -> TemplateMesh:
    """Girth scaling about the bone axes by lerp(0.9, 1.15, fitness), then uniform scale to the target height."""
    if isinstance(templates, TemplateMesh):
        template = templates
    else:
        template = templates[params.gender]
    girth = GIRTH_RANGE[0] + (GIRTH_RANGE[1] - GIRTH_RANGE[0]) * params.fitness
    cloth = (template.labels == Region.upper_cloth) | (template.labels == Region.lower_cloth)
    factor = np.where(cloth, girth, 1.0)[:, None]
    vertices = template.axis_points + factor * (template.vertices - template.axis_points)
    k = params.height / template.height
    return replace(
        template,
        vertices=vertices * k,
        rest_joints=template.rest_joints * k,
        axis_points=template.axis_points * k,
        waist_height=template.waist_height * k,
        height=template.height * k,
        waist_band=template.waist_band * k,
        tubes=[
            t.model_copy(update={
                "start": tuple(float(c) * k for c in t.start),
                "end": tuple(float(c) * k for c in t.end),
            })
            for t in template.tubes
        ],
    )


def solve_ik(template: TemplateMesh, target: Pose3D) -> BoneRotations:
    """Closed-form zero-twist IK: local rotation per bone aligning rest directions to the target's."""
    bone_directions(target)
    global_rot = global_bone_rotations(target.joints, template.rest_joints)
    local = np.empty_like(global_rot)
    for b in range(NUM_BONES):
        pb = PARENT_BONE[b]
        local[b] = global_rot[b] if pb < 0 else global_rot[pb].T @ global_rot[b]
    return BoneRotations.from_matrices(local)


def skin_mesh(
    template: TemplateMesh,
    rotations: BoneRotations,
    root: Optional[np.ndarray] = None,
) -> ArticulatedMesh:
    """Linear blend skinning of the template by per-bone rigid transforms."""
    joints, global_rot = forward_kinematics(template.rest_joints, rotations.as_matrices(), root)
    rest_parent = template.rest_joints[_PARENT_JOINT]
    posed_parent = joints[_PARENT_JOINT]
    # (14, V, 3): every vertex moved rigidly with every bone
    moved = np.einsum("bij,bvj->bvi", global_rot, template.vertices[None] - rest_parent[:, None]) + posed_parent[:, None]
    vertices = np.einsum("vb,bvi->vi", template.weights, moved)
    return ArticulatedMesh(
        vertices=vertices,
        triangles=template.triangles,
        uvs=template.uvs,
        joints=joints,
        template=template,
        rotations=rotations,
        bone_transforms=global_rot,
    )


def pose_mesh(template: TemplateMesh, pose: Pose3D) -> ArticulatedMesh:
    return skin_mesh(template, solve_ik(template, pose))


def _template_of(mesh: Mesh) -> TemplateMesh:
    if isinstance(mesh, TemplateMesh):
        return mesh
    if isinstance(mesh, ArticulatedMesh):
        return mesh.template
    raise InvalidInputError("mesh carries no region labels")


def submesh(mesh: Mesh, selected: np.ndarray) -> SubMesh:
    tri = mesh.triangles[np.all(selected[mesh.triangles], axis=1)]
    return SubMesh(mesh, np.flatnonzero(selected), tri)


def split_parts(mesh: Mesh) -> Tuple[SubMesh, SubMesh]:
    """Overlapping upper/lower clothing parts; the band around the waist seam belongs to both."""
    template = _template_of(mesh)
    labels = template.labels
    cloth = (labels == Region.upper_cloth) | (labels == Region.lower_cloth)
    band = cloth & (np.abs(template.vertices[:, 1] - template.waist_height) <= template.waist_band)
    upper = (labels == Region.upper_cloth) | band
    lower = (labels == Region.lower_cloth) | band
    return submesh(mesh, upper), submesh(mesh, lower)


def signed_volume(mesh: Mesh) -> float:
    v = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def export_obj(mesh: Mesh, path: Union[str, Path]) -> None:
    """Write positions, UVs, normals and faces as Wavefront OBJ."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.17g} {v:.17g}" for u, v in mesh.uvs]
    lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.normals]
    lines += [
        "f " + " ".join(f"{i + 1}/{i + 1}/{i + 1}" for i in tri)
        for tri in mesh.triangles
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_obj(path: Path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    vertices, uvs, faces = [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(c) for c in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(c) for c in parts[1:3]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(vertices), np.array(uvs), np.array(faces, dtype=np.int64)


def save_template(template: TemplateMesh, path: Union[str, Path]) -> Path:
    """Write ``<path>.obj`` plus the ``<path>.json`` sidecar (weights, labels, tubes)."""
    path = Path(path).with_suffix("")
    export_obj(template, path.with_suffix(".obj"))
    sidecar = TemplateSidecar(
        gender=template.gender,
        height=template.height,
        waist_height=template.waist_height,
        rest_joints=[tuple(j) for j in template.rest_joints.tolist()],
        labels=template.labels.tolist(),
        weights=template.weights.tolist(),
        axis_points=[tuple(p) for p in template.axis_points.tolist()],
        tubes=template.tubes,
        atlas_size=template.atlas_size,
    )
    payload = sidecar.model_dump(mode="json")
    payload["waist_band"] = template.waist_band
    path.with_suffix(".json").write_text(json.dumps(payload), encoding="utf-8")
    logger.info(f"Saved {template.gender.value} template to {path}.obj")
    return path.with_suffix(".obj")


def load_template(path: Union[str, Path]) -> TemplateMesh:
    path = Path(path).with_suffix("")
    obj_path, json_path = path.with_suffix(".obj"), path.with_suffix(".json")
    if not obj_path.exists() or not json_path.exists():
        raise AssetError(f"template {path} needs both .obj and .json files")
    try:
        payload = json.loads(json_path.read_text(encoding="utf-8"))
        waist_band = float(payload.pop("waist_band", 0.03))
        sidecar = TemplateSidecar.model_validate(payload)
    except (json.JSONDecodeError, ValidationError) as e:
        raise AssetError(f"malformed template sidecar {json_path}: {e}")
    vertices, uvs, triangles = _read_obj(obj_path)
    if len(vertices) != len(sidecar.labels) or len(uvs) != len(vertices):
        raise AssetError(f"template {path}: OBJ and sidecar disagree on vertex count")
    return TemplateMesh(
        vertices=vertices,
        triangles=triangles,
        uvs=uvs,
        weights=np.array(sidecar.weights),
        labels=np.array(sidecar.labels, dtype=np.int64),
        rest_joints=np.array(sidecar.rest_joints),
        axis_points=np.array(sidecar.axis_points),
        tubes=list(sidecar.tubes),
        atlas_size=tuple(sidecar.atlas_size),
        gender=sidecar.gender,
        waist_height=sidecar.waist_height,
        height=sidecar.height,
        waist_band=waist_band,
    )
