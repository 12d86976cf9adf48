"""Skeleton topology, pose representation, normalization, alignment and error metrics.

Body frame convention: y up, x towards the subject's left, z forward, meters.
Bone ``k`` ends at joint ``k + 1``; parent joint codes are always lower than child codes.
"""
import json
import logging
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.spatial.transform import Rotation

from app.schemas.pose import JointLimit, JointLimitTable, PoseFrame, PoseRecord
from app.utils.errors import AssetError, DegenerateGeometryError, InvalidInputError

logger = logging.getLogger(__name__)

NUM_JOINTS = 15
NUM_BONES = 14
BONE_EPS = 1e-9
DEFAULT_LIMITS_PATH = Path(__file__).resolve().parent.parent / "data" / "joint_limits.json"


class JointId(IntEnum):
    pelvis = 0
    neck = 1
    head = 2
    l_shoulder = 3
    l_elbow = 4
    l_wrist = 5
    r_shoulder = 6
    r_elbow = 7
    r_wrist = 8
    l_hip = 9
    l_knee = 10
    l_ankle = 11
    r_hip = 12
    r_knee = 13
    r_ankle = 14


JOINT_NAMES = [j.name for j in JointId]

# parent joint per joint code; the root maps to itself
PARENTS = np.array([0, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13])

BONES: List[Tuple[int, int]] = [(int(PARENTS[c]), c) for c in range(1, NUM_JOINTS)]

BONE_NAMES = [
    "spine", "head",
    "l_clavicle", "l_upper_arm", "l_forearm",
    "r_clavicle", "r_upper_arm", "r_forearm",
    "l_pelvis", "l_thigh", "l_shin",
    "r_pelvis", "r_thigh", "r_shin",
]

# Parent bone per bone. The spine is the root bone; bones hanging off the pelvis follow it.
PARENT_BONE = np.array([-1, 0, 0, 2, 3, 0, 5, 6, 0, 8, 9, 0, 11, 12])

# Male rest pose (T-pose), feet at y ~ 0
REST_JOINTS = np.array([
    [0.00, 0.98, 0.00],   # pelvis
    [0.00, 1.50, 0.00],   # neck
    [0.00, 1.64, 0.00],   # head
    [0.19, 1.46, 0.00],   # l_shoulder
    [0.47, 1.46, 0.00],   # l_elbow
    [0.73, 1.46, 0.00],   # l_wrist
    [-0.19, 1.46, 0.00],  # r_shoulder
    [-0.47, 1.46, 0.00],  # r_elbow
    [-0.73, 1.46, 0.00],  # r_wrist
    [0.10, 0.92, 0.00],   # l_hip
    [0.10, 0.52, 0.00],   # l_knee
    [0.10, 0.09, 0.00],   # l_ankle
    [-0.10, 0.92, 0.00],  # r_hip
    [-0.10, 0.52, 0.00],  # r_knee
    [-0.10, 0.09, 0.00],  # r_ankle
])

_PARENT_IDX = np.array([p for p, _ in BONES])
_CHILD_IDX = np.array([c for _, c in BONES])


@dataclass(frozen=True, eq=False)
class Pose3D:
    joints: np.ndarray
    frame: PoseFrame = PoseFrame.body

    def __post_init__(self):
        joints = np.array(self.joints, dtype=np.float64)
        if joints.shape != (NUM_JOINTS, 3):
            raise InvalidInputError(f"pose must have shape (15, 3), got {joints.shape}")
        if not np.all(np.isfinite(joints)):
            raise InvalidInputError("pose contains non-finite coordinates")
        joints.setflags(write=False)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "frame", PoseFrame(self.frame))

    def __eq__(self, other):
        if not isinstance(other, Pose3D):
            return NotImplemented
        return self.frame == other.frame and np.array_equal(self.joints, other.joints)

    def __hash__(self):
        return hash((self.frame, self.joints.tobytes()))

    @property
    def pelvis(self) -> np.ndarray:
        return self.joints[JointId.pelvis]

    def with_joints(self, joints: np.ndarray) -> "Pose3D":
        return Pose3D(joints, self.frame)

    def to_record(self, pose_id: Optional[str] = None) -> PoseRecord:
        return PoseRecord(id=pose_id, frame=self.frame, joints=[tuple(j) for j in self.joints.tolist()])

    @classmethod
    def from_record(cls, record: PoseRecord) -> "Pose3D":
        return cls(np.array(record.joints, dtype=np.float64), record.frame)


@dataclass(frozen=True, eq=False)
class PoseVector:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.shape != (NUM_JOINTS * 3,):
            raise InvalidInputError(f"pose vector must have 45 values, got {values.size}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, PoseVector):
            return NotImplemented
        return self.normalized == other.normalized and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.normalized, self.values.tobytes()))


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        if not self.scale > 0:
            raise InvalidInputError(f"similarity scale must be positive, got {self.scale}")
        if rotation.shape != (3, 3) or not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9):
            raise InvalidInputError("similarity rotation must be orthonormal")
        if np.linalg.det(rotation) < 0:
            raise InvalidInputError("similarity rotation must be proper (det = +1)")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def flatten(pose: Pose3D, normalized: bool = False) -> PoseVector:
    """Pose3D -> 45-vector in joint-code order."""
    return PoseVector(pose.joints.reshape(-1).copy(), normalized)


def unflatten(vector: Union[PoseVector, Sequence[float], np.ndarray], frame: PoseFrame = PoseFrame.body) -> Pose3D:
    """45-vector -> Pose3D."""
    values = vector.values if isinstance(vector, PoseVector) else np.asarray(vector, dtype=np.float64).reshape(-1)
    if values.size != NUM_JOINTS * 3:
        raise InvalidInputError(f"pose vector must have 45 values, got {values.size}")
    return Pose3D(values.reshape(NUM_JOINTS, 3).copy(), frame)


def bone_vectors(joints: np.ndarray) -> np.ndarray:
    """(15, 3) joints -> (14, 3) parent-to-child vectors."""
    joints = np.asarray(joints)
    return joints[_CHILD_IDX] - joints[_PARENT_IDX]


def bone_lengths(pose: Pose3D) -> np.ndarray:
    return np.linalg.norm(bone_vectors(pose.joints), axis=1)


def bone_directions(pose: Pose3D) -> np.ndarray:
    """Unit bone vectors; raises on degenerate bones."""
    vectors = bone_vectors(pose.joints)
    lengths = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(lengths <= BONE_EPS)
    if bad.size:
        names = ", ".join(BONE_NAMES[b] for b in bad)
        raise DegenerateGeometryError(f"degenerate bone(s): {names}", {"bones": bad.tolist()})
    return vectors / lengths[:, None]


def normalize_pose(pose: Pose3D, total: float = 1.0) -> Pose3D:
    """Scale about the pelvis so the 14 bone lengths sum to ``total``."""
    bone_directions(pose)
    length_sum = float(bone_lengths(pose).sum())
    pelvis = pose.pelvis
    return pose.with_joints(pelvis + (pose.joints - pelvis) * (total / length_sum))


def denormalize(pose: Pose3D, scale: float) -> Pose3D:
    """Inverse of normalize_pose given the original bone-length sum."""
    if not scale > 0:
        raise InvalidInputError(f"denormalization scale must be positive, got {scale}")
    pelvis = pose.pelvis
    return pose.with_joints(pelvis + (pose.joints - pelvis) * scale)


def similarity_align(source: Pose3D, target: Pose3D) -> Tuple[SimilarityTransform, Pose3D]:
    """Closed-form least-squares similarity (Umeyama) mapping source onto target."""
    src = source.joints
    tgt = target.joints
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    x = src - mu_s
    y = tgt - mu_t

    src_sv = np.linalg.svd(x, compute_uv=False)
    if src_sv[0] <= BONE_EPS or src_sv[1] < 1e-9 * src_sv[0]:
        raise DegenerateGeometryError("source joints are collinear or coincident")
    if np.linalg.norm(y) <= BONE_EPS:
        raise DegenerateGeometryError("target joints are all coincident")

    n = src.shape[0]
    cov = y.T @ x / n
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rotation = u @ np.diag(s) @ vt
    var_s = float((x ** 2).sum() / n)
    scale = float((d * s).sum() / var_s)
    translation = mu_t - scale * rotation @ mu_s

    transform = SimilarityTransform(scale, rotation, translation)
    aligned = Pose3D(transform.apply(src), target.frame)
    return transform, aligned


def pose_error(pred: Pose3D, gt: Pose3D) -> Tuple[np.ndarray, float]:
    """Per-joint Euclidean error and its sum."""
    if pred.frame != gt.frame:
        raise InvalidInputError(f"frame mismatch: {pred.frame.value} vs {gt.frame.value}")
    per_joint = np.linalg.norm(pred.joints - gt.joints, axis=1)
    return per_joint, float(per_joint.sum())


def pck_curve(errors: Sequence[np.ndarray], thresholds: Sequence[float]) -> np.ndarray:
    """Fraction of (pose, joint) pairs with error <= t for each threshold t."""
    if len(errors) == 0:
        raise InvalidInputError("pck_curve needs at least one error array")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.ndim != 1 or thresholds.size == 0:
        raise InvalidInputError("thresholds must be a nonempty 1-D sequence")
    if np.any(thresholds < 0) or np.any(np.diff(thresholds) <= 0):
        raise InvalidInputError("thresholds must be nonnegative and strictly increasing")
    flat = np.sort(np.concatenate([np.asarray(e, dtype=np.float64).reshape(-1) for e in errors]))
    counts = np.searchsorted(flat, thresholds, side="right")
    return counts / flat.size


def torso_frame(joints: np.ndarray) -> np.ndarray:
    """Rotation with columns (left, up, forward) built from the spine and hip axis."""
    joints = np.asarray(joints)
    up = joints[JointId.neck] - joints[JointId.pelvis]
    up_len = np.linalg.norm(up)
    if up_len <= BONE_EPS:
        raise DegenerateGeometryError("spine has zero length")
    up = up / up_len
    hips = joints[JointId.l_hip] - joints[JointId.r_hip]
    left = hips - np.dot(hips, up) * up
    left_len = np.linalg.norm(left)
    if left_len <= BONE_EPS:
        raise DegenerateGeometryError("hip axis is parallel to the spine")
    left = left / left_len
    forward = np.cross(left, up)
    return np.column_stack([left, up, forward])


def perpendicular_axis(a: np.ndarray) -> np.ndarray:
    """Fixed rule for an axis orthogonal to ``a``: cross with x, or with y when ``a`` is near x."""
    ref = np.array([0.0, 1.0, 0.0]) if abs(a[0]) > 0.9 else np.array([1.0, 0.0, 0.0])
    axis = np.cross(a, ref)
    return axis / np.linalg.norm(axis)


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal (zero-twist) rotation matrix taking unit vector a onto unit vector b."""
    axis = np.cross(a, b)
    sin = np.linalg.norm(axis)
    cos = float(np.dot(a, b))
    if sin < 1e-12:
        if cos > 0:
            return np.eye(3)
        return Rotation.from_rotvec(np.pi * perpendicular_axis(a)).as_matrix()
    angle = np.arctan2(sin, cos)
    return Rotation.from_rotvec(axis / sin * angle).as_matrix()


def global_bone_rotations(joints: np.ndarray, rest_joints: np.ndarray = REST_JOINTS) -> np.ndarray:
    """Global rotation per bone taking its rest direction to its posed direction.

    The spine carries the full torso rotation; every other bone adds the minimal
    rotation on top of its parent bone's rotation (zero twist).
    """
    directions = bone_directions(Pose3D(joints))
    rest_dirs = bone_directions(Pose3D(rest_joints))
    rotations = np.empty((NUM_BONES, 3, 3))
    rotations[0] = torso_frame(joints) @ torso_frame(rest_joints).T
    for b in range(1, NUM_BONES):
        parent = rotations[PARENT_BONE[b]]
        carried = parent @ rest_dirs[b]
        rotations[b] = rotation_between(carried, directions[b]) @ parent
    return rotations


def forward_kinematics(
    rest_joints: np.ndarray,
    local_rotations: np.ndarray,
    root: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Pose joints from (14, 3, 3) local rotations; returns (joints, global rotations)."""
    rest_joints = np.asarray(rest_joints, dtype=np.float64)
    local_rotations = np.asarray(local_rotations, dtype=np.float64)
    joints = np.empty_like(rest_joints)
    joints[0] = rest_joints[0] if root is None else root
    rotations = np.empty((NUM_BONES, 3, 3))
    for b, (p, c) in enumerate(BONES):
        pb = PARENT_BONE[b]
        rotations[b] = local_rotations[b] if pb < 0 else rotations[pb] @ local_rotations[b]
        joints[c] = joints[p] + rotations[b] @ (rest_joints[c] - rest_joints[p])
    return joints, rotations


def swing_angles(local_dir: np.ndarray, rest_dir: np.ndarray) -> Tuple[float, float]:
    """Swing of ``local_dir`` away from ``rest_dir`` as two angles in degrees.

    First axis is +z projected off the rest direction; second is rest x first.
    """
    e1 = np.array([0.0, 0.0, 1.0]) - rest_dir[2] * rest_dir
    if np.linalg.norm(e1) < 1e-9:
        e1 = np.array([0.0, 1.0, 0.0]) - rest_dir[1] * rest_dir
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(rest_dir, e1)
    along = float(np.dot(local_dir, rest_dir))
    off = local_dir - along * rest_dir
    off_len = np.linalg.norm(off)
    if off_len < 1e-12:
        return (0.0, 0.0) if along > 0 else (180.0, 0.0)
    theta = np.degrees(np.arctan2(off_len, along))
    return float(theta * np.dot(off, e1) / off_len), float(theta * np.dot(off, e2) / off_len)


@lru_cache(maxsize=8)
def _load_limits_cached(path: str) -> Dict[str, JointLimit]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            table = JointLimitTable.model_validate(json.load(f)).root
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise AssetError(f"cannot load joint-limit table {path}: {e}")
    missing = [name for name in BONE_NAMES if name not in table]
    if missing:
        raise AssetError(f"joint-limit table {path} lacks bones: {missing}")
    return table


def load_joint_limits(path: Optional[Union[str, Path]] = None) -> Dict[str, JointLimit]:
    """Load the per-bone angle-limit table (defaults to the shipped data file)."""
    return _load_limits_cached(str(path or DEFAULT_LIMITS_PATH))


def joint_limit_violations(
    pose: Pose3D,
    limits: Optional[Dict[str, JointLimit]] = None,
    rest_joints: np.ndarray = REST_JOINTS,
) -> List[str]:
    """Names of bones whose swing relative to the parent bone leaves the limit table."""
    limits = limits if limits is not None else load_joint_limits()
    try:
        rotations = global_bone_rotations(pose.joints, rest_joints)
        directions = bone_directions(pose)
    except DegenerateGeometryError as e:
        logger.debug(f"Joint-limit check on degenerate pose: {e}")
        return ["degenerate"]
    rest_dirs = bone_directions(Pose3D(rest_joints))
    rest_frame = torso_frame(rest_joints)
    tol = 1e-9
    violations = []
    for b, name in enumerate(BONE_NAMES):
        pb = PARENT_BONE[b]
        frame = rotations[0] @ rest_frame if pb < 0 else rotations[pb]
        reference = rest_dirs[b] if pb >= 0 else rest_frame.T @ rest_dirs[b]
        forward, side = swing_angles(frame.T @ directions[b], reference)
        limit = limits[name]
        if not (limit.forward.lo - tol <= forward <= limit.forward.hi + tol) or \
                not (limit.side.lo - tol <= side <= limit.side.hi + tol):
            violations.append(name)
    return violations


def check_joint_limits(
    pose: Pose3D,
    limits: Optional[Dict[str, JointLimit]] = None,
    rest_joints: np.ndarray = REST_JOINTS,
) -> bool:
    """True iff every bone's swing relative to its parent lies inside the limit table."""
    return not joint_limit_violations(pose, limits, rest_joints)


def load_pose_records(path: Union[str, Path]) -> List[PoseRecord]:
    """Read a pose file: a JSON record, a JSON list of records, or JSON lines."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise AssetError(f"cannot read pose file {path}: {e}")
    try:
        stripped = text.strip()
        if not stripped:
            return []
        if path.suffix == ".jsonl":
            payloads = [json.loads(line) for line in stripped.splitlines() if line.strip()]
        else:
            data = json.loads(stripped)
            payloads = data if isinstance(data, list) else [data]
        return [PoseRecord.model_validate(p) for p in payloads]
    except (json.JSONDecodeError, ValidationError) as e:
        raise InvalidInputError(f"malformed pose file {path}: {e}")


def load_poses(path: Union[str, Path]) -> List[Pose3D]:
    return [Pose3D.from_record(r) for r in load_pose_records(path)]


def save_poses(path: Union[str, Path], poses: Sequence[Pose3D], ids: Optional[Sequence[str]] = None) -> None:
    """Write poses as a JSON list of records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [
        p.to_record(ids[i] if ids is not None else None).model_dump(mode="json", exclude_none=True)
        for i, p in enumerate(poses)
    ]
    path.write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(records)} poses to {path}")
