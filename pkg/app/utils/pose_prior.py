"""Compositional pose prior.

Five parts (torso with head, two arms, two legs) hang off the torso. Each part is a
Gaussian KDE over its bone directions in the torso frame, conditioned on a quantized
torso-facing bin. Sampling draws a bin, then each part independently.
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.spatial import cKDTree

from app.schemas.pipeline import PriorConfig
from app.schemas.pose import JointLimit
from app.schemas.prior import CoverageReport, PartKernels, PriorModelFile
from app.utils.errors import AssetError, InvalidInputError, SamplingError
from app.utils.raster import direction_from_angles
from app.utils.seeds import mix_seed
from app.utils.skeleton import (
    BONES,
    NUM_BONES,
    REST_JOINTS,
    JointId,
    Pose3D,
    bone_directions,
    bone_lengths,
    flatten,
    joint_limit_violations,
    load_joint_limits,
    load_poses,
    normalize_pose,
    torso_frame,
)

logger = logging.getLogger(__name__)

# part -> bones (torso first; it is the dependency root)
PART_BONES: Dict[str, List[int]] = {
    "torso": [0, 1, 2, 5, 8, 11],
    "l_arm": [3, 4],
    "r_arm": [6, 7],
    "l_leg": [9, 10],
    "r_leg": [12, 13],
}
PART_ATTACHMENT = {
    "torso": JointId.pelvis,
    "l_arm": JointId.l_shoulder,
    "r_arm": JointId.r_shoulder,
    "l_leg": JointId.l_hip,
    "r_leg": JointId.r_hip,
}
PART_NAMES = list(PART_BONES)


def part_joints(part: str) -> List[int]:
    """Joint codes of a part, attachment joint first."""
    return [int(PART_ATTACHMENT[part])] + [BONES[b][1] for b in PART_BONES[part]]


def torso_bin_directions() -> np.ndarray:
    """24 quantized torso-facing directions: 8 azimuths x 3 elevations."""
    return np.array([
        direction_from_angles(elev, az)
        for elev in (-40.0, 0.0, 40.0)
        for az in range(0, 360, 45)
    ])


BIN_DIRECTIONS = torso_bin_directions()


@dataclass
class PartSample:
    part: str
    features: np.ndarray  # 3 values per bone, unit directions in the torso frame


@dataclass
class EncodedPose:
    parts: List[PartSample]
    torso_bin: int
    root: np.ndarray      # world up (3) + forward (3)

    def part(self, name: str) -> PartSample:
        return self.parts[PART_NAMES.index(name)]


def encode_parts(pose: Union[Pose3D, np.ndarray]) -> EncodedPose:
    """Torso-local bone directions per part plus the torso orientation bin."""
    if not isinstance(pose, Pose3D):
        pose = Pose3D(np.asarray(pose, dtype=np.float64))
    directions = bone_directions(pose)
    frame = torso_frame(pose.joints)
    local = directions @ frame
    parts = [PartSample(name, local[bones].reshape(-1)) for name, bones in PART_BONES.items()]
    forward = frame[:, 2]
    torso_bin = int(np.argmax(BIN_DIRECTIONS @ forward))
    return EncodedPose(parts, torso_bin, np.concatenate([frame[:, 1], forward]))


def silverman_bandwidth(features: np.ndarray, scale: float = 1.0, floor: float = 1e-3) -> np.ndarray:
    """Per-dimension rule of thumb 0.9 * min(std, IQR / 1.34) * n^(-1/5)."""
    n = len(features)
    std = features.std(axis=0, ddof=1) if n > 1 else np.zeros(features.shape[1])
    q75, q25 = np.percentile(features, [75, 25], axis=0)
    spread = np.where((q75 - q25) > 0, np.minimum(std, (q75 - q25) / 1.34), std)
    return np.maximum(0.9 * spread * n ** (-0.2) * scale, floor)


@dataclass(frozen=True)
class PriorModel:
    """Fitted prior; immutable after fitting and shared freely between threads."""

    bin_counts: np.ndarray
    bins: np.ndarray
    roots: np.ndarray
    root_bandwidth: np.ndarray
    centers: Dict[str, np.ndarray]
    bandwidths: Dict[str, np.ndarray]
    bone_lengths: np.ndarray
    root_position: np.ndarray
    dataset_size: int
    rejected: int = 0
    sources: Dict[str, int] = field(default_factory=dict)

    def members(self, torso_bin: int) -> np.ndarray:
        return np.flatnonzero(self.bins == torso_bin)


def fit_prior(
    dataset: Sequence[Pose3D],
    config: Optional[PriorConfig] = None,
    limits: Optional[Dict[str, JointLimit]] = None,
    sources: Optional[Dict[str, int]] = None,
    rest_joints: np.ndarray = REST_JOINTS,
) -> PriorModel:
    """Fit the per-part KDEs; poses failing the joint-limit check are dropped and counted."""
    config = config or PriorConfig()
    limits = limits if limits is not None else load_joint_limits()
    encoded: List[EncodedPose] = []
    rejected = 0
    for i, pose in enumerate(dataset):
        violations = joint_limit_violations(pose, limits, rest_joints)
        if violations:
            rejected += 1
            logger.warning(f"Rejected training pose {i}: {', '.join(violations)}")
            continue
        encoded.append(encode_parts(pose))
    if not encoded:
        raise InvalidInputError("cannot fit a prior on an empty dataset", {"rejected": rejected})

    def bandwidth(features: np.ndarray) -> np.ndarray:
        if config.bandwidth is not None:
            return np.full(features.shape[1], float(config.bandwidth))
        return silverman_bandwidth(features, config.bandwidth_scale, config.min_bandwidth)

    centers = {
        name: np.stack([e.parts[k].features for e in encoded])
        for k, name in enumerate(PART_NAMES)
    }
    roots = np.stack([e.root for e in encoded])
    bins = np.array([e.torso_bin for e in encoded], dtype=np.int64)
    model = PriorModel(
        bin_counts=np.bincount(bins, minlength=len(BIN_DIRECTIONS)),
        bins=bins,
        roots=roots,
        root_bandwidth=bandwidth(roots),
        centers=centers,
        bandwidths={name: bandwidth(c) for name, c in centers.items()},
        bone_lengths=bone_lengths(Pose3D(rest_joints)),
        root_position=np.asarray(rest_joints[JointId.pelvis], dtype=np.float64),
        dataset_size=len(encoded),
        rejected=rejected,
        sources=dict(sources or {}),
    )
    logger.info(
        f"Fitted pose prior on {model.dataset_size} poses ({rejected} rejected), "
        f"{int((model.bin_counts > 0).sum())} torso bins occupied"
    )
    return model


def _unit_rows(features: np.ndarray) -> np.ndarray:
    rows = features.reshape(-1, 3)
    norm = np.linalg.norm(rows, axis=1, keepdims=True)
    return (rows / np.where(norm > 0, norm, 1.0)).reshape(-1)


def _kernel_draw(centers: np.ndarray, bandwidth: np.ndarray, index: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(size=centers.shape[1]) * bandwidth
    return _unit_rows(centers[index] + noise)


def decode_pose(model: PriorModel, local: np.ndarray, root: np.ndarray) -> Pose3D:
    """Joint positions from (14, 3) torso-local directions and the world up/forward pair."""
    up = root[:3] / np.linalg.norm(root[:3])
    forward = root[3:] - np.dot(root[3:], up) * up
    forward = forward / np.linalg.norm(forward)
    frame = np.column_stack([np.cross(up, forward), up, forward])
    directions = local @ frame.T
    joints = np.empty((len(BONES) + 1, 3))
    joints[JointId.pelvis] = model.root_position
    for b, (p, c) in enumerate(BONES):
        joints[c] = joints[p] + model.bone_lengths[b] * directions[b]
    return Pose3D(joints)


def _draw_candidate(model: PriorModel, rng: np.random.Generator) -> Pose3D:
    torso_bin = int(rng.choice(len(model.bin_counts), p=model.bin_counts / model.bin_counts.sum()))
    members = model.members(torso_bin)
    local = np.empty((NUM_BONES, 3))
    root = None
    for name in PART_NAMES:
        k = int(members[rng.integers(len(members))])
        features = _kernel_draw(model.centers[name], model.bandwidths[name], k, rng)
        local[PART_BONES[name]] = features.reshape(-1, 3)
        if name == "torso":
            root = _kernel_draw(model.roots, model.root_bandwidth, k, rng)
    return decode_pose(model, local, root)


def sample_pose(
    model: PriorModel,
    rng: np.random.Generator,
    max_attempts: int = 100,
    limits: Optional[Dict[str, JointLimit]] = None,
    rest_joints: np.ndarray = REST_JOINTS,
) -> Pose3D:
    """Ancestral sample, resampled until it passes the joint-limit check."""
    limits = limits if limits is not None else load_joint_limits()
    rejected_bones: Counter = Counter()
    for attempt in range(max_attempts):
        candidate = _draw_candidate(model, rng)
        violations = joint_limit_violations(candidate, limits, rest_joints)
        if not violations:
            if attempt:
                logger.debug(f"Pose sample accepted after {attempt} rejections")
            return candidate
        rejected_bones.update(violations)
    raise SamplingError(
        f"no valid pose after {max_attempts} attempts",
        {"attempts": max_attempts, "violations": dict(rejected_bones.most_common())},
    )


def sample_poses(
    model: PriorModel,
    count: int,
    seed: int,
    config: Optional[PriorConfig] = None,
    limits: Optional[Dict[str, JointLimit]] = None,
) -> List[Pose3D]:
    """``count`` samples; sample i uses its own stream seeded by mix_seed(seed, i)."""
    config = config or PriorConfig()
    limits = limits if limits is not None else load_joint_limits()
    return [
        sample_pose(model, np.random.default_rng(mix_seed(seed, i)), config.max_attempts, limits)
        for i in range(count)
    ]


def _pose_features(poses: Sequence[Pose3D]) -> np.ndarray:
    rows = []
    for pose in poses:
        normalized = normalize_pose(pose)
        rows.append(flatten(normalized.with_joints(normalized.joints - normalized.pelvis)).values)
    return np.stack(rows)


@dataclass
class CoverageStats:
    reference_to_samples: np.ndarray
    samples_to_reference: np.ndarray
    dataset_size: Optional[int] = None

    @property
    def mean_reference_to_samples(self) -> float:
        return float(self.reference_to_samples.mean())

    @property
    def mean_samples_to_reference(self) -> float:
        return float(self.samples_to_reference.mean())

    def to_report(self) -> CoverageReport:
        return CoverageReport(
            mean_reference_to_samples=self.mean_reference_to_samples,
            mean_samples_to_reference=self.mean_samples_to_reference,
            reference_count=len(self.reference_to_samples),
            sample_count=len(self.samples_to_reference),
        )


def coverage_stats(
    model: Optional[PriorModel],
    samples: Sequence[Pose3D],
    reference: Sequence[Pose3D],
) -> CoverageStats:
    """Nearest-neighbour distances both ways between sample and reference sets (normalized, pelvis-centered)."""
    if len(samples) == 0 or len(reference) == 0:
        raise InvalidInputError("coverage needs nonempty sample and reference sets")
    s = _pose_features(samples)
    r = _pose_features(reference)
    ref_to_samples, _ = cKDTree(s).query(r, k=1)
    samples_to_ref, _ = cKDTree(r).query(s, k=1)
    return CoverageStats(
        np.atleast_1d(ref_to_samples), np.atleast_1d(samples_to_ref),
        model.dataset_size if model is not None else None,
    )


def find_pose_files(directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    if directory.is_file():
        return [directory]
    return sorted(p for p in directory.rglob("*") if p.suffix in (".json", ".jsonl"))


def fit_prior_from_dir(
    directory: Union[str, Path],
    config: Optional[PriorConfig] = None,
    limits: Optional[Dict[str, JointLimit]] = None,
) -> PriorModel:
    """Pool every pose file under ``directory`` into one training set."""
    files = find_pose_files(directory)
    if not files:
        raise AssetError(f"no pose files under {directory}")
    poses: List[Pose3D] = []
    sources: Dict[str, int] = {}
    for path in files:
        loaded = load_poses(path)
        sources[str(path.relative_to(directory)) if path != Path(directory) else path.name] = len(loaded)
        poses.extend(loaded)
    logger.info(f"Loaded {len(poses)} poses from {len(files)} files")
    return fit_prior(poses, config, limits, sources)


def save_prior(model: PriorModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = PriorModelFile(
        bin_directions=[tuple(d) for d in BIN_DIRECTIONS.tolist()],
        bin_counts=model.bin_counts.tolist(),
        bins=model.bins.tolist(),
        roots=model.roots.tolist(),
        root_bandwidth=model.root_bandwidth.tolist(),
        parts={
            name: PartKernels(
                bones=PART_BONES[name],
                centers=model.centers[name].tolist(),
                bandwidth=model.bandwidths[name].tolist(),
            )
            for name in PART_NAMES
        },
        bone_lengths=model.bone_lengths.tolist(),
        root_position=tuple(model.root_position.tolist()),
        dataset_size=model.dataset_size,
        rejected=model.rejected,
        sources=model.sources,
    )
    path.write_text(document.model_dump_json(), encoding="utf-8")
    logger.info(f"Saved pose prior to {path}")
    return path


def load_prior(path: Union[str, Path]) -> PriorModel:
    path = Path(path)
    try:
        document = PriorModelFile.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except OSError as e:
        raise AssetError(f"cannot read prior model {path}: {e}")
    except (json.JSONDecodeError, ValidationError) as e:
        raise AssetError(f"malformed prior model {path}: {e}")
    if set(document.parts) != set(PART_NAMES):
        raise AssetError(f"prior model {path} has parts {sorted(document.parts)}")
    if len(document.bin_counts) != len(BIN_DIRECTIONS):
        raise AssetError(f"prior model {path} has {len(document.bin_counts)} torso bins")
    return PriorModel(
        bin_counts=np.array(document.bin_counts, dtype=np.int64),
        bins=np.array(document.bins, dtype=np.int64),
        roots=np.array(document.roots, dtype=np.float64),
        root_bandwidth=np.array(document.root_bandwidth),
        centers={name: np.array(document.parts[name].centers, dtype=np.float64) for name in PART_NAMES},
        bandwidths={name: np.array(document.parts[name].bandwidth) for name in PART_NAMES},
        bone_lengths=np.array(document.bone_lengths),
        root_position=np.array(document.root_position),
        dataset_size=document.dataset_size,
        rejected=document.rejected,
        sources=document.sources,
    )
