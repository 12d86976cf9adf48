import logging
from functools import lru_cache
from typing import List

import numpy as np
from fastapi import APIRouter, HTTPException, status

from app.config import settings
from app.schemas.pose import AlignRequest, AlignResponse, LimitCheckResponse, PoseBatch, PoseRecord, SampleRequest
from app.utils.pose_prior import PriorModel, load_prior, sample_poses
from app.utils.skeleton import (
    Pose3D,
    joint_limit_violations,
    load_joint_limits,
    normalize_pose,
    pose_error,
    similarity_align,
)

router = APIRouter(prefix="/poses", tags=["poses"])
logger = logging.getLogger(__name__)


@lru_cache(maxsize=4)
def _prior(path: str) -> PriorModel:
    return load_prior(path)


@router.post("/normalize", response_model=List[PoseRecord])
def normalize(batch: PoseBatch):
    """Scale every pose about its pelvis so its bone lengths sum to 1."""
    return [normalize_pose(Pose3D.from_record(r)).to_record(r.id) for r in batch.poses]


@router.post("/align", response_model=AlignResponse)
def align(request: AlignRequest):
    source = Pose3D.from_record(request.source)
    target = Pose3D.from_record(request.target)
    transform, aligned = similarity_align(source, target)
    _, residual = pose_error(aligned, target)
    return AlignResponse(
        scale=transform.scale,
        rotation=np.asarray(transform.rotation).tolist(),
        translation=np.asarray(transform.translation).tolist(),
        aligned=aligned.to_record(request.source.id),
        residual=residual,
    )


@router.post("/check-limits", response_model=LimitCheckResponse)
def check_limits(batch: PoseBatch):
    limits = load_joint_limits()
    violations = [joint_limit_violations(Pose3D.from_record(r), limits) for r in batch.poses]
    return LimitCheckResponse(valid=[not v for v in violations], violations=violations)


@router.post("/sample", response_model=List[PoseRecord])
def sample(request: SampleRequest):
    """Draw poses from the prior configured by PRIOR_MODEL_PATH."""
    if not settings.prior_model_path:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="No pose prior configured"
        )
    model = _prior(settings.prior_model_path)
    poses = sample_poses(model, request.count, request.seed)
    logger.info(f"Sampled {len(poses)} poses with seed {request.seed}")
    return [p.to_record(f"sample_{i}") for i, p in enumerate(poses)]
