from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, RootModel, field_validator, model_validator


class PoseFrame(str, Enum):
    body = "body"
    camera = "camera"


class PoseRecord(BaseModel):
    """One pose in a pose file: {"frame": ..., "joints": [[x, y, z] x 15]}."""

    id: Optional[str] = None
    frame: PoseFrame = PoseFrame.body
    joints: List[Tuple[float, float, float]]

    @field_validator("joints")
    @classmethod
    def validate_joint_count(cls, v):
        if len(v) != 15:
            raise ValueError(f"expected 15 joints, got {len(v)}")
        return v


class AngleRange(BaseModel):
    lo: float = Field(ge=-180.0, le=180.0)
    hi: float = Field(ge=-180.0, le=180.0)

    @model_validator(mode="after")
    def validate_order(self):
        if self.lo > self.hi:
            raise ValueError(f"range lower bound {self.lo} exceeds upper bound {self.hi}")
        return self


class JointLimit(BaseModel):
    # swing towards the forward axis / swing about the second axis, degrees
    forward: AngleRange
    side: AngleRange


class JointLimitTable(RootModel[Dict[str, JointLimit]]):
    pass


class PoseBatch(BaseModel):
    poses: List[PoseRecord]


class AlignRequest(BaseModel):
    source: PoseRecord
    target: PoseRecord


class AlignResponse(BaseModel):
    scale: float
    rotation: List[List[float]]
    translation: List[float]
    aligned: PoseRecord
    residual: float


class LimitCheckResponse(BaseModel):
    valid: List[bool]
    violations: List[List[str]]    # offending bones per pose


class SampleRequest(BaseModel):
    count: int = Field(default=1, gt=0, le=1000)
    seed: int = Field(default=0, ge=0)
