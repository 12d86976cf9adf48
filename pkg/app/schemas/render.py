import math
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class CameraParams(BaseModel):
    """Pinhole camera orbiting a target point. Angles in degrees, distance in meters, focal in pixels."""

    elevation: float = 0.0
    azimuth: float = 0.0
    in_plane: float = 0.0
    distance: float = Field(default=4.0, gt=0)
    focal: float = Field(default=160.0, gt=0)
    principal_point: Optional[Tuple[float, float]] = None
    image_size: Tuple[int, int] = (128, 128)
    target: Tuple[float, float, float] = (0.0, 0.9, 0.0)

    @field_validator("elevation", "azimuth", "in_plane")
    @classmethod
    def validate_angle(cls, v):
        if not math.isfinite(v):
            raise ValueError("camera angles must be finite")
        return v

    @field_validator("image_size")
    @classmethod
    def validate_image_size(cls, v):
        if v[0] <= 0 or v[1] <= 0:
            raise ValueError(f"image size must be positive, got {v}")
        return v

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def principal(self) -> Tuple[float, float]:
        if self.principal_point is not None:
            return self.principal_point
        return (self.image_size[0] / 2.0, self.image_size[1] / 2.0)


class PointLight(BaseModel):
    # unit vector from the surface towards the light, camera frame
    direction: Tuple[float, float, float]
    intensity: float = Field(ge=0)

    @field_validator("direction")
    @classmethod
    def normalize_direction(cls, v):
        norm = math.sqrt(sum(c * c for c in v))
        if norm < 1e-12:
            raise ValueError("light direction must be nonzero")
        return tuple(c / norm for c in v)


class LightRig(BaseModel):
    ambient: float = Field(default=0.3, ge=0, le=1)
    lights: List[PointLight] = Field(min_length=1, max_length=4)

    @classmethod
    def ambient_only(cls, ambient: float = 1.0) -> "LightRig":
        return cls(ambient=ambient, lights=[PointLight(direction=(0.0, 0.0, -1.0), intensity=0.0)])


class CameraAnnotation(BaseModel):
    elev: float
    azim: float
    inplane: float
    distance: float
    focal: float
    principal: Tuple[float, float]
    image_size: Tuple[int, int]

    @classmethod
    def from_camera(cls, camera: CameraParams) -> "CameraAnnotation":
        return cls(
            elev=camera.elevation,
            azim=camera.azimuth,
            inplane=camera.in_plane,
            distance=camera.distance,
            focal=camera.focal,
            principal=camera.principal,
            image_size=camera.image_size,
        )

    def to_camera(self) -> CameraParams:
        return CameraParams(
            elevation=self.elev,
            azimuth=self.azim,
            in_plane=self.inplane,
            distance=self.distance,
            focal=self.focal,
            principal_point=self.principal,
            image_size=self.image_size,
        )


class RenderProvenance(BaseModel):
    pose: str
    body: int
    atlas: int
    background: str
    seed: int


class AnnotationRecord(BaseModel):
    """One line of annotations.jsonl. Field order is the serialized order."""

    image: str
    pose45_camera_normalized: List[float]
    camera: CameraAnnotation
    provenance: RenderProvenance
    scale: float = Field(gt=0)

    @model_validator(mode="after")
    def validate_pose_length(self):
        if len(self.pose45_camera_normalized) != 45:
            raise ValueError("pose45_camera_normalized must have 45 values")
        return self
