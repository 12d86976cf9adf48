from typing import Any, ClassVar, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from app.schemas.render import AnnotationRecord, CameraParams


class PathsConfig(BaseModel):
    poses: Optional[str] = None          # directory of pose files (fit-prior)
    prior: Optional[str] = None          # fitted prior model JSON
    pose_file: Optional[str] = None      # sampled poses, alternative to a prior
    cloth: Optional[str] = None          # upper/ and lower/ image + mask pairs
    assets: Optional[str] = None         # head/, hands/, feet/ textures
    backgrounds: Optional[str] = None
    bodies: Optional[str] = None         # body library written by build-bodies
    dataset: Optional[str] = None        # generated dataset, synthetic domain of train-da in image mode
    real: Optional[str] = None           # dataset standing in for the real domain (train-da)
    joint_limits: Optional[str] = None
    output: str = "out"

    # fields that name inputs; they must exist when set
    INPUT_FIELDS: ClassVar[Tuple[str, ...]] = (
        "poses", "prior", "pose_file", "cloth", "assets", "backgrounds", "bodies", "dataset", "real", "joint_limits",
    )


class CountsConfig(BaseModel):
    bodies: int = Field(default=4, gt=0)
    textures: int = Field(default=4, gt=0)
    images: int = Field(default=10, gt=0)
    poses: int = Field(default=100, gt=0)


class CameraConfig(BaseModel):
    base: CameraParams = CameraParams()
    sigma_elevation: float = Field(default=15.0, ge=0)
    sigma_azimuth: float = Field(default=45.0, ge=0)
    sigma_in_plane: float = Field(default=15.0, ge=0)
    elevation_range: Tuple[float, float] = (-30.0, 80.0)
    frame_fill: float = Field(default=0.8, gt=0, le=1)

    @field_validator("elevation_range")
    @classmethod
    def validate_range(cls, v):
        if v[0] > v[1]:
            raise ValueError(f"elevation range {v} is empty")
        return v


class LightConfig(BaseModel):
    min_lights: int = Field(default=1, ge=1, le=4)
    max_lights: int = Field(default=4, ge=1, le=4)
    ambient_range: Tuple[float, float] = (0.2, 0.5)
    intensity_range: Tuple[float, float] = (0.3, 0.8)

    @model_validator(mode="after")
    def validate_counts(self):
        if self.min_lights > self.max_lights:
            raise ValueError("min_lights exceeds max_lights")
        return self


class SkinConfig(BaseModel):
    hue_range: float = Field(default=0.03, ge=0, le=0.5)
    saturation_range: float = Field(default=0.15, ge=0, le=1)
    value_range: float = Field(default=0.2, ge=0, le=1)


class TextureConfig(BaseModel):
    contour_points: int = Field(default=200, ge=16)
    offsets: int = Field(default=16, ge=1)
    mls_alpha: float = Field(default=1.0, gt=0)
    control_stride: int = Field(default=5, ge=1)
    grid_step: int = Field(default=4, ge=1)
    seam_jitter: float = Field(default=0.02, ge=0)
    tint_amplitude: float = Field(default=0.1, ge=0, le=1)
    candidate_size: int = Field(default=128, ge=16)
    # copy the nearest filled texel into holes left after mirroring instead of failing
    nearest_fill: bool = False


class TemplateConfig(BaseModel):
    segments: int = Field(default=24, ge=4)
    rings: int = Field(default=14, ge=2)
    texels_per_meter: float = Field(default=64.0, gt=0)
    atlas_width: int = Field(default=192, ge=16)
    waist_band: float = Field(default=0.03, ge=0)


class PriorConfig(BaseModel):
    bandwidth_scale: float = Field(default=1.0, ge=0)
    bandwidth: Optional[float] = Field(default=None, ge=0)  # forced override
    min_bandwidth: float = Field(default=1e-3, gt=0)
    max_attempts: int = Field(default=100, ge=1)


class TrainConfig(BaseModel):
    mode: Literal["toy", "images"] = "toy"
    stage1_steps: int = Field(default=100, gt=0)
    stage2_steps: int = Field(default=200, gt=0)
    rounds: int = Field(default=5, gt=0)
    learning_rate: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    lambda_domain: float = Field(default=1.0, gt=0)
    batch_size: int = Field(default=64, gt=1)
    feature_dim: int = Field(default=8, gt=0)
    hidden: List[int] = [32]
    toy_dim: int = Field(default=16, gt=1)
    toy_content_dims: int = Field(default=6, gt=0)
    toy_shift: float = 3.0
    toy_samples: int = Field(default=1000, ge=20)
    annotated_real: int = Field(default=20, ge=0)
    holdout_fraction: float = Field(default=0.3, gt=0, lt=1)
    probe_folds: int = Field(default=5, ge=2)
    image_size: int = Field(default=24, ge=4)


class TrendConfig(BaseModel):
    sizes: List[int] = [1000, 4000, 16000]          # training-set sizes, nested subsets of one pool
    holdout: int = Field(default=2000, gt=0)
    atlas_counts: List[int] = [2, 32]
    atlas_images: int = Field(default=4000, gt=0)    # training-set size of every atlas-count run
    seeds: List[int] = [0, 1, 2]
    steps: int = Field(default=3000, gt=0)
    learning_rate: float = Field(default=0.01, gt=0)
    feature_dim: int = Field(default=32, gt=0)
    hidden: List[int] = [64]
    inversion_tolerance: float = Field(default=0.02, ge=0)

    @field_validator("sizes", "atlas_counts")
    @classmethod
    def validate_increasing(cls, v):
        if not v or v[0] < 1 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"{v} must be positive and strictly increasing")
        return v

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v


class EvalConfig(BaseModel):
    thresholds: List[float] = Field(default_factory=lambda: np.linspace(0.0, 0.5, 21).tolist())


class PipelineConfig(BaseModel):
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    jobs: int = Field(default=1, ge=1)
    paths: PathsConfig = PathsConfig()
    counts: CountsConfig = CountsConfig()
    camera: CameraConfig = CameraConfig()
    lights: LightConfig = LightConfig()
    skin: SkinConfig = SkinConfig()
    texture: TextureConfig = TextureConfig()
    template: TemplateConfig = TemplateConfig()
    prior: PriorConfig = PriorConfig()
    train: TrainConfig = TrainConfig()
    trend: TrendConfig = TrendConfig()
    eval: EvalConfig = EvalConfig()


class ManifestRecord(BaseModel):
    index: int
    seed: int
    image: str
    annotation: AnnotationRecord


class DatasetManifest(BaseModel):
    tool_version: str
    config: Dict[str, Any]
    image_count: int
    atlases: Optional[int] = None     # atlases drawn from, when limited to the first n of the library
    records: List[ManifestRecord]

    @model_validator(mode="after")
    def validate_records(self):
        if len(self.records) != self.image_count:
            raise ValueError("record count does not match image count")
        if len({r.seed for r in self.records}) != len(self.records):
            raise ValueError("per-image seeds are not unique")
        return self
