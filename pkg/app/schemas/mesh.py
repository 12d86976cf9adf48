from enum import Enum, IntEnum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator


class Gender(str, Enum):
    female = "female"
    male = "male"


class Region(IntEnum):
    upper_cloth = 0
    lower_cloth = 1
    head = 2
    hands = 3
    feet = 4


CLOTH_REGIONS = (Region.upper_cloth, Region.lower_cloth)
SKIN_REGIONS = (Region.head, Region.hands)

HEIGHT_RANGE = (1.3, 2.1)


class ShapeParams(BaseModel):
    gender: Gender = Gender.male
    fitness: float = 0.5
    height: float = 1.75

    @field_validator("fitness")
    @classmethod
    def clamp_fitness(cls, v):
        return min(max(float(v), 0.0), 1.0)

    @field_validator("height")
    @classmethod
    def clamp_height(cls, v):
        return min(max(float(v), HEIGHT_RANGE[0]), HEIGHT_RANGE[1])


class TubeSpec(BaseModel):
    """One capped tube of the procedural template and its block in the texture atlas."""

    name: str
    region: Optional[Region] = None  # None: split at the waist into upper/lower cloth
    bone: int
    proximal_bone: Optional[int] = None
    distal_bone: Optional[int] = None
    start: Tuple[float, float, float]
    end: Tuple[float, float, float]
    # (s, radius along the forward axis, radius along the side axis)
    profile: List[Tuple[float, float, float]]
    mirror: str
    vertex_offset: int = 0
    rings: int = 0
    segments: int = 0
    block: Tuple[int, int, int, int] = (0, 0, 0, 0)  # row, col, rows, cols

    @property
    def grid_size(self) -> int:
        return (self.rings + 1) * (self.segments + 1)

    @property
    def vertex_count(self) -> int:
        return self.grid_size + 2


class TemplateSidecar(BaseModel):
    """Channels of a template mesh that OBJ cannot carry."""

    gender: Gender
    height: float
    waist_height: float
    rest_joints: List[Tuple[float, float, float]]
    labels: List[int]
    weights: List[List[float]]
    axis_points: List[Tuple[float, float, float]]
    tubes: List[TubeSpec]
    atlas_size: Tuple[int, int]  # rows, cols


class BodyLibrary(BaseModel):
    bodies: List[ShapeParams] = Field(min_length=1)
    atlases: List[str] = Field(min_length=1)
