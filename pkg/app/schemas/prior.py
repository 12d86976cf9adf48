from typing import Dict, List, Tuple

from pydantic import BaseModel, Field, model_validator


class PartKernels(BaseModel):
    bones: List[int]
    centers: List[List[float]]      # one feature row per training pose
    bandwidth: List[float]          # per feature dimension

    @model_validator(mode="after")
    def validate_dims(self):
        dims = 3 * len(self.bones)
        if any(len(row) != dims for row in self.centers):
            raise ValueError(f"kernel centers must have {dims} values")
        if len(self.bandwidth) != dims:
            raise ValueError(f"bandwidth must have {dims} values")
        if any(b < 0 for b in self.bandwidth):
            raise ValueError("bandwidths must be nonnegative")
        return self


class PriorModelFile(BaseModel):
    """JSON form of a fitted pose prior."""

    version: int = 1
    bin_directions: List[Tuple[float, float, float]]
    bin_counts: List[int]
    bins: List[int]                                  # torso bin per training pose
    roots: List[List[float]]                         # world up + forward per training pose
    root_bandwidth: List[float]
    parts: Dict[str, PartKernels]
    bone_lengths: List[float] = Field(min_length=14, max_length=14)
    root_position: Tuple[float, float, float]
    dataset_size: int = Field(ge=1)
    rejected: int = Field(default=0, ge=0)
    sources: Dict[str, int] = {}

    @model_validator(mode="after")
    def validate_sizes(self):
        if len(self.bins) != self.dataset_size or len(self.roots) != self.dataset_size:
            raise ValueError("per-pose arrays must match the dataset size")
        if sum(self.bin_counts) != self.dataset_size:
            raise ValueError("bin histogram does not sum to the dataset size")
        for name, part in self.parts.items():
            if len(part.centers) != self.dataset_size:
                raise ValueError(f"part '{name}' has {len(part.centers)} centers, expected {self.dataset_size}")
        return self


class CoverageReport(BaseModel):
    mean_reference_to_samples: float
    mean_samples_to_reference: float
    reference_count: int
    sample_count: int
