from typing import Dict, List

from pydantic import BaseModel, Field, model_validator


class EvalReport(BaseModel):
    name: str = "run"
    thresholds: List[float]
    fractions: List[float]
    mean_error: float = Field(ge=0)        # mean per-joint error, normalized skeleton units
    per_joint_mean: List[float]
    count: int = Field(gt=0)
    metadata: Dict[str, str] = {}

    @model_validator(mode="after")
    def validate_curve(self):
        if len(self.thresholds) != len(self.fractions):
            raise ValueError("thresholds and fractions differ in length")
        if any(f < 0 or f > 1 for f in self.fractions):
            raise ValueError("fractions must lie in [0, 1]")
        if any(b < a for a, b in zip(self.fractions, self.fractions[1:])):
            raise ValueError("fractions must be nondecreasing")
        if len(self.per_joint_mean) != 15:
            raise ValueError("per-joint means need 15 values")
        return self

    @property
    def mean_fraction(self) -> float:
        return sum(self.fractions) / len(self.fractions)


class CompareRequest(BaseModel):
    reports: List[EvalReport] = Field(min_length=2)


class RankingEntry(BaseModel):
    rank: int
    name: str
    mean_fraction: float
    mean_error: float
