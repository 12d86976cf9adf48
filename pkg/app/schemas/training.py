from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, model_validator


class LayerState(BaseModel):
    weight: List[float]   # row-major (out, in)
    bias: List[float]


class NetState(BaseModel):
    sizes: List[int]
    output: Literal["linear", "leaky", "sigmoid"]
    layers: List[LayerState]

    @model_validator(mode="after")
    def validate_shapes(self):
        if len(self.sizes) < 2 or len(self.layers) != len(self.sizes) - 1:
            raise ValueError("layer count does not match sizes")
        for k, layer in enumerate(self.layers):
            n_in, n_out = self.sizes[k], self.sizes[k + 1]
            if len(layer.weight) != n_in * n_out or len(layer.bias) != n_out:
                raise ValueError(f"layer {k} parameters do not match sizes {n_in}->{n_out}")
        return self


class CheckpointFile(BaseModel):
    nets: Dict[str, NetState]
    checksums: Dict[str, str]


class TrainSummary(BaseModel):
    mode: str
    adapted_error: float
    baseline_error: float
    probe_before: float
    probe_after: float
    steps: int


class TrendPoint(BaseModel):
    experiment: Literal["size", "atlases"]
    seed: int
    value: int          # training images, or distinct atlases
    images: int
    error: float        # held-out mean aligned joint error


class TrendSummary(BaseModel):
    points: List[TrendPoint]
    size_errors: Dict[int, float] = {}
    atlas_median_errors: Dict[int, float] = {}
    size_trend_holds: Optional[bool] = None
    atlas_trend_holds: Optional[bool] = None
