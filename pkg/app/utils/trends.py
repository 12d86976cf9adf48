"""Held-out error of an image pose regressor as the synthetic training set grows or gains textures."""
import logging
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from app.schemas.pipeline import TrainConfig, TrendConfig
from app.schemas.pose import PoseFrame
from app.utils.domain_adapt import AdaptationNets, DomainData, train_baseline
from app.utils.errors import InvalidInputError
from app.utils.evaluation import evaluate
from app.utils.skeleton import unflatten

logger = logging.getLogger(__name__)


@dataclass
class ImageRegressor:
    nets: AdaptationNets
    offset: np.ndarray      # mean training image, subtracted from every input

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return self.nets.predict(inputs - self.offset)


def regressor_config(train: TrainConfig, trend: TrendConfig) -> TrainConfig:
    return train.model_copy(update={
        "learning_rate": trend.learning_rate,
        "feature_dim": trend.feature_dim,
        "hidden": list(trend.hidden),
    })


def fit_image_regressor(
    data: DomainData,
    config: TrainConfig,
    steps: int,
    init_rng: np.random.Generator,
    batch_rng: np.random.Generator,
) -> ImageRegressor:
    """Extractor and regressor trained on the pose loss over every annotated image."""
    if not data.mask.any():
        raise InvalidInputError("the image regressor needs annotated samples")
    offset = data.inputs[data.mask].mean(axis=0)
    centered = DomainData(data.inputs - offset, data.targets, data.domains, data.mask, data.names)
    nets = AdaptationNets.create(data.inputs.shape[1], config, init_rng, data.targets.shape[1])
    return ImageRegressor(train_baseline(nets, centered, config, batch_rng, steps=steps), offset)


def held_out_error(model: ImageRegressor, data: DomainData, jobs: int = 1) -> float:
    """Mean per-joint error after normalizing and similarity-aligning every prediction."""
    predictions = model.predict(data.inputs)
    names = data.names or [str(i) for i in range(len(data))]
    preds = [(n, unflatten(p, PoseFrame.camera)) for n, p in zip(names, predictions)]
    gts = [(n, unflatten(t, PoseFrame.camera)) for n, t in zip(names, data.targets)]
    return evaluate(preds, gts, jobs=jobs, name="holdout").mean_error


def subset(data: DomainData, count: int) -> DomainData:
    if not 0 < count <= len(data):
        raise InvalidInputError(f"cannot take {count} of {len(data)} samples")
    index = np.arange(count)
    return DomainData(data.inputs[index], data.targets[index], data.domains[index], data.mask[index],
                      data.names[:count])


def decreasing_with_tolerance(errors: Sequence[float], tolerance: float = 0.02) -> bool:
    """Strictly decreasing, except for at most one rise of no more than ``tolerance`` relative."""
    inversions = 0
    for before, after in zip(errors, errors[1:]):
        if after < before:
            continue
        inversions += 1
        if inversions > 1 or after - before > tolerance * before:
            return False
    return True


def median_errors(errors: Dict[int, Sequence[float]]) -> Dict[int, float]:
    return {key: float(np.median(values)) for key, values in errors.items()}
