import numpy as np
import pytest

from app.schemas.pipeline import TrainConfig, TrendConfig
from app.utils.domain_adapt import SYNTHETIC, AdaptationNets, DomainData
from app.utils.errors import InvalidInputError
from app.utils.skeleton import normalize_pose
from app.utils.trends import (
    ImageRegressor,
    decreasing_with_tolerance,
    fit_image_regressor,
    held_out_error,
    median_errors,
    regressor_config,
    subset,
)


@pytest.mark.parametrize("errors, expected", [
    ([0.30, 0.25, 0.20], True),
    ([0.30, 0.25, 0.254, 0.20], True),      # one rise within 2%
    ([0.30, 0.25, 0.26, 0.20], False),      # rise of 4%
    ([0.30, 0.301, 0.25, 0.251], False),    # two small rises
    ([0.30, 0.30, 0.30], False),           # two ties
    ([0.30], True),
])
def test_decreasing_with_tolerance(errors, expected):
    assert decreasing_with_tolerance(errors, 0.02) is expected


def test_decreasing_with_tolerance_zero_allows_no_rise():
    assert not decreasing_with_tolerance([0.3, 0.2, 0.2001], 0.0)


def test_median_errors():
    assert median_errors({2: [0.3, 0.1, 0.2], 32: [0.05, 0.15]}) == {2: pytest.approx(0.2), 32: pytest.approx(0.1)}


def linear_images(rng, pose_factory, count: int, projection: np.ndarray) -> DomainData:
    """Flattened "images" that are a fixed linear function of the pelvis-centered normalized pose."""
    targets = []
    for _ in range(count):
        pose = normalize_pose(pose_factory(rng))
        targets.append((pose.joints - pose.pelvis).reshape(-1))
    targets = np.asarray(targets)
    inputs = targets @ projection + 0.5 + rng.normal(0, 0.01, (count, projection.shape[1]))
    return DomainData(
        inputs, targets,
        np.full(count, SYNTHETIC), np.ones(count, dtype=bool),
        [f"{i:06d}" for i in range(count)],
    )


def test_subset_takes_a_prefix(rng, pose_factory):
    data = linear_images(rng, pose_factory, 10, rng.normal(size=(45, 12)))
    head = subset(data, 4)
    assert len(head) == 4
    np.testing.assert_array_equal(head.inputs, data.inputs[:4])
    assert head.names == data.names[:4]
    for count in (0, 11):
        with pytest.raises(InvalidInputError):
            subset(data, count)


def test_regressor_config_takes_trend_network_settings():
    config = regressor_config(TrainConfig(batch_size=16), TrendConfig(learning_rate=0.02, feature_dim=12, hidden=[20]))
    assert (config.learning_rate, config.feature_dim, config.hidden, config.batch_size) == (0.02, 12, [20], 16)


def test_fit_image_regressor_lowers_held_out_error(rng, pose_factory):
    projection = rng.normal(0, 1, (45, 30)) / np.sqrt(45)
    train = linear_images(rng, pose_factory, 400, projection)
    holdout = linear_images(rng, pose_factory, 100, projection)
    config = regressor_config(TrainConfig(batch_size=32), TrendConfig())

    untrained = ImageRegressor(
        AdaptationNets.create(30, config, np.random.default_rng(1), 45), train.inputs.mean(axis=0),
    )
    fitted = fit_image_regressor(train, config, 600, np.random.default_rng(1), np.random.default_rng(2))
    np.testing.assert_allclose(fitted.offset, train.inputs.mean(axis=0))

    before = held_out_error(untrained, holdout)
    after = held_out_error(fitted, holdout, jobs=4)
    assert after < 0.7 * before


def test_fit_image_regressor_needs_annotations(rng, pose_factory):
    data = linear_images(rng, pose_factory, 20, rng.normal(size=(45, 8)))
    data.mask[:] = False
    with pytest.raises(InvalidInputError):
        fit_image_regressor(data, TrainConfig(), 5, np.random.default_rng(0), np.random.default_rng(1))
