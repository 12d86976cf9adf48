import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from app.cli import main
from app.schemas.mesh import BodyLibrary
from app.schemas.pipeline import DatasetManifest, PipelineConfig
from app.schemas.pose import PoseFrame
from app.schemas.render import AnnotationRecord
from app.schemas.training import TrainSummary, TrendSummary
from app.utils import pipeline
from app.utils.body_mesh import load_template
from app.utils.errors import AssetError, ConfigError
from app.utils.renderer import load_rgb, project_joints, save_png
from app.utils.skeleton import bone_lengths, denormalize, load_pose_records, save_poses, unflatten

pytestmark = pytest.mark.slow


def make_config(data: dict, output, **paths) -> PipelineConfig:
    document = json.loads(json.dumps(data))
    document["paths"].update({k: str(v) for k, v in paths.items()})
    document["paths"]["output"] = str(output)
    return PipelineConfig.model_validate(document)


@pytest.fixture(scope="session")
def built(tmp_path_factory, pipeline_config_data):
    """Prior and body library shared by the generation tests."""
    root = tmp_path_factory.mktemp("built")
    config = make_config(pipeline_config_data, root)
    prior = pipeline.cmd_fit_prior(config)
    bodies = pipeline.cmd_build_bodies(config)
    return {"prior": prior, "bodies": bodies}


def generate(data, built, output, images=None, **changes):
    config = make_config(data, output, prior=built["prior"], bodies=built["bodies"])
    if images is not None:
        changes["counts"] = config.counts.model_copy(update={"images": images})
    config = config.model_copy(update=changes)
    return pipeline.cmd_generate(config)


def test_fit_prior_and_sample_poses(tmp_path, pipeline_config_data, built):
    document = json.loads(built["prior"].read_text())
    assert document["dataset_size"] == 40
    config = make_config(pipeline_config_data, tmp_path, prior=built["prior"])
    path = pipeline.cmd_sample_poses(config, count=3)
    records = load_pose_records(path)
    assert [r.id for r in records] == ["sample_0000000", "sample_0000001", "sample_0000002"]


def test_build_bodies_layout(built, pipeline_config_data):
    bodies = built["bodies"]
    library = BodyLibrary.model_validate_json((bodies / "bodies.json").read_text())
    assert len(library.bodies) == pipeline_config_data["counts"]["bodies"]
    assert library.atlases == ["atlas_0000.png", "atlas_0001.png"]
    for name in library.atlases:
        assert (bodies / "atlases" / name).exists()
        assert (bodies / "atlases" / name).with_suffix(".json").exists()
    male = load_template(bodies / "templates" / "male")
    assert male.atlas_size == tuple(Image.open(bodies / "atlases" / "atlas_0000.png").size[::-1])
    assets = pipeline.load_body_assets(bodies)
    assert len(assets.atlases) == 2


@pytest.fixture(scope="module")
def fifty(tmp_path_factory, pipeline_config_data, built):
    """The same 50-image dataset rendered with one and with eight workers."""
    root = tmp_path_factory.mktemp("fifty")
    return {
        jobs: generate(pipeline_config_data, built, root / f"jobs{jobs}", images=50, jobs=jobs)
        for jobs in (1, 8)
    }


def test_generate_is_independent_of_worker_count(fifty):
    serial, parallel = fifty[1], fifty[8]
    serial_dir, parallel_dir = serial.parent, parallel.parent

    assert (serial_dir / "annotations.jsonl").read_bytes() == (parallel_dir / "annotations.jsonl").read_bytes()
    for k in range(50):
        name = f"images/{k:07d}.png"
        assert (serial_dir / name).read_bytes() == (parallel_dir / name).read_bytes()

    manifest = DatasetManifest.model_validate_json(serial.read_text())
    assert manifest.image_count == 50
    assert [r.index for r in manifest.records] == list(range(50))
    assert [r.image for r in manifest.records] == [f"images/{k:07d}.png" for k in range(50)]
    assert len({r.seed for r in manifest.records}) == 50
    assert manifest.config["seed"] == 42

    lines = (serial_dir / "annotations.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert list(first) == ["image", "pose45_camera_normalized", "camera", "provenance", "scale"]
    assert first["provenance"]["pose"] == "prior:0"
    image = load_rgb(serial_dir / "images/0000000.png")
    assert image.shape == (64, 64, 3)


def test_annotations_are_normalized_and_in_frame(tmp_path, pipeline_config_data, built):
    manifest = generate(pipeline_config_data, built, tmp_path / "thousand", images=1000, jobs=8)
    lines = (manifest.parent / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 1000
    for line in lines:
        record = AnnotationRecord.model_validate_json(line)
        normalized = unflatten(record.pose45_camera_normalized, PoseFrame.camera)
        assert np.all(np.isfinite(normalized.joints))
        assert bone_lengths(normalized).sum() == pytest.approx(1.0, abs=1e-6)
        assert record.scale > 0
        pose = denormalize(normalized, record.scale)
        assert bone_lengths(pose).sum() == pytest.approx(record.scale, rel=1e-6)

        camera = record.camera.to_camera()
        assert np.all(pose.joints[:, 2] > 0)
        pixels = project_joints(pose, camera)
        width, height = camera.image_size
        assert np.all((pixels[:, 0] >= 0) & (pixels[:, 0] < width))
        assert np.all((pixels[:, 1] >= 0) & (pixels[:, 1] < height))


def test_ordered_results_keep_index_order_with_bounded_window():
    started = []

    def work(index):
        started.append(index)
        return index * index

    with ThreadPoolExecutor(max_workers=4) as pool:
        for k, value in enumerate(pipeline.ordered_results(pool, work, 40, window=6)):
            assert value == k * k
            assert len(started) <= k + 6
    assert sorted(started) == list(range(40))


def test_generate_from_pose_file(tmp_path, pipeline_config_data, built):
    sampler = make_config(pipeline_config_data, tmp_path / "poses", prior=built["prior"])
    pose_file = pipeline.cmd_sample_poses(sampler, count=3)
    config = make_config(pipeline_config_data, tmp_path / "run", pose_file=pose_file, bodies=built["bodies"])
    config = config.model_copy(update={"counts": config.counts.model_copy(update={"images": 2})})
    manifest = DatasetManifest.model_validate_json(pipeline.cmd_generate(config).read_text())
    assert all(r.annotation.provenance.pose.startswith("sample_") for r in manifest.records)


def test_generate_fails_before_writing_on_small_backgrounds(tmp_path, pipeline_config_data, built):
    small = tmp_path / "small_bg"
    save_png(np.zeros((32, 32, 3)), small / "tiny.png")
    out = tmp_path / "never"
    config = make_config(
        pipeline_config_data, out, prior=built["prior"], bodies=built["bodies"], backgrounds=small,
    )
    with pytest.raises(AssetError):
        pipeline.cmd_generate(config)
    assert not out.exists()


def test_generate_requires_a_pose_source(tmp_path, pipeline_config_data, built):
    config = make_config(pipeline_config_data, tmp_path, bodies=built["bodies"])
    with pytest.raises(ConfigError):
        pipeline.cmd_generate(config)


def test_reconstruction_closes_the_loop(tmp_path, pipeline_config_data, built, fifty):
    data = fifty[1].parent
    annotations = data / "annotations.jsonl"
    template = load_template(built["bodies"] / "templates" / "male")
    for index in range(20):
        pose, camera = pipeline._load_predicted_pose(annotations, index)
        image = load_rgb(data / f"images/{index:07d}.png")
        result = pipeline.reconstruct(image, pose, camera, template, alpha=0.6)
        assert result.reprojection_px < 2.0
        assert result.image.shape == image.shape
        assert not np.allclose(result.image, image)

    config = make_config(pipeline_config_data, tmp_path / "out", bodies=built["bodies"])
    path = pipeline.cmd_reconstruct(config, data / "images/0000001.png", annotations, index=1)
    assert path.name == "0000001_overlay.png"
    assert load_rgb(path).shape == (64, 64, 3)


def test_reconstruct_needs_camera_or_focal(tmp_path, pipeline_config_data, rng, pose_factory):
    save_png(np.zeros((32, 32, 3)), tmp_path / "photo.png")
    save_poses(tmp_path / "pose.json", [pose_factory(rng)])
    config = make_config(pipeline_config_data, tmp_path / "out")
    with pytest.raises(ConfigError):
        pipeline.cmd_reconstruct(config, tmp_path / "photo.png", tmp_path / "pose.json")


def test_train_da_toy_mode(tmp_path, pipeline_config_data):
    data = json.loads(json.dumps(pipeline_config_data))
    data["train"] = {"stage1_steps": 5, "stage2_steps": 5, "rounds": 2, "toy_samples": 60}
    paths = pipeline.cmd_train_da(make_config(data, tmp_path))
    assert set(paths) == {"history", "adapted", "baseline", "summary"}
    summary = TrainSummary.model_validate_json(paths["summary"].read_text())
    assert summary.mode == "toy"
    assert summary.steps == 20
    assert 0.0 <= summary.probe_before <= 1.0
    assert len(paths["history"].read_text().splitlines()) == 21


def test_train_da_image_mode(tmp_path, pipeline_config_data, built):
    synthetic = generate(pipeline_config_data, built, tmp_path / "syn",
                         images=12).parent
    real = generate(pipeline_config_data, built, tmp_path / "real", seed=43,
                    images=16).parent
    data = json.loads(json.dumps(pipeline_config_data))
    data["train"] = {"mode": "images", "stage1_steps": 3, "stage2_steps": 3, "rounds": 1,
                     "image_size": 8, "annotated_real": 4}
    paths = pipeline.cmd_train_da(make_config(data, tmp_path / "train", dataset=synthetic, real=real))
    summary = TrainSummary.model_validate_json(paths["summary"].read_text())
    assert summary.mode == "images"
    assert summary.adapted_error > 0


def test_eval_and_compare(tmp_path, pipeline_config_data, built):
    data = generate(pipeline_config_data, built, tmp_path / "data").parent
    config = make_config(pipeline_config_data, tmp_path / "out")
    annotations = data / "annotations.jsonl"
    report, paths = pipeline.cmd_eval(config, annotations, annotations, name="self")
    assert report.fractions == [1.0] * 21
    assert paths["json"].name == "self.json"

    noisy = tmp_path / "noisy.jsonl"
    rng = np.random.default_rng(0)
    lines = []
    for line in annotations.read_text().splitlines():
        record = json.loads(line)
        record["pose45_camera_normalized"] = (
            np.asarray(record["pose45_camera_normalized"]) + rng.normal(0, 0.02, 45)
        ).tolist()
        lines.append(json.dumps(record))
    noisy.write_text("\n".join(lines) + "\n")
    _, noisy_paths = pipeline.cmd_eval(config, noisy, annotations, name="noisy")

    ranking, outputs = pipeline.cmd_compare(config, [noisy_paths["json"], paths["json"]])
    assert [r.name for r in ranking] == ["self", "noisy"]
    assert outputs["csv"].exists()


def write_config(tmp_path, data) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_cli_commands_and_exit_codes(tmp_path, pipeline_config_data):
    config_path = write_config(tmp_path, pipeline_config_data)
    out = tmp_path / "cli"
    assert main(["fit-prior", "--config", config_path, "--out", str(out)]) == 0
    assert (out / "prior.json").exists()

    data = json.loads(json.dumps(pipeline_config_data))
    data["paths"]["prior"] = str(out / "prior.json")
    config_path = write_config(tmp_path, data)
    assert main(["sample-poses", "--config", config_path, "--out", str(out), "--count", "2", "--seed", "7"]) == 0
    assert len(load_pose_records(out / "poses.json")) == 2

    # configuration problems exit 2, missing assets 3
    assert main(["fit-prior", "--config", str(tmp_path / "absent.json")]) == 2
    assert main(["generate", "--config", write_config(tmp_path, pipeline_config_data), "--out", str(out)]) == 2
    assert main(["eval", "--out", str(out)]) == 2
    data["paths"]["cloth"] = str(tmp_path / "no_cloth")
    assert main(["build-bodies", "--config", write_config(tmp_path, data), "--out", str(out)]) == 3


def trend_config(data, built, output, jobs=8, **trend) -> PipelineConfig:
    config = make_config(data, output, prior=built["prior"], bodies=built["bodies"])
    camera = config.camera.model_copy(update={
        "base": config.camera.base.model_copy(update={"image_size": (32, 32), "focal": 40.0}),
    })
    return config.model_copy(update={"jobs": jobs, "camera": camera, "trend": config.trend.model_copy(update=trend)})


def test_trend_writes_points_and_summary(tmp_path, pipeline_config_data, built):
    config = trend_config(
        pipeline_config_data, built, tmp_path,
        sizes=[10, 20, 40], holdout=20, atlas_counts=[1, 2], atlas_images=20, seeds=[0, 1, 2], steps=50,
    )
    paths = pipeline.cmd_trend(config)
    points = pd.read_csv(paths["points"])
    assert len(points) == 9
    assert points.groupby("experiment").size().to_dict() == {"atlases": 6, "size": 3}
    assert (points["error"] > 0).all()

    summary = TrendSummary.model_validate_json(paths["summary"].read_text(encoding="utf-8"))
    assert sorted(summary.size_errors) == [10, 20, 40]
    assert sorted(summary.atlas_median_errors) == [1, 2]
    assert summary.size_trend_holds is not None and summary.atlas_trend_holds is not None

    # atlas runs of one seed render identical poses and cameras
    one = DatasetManifest.model_validate_json((tmp_path / "trend/atlases/seed_0_atlases_1/manifest.json").read_text())
    two = DatasetManifest.model_validate_json((tmp_path / "trend/atlases/seed_0_atlases_2/manifest.json").read_text())
    assert (one.atlases, two.atlases) == (1, 2)
    assert [r.annotation.pose45_camera_normalized for r in one.records] == \
        [r.annotation.pose45_camera_normalized for r in two.records]
    assert [r.annotation.provenance.body for r in one.records] == [r.annotation.provenance.body for r in two.records]


def test_trend_rejects_unknown_experiments_and_missing_atlases(tmp_path, pipeline_config_data, built):
    with pytest.raises(ConfigError):
        pipeline.cmd_trend(trend_config(pipeline_config_data, built, tmp_path), experiments=["depth"])
    with pytest.raises(AssetError):
        pipeline.cmd_trend(trend_config(pipeline_config_data, built, tmp_path, atlas_counts=[2, 3]), experiments=["atlases"])


@pytest.fixture(scope="module")
def many_atlases(tmp_path_factory, pipeline_config_data, built, varied_cloth):
    """Body library of 32 atlases cut from a varied cloth library."""
    root = tmp_path_factory.mktemp("many_atlases")
    data = json.loads(json.dumps(pipeline_config_data))
    data["counts"]["textures"] = 32
    config = make_config(data, root, cloth=varied_cloth)
    return {"prior": built["prior"], "bodies": pipeline.cmd_build_bodies(config)}


def test_held_out_error_falls_with_training_set_size(tmp_path, pipeline_config_data, many_atlases):
    paths = pipeline.cmd_trend(trend_config(pipeline_config_data, many_atlases, tmp_path), experiments=["size"])
    summary = TrendSummary.model_validate_json(paths["summary"].read_text(encoding="utf-8"))
    assert summary.size_trend_holds, summary.size_errors


def test_held_out_error_falls_with_atlas_count(tmp_path, pipeline_config_data, many_atlases):
    paths = pipeline.cmd_trend(trend_config(pipeline_config_data, many_atlases, tmp_path), experiments=["atlases"])
    summary = TrendSummary.model_validate_json(paths["summary"].read_text(encoding="utf-8"))
    assert summary.atlas_median_errors[32] < summary.atlas_median_errors[2], summary.atlas_median_errors
    assert summary.atlas_trend_holds
