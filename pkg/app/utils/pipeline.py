"""End-to-end commands: prior fitting, pose sampling, body building, dataset generation,
domain-adaptation training, evaluation and reconstruction.

Every generated image draws from its own seed, ``mix_seed(master, index)``, so outputs do
not depend on the worker count or scheduling.
"""
import json
import logging
import os
from collections import deque
from concurrent.futures import Executor, Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from app import __version__
from app.schemas.evaluation import EvalReport, RankingEntry
from app.schemas.mesh import BodyLibrary, Gender
from app.schemas.pipeline import DatasetManifest, ManifestRecord, PipelineConfig
from app.schemas.pose import JointLimit, PoseFrame
from app.schemas.render import AnnotationRecord, CameraAnnotation, CameraParams, RenderProvenance
from app.schemas.training import TrainSummary, TrendPoint, TrendSummary
from app.utils.body_mesh import (
    ArticulatedMesh,
    TemplateMesh,
    apply_shape,
    build_template,
    build_templates,
    load_template,
    pose_mesh,
    sample_shape,
    save_template,
    skin_mesh,
    solve_ik,
)
from app.utils.domain_adapt import (
    REAL,
    SYNTHETIC,
    AdaptationNets,
    DomainData,
    load_image_domain,
    make_toy_domains,
    probe_domain_accuracy,
    regression_error,
    save_checkpoint,
    save_history,
    train_alternating,
    train_baseline,
)
from app.utils.errors import AssetError, ConfigError, InvalidInputError
from app.utils.evaluation import compare_runs, emit_comparison, emit_report, evaluate, load_report
from app.utils.pose_prior import PriorModel, fit_prior_from_dir, load_prior, sample_pose, sample_poses, save_prior
from app.utils.raster import world_to_camera
from app.utils.renderer import (
    composite,
    frame_camera,
    load_backgrounds,
    load_rgb,
    perturb_camera,
    perturb_skin_tone,
    project_joints,
    rasterize,
    render_overlay,
    sample_lights,
    save_png,
)
from app.utils.seeds import mix_seed, spawn_streams
from app.utils.skeleton import (
    Pose3D,
    SimilarityTransform,
    bone_lengths,
    denormalize,
    flatten,
    load_joint_limits,
    load_pose_records,
    normalize_pose,
    save_poses,
    similarity_align,
    unflatten,
)
from app.utils.texture import (
    TextureAtlas,
    build_atlas,
    frontal_camera,
    load_atlas,
    load_cloth_library,
    load_extremity_assets,
    prepare_candidates,
    save_atlas,
)
from app.utils.trends import (
    decreasing_with_tolerance,
    fit_image_regressor,
    held_out_error,
    median_errors,
    regressor_config,
    subset,
)

logger = logging.getLogger(__name__)

IMAGE_DIGITS = 7
TREND_EXPERIMENTS = ("size", "atlases")

T = TypeVar("T")


def _require(config: PipelineConfig, field_name: str) -> Path:
    value = getattr(config.paths, field_name)
    if value is None:
        raise ConfigError(f"paths.{field_name} must be set for this command")
    return Path(value)


def _limits(config: PipelineConfig) -> Dict[str, JointLimit]:
    return load_joint_limits(config.paths.joint_limits)


def _output(config: PipelineConfig, *parts: str) -> Path:
    path = Path(config.paths.output, *parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_fit_prior(config: PipelineConfig) -> Path:
    """Fit the pose prior on every pose file under paths.poses; writes ``prior.json``."""
    poses_dir = _require(config, "poses")
    model = fit_prior_from_dir(poses_dir, config.prior, _limits(config))
    return save_prior(model, _output(config) / "prior.json")


def cmd_sample_poses(config: PipelineConfig, count: Optional[int] = None) -> Path:
    """Draw ``counts.poses`` poses from the fitted prior into ``poses.json``."""
    model = load_prior(_require(config, "prior"))
    count = count or config.counts.poses
    poses = sample_poses(model, count, config.seed, config.prior, _limits(config))
    path = _output(config) / "poses.json"
    save_poses(path, poses, [f"sample_{i:0{IMAGE_DIGITS}d}" for i in range(count)])
    return path


@dataclass
class BodyAssets:
    templates: Dict[Gender, TemplateMesh]
    library: BodyLibrary
    atlases: List[TextureAtlas]


def cmd_build_bodies(config: PipelineConfig, progress: bool = False) -> Path:
    """Templates, sampled body shapes and textured atlases under ``<output>/bodies``."""
    cloth = load_cloth_library(_require(config, "cloth"))
    assets = load_extremity_assets(_require(config, "assets"))
    out = _output(config, "bodies")

    templates = build_templates(config.template)
    for gender, template in templates.items():
        save_template(template, out / "templates" / gender.value)

    shapes = [
        sample_shape(np.random.default_rng(mix_seed(config.seed, i)))
        for i in range(config.counts.bodies)
    ]
    male = templates[Gender.male]
    camera = frontal_camera(male, config.texture.candidate_size)
    candidates = {
        category: prepare_candidates(male, category, camera, config.texture.contour_points)
        for category in ("upper", "lower")
    }
    names = []
    for k in tqdm(range(config.counts.textures), desc="atlases", disable=not progress):
        rng = np.random.default_rng(mix_seed(config.seed, config.counts.bodies + k))
        upper = cloth["upper"][int(rng.integers(len(cloth["upper"])))]
        lower = cloth["lower"][int(rng.integers(len(cloth["lower"])))]
        atlas = build_atlas(male, upper, lower, assets, rng, config.texture, candidates)
        name = f"atlas_{k:04d}.png"
        save_atlas(atlas, out / "atlases" / name)
        names.append(name)

    library = BodyLibrary(bodies=shapes, atlases=names)
    (out / "bodies.json").write_text(library.model_dump_json(indent=1), encoding="utf-8")
    logger.info(f"Built {len(shapes)} body shapes and {len(names)} atlases in {out}")
    return out


def load_body_assets(bodies_dir: Union[str, Path]) -> BodyAssets:
    bodies_dir = Path(bodies_dir)
    library_path = bodies_dir / "bodies.json"
    if not library_path.exists():
        raise AssetError(f"no bodies.json in {bodies_dir}")
    library = BodyLibrary.model_validate_json(library_path.read_text(encoding="utf-8"))
    if not library.bodies or not library.atlases:
        raise AssetError(f"body library {bodies_dir} is empty")
    templates = {g: load_template(bodies_dir / "templates" / g.value) for g in Gender}
    atlases = [load_atlas(bodies_dir / "atlases" / name, templates[Gender.male]) for name in library.atlases]
    return BodyAssets(templates, library, atlases)


@dataclass
class GenerationContext:
    config: PipelineConfig
    bodies: BodyAssets
    backgrounds: List[Tuple[str, np.ndarray]]
    limits: Dict[str, JointLimit]
    prior: Optional[PriorModel] = None
    poses: List[Tuple[str, Pose3D]] = field(default_factory=list)


def load_generation_context(config: PipelineConfig, atlases: Optional[int] = None) -> GenerationContext:
    """Load and check every asset generation needs; nothing is written here.

    ``atlases`` limits texturing to the first n atlases of the body library.
    """
    if config.paths.prior is None and config.paths.pose_file is None:
        raise ConfigError("generation needs paths.prior or paths.pose_file")
    bodies = load_body_assets(_require(config, "bodies"))
    if atlases is not None:
        if not 0 < atlases <= len(bodies.atlases):
            raise AssetError(f"{atlases} atlases requested, the body library holds {len(bodies.atlases)}")
        bodies.atlases = bodies.atlases[:atlases]
    backgrounds = load_backgrounds(_require(config, "backgrounds"))
    size = config.camera.base.image_size
    small = [name for name, bg in backgrounds if bg.shape[1] < size[0] or bg.shape[0] < size[1]]
    if small:
        raise AssetError(f"backgrounds smaller than the {size[0]}x{size[1]} frame: {small}")
    context = GenerationContext(config, bodies, backgrounds, _limits(config))
    if config.paths.prior is not None:
        context.prior = load_prior(config.paths.prior)
    else:
        records = load_pose_records(config.paths.pose_file)
        if not records:
            raise AssetError(f"pose file {config.paths.pose_file} is empty")
        context.poses = [(r.id or str(i), Pose3D.from_record(r)) for i, r in enumerate(records)]
    return context


@dataclass
class RenderedSample:
    index: int
    seed: int
    image: np.ndarray
    annotation: AnnotationRecord


def image_name(index: int) -> str:
    return f"images/{index:0{IMAGE_DIGITS}d}.png"


def render_sample(context: GenerationContext, index: int) -> RenderedSample:
    """One composited image and its annotation, drawn entirely from the image's own seed."""
    config = context.config
    seed = mix_seed(config.seed, index)
    streams = spawn_streams(seed)

    if context.prior is not None:
        pose = sample_pose(context.prior, streams["pose"], config.prior.max_attempts, context.limits)
        pose_id = f"prior:{index}"
    else:
        pose_id, pose = context.poses[int(streams["pose"].integers(len(context.poses)))]

    bodies = context.bodies
    body_index = int(streams["body"].integers(len(bodies.library.bodies)))
    atlas_index = int(streams["body"].integers(len(bodies.atlases)))
    template = apply_shape(bodies.templates, bodies.library.bodies[body_index])
    atlas = perturb_skin_tone(bodies.atlases[atlas_index], streams["skin"], config.skin)
    mesh = pose_mesh(template, pose)

    camera = perturb_camera(config.camera.base, streams["camera"], config.camera)
    camera = frame_camera(camera, mesh.vertices, config.camera.frame_fill)
    lights = sample_lights(streams["lights"], config.lights)
    render = rasterize(mesh, atlas, camera, lights)

    bg_name, background = context.backgrounds[int(streams["background"].integers(len(context.backgrounds)))]
    image = composite(render.rgba, background, streams["background"])

    camera_pose = Pose3D(world_to_camera(mesh.joints, camera), PoseFrame.camera)
    annotation = AnnotationRecord(
        image=image_name(index),
        pose45_camera_normalized=flatten(normalize_pose(camera_pose)).values.tolist(),
        camera=CameraAnnotation.from_camera(camera),
        provenance=RenderProvenance(
            pose=pose_id, body=body_index, atlas=atlas_index, background=bg_name, seed=seed,
        ),
        scale=float(bone_lengths(camera_pose).sum()),
    )
    return RenderedSample(index, seed, image, annotation)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def ordered_results(pool: Executor, fn: Callable[[int], T], count: int, window: int) -> Iterator[T]:
    """``fn(0..count-1)`` in index order with at most ``window`` results in flight."""
    pending: Deque[Future] = deque()
    for index in range(count):
        pending.append(pool.submit(fn, index))
        if len(pending) >= window:
            yield pending.popleft().result()
    while pending:
        yield pending.popleft().result()


def cmd_generate(config: PipelineConfig, progress: bool = False, atlases: Optional[int] = None) -> Path:
    """Render ``counts.images`` samples; annotations are appended in index order, the manifest last."""
    context = load_generation_context(config, atlases)
    out = _output(config)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    (out / "images").mkdir(exist_ok=True)
    count = config.counts.images

    records: List[ManifestRecord] = []
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as annotations, \
            ThreadPoolExecutor(max_workers=config.jobs) as pool:
        results = ordered_results(pool, lambda i: render_sample(context, i), count, 2 * config.jobs)
        for sample in tqdm(results, total=count, desc="generate", disable=not progress):
            save_png(sample.image, out / sample.annotation.image)
            annotations.write(sample.annotation.model_dump_json() + "\n")
            records.append(ManifestRecord(
                index=sample.index, seed=sample.seed, image=sample.annotation.image, annotation=sample.annotation,
            ))

    manifest = DatasetManifest(
        tool_version=__version__,
        config=config.model_dump(mode="json"),
        image_count=count,
        atlases=atlases,
        records=records,
    )
    _write_atomic(manifest_path, manifest.model_dump_json(indent=1))
    logger.info(f"Generated {count} images in {out}")
    return manifest_path


def _split_holdout(data: DomainData, fraction: float) -> Tuple[DomainData, DomainData]:
    count = len(data)
    holdout = max(1, int(round(count * fraction)))
    keep = np.arange(count - holdout)
    test = np.arange(count - holdout, count)
    return (
        DomainData(data.inputs[keep], data.targets[keep], data.domains[keep], data.mask[keep],
                   [data.names[i] for i in keep]),
        DomainData(data.inputs[test], data.targets[test], data.domains[test], data.mask[test],
                   [data.names[i] for i in test]),
    )


def _image_domains(config: PipelineConfig) -> Tuple[DomainData, DomainData]:
    size = config.train.image_size
    synthetic = load_image_domain(_require(config, "dataset"), SYNTHETIC, size)
    # the held-out real images keep their annotations for scoring
    real = load_image_domain(_require(config, "real"), REAL, size)
    real_train, real_test = _split_holdout(real, config.train.holdout_fraction)
    hidden = np.arange(len(real_train)) >= config.train.annotated_real
    real_train.mask = real_train.mask & ~hidden
    real_train.targets = np.where(real_train.mask[:, None], real_train.targets, np.nan)
    return DomainData.concat([synthetic, real_train]), real_test


def cmd_train_da(config: PipelineConfig) -> Dict[str, Path]:
    """Alternating adaptation training plus a no-adaptation baseline on the same annotated budget."""
    streams = spawn_streams(config.seed, ("data", "init", "adapt", "baseline"))
    if config.train.mode == "toy":
        train, test = make_toy_domains(config.train, streams["data"])
    else:
        train, test = _image_domains(config)
    out = _output(config, "train")

    nets = AdaptationNets.create(train.inputs.shape[1], config.train, streams["init"], train.targets.shape[1])
    adapted, history = train_alternating(nets, train, config.train, streams["adapt"])
    baseline = train_baseline(nets, train, config.train, streams["baseline"])

    def probe(model: AdaptationNets) -> float:
        return probe_domain_accuracy(
            model.features(train.domain(SYNTHETIC)), model.features(train.domain(REAL)),
            seed=0, folds=config.train.probe_folds,
        )

    summary = TrainSummary(
        mode=config.train.mode,
        adapted_error=regression_error(adapted, test),
        baseline_error=regression_error(baseline, test),
        probe_before=probe(nets),
        probe_after=probe(adapted),
        steps=len(history),
    )
    paths = {
        "history": save_history(history, out / "history.csv"),
        "adapted": save_checkpoint(adapted, out / "adapted.json"),
        "baseline": save_checkpoint(baseline, out / "baseline.json"),
        "summary": out / "summary.json",
    }
    paths["summary"].write_text(summary.model_dump_json(indent=1), encoding="utf-8")
    logger.info(
        f"Adapted error {summary.adapted_error:.4f} vs baseline {summary.baseline_error:.4f}; "
        f"domain probe {summary.probe_before:.2f} -> {summary.probe_after:.2f}"
    )
    return paths


def _dataset_config(config: PipelineConfig, output: Path, seed: int, images: int) -> PipelineConfig:
    return config.model_copy(update={
        "seed": seed,
        "counts": config.counts.model_copy(update={"images": images}),
        "paths": config.paths.model_copy(update={"output": str(output)}),
    })


def _trend_dataset(
    config: PipelineConfig,
    output: Path,
    seed: int,
    images: int,
    progress: bool,
    atlases: Optional[int] = None,
) -> DomainData:
    manifest = cmd_generate(_dataset_config(config, output, seed, images), progress, atlases)
    return load_image_domain(manifest.parent, SYNTHETIC, config.train.image_size)


def cmd_trend(
    config: PipelineConfig,
    experiments: Sequence[str] = TREND_EXPERIMENTS,
    progress: bool = False,
) -> Dict[str, Path]:
    """Held-out error of an image regressor against training-set size and against atlas count.

    Every run is scored on one shared held-out set rendered with the whole atlas library.
    Runs of one seed share network initialization and batch order; the size runs train on
    nested subsets of one pool and the atlas runs on identical poses, bodies and cameras.
    """
    unknown = sorted(set(experiments) - set(TREND_EXPERIMENTS))
    if unknown or not experiments:
        raise ConfigError(f"trend experiments must be drawn from {TREND_EXPERIMENTS}, got {list(experiments)}")
    trend = config.trend
    if "atlases" in experiments:
        available = len(load_body_assets(_require(config, "bodies")).atlases)
        if trend.atlas_counts[-1] > available:
            raise AssetError(f"{trend.atlas_counts[-1]} atlases requested, the body library holds {available}")
    out = _output(config, "trend")
    derived = {
        name: int(rng.integers(2 ** 63))
        for name, rng in spawn_streams(config.seed, ("holdout", "size", "atlases")).items()
    }
    model_config = regressor_config(config.train, trend)
    holdout = _trend_dataset(config, out / "holdout", derived["holdout"], trend.holdout, progress)
    summary = TrendSummary(points=[])

    def run(experiment: str, seed: int, value: int, data: DomainData) -> float:
        streams = spawn_streams(mix_seed(config.seed, seed), ("init", "batches"))
        model = fit_image_regressor(data, model_config, trend.steps, streams["init"], streams["batches"])
        error = held_out_error(model, holdout, config.jobs)
        logger.info(f"Trend {experiment}={value} (seed {seed}, {len(data)} images): held-out error {error:.4f}")
        summary.points.append(TrendPoint(experiment=experiment, seed=seed, value=value, images=len(data), error=error))
        return error

    if "size" in experiments:
        pool = _trend_dataset(config, out / "size", derived["size"], trend.sizes[-1], progress)
        summary.size_errors = {size: run("size", trend.seeds[0], size, subset(pool, size)) for size in trend.sizes}
        summary.size_trend_holds = decreasing_with_tolerance(
            [summary.size_errors[size] for size in trend.sizes], trend.inversion_tolerance,
        )
    if "atlases" in experiments:
        errors: Dict[int, List[float]] = {count: [] for count in trend.atlas_counts}
        for seed in trend.seeds:
            data_seed = mix_seed(derived["atlases"], seed)
            for count in trend.atlas_counts:
                data = _trend_dataset(
                    config, out / "atlases" / f"seed_{seed}_atlases_{count}", data_seed,
                    trend.atlas_images, progress, count,
                )
                errors[count].append(run("atlases", seed, count, data))
        summary.atlas_median_errors = median_errors(errors)
        medians = [summary.atlas_median_errors[count] for count in trend.atlas_counts]
        summary.atlas_trend_holds = all(after < before for before, after in zip(medians, medians[1:]))

    paths = {"points": out / "trend.csv", "summary": out / "trend.json"}
    pd.DataFrame([p.model_dump() for p in summary.points]).to_csv(paths["points"], index=False)
    paths["summary"].write_text(summary.model_dump_json(indent=1), encoding="utf-8")
    logger.info(f"Trend results: size {summary.size_trend_holds}, atlases {summary.atlas_trend_holds}")
    return paths


def cmd_eval(
    config: PipelineConfig,
    preds: Union[str, Path],
    gts: Union[str, Path],
    name: str = "run",
) -> Tuple[EvalReport, Dict[str, Path]]:
    report = evaluate(preds, gts, config.eval.thresholds, jobs=config.jobs, name=name)
    return report, emit_report(report, _output(config, "eval"), stem=name)


def cmd_compare(config: PipelineConfig, report_paths: Sequence[Union[str, Path]]) -> Tuple[List[RankingEntry], Dict[str, Path]]:
    ranking = compare_runs([load_report(p) for p in report_paths])
    return ranking, emit_comparison(ranking, _output(config, "eval"))


@dataclass
class Reconstruction:
    mesh: ArticulatedMesh
    transform: SimilarityTransform
    camera: CameraParams
    image: np.ndarray
    reprojection_px: float


def _load_predicted_pose(
    pose_path: Union[str, Path],
    index: int,
) -> Tuple[Pose3D, Optional[CameraParams]]:
    """Camera-frame pose (and camera, when the file holds annotation records)."""
    pose_path = Path(pose_path)
    if pose_path.suffix == ".jsonl":
        try:
            lines = [l for l in pose_path.read_text(encoding="utf-8").splitlines() if l.strip()]
        except OSError as e:
            raise AssetError(f"cannot read {pose_path}: {e}")
        if not 0 <= index < len(lines):
            raise InvalidInputError(f"record {index} not in {pose_path} ({len(lines)} records)")
        payload = json.loads(lines[index])
        if "pose45_camera_normalized" in payload:
            record = AnnotationRecord.model_validate(payload)
            pose = denormalize(unflatten(record.pose45_camera_normalized, PoseFrame.camera), record.scale)
            return pose, record.camera.to_camera()
    records = load_pose_records(pose_path)
    if not 0 <= index < len(records):
        raise InvalidInputError(f"record {index} not in {pose_path} ({len(records)} records)")
    pose = Pose3D.from_record(records[index])
    if pose.frame != PoseFrame.camera:
        raise InvalidInputError("reconstruction needs a camera-frame pose")
    return pose, None


def reconstruct(
    image: np.ndarray,
    pose: Pose3D,
    camera: CameraParams,
    template: TemplateMesh,
    alpha: float = 0.5,
    atlas: Optional[TextureAtlas] = None,
) -> Reconstruction:
    """Pose the template to the prediction, align it onto the predicted joints and overlay it."""
    if pose.frame != PoseFrame.camera:
        raise InvalidInputError("reconstruction needs a camera-frame pose")
    model = skin_mesh(template, solve_ik(template, pose))
    transform, aligned_joints = similarity_align(model.pose, pose)
    aligned = model.transformed(transform.scale, transform.rotation, transform.translation)
    overlay = render_overlay(image, aligned, camera, alpha, atlas=atlas, in_camera_frame=True)
    drift = np.linalg.norm(project_joints(aligned_joints, camera) - project_joints(pose, camera), axis=1)
    return Reconstruction(aligned, transform, camera, overlay, float(drift.max()))


def cmd_reconstruct(
    config: PipelineConfig,
    image_path: Union[str, Path],
    pose_path: Union[str, Path],
    index: int = 0,
    focal: Optional[float] = None,
    principal: Optional[Tuple[float, float]] = None,
    alpha: float = 0.5,
) -> Path:
    """Overlay of the reconstructed body on the input photo, written to ``<output>/reconstruct``."""
    image = load_rgb(image_path)
    pose, camera = _load_predicted_pose(pose_path, index)
    height, width = image.shape[:2]
    if camera is None:
        if focal is None:
            raise ConfigError("a pose file without camera data needs --focal")
        camera = CameraParams(focal=focal, principal_point=principal, image_size=(width, height))
    if config.paths.bodies is not None:
        template = load_template(Path(config.paths.bodies) / "templates" / Gender.male.value)
    else:
        template = build_template(Gender.male, config.template)
    result = reconstruct(image, pose, camera, template, alpha)
    path = save_png(result.image, _output(config, "reconstruct") / f"{Path(image_path).stem}_overlay.png")
    logger.info(f"Reconstruction overlay written to {path} (max joint drift {result.reprojection_px:.2f} px)")
    return path
