import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from app.schemas.evaluation import EvalReport, RankingEntry  # noqa: E402
from app.schemas.pose import PoseFrame, PoseRecord  # noqa: E402
from app.schemas.render import AnnotationRecord  # noqa: E402
from app.utils.errors import AssetError, InvalidInputError  # noqa: E402
from app.utils.skeleton import (  # noqa: E402
    NUM_JOINTS,
    Pose3D,
    load_pose_records,
    normalize_pose,
    pck_curve,
    pose_error,
    similarity_align,
    unflatten,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = np.linspace(0.0, 0.5, 21).tolist()
SVG_SALT = "pose-eval"
# residuals below this are alignment round-off
ZERO_ERROR = 1e-12

IdentifiedPose = Tuple[str, Pose3D]


def _parse_line(payload: dict, index: int) -> IdentifiedPose:
    if "pose45_camera_normalized" in payload:
        record = AnnotationRecord.model_validate(payload)
        return record.image, unflatten(record.pose45_camera_normalized, PoseFrame.camera)
    record = PoseRecord.model_validate(payload)
    return record.id or str(index), Pose3D.from_record(record)


def load_prediction_file(path: Union[str, Path]) -> List[IdentifiedPose]:
    """Poses with ids from annotation JSON lines or a pose file; records without an id use their index."""
    path = Path(path)
    if path.suffix != ".jsonl":
        return [(r.id or str(i), Pose3D.from_record(r)) for i, r in enumerate(load_pose_records(path))]
    try:
        lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as e:
        raise AssetError(f"cannot read {path}: {e}")
    try:
        return [_parse_line(json.loads(line), i) for i, line in enumerate(lines)]
    except (json.JSONDecodeError, ValidationError) as e:
        raise InvalidInputError(f"malformed prediction file {path}: {e}")


def _pair_error(pair: Tuple[Pose3D, Pose3D]) -> np.ndarray:
    pred, gt = pair
    gt_norm = normalize_pose(gt)
    _, aligned = similarity_align(normalize_pose(pred), gt_norm)
    per_joint, _ = pose_error(aligned, gt_norm)
    return np.where(per_joint < ZERO_ERROR, 0.0, per_joint)


def evaluate(
    preds: Union[str, Path, Sequence[IdentifiedPose]],
    gts: Union[str, Path, Sequence[IdentifiedPose]],
    thresholds: Optional[Sequence[float]] = None,
    jobs: int = 1,
    name: str = "run",
) -> EvalReport:
    """Normalize both poses of every pair, align prediction to ground truth, and build the detection curve."""
    if isinstance(preds, (str, Path)):
        preds = load_prediction_file(preds)
    if isinstance(gts, (str, Path)):
        gts = load_prediction_file(gts)
    thresholds = list(DEFAULT_THRESHOLDS if thresholds is None else thresholds)
    if not preds or not gts:
        raise InvalidInputError("evaluation needs nonempty prediction and ground-truth sets")
    if len(preds) != len(gts):
        raise InvalidInputError(f"{len(preds)} predictions for {len(gts)} ground-truth poses")
    mismatched = [(p, g) for (p, _), (g, _) in zip(preds, gts) if p != g]
    if mismatched:
        raise InvalidInputError(f"prediction ids do not match ground truth, first: {mismatched[0]}")

    pairs = [(p, g) for (_, p), (_, g) in zip(preds, gts)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            errors = list(pool.map(_pair_error, pairs))
    else:
        errors = [_pair_error(pair) for pair in pairs]

    stacked = np.stack(errors)
    fractions = pck_curve(errors, thresholds)
    report = EvalReport(
        name=name,
        thresholds=[float(t) for t in thresholds],
        fractions=[float(f) for f in fractions],
        mean_error=float(stacked.sum(axis=1).mean() / NUM_JOINTS),
        per_joint_mean=stacked.mean(axis=0).tolist(),
        count=len(pairs),
        metadata={"units": "normalized skeleton (bone lengths sum to 1)"},
    )
    logger.info(f"Evaluated {report.count} poses: mean joint error {report.mean_error:.4f}")
    return report


def _save_svg(fig, path: Path) -> None:
    with plt.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(report: EvalReport, out_dir: Union[str, Path], stem: str = "report") -> Dict[str, Path]:
    """Write ``<stem>.csv`` (threshold, fraction), ``<stem>.svg`` and ``<stem>.json``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise AssetError(f"cannot create report directory {out_dir}: {e}")
    paths = {kind: out_dir / f"{stem}.{kind}" for kind in ("csv", "svg", "json")}

    table = pd.DataFrame({"threshold": report.thresholds, "fraction": report.fractions})
    table.to_csv(paths["csv"], index=False, float_format="%.6f")

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(report.thresholds, report.fractions, marker="o", label=report.name)
    ax.set_xlabel("error threshold (normalized units)")
    ax.set_ylabel("detected joints")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    _save_svg(fig, paths["svg"])

    paths["json"].write_text(report.model_dump_json(indent=1), encoding="utf-8")
    return paths


def compare_runs(reports: Sequence[EvalReport]) -> List[RankingEntry]:
    """Runs ranked by mean detection fraction, best first; ties keep name order."""
    if len(reports) < 2:
        raise InvalidInputError("comparison needs at least two reports")
    reference = reports[0].thresholds
    for report in reports[1:]:
        if report.thresholds != reference:
            raise InvalidInputError(f"report '{report.name}' uses different thresholds")
    ordered = sorted(reports, key=lambda r: (-r.mean_fraction, r.name))
    return [
        RankingEntry(rank=i + 1, name=r.name, mean_fraction=r.mean_fraction, mean_error=r.mean_error)
        for i, r in enumerate(ordered)
    ]


def emit_comparison(ranking: Sequence[RankingEntry], out_dir: Union[str, Path], stem: str = "ranking") -> Dict[str, Path]:
    """Ranking table as CSV plus a bar chart of mean joint error."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {kind: out_dir / f"{stem}.{kind}" for kind in ("csv", "svg")}
    table = pd.DataFrame([r.model_dump() for r in ranking], columns=["rank", "name", "mean_fraction", "mean_error"])
    table.to_csv(paths["csv"], index=False, float_format="%.6f")

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(table)), 4))
    ax.bar(table["name"], table["mean_error"], color="tab:blue")
    ax.set_ylabel("mean joint error (normalized units)")
    ax.set_title("runs ranked by detection rate")
    _save_svg(fig, paths["svg"])
    return paths


def load_report(path: Union[str, Path]) -> EvalReport:
    try:
        return EvalReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise AssetError(f"cannot read report {path}: {e}")
    except ValidationError as e:
        raise InvalidInputError(f"malformed report {path}: {e}")
