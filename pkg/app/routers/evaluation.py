import logging
import os
import uuid
from typing import List

from fastapi import APIRouter, File, HTTPException, UploadFile, status

from app.config import settings
from app.schemas.evaluation import CompareRequest, EvalReport, RankingEntry
from app.utils.evaluation import compare_runs, evaluate

router = APIRouter(prefix="/evaluation", tags=["evaluation"])
logger = logging.getLogger(__name__)

ALLOWED_EXTENSIONS = [".json", ".jsonl"]


async def _save_upload(upload: UploadFile, directory: str) -> str:
    extension = os.path.splitext(upload.filename or "")[1].lower()
    if extension not in ALLOWED_EXTENSIONS:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Unsupported file type: {upload.filename}"
        )
    path = os.path.join(directory, os.path.basename(upload.filename))
    with open(path, "wb") as f:
        f.write(await upload.read())
    return path


@router.post("/upload", response_model=EvalReport)
async def upload_and_evaluate(
    predictions: UploadFile = File(...),
    ground_truth: UploadFile = File(...),
    name: str = "run",
):
    """Evaluate uploaded prediction and ground-truth files (pose files or annotation JSON lines)."""
    run_dir = os.path.join(settings.upload_dir, uuid.uuid4().hex)
    os.makedirs(os.path.join(run_dir, "preds"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "gts"), exist_ok=True)
    preds_path = await _save_upload(predictions, os.path.join(run_dir, "preds"))
    gts_path = await _save_upload(ground_truth, os.path.join(run_dir, "gts"))
    report = evaluate(preds_path, gts_path, jobs=settings.default_jobs, name=name)
    logger.info(f"Evaluated upload {predictions.filename} against {ground_truth.filename}")
    return report


@router.post("/compare", response_model=List[RankingEntry])
def compare(request: CompareRequest):
    return compare_runs(request.reports)
