import os
import logging
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app import __version__
from app.config import settings
from app.routers import evaluation, poses
from app.utils.errors import AssetError, InvalidInputError, SynthError

# Configure logging
logging.basicConfig(
    level=logging.INFO if not settings.debug else logging.DEBUG,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

# Create upload directory
os.makedirs(settings.upload_dir, exist_ok=True)

app = FastAPI(
    title=settings.api_title,
    description="Pose normalization, alignment, sampling and evaluation for synthetic 3D human pose data",
    version=settings.api_version,
    docs_url="/docs",
    redoc_url="/redoc"
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(poses.router)
app.include_router(evaluation.router)

@app.get("/")
def read_root():
    return {
        "message": settings.api_title,
        "version": __version__,
        "docs": "/docs"
    }

@app.get("/health")
def health_check():
    return {"status": "healthy"}

@app.exception_handler(InvalidInputError)
async def invalid_input_handler(request, exc):
    return JSONResponse(status_code=400, content={"detail": exc.message})

@app.exception_handler(AssetError)
async def asset_error_handler(request, exc):
    return JSONResponse(status_code=404, content={"detail": exc.message})

@app.exception_handler(SynthError)
async def synth_error_handler(request, exc):
    logger.error(f"Request failed: {exc.message}")
    return JSONResponse(status_code=500, content={"detail": exc.message})

# Global exception handler
@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    logger.error(f"Global exception handler caught: {exc}")
    return JSONResponse(
        status_code=500,
        content={"detail": "Internal server error"}
    )

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "app.main:app",
        host="0.0.0.0",
        port=8000,
        reload=settings.debug
    )
