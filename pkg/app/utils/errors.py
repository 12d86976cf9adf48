from typing import Any, Dict, Optional


class SynthError(Exception):
    """Base error for the synthesis engine. Maps to CLI exit code 4."""

    exit_code = 4

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigError(SynthError):
    """Invalid or unreadable configuration."""

    exit_code = 2


class AssetError(SynthError):
    """Missing or unusable input asset (directory, image, model file)."""

    exit_code = 3


class InvalidInputError(SynthError, ValueError):
    """Precondition violated by a caller-supplied value."""


class DegenerateGeometryError(InvalidInputError):
    """Zero-length bones, collinear point sets, empty projected extents."""


class SamplingError(SynthError):
    """Rejection sampling exhausted its attempt budget."""


class TextureError(SynthError):
    """Texture bake left target texels unfilled."""
