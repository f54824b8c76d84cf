"""Attention token exporter producing .vgsb artifacts for the SLAM tools."""

from .errors import ImageDecodeError, ModelLoadError
from .export import DEFAULT_LAYER, ExportManifest, export_tokens
from .model import BUILTIN_MODEL, DeterministicVit, VitConfig, load_model
from .vgsb import write_blob

__version__ = "0.1.0"

__all__ = [
    "BUILTIN_MODEL",
    "DEFAULT_LAYER",
    "DeterministicVit",
    "ExportManifest",
    "ImageDecodeError",
    "ModelLoadError",
    "VitConfig",
    "export_tokens",
    "load_model",
    "write_blob",
    "__version__",
]
