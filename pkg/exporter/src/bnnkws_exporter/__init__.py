"""Checkpoint-to-BNNKWS01 export tool."""

__version__ = "0.1.0"

from .export import ExportError, export  # noqa: F401
from .manifest import ExportManifest, LayerEntry, ManifestError, load_manifest  # noqa: F401
