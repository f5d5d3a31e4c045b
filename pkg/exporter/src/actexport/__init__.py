"""actexport: forward-hook activation exporter for calibration datasets."""

__version__ = "0.1.0"

from .hooks import (
    ACTIVATION,
    ATTENTION_SCORES,
    ActivationExporter,
    CaptureSpec,
    ExportError,
    export_run,
)
