"""Superpixel segmentation and ROI detection for very large images.

Engines: coarse-to-fine topology-preserving refinement (``run_ctftps``), its
multi-scale form (``run_multiscale``), the prediction-gated variant with
statistics reuse (``run_rapid``) and its row-parallel version
(``run_parallel_rapid``).
"""

from .energy import EnergyParams, IntegrityError, SuperpixelStats, is_topology_valid, total_energy
from .engine import ConfigurationError, RunTrace, SegmentConfig, run_ctftps, run_multiscale
from .grid import Image, LabelMap, Pyramid, build_pyramid, load_image, save_image
from .metrics import boundary_recall, roi_precision_f1, under_segmentation_error
from .parallel import partition_rows, run_parallel_rapid, run_parallel_stage
from .predict import LinearModel, PredictionMap, adapt_means, run_rapid

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "EnergyParams", "Image", "IntegrityError", "LabelMap", "LinearModel",
    "PredictionMap", "Pyramid", "RunTrace", "SegmentConfig", "SuperpixelStats", "adapt_means",
    "boundary_recall", "build_pyramid", "is_topology_valid", "load_image", "partition_rows",
    "roi_precision_f1", "run_ctftps", "run_multiscale", "run_parallel_rapid", "run_parallel_stage",
    "run_rapid", "save_image", "total_energy", "under_segmentation_error",
]
