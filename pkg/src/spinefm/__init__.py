"""Inductive vertebra segmentation engine.

Seed selection on detector candidates, bidirectional centroid walking over a
prompted segmenter with overlap/classifier termination, Gaussian
post-processing, anatomical labeling, and per-level evaluation, all
verifiable end to end against synthetic phantoms with oracle backends.
"""

from .errors import SpineFMError
from .geometry import Axis, BinaryMask, Patch, Point2D
from .pipeline import PipelineConfig, SpineChain, VertebraInstance, run_image

__version__ = "0.1.0"

__all__ = [
    "Axis",
    "BinaryMask",
    "Patch",
    "PipelineConfig",
    "Point2D",
    "SpineChain",
    "SpineFMError",
    "VertebraInstance",
    "run_image",
    "__version__",
]
