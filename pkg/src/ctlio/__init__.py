"""LiDAR-inertial odometry and mapping with continuous-time deskewing, adaptive
GICP, degeneracy-aware keyframing, Jaccard submaps, a geometric observer and a
pose-graph mapper, plus a ray-casting simulator for ground-truth experiments."""

from .config import PipelineConfig, load_config
from .errors import CtlioError
from .pipeline import Pipeline, ScanRecord

__version__ = "0.1.0"

__all__ = ["Pipeline", "PipelineConfig", "ScanRecord", "load_config", "CtlioError", "__version__"]
