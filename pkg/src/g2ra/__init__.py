"""Geometry-guided 2-D/3-D token fusion for waypoint navigation, with a synthetic UAV harness."""

from .fusion import VARIANTS, G2raConfig, G2raParams, fuse_variant, g2ra_forward
from .metrics import aggregate, dtw, ndtw, sdtw, smoothness
from .world import generate_scene

__all__ = ["VARIANTS", "G2raConfig", "G2raParams", "fuse_variant", "g2ra_forward",
           "aggregate", "dtw", "ndtw", "sdtw", "smoothness", "generate_scene"]
__version__ = "0.1.0"
