"""deskslam: dense RGB-D SLAM with neural-implicit and Gaussian map backends."""

from . import (  # noqa: F401
    config,
    datasets,
    engine,
    errors,
    evaluation,
    features,
    geometry,
    gs,
    nerf,
    report,
    slam,
    sse,
)
from .config import RunConfig  # noqa: F401
from .geometry import CameraIntrinsics, Pose  # noqa: F401

__version__ = "0.1.0"
