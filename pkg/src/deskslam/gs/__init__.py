from .model import (  # noqa: F401
    GaussianMap,
    SplatFragment,
    project_gaussian,
    rasterize,
)
from .slam import GsConfig, GsSlam, gs_loss, keyframe_decision  # noqa: F401
