from .model import (  # noqa: F401
    NerfMap,
    TriPlane,
    mapping_loss,
    query_triplane,
    render_rays,
    sample_ray,
    sample_rays,
    sdf_to_density,
)
from .slam import NerfSlam  # noqa: F401
