from .cam import (
    METHODS,
    CAMWrapper,
    CamRequest,
    Heatmap,
    cam_class_score,
    eigen_cam,
    eigen_projection,
    explain,
    grad_cam,
    grad_cam_pp,
    gradcam_pp_weights,
    gradcam_weights,
    normalize_heatmap,
    weighted_map,
)
from .overlay import ALPHA, blend, color_ramp, explain_episode, render_overlay

__all__ = [
    "ALPHA", "METHODS", "CAMWrapper", "CamRequest", "Heatmap", "blend", "cam_class_score",
    "color_ramp", "eigen_cam", "eigen_projection", "explain", "explain_episode", "grad_cam",
    "grad_cam_pp", "gradcam_pp_weights", "gradcam_weights", "normalize_heatmap",
    "render_overlay", "weighted_map",
]
