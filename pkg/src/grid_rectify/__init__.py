"""Perspective distortion removal for button-grid panel images.

The pipeline fits a grid-structured Gaussian mixture (with a uniform
outlier component) to detected button centers, estimates the rigid motion
between the fitted grid and the detections on the normalized image plane,
and removes the perspective by inverse homography warping.
"""

from .core import (
    DEFAULT_INTRINSICS,
    DetectionSet,
    Homography,
    Intrinsics,
    NormalizedPoint,
    PixelPoint,
    Pose,
    denormalize_points,
    normalize_points,
    rotation_matrix,
)
from .errors import (
    CheiralityViolation,
    DegenerateFit,
    GridRectifyError,
    InvisibleGrid,
    NoViableSpec,
    PointAtInfinity,
    SingularMap,
    TooFewInliers,
)
from .grid_fit import (
    FitResult,
    GridParams,
    GridSpec,
    MixtureConfig,
    e_step,
    fit_grid,
    fit_grid_robust,
    grid_centers,
    m_step,
    nll,
    select_grid_dims,
)
from .pose import (
    Correspondences,
    PoseSolution,
    build_correspondences,
    estimate_pose,
    jacobian,
    residuals,
)
from .rectify import (
    ImageBuffer,
    RectifyResult,
    homography_from_pose,
    rectify_pipeline,
    residual_metric,
    warp_image,
    warp_points,
)
from .synth import (
    PoseRanges,
    RenderStyle,
    SynthInstance,
    SynthScene,
    generate,
    make_benchmark,
    render,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_INTRINSICS",
    "DetectionSet",
    "Homography",
    "Intrinsics",
    "NormalizedPoint",
    "PixelPoint",
    "Pose",
    "denormalize_points",
    "normalize_points",
    "rotation_matrix",
    "CheiralityViolation",
    "DegenerateFit",
    "GridRectifyError",
    "InvisibleGrid",
    "NoViableSpec",
    "PointAtInfinity",
    "SingularMap",
    "TooFewInliers",
    "FitResult",
    "GridParams",
    "GridSpec",
    "MixtureConfig",
    "e_step",
    "fit_grid",
    "fit_grid_robust",
    "grid_centers",
    "m_step",
    "nll",
    "select_grid_dims",
    "Correspondences",
    "PoseSolution",
    "build_correspondences",
    "estimate_pose",
    "jacobian",
    "residuals",
    "ImageBuffer",
    "RectifyResult",
    "homography_from_pose",
    "rectify_pipeline",
    "residual_metric",
    "warp_image",
    "warp_points",
    "PoseRanges",
    "RenderStyle",
    "SynthInstance",
    "SynthScene",
    "generate",
    "make_benchmark",
    "render",
]
