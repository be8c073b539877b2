"""Exception types raised by the fitting, pose and rectification stages."""


class GridRectifyError(Exception):
    """Base class for all library-specific failures."""


class DegenerateFit(GridRectifyError):
    """Grid fit collapsed: essentially all detections were judged outliers."""


class NoViableSpec(GridRectifyError):
    """Every candidate grid dimension produced a degenerate fit."""


class TooFewInliers(GridRectifyError):
    """Not enough inlier correspondences for a 6-DoF pose solve."""


class CheiralityViolation(GridRectifyError):
    """A transformed reference point ended up at or behind the camera."""


class SingularMap(GridRectifyError):
    """A derived projective map is numerically singular."""


class PointAtInfinity(GridRectifyError):
    """A warped point landed on the line at infinity."""

    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"point {index} maps to the line at infinity")


class InvisibleGrid(GridRectifyError):
    """Synthetic grid projects behind the camera or far outside the image."""
