"""Shared geometric domain types and the numeric primitives built on them.

Conventions used throughout the package:

- pixel points are float64 arrays of shape (N, 2), x before y;
- the normalized image plane is the z = 1 plane in camera coordinates,
  reached from pixels via the inverse intrinsics;
- rotations are parameterized by an axis-angle vector (3,) with angle
  ``norm(theta)`` in radians, kept in the canonical range ``< pi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this angle Rodrigues' coefficients switch to their Taylor forms.
_SMALL_ANGLE = 1e-8


def as_points(points) -> np.ndarray:
    """Coerce array-like point data to a float64 (N, 2) array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (N, 2) point array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class PixelPoint:
    """A single detection center in image-plane pixels."""

    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("pixel coordinates must be finite")


@dataclass(frozen=True)
class NormalizedPoint:
    """A point on the z = 1 normalized image plane (dimensionless)."""

    xh: float
    yh: float

    def __post_init__(self):
        if not (np.isfinite(self.xh) and np.isfinite(self.yh)):
            raise ValueError("normalized coordinates must be finite")


@dataclass(frozen=True)
class DetectionSet:
    """Detected button centers plus the dimensions of the source image.

    Points may straddle the image borders (detector boxes are not clipped),
    but must be finite. ``width``/``height`` set the support of the uniform
    outlier component during fitting.
    """

    points: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "points", as_points(self.points))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not np.isfinite(self.points).all():
            raise ValueError("detection coordinates must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def point_list(self) -> list[PixelPoint]:
        return [PixelPoint(float(x), float(y)) for x, y in self.points]


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


# Intrinsics of the camera used for all built-in defaults (640x480 sensor).
DEFAULT_INTRINSICS = Intrinsics(fx=320.0, fy=320.0, cx=320.0, cy=240.0)


@dataclass(frozen=True)
class Pose:
    """Rigid motion: axis-angle rotation ``theta`` plus translation ``t``.

    ``theta`` is kept canonical (``norm < pi``); use :func:`wrap_axis_angle`
    before constructing a pose from raw optimizer output.
    """

    theta: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "t", t)
        if not (np.isfinite(theta).all() and np.isfinite(t).all()):
            raise ValueError("pose components must be finite")
        if np.linalg.norm(theta) >= np.pi:
            raise ValueError("axis-angle rotation must satisfy norm(theta) < pi")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi) -> "Pose":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.t])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.theta)


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, scale-fixed to unit Frobenius norm.

    The sign is fixed so the (3, 3) entry is non-negative; when that entry
    is numerically zero the largest-magnitude entry is made positive instead.
    """

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        norm = np.linalg.norm(m)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("homography entries must be finite and not all zero")
        m = m / norm
        if abs(m[2, 2]) > 1e-12:
            if m[2, 2] < 0:
                m = -m
        else:
            flat = m.ravel()
            lead = flat[np.argmax(np.abs(flat))]
            if lead < 0:
                m = -m
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular after scale fixing")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose_after(self, earlier: "Homography") -> "Homography":
        """Map applying ``earlier`` first, then this one."""
        return Homography(self.matrix @ earlier.matrix)

    def flat(self) -> list[float]:
        """Row-major list of the 9 entries."""
        return [float(v) for v in self.matrix.ravel()]


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_matrix(theta) -> np.ndarray:
    """Rodrigues' formula for an axis-angle vector, exact at theta = 0."""
    theta = np.asarray(theta, dtype=np.float64).reshape(3)
    if not np.isfinite(theta).all():
        raise ValueError("axis-angle vector must be finite")
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < _SMALL_ANGLE:
        a = 1.0 - angle**2 / 6.0
        b = 0.5 - angle**2 / 24.0
    else:
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * (K @ K)


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (inverse of Rodrigues).

    Returns the canonical representative with angle in [0, pi].
    """
    R = np.asarray(R, dtype=np.float64)
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    axis_raw = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < _SMALL_ANGLE:
        return 0.5 * axis_raw
    if np.pi - angle > 1e-7:
        return axis_raw * (angle / (2.0 * np.sin(angle)))
    # Near pi the skew part vanishes; recover the axis from R + I instead
    # and fix its sign against the (tiny but directional) skew part.
    M = (R + np.eye(3)) / 2.0
    k = int(np.argmax(np.diag(M)))
    axis = M[:, k] / np.sqrt(max(M[k, k], 1e-300))
    axis = axis / np.linalg.norm(axis)
    if axis @ axis_raw < 0:
        axis = -axis
    return axis * angle


def so3_left_jacobian(theta: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3), relating axis-angle increments to local ones."""
    theta = np.asarray(theta, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < 1e-4:
        a = 0.5 - angle**2 / 24.0
        b = 1.0 / 6.0 - angle**2 / 120.0
    else:
        a = (1.0 - np.cos(angle)) / angle**2
        b = (angle - np.sin(angle)) / angle**3
    return np.eye(3) + a * K + b * (K @ K)


def wrap_axis_angle(theta) -> np.ndarray:
    """Reduce an axis-angle vector to the canonical range ``norm < pi``.

    The angle is taken modulo 2*pi into (-pi, pi] along the same axis; the
    measure-zero boundary case of exactly pi is nudged just inside the open
    range so the result is always a valid canonical rotation vector.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(3).copy()
    angle = np.linalg.norm(theta)
    if angle < np.pi:
        return theta
    reduced = np.remainder(angle, 2.0 * np.pi)
    if reduced > np.pi:
        reduced -= 2.0 * np.pi
    if abs(reduced) >= np.pi:
        reduced = np.copysign(np.pi * (1.0 - 1e-12), reduced)
    return theta * (reduced / angle)


def normalize_points(points, intrinsics: Intrinsics) -> np.ndarray:
    """Map pixel points onto the z = 1 normalized image plane."""
    pts = as_points(points)
    out = np.empty_like(pts)
    out[:, 0] = (pts[:, 0] - intrinsics.cx) / intrinsics.fx
    out[:, 1] = (pts[:, 1] - intrinsics.cy) / intrinsics.fy
    return out


def denormalize_points(points, intrinsics: Intrinsics) -> np.ndarray:
    """Inverse of :func:`normalize_points`."""
    pts = as_points(points)
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 0] * intrinsics.fx + intrinsics.cx
    out[:, 1] = pts[:, 1] * intrinsics.fy + intrinsics.cy
    return out


def lift_to_plane(points) -> np.ndarray:
    """Append z = 1 to normalized (N, 2) points, giving (N, 3)."""
    pts = as_points(points)
    return np.column_stack([pts, np.ones(len(pts))])
