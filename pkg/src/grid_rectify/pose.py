"""Rigid-motion estimation between fitted grid centers and detections.

Reference grid centers are lifted to the z = 1 plane of the normalized
camera frame; the pose ``xi = (theta, t)`` is found by Levenberg-Marquardt
on the reprojection residuals ``e_n = x_n - project(R(theta) u_n + t)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DetectionSet,
    Intrinsics,
    Pose,
    lift_to_plane,
    normalize_points,
    rotation_matrix,
    skew,
    so3_left_jacobian,
    wrap_axis_angle,
)
from .errors import CheiralityViolation, TooFewInliers

# Minimum depth of a transformed reference point; below this the projection
# is treated as behind the camera.
Z_MIN = 1e-6

# Default pose initialization: identity rotation, slight positive depth shift.
DEFAULT_XI0 = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1e-3])


@dataclass(frozen=True)
class Correspondences:
    """Paired detections and reference points on the normalized plane.

    ``x_obs`` holds the normalized detections (M, 2); ``u_ref`` the grid
    centers lifted to z = 1 (M, 3); ``det_index`` the source detection index
    of each pair. Optional per-pair ``weights`` scale each residual block
    by sqrt(weight).
    """

    x_obs: np.ndarray
    u_ref: np.ndarray
    det_index: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        x_obs = np.asarray(self.x_obs, dtype=np.float64).reshape(-1, 2)
        u_ref = np.asarray(self.u_ref, dtype=np.float64).reshape(-1, 3)
        det_index = np.asarray(self.det_index, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "x_obs", x_obs)
        object.__setattr__(self, "u_ref", u_ref)
        object.__setattr__(self, "det_index", det_index)
        if not (len(x_obs) == len(u_ref) == len(det_index)):
            raise ValueError("correspondence arrays must have equal length")
        if len(x_obs) < 3:
            raise ValueError("at least 3 correspondences required")
        if len(np.unique(det_index)) != len(det_index):
            raise ValueError("detection indices must not repeat")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(w) != len(x_obs):
                raise ValueError("weights length must match pairs")
            if (w < 0).any():
                raise ValueError("weights must be non-negative")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.x_obs)


@dataclass(frozen=True)
class PoseSolution:
    """Levenberg-Marquardt output: pose, final cost and iteration stats."""

    pose: Pose
    final_cost: float
    iterations: int
    converged: bool


def build_correspondences(
    gamma: np.ndarray,
    X: DetectionSet,
    centers: np.ndarray,
    intrinsics: Intrinsics,
    weighted: bool = False,
) -> Correspondences:
    """Hard arg-max pairing of detections with grid centers.

    Detections whose most responsible component is the outlier column are
    dropped. With ``weighted=True`` each surviving pair carries its arg-max
    responsibility as a residual weight.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[0] != len(X):
        raise ValueError("responsibility rows must match detection count")
    k = gamma.shape[1] - 1
    if np.asarray(centers).shape != (k, 2):
        raise ValueError("centers must be (K, 2) matching the responsibility table")
    assign = np.argmax(gamma, axis=1)
    keep = np.flatnonzero(assign < k)
    if len(keep) < 4:
        raise TooFewInliers(
            f"only {len(keep)} inlier correspondences (need at least 4)"
        )
    x_obs = normalize_points(X.points[keep], intrinsics)
    u_ref = lift_to_plane(normalize_points(np.asarray(centers)[assign[keep]], intrinsics))
    weights = gamma[keep, assign[keep]] if weighted else None
    return Correspondences(x_obs=x_obs, u_ref=u_ref, det_index=keep, weights=weights)


def _transform(xi: Pose, corr: Correspondences) -> tuple[np.ndarray, np.ndarray]:
    """Transformed reference points and their depths; checks cheirality."""
    R = rotation_matrix(xi.theta)
    p = corr.u_ref @ R.T + xi.t
    z = p[:, 2]
    if (z <= Z_MIN).any():
        bad = int(np.argmin(z))
        raise CheiralityViolation(
            f"reference point {bad} has depth {z[bad]:.3e} <= {Z_MIN:.0e}"
        )
    return p, z


def residuals(xi: Pose, corr: Correspondences) -> np.ndarray:
    """Stacked reprojection residuals, shape (2M,)."""
    p, z = _transform(xi, corr)
    e = corr.x_obs - p[:, :2] / z[:, None]
    if corr.weights is not None:
        e = e * np.sqrt(corr.weights)[:, None]
    return e.ravel()


def jacobian(xi: Pose, corr: Correspondences) -> np.ndarray:
    """Analytic Jacobian of the stacked residuals w.r.t. (theta, t), (2M, 6).

    Derived from a left-multiplicative perturbation of the rotation,
    chained to global axis-angle coordinates through the SO(3) left
    Jacobian; matches central finite differences of :func:`residuals`.
    """
    p, z = _transform(xi, corr)
    xh = p[:, 0] / z
    yh = p[:, 1] / z

    m = len(corr)
    # d(projection)/dp, scaled by -1 for the residual sign: (M, 2, 3)
    de_dp = np.zeros((m, 2, 3))
    inv_z = 1.0 / z
    de_dp[:, 0, 0] = -inv_z
    de_dp[:, 1, 1] = -inv_z
    de_dp[:, 0, 2] = xh * inv_z
    de_dp[:, 1, 2] = yh * inv_z

    # Rotation part: dp/dtheta = -skew(R u) @ J_l(theta)
    R = rotation_matrix(xi.theta)
    w = corr.u_ref @ R.T
    jl = so3_left_jacobian(xi.theta)
    skew_w = np.zeros((m, 3, 3))
    skew_w[:, 0, 1] = -w[:, 2]
    skew_w[:, 0, 2] = w[:, 1]
    skew_w[:, 1, 0] = w[:, 2]
    skew_w[:, 1, 2] = -w[:, 0]
    skew_w[:, 2, 0] = -w[:, 1]
    skew_w[:, 2, 1] = w[:, 0]
    dp_dtheta = -skew_w @ jl

    J = np.empty((m, 2, 6))
    J[:, :, :3] = de_dp @ dp_dtheta
    J[:, :, 3:] = de_dp
    if corr.weights is not None:
        J = J * np.sqrt(corr.weights)[:, None, None]
    return J.reshape(2 * m, 6)


def _cost(r: np.ndarray) -> float:
    return 0.5 * float(r @ r)


def estimate_pose(
    corr: Correspondences,
    xi0: Pose | None = None,
    lambda0: float = 1e-3,
    max_iter: int = 100,
    cost_tol: float = 1e-10,
    step_tol: float = 1e-10,
    lambda_max: float = 1e12,
) -> PoseSolution:
    """Levenberg-Marquardt minimization of half the squared residual norm.

    Damping starts at ``lambda0``, is multiplied by 10 on a rejected step and
    divided by 10 on an accepted one. Steps that would put a reference point
    behind the camera are rejected like cost increases. Terminates when an
    accepted step improves the cost by less than ``cost_tol``, the step norm
    drops below ``step_tol``, or after ``max_iter`` iterations.
    """
    if len(corr) < 4:
        raise TooFewInliers("pose estimation needs at least 4 correspondences")
    if xi0 is None:
        xi0 = Pose.from_vector(DEFAULT_XI0)

    x = xi0.as_vector()
    pose = xi0
    r = residuals(pose, corr)  # raises CheiralityViolation for a bad start
    cost = _cost(r)
    J = jacobian(pose, corr)
    lam = lambda0
    converged = False
    iterations = 0
    eye = np.eye(6)

    for iterations in range(1, max_iter + 1):
        g = J.T @ r
        H = J.T @ J
        try:
            step = np.linalg.solve(H + lam * eye, -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        if np.linalg.norm(step) < step_tol:
            converged = True
            break
        candidate = x + step
        candidate[:3] = wrap_axis_angle(candidate[:3])
        try:
            cand_pose = Pose.from_vector(candidate)
            cand_r = residuals(cand_pose, corr)
        except CheiralityViolation:
            cand_r = None
        if cand_r is not None and _cost(cand_r) < cost:
            improvement = cost - _cost(cand_r)
            x, pose, r, cost = candidate, cand_pose, cand_r, _cost(cand_r)
            J = jacobian(pose, corr)
            lam = max(lam / 10.0, 1e-15)
            # Near a zero-residual solution the steps converge quadratically;
            # requiring the decrease to be small relative to the remaining
            # cost lets those final squaring steps run to completion.
            if improvement < cost_tol and improvement <= 0.5 * cost:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > lambda_max:
                break

    return PoseSolution(
        pose=pose, final_cost=cost, iterations=iterations, converged=converged
    )
