"""Synthetic panel scenes with known grid, pose, noise and outlier recipe.

All randomness flows through a counter-based Philox generator seeded
explicitly, so instances are reproducible byte-for-byte. The geometry reuses
the pipeline's forward model: grid centers are normalized, lifted to z = 1,
moved by the true pose and projected back through the intrinsics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_INTRINSICS,
    DetectionSet,
    Intrinsics,
    Pose,
    denormalize_points,
    lift_to_plane,
    normalize_points,
    rotation_log,
    rotation_matrix,
    wrap_axis_angle,
)
from .errors import InvisibleGrid
from .grid_fit import GridParams, GridSpec, grid_centers
from .rectify import ImageBuffer

OUTLIER_LABEL = -1


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class SynthScene:
    """Ground-truth recipe for one synthetic instance."""

    spec: GridSpec
    true_params: GridParams
    true_pose: Pose
    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    width: int = 640
    height: int = 480
    noise_sigma: float = 0.0
    outlier_count: int = 0
    dropout_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.outlier_count < 0 or self.dropout_count < 0:
            raise ValueError("counts must be non-negative")
        if self.spec.n_components - self.dropout_count < 4:
            raise ValueError("at least 4 true detections must remain after dropout")


@dataclass(frozen=True)
class SynthInstance:
    """Generated detections plus the truth that produced them.

    ``labels[n]`` is the grid component index of detection n, or
    ``OUTLIER_LABEL`` for an injected outlier.
    """

    detections: DetectionSet
    truth: SynthScene
    labels: np.ndarray
    clean_points: np.ndarray
    image: ImageBuffer | None = None


def project_scene_centers(scene: SynthScene) -> np.ndarray:
    """Noise-free projected pixel positions of all grid centers."""
    centers = grid_centers(scene.true_params, scene.spec)
    u = lift_to_plane(normalize_points(centers, scene.intrinsics))
    p = u @ rotation_matrix(scene.true_pose.theta).T + scene.true_pose.t
    z = p[:, 2]
    if (z <= 0).any():
        raise InvisibleGrid("a grid center projects behind the camera")
    proj = denormalize_points(p[:, :2] / z[:, None], scene.intrinsics)
    w, h = scene.width, scene.height
    if (
        (proj[:, 0] < -0.5 * w).any()
        or (proj[:, 0] >= 1.5 * w).any()
        or (proj[:, 1] < -0.5 * h).any()
        or (proj[:, 1] >= 1.5 * h).any()
    ):
        raise InvisibleGrid("a grid center lands outside twice the image bounds")
    return proj


def generate(scene: SynthScene) -> SynthInstance:
    """Sample one instance: project, perturb, drop, inject, shuffle."""
    rng = _rng(scene.seed)
    proj = project_scene_centers(scene)
    k = scene.spec.n_components

    noisy = proj + rng.normal(0.0, scene.noise_sigma, size=proj.shape)
    keep = np.arange(k)
    if scene.dropout_count:
        drop = rng.choice(k, size=scene.dropout_count, replace=False)
        keep = np.setdiff1d(keep, drop)
    points = noisy[keep]
    clean = proj[keep]
    labels = keep.copy()

    if scene.outlier_count:
        outliers = rng.uniform(
            [0.0, 0.0], [scene.width, scene.height], size=(scene.outlier_count, 2)
        )
        points = np.vstack([points, outliers])
        clean = np.vstack([clean, outliers])
        labels = np.concatenate([labels, np.full(scene.outlier_count, OUTLIER_LABEL)])

    perm = rng.permutation(len(points))
    return SynthInstance(
        detections=DetectionSet(points[perm], scene.width, scene.height),
        truth=scene,
        labels=labels[perm],
        clean_points=clean[perm],
    )


@dataclass(frozen=True)
class RenderStyle:
    radius: float = 7.0
    background: int = 24
    foreground: int = 230
    channels: int = 1


def render(instance: SynthInstance, style: RenderStyle = RenderStyle()) -> ImageBuffer:
    """Draw a filled circle at every detection on a flat background."""
    w = instance.detections.width
    h = instance.detections.height
    img = np.full((h, w), style.background, dtype=np.uint8)
    r = style.radius
    for cx, cy in instance.detections.points:
        x_lo = max(int(np.floor(cx - r)), 0)
        x_hi = min(int(np.ceil(cx + r)) + 1, w)
        y_lo = max(int(np.floor(cy - r)), 0)
        y_hi = min(int(np.ceil(cy + r)) + 1, h)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
        img[y_lo:y_hi, x_lo:x_hi][mask] = style.foreground
    if style.channels == 3:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return ImageBuffer(img)


@dataclass(frozen=True)
class PoseRanges:
    """Per-instance pose sampling ranges for benchmark generation.

    Tilt magnitude is drawn between the min and max bounds; the default
    floor reflects the capture setting being simulated, where every image
    carries a clear perspective distortion.
    """

    tilt_min_deg: float = 10.0
    tilt_max_deg: float = 35.0
    roll_max_deg: float = 10.0
    depth_min: float = 0.8
    depth_max: float = 1.5
    center_offset_max: float = 0.03


def sample_pose(rng: np.random.Generator, centroid: np.ndarray, ranges: PoseRanges) -> Pose:
    """Random tilt/roll/depth pose that keeps the grid centroid on target.

    The rotation tilts the panel about a random in-plane axis and adds an
    in-plane roll; the translation places the (lifted) grid centroid at the
    sampled depth with a small lateral offset.
    """
    tilt = np.radians(rng.uniform(ranges.tilt_min_deg, ranges.tilt_max_deg))
    tilt_dir = rng.uniform(0.0, 2.0 * np.pi)
    roll = np.radians(rng.uniform(-ranges.roll_max_deg, ranges.roll_max_deg))
    axis = np.array([np.cos(tilt_dir), np.sin(tilt_dir), 0.0])
    R = rotation_matrix(axis * tilt) @ rotation_matrix(np.array([0.0, 0.0, roll]))
    depth = rng.uniform(ranges.depth_min, ranges.depth_max)
    offset = rng.uniform(-ranges.center_offset_max, ranges.center_offset_max, size=2)
    target = np.array([offset[0], offset[1], depth])
    t = target - R @ centroid
    return Pose(wrap_axis_angle(rotation_log(R)), t)


def make_benchmark(
    n_groups: int = 5,
    per_group: int = 5,
    pose_ranges: PoseRanges = PoseRanges(),
    seed: int = 0,
    noise_sigma: float = 1.0,
    outlier_fraction: float = 0.1,
    dropout_count: int = 0,
    intrinsics: Intrinsics = DEFAULT_INTRINSICS,
    width: int = 640,
    height: int = 480,
) -> list[SynthInstance]:
    """Groups of instances sharing grid geometry, with per-instance poses.

    Mirrors the shape of a multi-panel capture session: ``n_groups`` panel
    geometries, ``per_group`` views of each from a different pose.
    """
    if n_groups < 0 or per_group < 0:
        raise ValueError("counts must be non-negative")
    master = _rng(seed)
    instances: list[SynthInstance] = []
    for g in range(n_groups):
        rows = int(master.integers(6, 8))
        cols = int(master.integers(4, 6))
        spec = GridSpec(rows, cols)
        spacing = master.uniform(95.0, 115.0, size=2)
        # Rescale the panel so fully-visible poses exist across the whole
        # depth range even at the minimum tilt; otherwise the redraw loop
        # below could never succeed for a tall panel.
        half_x = (cols - 1) * spacing[0] / (2.0 * intrinsics.fx)
        half_y = (rows - 1) * spacing[1] / (2.0 * intrinsics.fy)
        bound_x = (width / 2.0 - 16.0) / intrinsics.fx
        bound_y = (height / 2.0 - 16.0) / intrinsics.fy
        reach = max(half_x / bound_x, half_y / bound_y)
        diag = float(np.hypot(half_x, half_y))
        tilt_slack = np.sin(np.radians(pose_ranges.tilt_min_deg))
        fit_scale = (pose_ranges.depth_max - 0.08) / (reach + tilt_slack * diag)
        spacing = spacing * min(1.0, fit_scale)
        # Center the lattice on the image so poses tend to keep it visible.
        origin = (
            np.array([width / 2.0, height / 2.0])
            - spacing * np.array([cols - 1, rows - 1]) / 2.0
        )
        params = GridParams(origin=origin, spacing=spacing, sigma=(1.0, 1.0))
        centers = grid_centers(params, spec)
        centroid = lift_to_plane(normalize_points(centers, intrinsics)).mean(axis=0)
        n_true = spec.n_components - dropout_count
        outliers = int(round(outlier_fraction * n_true))
        for i in range(per_group):
            # Redraw poses until every button projects inside the image, the
            # way a real capture would frame the panel; tilt/depth extremes
            # combined with a large panel violate that.
            for _ in range(200):
                pose = sample_pose(master, centroid, pose_ranges)
                scene = SynthScene(
                    spec=spec,
                    true_params=params,
                    true_pose=pose,
                    intrinsics=intrinsics,
                    width=width,
                    height=height,
                    noise_sigma=noise_sigma,
                    outlier_count=outliers,
                    dropout_count=dropout_count,
                    seed=int(master.integers(0, 2**63 - 1)),
                )
                try:
                    proj = project_scene_centers(scene)
                except InvisibleGrid:
                    continue
                margin = 8.0
                if (
                    (proj[:, 0] >= margin).all()
                    and (proj[:, 0] < width - margin).all()
                    and (proj[:, 1] >= margin).all()
                    and (proj[:, 1] < height - margin).all()
                ):
                    instances.append(generate(scene))
                    break
            else:
                raise InvisibleGrid(
                    f"no fully-visible pose found for group {g} after 200 draws"
                )
    return instances
