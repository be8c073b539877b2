"""Homography construction, point/image warping and the full pipeline.

The rectifying map is induced by the reference plane: since grid centers are
lifted to z = 1, the forward map from the rectified plane to the distorted
normalized plane is the 3x3 matrix whose columns are ``r1, r2, r3 + t``. Its
pixel-space inverse is the rectifying homography. The pipeline alternates
grid fitting, pose estimation and point warping, composing the per-round
homographies into a single final map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DetectionSet,
    Homography,
    Intrinsics,
    Pose,
    as_points,
    normalize_points,
    rotation_log,
    rotation_matrix,
    wrap_axis_angle,
)
from .errors import (
    CheiralityViolation,
    DegenerateFit,
    GridRectifyError,
    PointAtInfinity,
    SingularMap,
    TooFewInliers,
)
from .grid_fit import (
    FitResult,
    GridParams,
    GridSpec,
    MixtureConfig,
    fit_grid,
    fit_grid_robust,
    grid_centers,
    init_candidates,
    select_grid_dims,
)
from .pose import (
    Correspondences,
    PoseSolution,
    Z_MIN,
    build_correspondences,
    estimate_pose,
)


@dataclass(frozen=True)
class ImageBuffer:
    """8-bit image, row-major, 1 or 3 channels, stored as (h, w, c)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError("image data must be (h, w) or (h, w, 1|3)")
        if arr.dtype != np.uint8:
            raise ValueError("image data must be uint8")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class RectifyResult:
    """Everything the pipeline produces for one detection set.

    ``reference_lattice`` is the fronto-parallel button lattice, in rectified
    pixel coordinates, that ``pose`` and ``homography`` are relative to;
    ``grid`` is the EM fit re-run on the corrected points per the round
    contract (the two agree up to noise).
    """

    homography: Homography
    pose: PoseSolution
    grid: FitResult
    spec: GridSpec
    reference_lattice: GridParams
    corrected_points: np.ndarray
    inlier_indices: np.ndarray
    metric: float
    rounds: int


def homography_from_pose(xi: Pose, intrinsics: Intrinsics) -> Homography:
    """Rectifying pixel-space homography induced by an estimated pose.

    The returned map sends the distorted image onto the rectified one; its
    inverse is the forward map ``K [r1 r2 r3+t] K^-1``.
    """
    R = rotation_matrix(xi.theta)
    h_norm = np.column_stack([R[:, 0], R[:, 1], R[:, 2] + xi.t])
    if abs(np.linalg.det(h_norm)) < 1e-12:
        raise SingularMap("pose induces a singular plane map")
    forward_px = intrinsics.matrix @ h_norm @ intrinsics.inverse_matrix
    try:
        return Homography(np.linalg.inv(forward_px))
    except ValueError as exc:
        raise SingularMap(str(exc)) from exc


def warp_points(H: Homography, points) -> np.ndarray:
    """Apply the projective map to pixel points, shape preserved (N, 2)."""
    pts = as_points(points)
    q = np.column_stack([pts, np.ones(len(pts))]) @ H.matrix.T
    w = q[:, 2]
    bad = np.flatnonzero(np.abs(w) <= 1e-12)
    if len(bad):
        raise PointAtInfinity(int(bad[0]))
    return q[:, :2] / w[:, None]


def warp_image(
    img: ImageBuffer,
    H: Homography,
    out_w: int | None = None,
    out_h: int | None = None,
) -> ImageBuffer:
    """Inverse-map the image through ``H`` with bilinear interpolation.

    Every output pixel samples the source at ``H^-1 (x, y, 1)``; samples
    falling outside the source rectangle contribute black (0).
    """
    out_w = img.width if out_w is None else int(out_w)
    out_h = img.height if out_h is None else int(out_h)
    if out_w <= 0 or out_h <= 0:
        raise ValueError("output dimensions must be positive")
    hinv = np.linalg.inv(H.matrix)

    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    finite = np.abs(denom) > 1e-12
    safe = np.where(finite, denom, 1.0)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / safe
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / safe

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    src = img.data.astype(np.float64)
    acc = np.zeros((out_h, out_w, img.channels))
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
        inside = finite & (xi >= 0) & (xi < img.width) & (yi >= 0) & (yi < img.height)
        xi_c = np.clip(xi, 0, img.width - 1)
        yi_c = np.clip(yi, 0, img.height - 1)
        acc += (weight * inside)[:, :, None] * src[yi_c, xi_c]

    return ImageBuffer(np.clip(np.rint(acc), 0, 255).astype(np.uint8))


def residual_metric(final_cost: float, n_pairs: int) -> float:
    """Mean squared residual norm per correspondence, scaled by 1000."""
    if n_pairs < 1:
        raise ValueError("metric needs at least one correspondence")
    return 1000.0 * (2.0 * final_cost / n_pairs)


def forward_plane_map(H: Homography, intrinsics: Intrinsics) -> np.ndarray:
    """Normalized-plane forward map implied by a rectifying homography.

    Undoes the pixel conjugation of H and inverts; for an exact plane map
    the result is proportional to ``[r1 r2 r3+t]``.
    """
    return np.linalg.inv(intrinsics.inverse_matrix @ H.matrix @ intrinsics.matrix)


def decompose_plane_map(
    M: np.ndarray, refs: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray] | None:
    """Nearest rigid (R, t) whose plane map ``[r1 r2 r3+t]`` matches M.

    M is defined up to scale; the scale is set from the first two column
    norms, the columns are orthonormalized by polar projection, and the
    overall sign is chosen to put the reference points (default: the
    principal-axis point) in front of the camera. Returns None when no sign
    satisfies cheirality.
    """
    M = np.asarray(M, dtype=np.float64).reshape(3, 3)
    n1 = np.linalg.norm(M[:, 0])
    n2 = np.linalg.norm(M[:, 1])
    if n1 < 1e-12 or n2 < 1e-12:
        return None
    if refs is None:
        refs = np.array([[0.0, 0.0, 1.0]])
    for sign in (1.0, -1.0):
        s = sign * 2.0 / (n1 + n2)
        b1 = s * M[:, 0]
        b2 = s * M[:, 1]
        a = np.column_stack([b1, b2, np.cross(b1, b2)])
        u, _, vt = np.linalg.svd(a)
        R = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
        t = s * M[:, 2] - R[:, 2]
        depths = (refs @ R.T + t)[:, 2]
        if (depths > Z_MIN).all():
            return R, t
    return None


def pose_from_homography(
    H: Homography, intrinsics: Intrinsics, refs: np.ndarray | None = None
) -> Pose | None:
    """Total rigid pose best matching a (possibly composed) rectifying map.

    The reference plane is the rectified pixel grid seen through the
    intrinsics; in-plane origin and scale of that grid are whatever the
    pipeline converged to. Returns None when the map cannot be decomposed.
    """
    rt = decompose_plane_map(forward_plane_map(H, intrinsics), refs)
    if rt is None:
        return None
    R, t = rt
    try:
        return Pose(wrap_axis_angle(rotation_log(R)), t)
    except ValueError:
        return None


def _lattice_hypotheses(
    X: DetectionSet,
    spec: GridSpec,
    mix: MixtureConfig,
    init_spacing: tuple[float, float],
    init_sigma: tuple[float, float],
    tol: float,
    max_iter: int,
):
    """Yield distinct (params, gamma) lattice hypotheses lazily.

    Order: the configured EM initialization, the annealed hypotheses (cheap
    and reliable under strong keystone), then the remaining EM restarts.
    Laziness lets the caller stop as soon as a hypothesis explains the data.
    """
    seen: set[tuple] = set()

    def fresh(params: GridParams) -> bool:
        sig = tuple(np.round(np.concatenate([params.origin, params.spacing]), 1))
        if sig in seen:
            return False
        seen.add(sig)
        return True

    def run_em(init: GridParams):
        try:
            fit = fit_grid(X, spec, mix, init=init, tol=tol, max_iter=max_iter)
        except (DegenerateFit, ArithmeticError):
            return None
        return fit.params, fit.gamma

    inits = init_candidates(X, init_spacing, init_sigma)
    first = run_em(inits[0])
    if first is not None and fresh(first[0]):
        yield first
    for hypothesis in _annealed_lattices(X, spec, mix, init_spacing):
        if fresh(hypothesis[0]):
            yield hypothesis
    for init in inits[1:]:
        result = run_em(init)
        if result is not None and fresh(result[0]):
            yield result


def _annealed_lattices(
    X: DetectionSet,
    spec: GridSpec,
    mix: MixtureConfig,
    init_spacing: tuple[float, float],
) -> list[tuple[GridParams, np.ndarray]]:
    """Lattice hypotheses from EM with the variances held on a schedule.

    Under strong keystone distortion the free-variance likelihood can prefer
    a mis-indexed lattice; holding the variances large and shrinking them
    stepwise keeps the lattice locked to the global cloud structure. Means
    come from the regular M-step; the returned responsibilities match the
    final held variance, leaving ambiguous edge points soft or outliered.
    """
    from .grid_fit import _median_axis_steps, e_step, m_step

    pts = X.points
    order = np.lexsort((pts[:, 1], pts[:, 0] + pts[:, 1]))
    corners = [pts[order[i]] for i in range(min(2, len(pts)))]
    spacing = _median_axis_steps(pts) or init_spacing
    scale = 0.5 * (spacing[0] + spacing[1])

    out = []
    for origin in corners:
        params = GridParams(origin, spacing, ((0.6 * scale) ** 2,) * 2)
        ok = True
        for frac in (0.6, 0.35, 0.2):
            held = (frac * scale) ** 2
            params = GridParams(params.origin, params.spacing, (held, held))
            for _ in range(4):
                gamma = e_step(X, params, spec, mix)
                try:
                    step = m_step(X, gamma, spec, params)
                except DegenerateFit:
                    ok = False
                    break
                params = GridParams(step.origin, step.spacing, (held, held))
            if not ok:
                break
        if ok:
            out.append((params, e_step(X, params, spec, mix)))
    return out


def _trimmed_pose(
    corr: Correspondences, xi0: Pose | None
) -> tuple[PoseSolution, Correspondences, int]:
    """Pose solve with iterative trimming of gross residuals.

    Pairs whose residual norm exceeds three times the median are dropped and
    the pose re-solved, up to three times; this keeps a minority of
    mis-indexed lattice assignments from steering the fit. Returns the final
    solution, the pairs it was solved on, and the number of original pairs
    explained within the final trim threshold.
    """
    from .pose import residuals as pose_residuals

    sol = estimate_pose(corr, xi0=xi0)
    kept = corr
    threshold = np.inf
    for _ in range(3):
        norms = np.linalg.norm(
            pose_residuals(sol.pose, kept).reshape(-1, 2), axis=1
        )
        threshold = max(3.0 * float(np.median(norms)), 1e-6)
        inside = norms <= threshold
        if inside.all() or inside.sum() < 4:
            break
        kept = Correspondences(
            x_obs=kept.x_obs[inside],
            u_ref=kept.u_ref[inside],
            det_index=kept.det_index[inside],
            weights=None if kept.weights is None else kept.weights[inside],
        )
        sol = estimate_pose(kept, xi0=sol.pose)
    try:
        all_norms = np.linalg.norm(
            pose_residuals(sol.pose, corr).reshape(-1, 2), axis=1
        )
        explained = int((all_norms <= max(threshold, 5e-3)).sum())
    except CheiralityViolation:
        explained = len(kept)
    return sol, kept, explained


def _confident_seed_pose(
    gamma: np.ndarray,
    X: DetectionSet,
    centers: np.ndarray,
    intrinsics: Intrinsics,
    xi0: Pose | None,
) -> PoseSolution | None:
    """Pose from the most responsible half of the arg-max pairs.

    Central detections match their lattice cells confidently even when the
    keystone has scrambled the outer rows; their pose is a usable guide for
    rematching everything else.
    """
    k = gamma.shape[1] - 1
    assign = np.argmax(gamma, axis=1)
    inlier = np.flatnonzero(assign < k)
    if len(inlier) < 4:
        return None
    conf = gamma[inlier, assign[inlier]]
    take = max(6, int(np.ceil(0.6 * len(inlier))))
    chosen = inlier[np.argsort(-conf, kind="stable")[:take]]
    try:
        corr = Correspondences(
            x_obs=normalize_points(X.points[chosen], intrinsics),
            u_ref=np.column_stack(
                [
                    normalize_points(centers[assign[chosen]], intrinsics),
                    np.ones(len(chosen)),
                ]
            ),
            det_index=chosen,
        )
        return estimate_pose(corr, xi0=xi0)
    except (ValueError, CheiralityViolation, TooFewInliers):
        return None


def _pose_support(
    X: DetectionSet, centers: np.ndarray, intrinsics: Intrinsics, pose: Pose
) -> int:
    """Consensus count: detections the posed lattice explains tightly.

    A correct lattice/pose pair reproduces the detections to noise level
    (the forward model captures the perspective exactly), so the threshold
    is a tight absolute one, guarded against degenerate dense lattices by
    the projected cell pitch. This is the common yardstick for comparing
    one round's hypotheses, regardless of which pairs each was solved on.
    """
    u_all = np.column_stack(
        [normalize_points(centers, intrinsics), np.ones(len(centers))]
    )
    p = u_all @ rotation_matrix(pose.theta).T + pose.t
    z = p[:, 2]
    if (z <= Z_MIN).any():
        return 0
    proj = p[:, :2] / z[:, None]
    if len(proj) >= 2:
        gaps = np.linalg.norm(proj[:, None, :] - proj[None, :, :], axis=2)
        np.fill_diagonal(gaps, np.inf)
        pitch = float(np.median(gaps.min(axis=1)))
    else:
        pitch = 1.0
    x_all = normalize_points(X.points, intrinsics)
    d = np.linalg.norm(x_all[:, None, :] - proj[None, :, :], axis=2)
    return int((d.min(axis=1) <= min(0.45 * pitch, 0.01)).sum())


def _pose_guided_match(
    X: DetectionSet,
    centers: np.ndarray,
    intrinsics: Intrinsics,
    pose_seed: Pose,
    passes: int = 3,
) -> tuple[PoseSolution, Correspondences, np.ndarray] | None:
    """Rematch detections to the lattice as projected through the pose.

    The projected lattice follows the perspective, so matching against it
    recovers the pairs a flat arg-max assignment scrambles. Matches farther
    than 45% of the local projected cell pitch are left out. Returns the
    refit pose, the matched pairs, and the lattice cell of each pair.
    """
    u_all = np.column_stack(
        [normalize_points(centers, intrinsics), np.ones(len(centers))]
    )
    x_all = normalize_points(X.points, intrinsics)
    pose = pose_seed
    sol = None
    corr = None
    cells = None
    for _ in range(passes):
        R = rotation_matrix(pose.theta)
        p = u_all @ R.T + pose.t
        z = p[:, 2]
        if (z <= Z_MIN).any():
            return None
        proj = p[:, :2] / z[:, None]
        if len(proj) >= 2:
            gaps = np.linalg.norm(proj[:, None, :] - proj[None, :, :], axis=2)
            np.fill_diagonal(gaps, np.inf)
            pitch = float(np.median(gaps.min(axis=1)))
        else:
            pitch = 1.0
        d = np.linalg.norm(x_all[:, None, :] - proj[None, :, :], axis=2)
        assign = np.argmin(d, axis=1)
        dmin = d[np.arange(len(x_all)), assign]
        keep = np.flatnonzero(dmin <= 0.45 * pitch)
        if len(keep) < 4:
            return None
        cells = assign[keep]
        corr = Correspondences(
            x_obs=x_all[keep], u_ref=u_all[cells], det_index=keep
        )
        try:
            sol = estimate_pose(corr, xi0=pose)
        except CheiralityViolation:
            return None
        pose = sol.pose
    return sol, corr, cells


def _grid_correspondences(
    x_obs: np.ndarray, det_index: np.ndarray, gi: np.ndarray, gj: np.ndarray, g: np.ndarray
) -> Correspondences:
    """Correspondences against a normalized-plane lattice (o, delta) = g."""
    u = np.column_stack(
        [g[0] + g[2] * gi, g[1] + g[3] * gj, np.ones(len(gi))]
    )
    return Correspondences(x_obs=x_obs, u_ref=u, det_index=det_index)


def _grid_step(
    x_obs: np.ndarray,
    gi: np.ndarray,
    gj: np.ndarray,
    pose: Pose,
    g: np.ndarray,
    max_iter: int = 25,
) -> np.ndarray:
    """Damped Gauss-Newton update of the normalized lattice given the pose.

    Minimizes the same reprojection objective as the pose solve over the four
    lattice parameters (origin and spacing on the reference plane). Steps
    that flip a spacing sign or push a point behind the camera are rejected.
    """
    R = rotation_matrix(pose.theta)
    cols = np.column_stack

    def eval_res(gv):
        u = cols([gv[0] + gv[2] * gi, gv[1] + gv[3] * gj, np.ones(len(gi))])
        p = u @ R.T + pose.t
        z = p[:, 2]
        if (z <= Z_MIN).any():
            return None, None, None
        e = x_obs - p[:, :2] / z[:, None]
        return e.ravel(), p, z

    r, p, z = eval_res(g)
    if r is None:
        return g
    cost = 0.5 * float(r @ r)
    lam = 1e-9
    for _ in range(max_iter):
        xh = p[:, 0] / z
        yh = p[:, 1] / z
        m = len(gi)
        de_dp = np.zeros((m, 2, 3))
        de_dp[:, 0, 0] = -1.0 / z
        de_dp[:, 1, 1] = -1.0 / z
        de_dp[:, 0, 2] = xh / z
        de_dp[:, 1, 2] = yh / z
        dp_dg = np.empty((m, 3, 4))
        dp_dg[:, :, 0] = R[:, 0]
        dp_dg[:, :, 1] = R[:, 1]
        dp_dg[:, :, 2] = gi[:, None] * R[:, 0]
        dp_dg[:, :, 3] = gj[:, None] * R[:, 1]
        J = (de_dp @ dp_dg).reshape(2 * m, 4)
        grad = J.T @ r
        H = J.T @ J
        try:
            step = np.linalg.solve(H + lam * np.eye(4), -grad)
        except np.linalg.LinAlgError:
            lam = max(lam, 1e-12) * 10.0
            continue
        if np.linalg.norm(step) < 1e-14:
            break
        cand = g + step
        r_new = None
        if cand[2] > 0 and cand[3] > 0:
            r_new, p_new, z_new = eval_res(cand)
        if r_new is not None and 0.5 * float(r_new @ r_new) < cost:
            improvement = cost - 0.5 * float(r_new @ r_new)
            g, r, p, z = cand, r_new, p_new, z_new
            cost = 0.5 * float(r @ r)
            lam = max(lam / 10.0, 1e-12)
            if improvement < 1e-16:
                break
        else:
            lam = max(lam, 1e-12) * 10.0
            if lam > 1e8:
                break
    return g


def _refine_grid_pose(
    x_obs: np.ndarray,
    det_index: np.ndarray,
    gi: np.ndarray,
    gj: np.ndarray,
    g0: np.ndarray,
    pose0: Pose | None,
    max_outer: int = 20,
) -> tuple[PoseSolution, np.ndarray]:
    """Joint pose+lattice estimate by block coordinate descent.

    Alternates the 6-DoF pose solve with the 4-parameter lattice update on
    the shared reprojection objective, starting from the alternation loop's
    output. The in-plane gauge (lattice origin/scale) stays where the
    initialization put it; the descent only removes the residual the two
    half-steps can explain.
    """
    g = g0.copy()
    sol = estimate_pose(_grid_correspondences(x_obs, det_index, gi, gj, g), xi0=pose0)
    for _ in range(max_outer):
        g = _grid_step(x_obs, gi, gj, sol.pose, g)
        new_sol = estimate_pose(
            _grid_correspondences(x_obs, det_index, gi, gj, g), xi0=sol.pose
        )
        improved = sol.final_cost - new_sol.final_cost
        sol = new_sol
        if improved < 1e-14:
            break
    return sol, g


def rectify_pipeline(
    X: DetectionSet,
    intrinsics: Intrinsics,
    spec: GridSpec | None = None,
    alpha: float = 0.8,
    max_rounds: int = 3,
    improve_tol: float = 0.01,
    xi0: Pose | None = None,
    init_spacing: tuple[float, float] = (100.0, 100.0),
    init_sigma: tuple[float, float] = (640.0, 640.0),
    fit_tol: float = 1e-8,
    fit_max_iter: int = 200,
    row_range=range(2, 9),
    col_range=range(2, 7),
    weighted: bool = False,
) -> RectifyResult:
    """Alternate grid fitting and pose estimation, then rectify.

    Rounds run until the per-round residual metric improves by less than
    ``improve_tol`` (relative) or ``max_rounds`` is reached; a round that
    makes the metric worse is rolled back. The composed per-round map then
    seeds a joint pose+lattice refinement on the original detections; the
    reported pose is that total motion, the homography is the map it
    induces, the metric is the refined solve's optimal cost per pair, and
    the grid is an EM fit re-run on the fully corrected points.
    """
    if len(X) < 4:
        raise ValueError("at least 4 points required")
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    mix = MixtureConfig.for_image(X.width, X.height, alpha=alpha)
    if spec is None:
        spec = select_grid_dims(X, mix, row_range, col_range)

    h_total = Homography.identity()
    current = X
    prev_metric: float | None = None
    rounds = 0
    for rnd in range(1, max_rounds + 1):
        try:
            # A wrong lattice can beat the right one on pure likelihood under
            # strong perspective; the consensus support exposes it, so the
            # round keeps whichever hypothesis explains the detections best
            # and stops generating hypotheses once one explains almost all.
            enough = len(current) - max(1, int(0.15 * len(current)))
            best = None
            best_key = None
            round_error: GridRectifyError | None = None
            for params, gamma in _lattice_hypotheses(
                current, spec, mix, init_spacing, init_sigma, fit_tol, fit_max_iter
            ):
                centers = grid_centers(params, spec)
                outcomes = []
                try:
                    corr = build_correspondences(
                        gamma, current, centers, intrinsics, weighted=weighted
                    )
                    sol, kept, _ = _trimmed_pose(corr, xi0)
                    outcomes.append((sol, len(kept)))
                except GridRectifyError as exc:
                    round_error = exc
                seed = _confident_seed_pose(gamma, current, centers, intrinsics, xi0)
                if seed is not None:
                    guided = _pose_guided_match(current, centers, intrinsics, seed.pose)
                    if guided is not None:
                        outcomes.append((guided[0], len(guided[1])))
                for sol, n_pairs in outcomes:
                    try:
                        h_cand = homography_from_pose(sol.pose, intrinsics)
                    except SingularMap:
                        continue
                    support = _pose_support(current, centers, intrinsics, sol.pose)
                    m = residual_metric(sol.final_cost, n_pairs)
                    key = (-support, m)
                    if best_key is None or key < best_key:
                        best_key = key
                        best = (m, sol, h_cand)
                if best is not None and best_key[0] <= -enough and best[0] <= 0.1:
                    break
            if best is None:
                raise round_error if round_error is not None else DegenerateFit(
                    "no usable grid-fit candidate"
                )
            metric, sol, h_round = best
        except GridRectifyError as exc:
            exc.args = (f"round {rnd}: {exc}",)
            raise
        rounds = rnd
        if prev_metric is not None and metric > prev_metric:
            break  # this round made things worse; discard its map
        h_total = h_round.compose_after(h_total)
        if prev_metric is not None and prev_metric - metric <= improve_tol * prev_metric:
            prev_metric = metric
            break
        prev_metric = metric
        if rnd < max_rounds:
            current = DetectionSet(
                warp_points(h_round, current.points), X.width, X.height
            )

    # Final estimate: take the loop's composed map and intermediate grid as
    # initialization of a joint pose+lattice solve on the original
    # detections, which shares the measurement noise optimally between the
    # two blocks. The reported pose is the total motion between the
    # reference lattice and the camera; the reported homography is the map
    # that pose induces.
    loop_corrected = DetectionSet(warp_points(h_total, X.points), X.width, X.height)
    loop_fit = fit_grid_robust(
        loop_corrected, spec, mix, init_spacing, init_sigma, fit_tol, fit_max_iter
    )
    pose0 = pose_from_homography(h_total, intrinsics)
    centers_loop = grid_centers(loop_fit.params, spec)
    matched = None
    if pose0 is not None:
        matched = _pose_guided_match(X, centers_loop, intrinsics, pose0)
    if matched is not None:
        _, match_corr, cells = matched
        keep = match_corr.det_index
        x_obs = match_corr.x_obs
        gi = spec.col_indices[cells]
        gj = spec.row_indices[cells]
    else:
        assign = np.argmax(loop_fit.gamma, axis=1)
        keep = np.flatnonzero(assign < spec.n_components)
        if len(keep) < 4:
            raise TooFewInliers(
                f"only {len(keep)} inlier correspondences (need at least 4)"
            )
        x_obs = normalize_points(X.points[keep], intrinsics)
        gi = spec.col_indices[assign[keep]]
        gj = spec.row_indices[assign[keep]]
    fp = loop_fit.params
    g0 = np.array(
        [
            (fp.origin[0] - intrinsics.cx) / intrinsics.fx,
            (fp.origin[1] - intrinsics.cy) / intrinsics.fy,
            fp.spacing[0] / intrinsics.fx,
            fp.spacing[1] / intrinsics.fy,
        ]
    )
    try:
        final_sol, g_ref = _refine_grid_pose(x_obs, keep, gi, gj, g0, pose0)
    except CheiralityViolation:
        final_sol, g_ref = _refine_grid_pose(x_obs, keep, gi, gj, g0, None)
    # One trim pass: a residual mis-indexed pair would otherwise bias the
    # joint solve.
    from .pose import residuals as pose_residuals

    norms = np.linalg.norm(
        pose_residuals(
            final_sol.pose, _grid_correspondences(x_obs, keep, gi, gj, g_ref)
        ).reshape(-1, 2),
        axis=1,
    )
    inside = norms <= max(3.0 * float(np.median(norms)), 1e-6)
    if not inside.all() and inside.sum() >= 4:
        x_obs, keep, gi, gj = x_obs[inside], keep[inside], gi[inside], gj[inside]
        final_sol, g_ref = _refine_grid_pose(
            x_obs, keep, gi, gj, g_ref, final_sol.pose
        )
    metric = residual_metric(final_sol.final_cost, len(keep))
    h_final = homography_from_pose(final_sol.pose, intrinsics)

    # Per the round contract the reported grid is an EM fit re-run on the
    # fully corrected points.
    corrected_all = warp_points(h_final, X.points)
    corrected_set = DetectionSet(corrected_all, X.width, X.height)
    final_fit = fit_grid_robust(
        corrected_set, spec, mix, init_spacing, init_sigma, fit_tol, fit_max_iter
    )
    reference_lattice = GridParams(
        origin=(
            g_ref[0] * intrinsics.fx + intrinsics.cx,
            g_ref[1] * intrinsics.fy + intrinsics.cy,
        ),
        spacing=(g_ref[2] * intrinsics.fx, g_ref[3] * intrinsics.fy),
        sigma=final_fit.params.sigma,
    )

    return RectifyResult(
        homography=h_final,
        pose=final_sol,
        grid=final_fit,
        spec=spec,
        reference_lattice=reference_lattice,
        corrected_points=corrected_all[keep],
        inlier_indices=keep,
        metric=metric,
        rounds=rounds,
    )
