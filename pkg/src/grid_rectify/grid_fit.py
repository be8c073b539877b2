"""EM fitting of a grid-structured Gaussian mixture with a uniform outlier term.

The detections are modeled as draws from K Gaussian components whose means
lie on a regular lattice ``u_k = o + delta * (i_k, j_k)`` with a shared
diagonal covariance, mixed with a uniform outlier density ``(1 - alpha) / C``
over the image. EM alternates soft assignment (responsibilities) with a
closed-form update of the lattice parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import DetectionSet
from .errors import DegenerateFit, NoViableSpec

# Variance floor (px^2) guarding against component collapse onto a point.
SIGMA_FLOOR = 1e-6

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GridSpec:
    """Lattice dimensions and the fixed row-major component enumeration.

    Component k maps to column index ``i_k = k % cols`` (x direction) and
    row index ``j_k = k // cols`` (y direction).
    """

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be at least 1x1")

    @property
    def n_components(self) -> int:
        return self.rows * self.cols

    @cached_property
    def col_indices(self) -> np.ndarray:
        out = np.tile(np.arange(self.cols), self.rows).astype(np.float64)
        out.setflags(write=False)
        return out

    @cached_property
    def row_indices(self) -> np.ndarray:
        out = np.repeat(np.arange(self.rows), self.cols).astype(np.float64)
        out.setflags(write=False)
        return out


@dataclass(frozen=True)
class GridParams:
    """Lattice origin (center of the top-left cell), spacing and variances."""

    origin: np.ndarray
    spacing: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        spacing = np.asarray(self.spacing, dtype=np.float64).reshape(2)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(2)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "sigma", sigma)
        if not (
            np.isfinite(origin).all()
            and np.isfinite(spacing).all()
            and np.isfinite(sigma).all()
        ):
            raise ValueError("grid parameters must be finite")
        if (spacing <= 0).any():
            raise ValueError("grid spacing must be positive")
        if (sigma < SIGMA_FLOOR).any():
            raise ValueError(f"variances must be at least {SIGMA_FLOOR}")


@dataclass(frozen=True)
class MixtureConfig:
    """Inlier mass and the normalizer of the uniform outlier component.

    ``alpha = 1`` disables the outlier component entirely; ``alpha = 0``
    (pure uniform) is accepted for likelihood evaluation but cannot be fit.
    """

    alpha: float = 0.8
    uniform_c: float = 640.0 * 480.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.uniform_c <= 0:
            raise ValueError("uniform normalizer must be positive")

    @classmethod
    def for_image(cls, width: int, height: int, alpha: float = 0.8) -> "MixtureConfig":
        return cls(alpha=alpha, uniform_c=float(width) * float(height))


@dataclass(frozen=True)
class FitResult:
    """Converged (or max-iteration) EM state."""

    params: GridParams
    gamma: np.ndarray
    nll_history: list[float]
    iterations: int
    converged: bool


def grid_centers(params: GridParams, spec: GridSpec) -> np.ndarray:
    """Lattice component means, shape (K, 2), in the fixed enumeration order."""
    gi = spec.col_indices
    gj = spec.row_indices
    return np.column_stack(
        [
            params.origin[0] + params.spacing[0] * gi,
            params.origin[1] + params.spacing[1] * gj,
        ]
    )


def _log_joint(
    X: DetectionSet, params: GridParams, spec: GridSpec, mix: MixtureConfig
) -> np.ndarray:
    """Per-point, per-component log of prior times density, shape (N, K+1).

    Column K holds the outlier term ``log((1 - alpha) / C)`` (or -inf when
    alpha = 1).
    """
    pts = X.points
    centers = grid_centers(params, spec)
    sx, sy = params.sigma
    dx = pts[:, 0:1] - centers[None, :, 0]
    dy = pts[:, 1:2] - centers[None, :, 1]
    # -inf entries are legitimate here (zero density in log space).
    with np.errstate(over="ignore"):
        log_density = (
            -_LOG_2PI - 0.5 * np.log(sx * sy) - 0.5 * (dx**2 / sx + dy**2 / sy)
        )

    n, k = len(X), spec.n_components
    out = np.empty((n, k + 1))
    if mix.alpha > 0.0:
        out[:, :k] = log_density + np.log(mix.alpha / k)
    else:
        out[:, :k] = -np.inf
    if mix.alpha < 1.0:
        out[:, k] = np.log1p(-mix.alpha) - np.log(mix.uniform_c)
    else:
        out[:, k] = -np.inf
    return out


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.sum(np.exp(a - safe[:, None]), axis=1)
        return np.where(np.isfinite(m), safe + np.log(s), m)


def nll(
    X: DetectionSet, params: GridParams, spec: GridSpec, mix: MixtureConfig
) -> float:
    """Negative log likelihood of the detections under the mixture (nats)."""
    if len(X) < 1:
        raise ValueError("at least one detection required")
    log_marginal = _logsumexp_rows(_log_joint(X, params, spec, mix))
    if not np.isfinite(log_marginal).all():
        raise ArithmeticError(
            "per-point likelihood underflowed to zero (alpha = 1 with a remote point)"
        )
    return float(-np.sum(log_marginal))


def e_step(
    X: DetectionSet, params: GridParams, spec: GridSpec, mix: MixtureConfig
) -> np.ndarray:
    """Posterior responsibilities, shape (N, K+1); last column is the outlier."""
    log_joint = _log_joint(X, params, spec, mix)
    log_marginal = _logsumexp_rows(log_joint)
    if not np.isfinite(log_marginal).all():
        raise ArithmeticError(
            "per-point likelihood underflowed to zero (alpha = 1 with a remote point)"
        )
    return np.exp(log_joint - log_marginal[:, None])


def _solve_axis(
    coords: np.ndarray,
    gamma_in: np.ndarray,
    idx: np.ndarray,
    prev_spacing: float,
) -> tuple[float, float]:
    """Exact stationary point of Q for one axis: (origin, spacing).

    Solves the 2x2 linear system from the two stationarity equations
    simultaneously. If the system is singular (all mass on one lattice
    index) or yields a non-positive spacing, the spacing is held at its
    previous value and only the origin is updated (exact coordinate
    ascent, so the EM descent guarantee is preserved).
    """
    mass = gamma_in.sum()
    s_i = gamma_in.sum(axis=0) @ idx
    s_ii = gamma_in.sum(axis=0) @ (idx**2)
    s_x = float(gamma_in.sum(axis=1) @ coords)
    s_ix = float(coords @ (gamma_in @ idx))

    det = mass * s_ii - s_i**2
    if det > 1e-12 * max(1.0, mass * s_ii):
        origin = (s_x * s_ii - s_ix * s_i) / det
        spacing = (mass * s_ix - s_i * s_x) / det
        if spacing > 0.0:
            return float(origin), float(spacing)
    # Degenerate axis: keep the previous spacing, re-center the origin.
    origin = (s_x - prev_spacing * s_i) / mass
    return float(origin), float(prev_spacing)


def m_step(
    X: DetectionSet,
    gamma: np.ndarray,
    spec: GridSpec,
    prev: GridParams,
    sigma_norm: str = "inlier_mass",
) -> GridParams:
    """Closed-form maximizer of the expected complete log likelihood.

    ``sigma_norm`` selects the variance normalizer: ``"inlier_mass"`` (the
    true maximizer, dividing by the total inlier responsibility) or
    ``"point_count"`` (dividing by N, for comparison).
    """
    if sigma_norm not in ("inlier_mass", "point_count"):
        raise ValueError(f"unknown sigma_norm {sigma_norm!r}")
    gamma = np.asarray(gamma, dtype=np.float64)
    k = spec.n_components
    if gamma.shape != (len(X), k + 1):
        raise ValueError("responsibility table shape does not match data and spec")
    gamma_in = gamma[:, :k]
    mass = float(gamma_in.sum())
    if mass <= 1e-9:
        raise DegenerateFit("all detections were assigned to the outlier component")

    ox, dx = _solve_axis(X.points[:, 0], gamma_in, spec.col_indices, prev.spacing[0])
    oy, dy = _solve_axis(X.points[:, 1], gamma_in, spec.row_indices, prev.spacing[1])

    ex = X.points[:, 0:1] - (ox + dx * spec.col_indices)[None, :]
    ey = X.points[:, 1:2] - (oy + dy * spec.row_indices)[None, :]
    denom = mass if sigma_norm == "inlier_mass" else float(len(X))
    sx = max(float((gamma_in * ex**2).sum()) / denom, SIGMA_FLOOR)
    sy = max(float((gamma_in * ey**2).sum()) / denom, SIGMA_FLOOR)

    return GridParams(origin=(ox, oy), spacing=(dx, dy), sigma=(sx, sy))


def default_init(
    X: DetectionSet,
    spacing: tuple[float, float] = (100.0, 100.0),
    sigma: tuple[float, float] = (640.0, 640.0),
) -> GridParams:
    """Default EM initialization: origin at the top-left-most detection.

    Top-left-most means minimal x + y sum, ties broken by smaller y.
    """
    pts = X.points
    order = np.lexsort((pts[:, 1], pts[:, 0] + pts[:, 1]))
    return GridParams(origin=pts[order[0]], spacing=spacing, sigma=sigma)


def fit_grid(
    X: DetectionSet,
    spec: GridSpec,
    mix: MixtureConfig,
    init: GridParams | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    sigma_norm: str = "inlier_mass",
) -> FitResult:
    """Run EM to convergence of the negative log likelihood.

    Stops when the NLL change drops below ``tol`` (nats) or after
    ``max_iter`` iterations; the latter is reported via ``converged=False``
    rather than an error. The returned responsibilities are consistent with
    the returned parameters (one final E-step).
    """
    if len(X) < 4:
        raise ValueError("at least 4 points required")
    if spec.n_components < 2:
        raise ValueError("grid fitting needs at least 2 lattice cells")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if init is None:
        init = default_init(X)

    def evaluate(params: GridParams) -> tuple[np.ndarray, float]:
        # One density table serves both the E-step and the NLL record.
        log_joint = _log_joint(X, params, spec, mix)
        log_marginal = _logsumexp_rows(log_joint)
        if not np.isfinite(log_marginal).all():
            raise ArithmeticError(
                "per-point likelihood underflowed to zero "
                "(alpha = 1 with a remote point)"
            )
        return np.exp(log_joint - log_marginal[:, None]), float(-log_marginal.sum())

    params = init
    gamma, current_nll = evaluate(params)
    history = [current_nll]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        params = m_step(X, gamma, spec, params, sigma_norm=sigma_norm)
        gamma, current_nll = evaluate(params)
        history.append(current_nll)
        if abs(history[-2] - history[-1]) < tol:
            converged = True
            break

    return FitResult(
        params=params,
        gamma=gamma,
        nll_history=history,
        iterations=iterations,
        converged=converged,
    )


def _median_axis_steps(pts: np.ndarray) -> tuple[float, float] | None:
    """Robust lattice spacing estimate from directed nearest-neighbor steps.

    For each point, the closest neighbor inside a cone around +x gives a
    local column step (likewise +y for rows); the medians survive moderate
    perspective, a rolled lattice and a minority of outliers.
    """
    diff = pts[None, :, :] - pts[:, None, :]
    dx = diff[:, :, 0]
    dy = diff[:, :, 1]
    steps = []
    for fwd, ortho in ((dx, dy), (dy, dx)):
        cone = (fwd > 1e-9) & (np.abs(ortho) <= 0.6 * fwd)
        fwd_masked = np.where(cone, fwd, np.inf)
        local = fwd_masked.min(axis=1)
        local = local[np.isfinite(local)]
        if len(local) < 3:
            return None
        steps.append(float(np.median(local)))
    sx, sy = steps
    if sx < 5.0 or sy < 5.0:
        return None
    return sx, sy


def init_candidates(
    X: DetectionSet,
    init_spacing: tuple[float, float] = (100.0, 100.0),
    init_sigma: tuple[float, float] = (640.0, 640.0),
) -> list[GridParams]:
    """Initialization attempts for one EM run, the configured one first.

    An outlier can sit at the extreme corner the default origin heuristic
    picks, collapsing EM onto it; strong perspective can make the configured
    spacing a poor guess. The alternatives re-seed the origin at the next
    corner candidates, widen the initial variances, and try spacings
    estimated from the point cloud itself.
    """
    pts = X.points
    order = np.lexsort((pts[:, 1], pts[:, 0] + pts[:, 1]))
    corners = [pts[order[i]] for i in range(min(3, len(pts)))]
    wide = ((X.width / 4.0) ** 2, (X.height / 4.0) ** 2)

    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    nn = max(float(np.median(dist.min(axis=1))), 5.0)
    nn_sigma = ((nn / 2.0) ** 2, (nn / 2.0) ** 2)

    candidates = [GridParams(corners[0], init_spacing, init_sigma)]
    for corner in corners[1:]:
        candidates.append(GridParams(corner, init_spacing, init_sigma))
    candidates.append(GridParams(corners[0], init_spacing, wide))
    axis_steps = _median_axis_steps(pts)
    if axis_steps is not None:
        step_sigma = ((axis_steps[0] / 2.0) ** 2, (axis_steps[1] / 2.0) ** 2)
        candidates.append(GridParams(corners[0], axis_steps, step_sigma))
        candidates.append(GridParams(corners[0], axis_steps, init_sigma))
        if len(corners) > 1:
            candidates.append(GridParams(corners[1], axis_steps, step_sigma))
    candidates.append(GridParams(corners[0], (nn, nn), nn_sigma))
    if len(corners) > 1:
        candidates.append(GridParams(corners[1], (nn, nn), wide))
    return candidates


def fit_grid_robust(
    X: DetectionSet,
    spec: GridSpec,
    mix: MixtureConfig,
    init_spacing: tuple[float, float] = (100.0, 100.0),
    init_sigma: tuple[float, float] = (640.0, 640.0),
    tol: float = 1e-8,
    max_iter: int = 200,
    sigma_norm: str = "inlier_mass",
) -> FitResult:
    """Multistart EM fit, keeping the best final NLL.

    Runs :func:`fit_grid` from every :func:`init_candidates` attempt (the
    configured default first). Fits leaving at least 4 arg-max inliers rank
    ahead of ones that do not; the attempt order breaks exact ties, so the
    result is deterministic.
    """
    best_key = None
    best_fit = None
    last_error: Exception | None = None
    for attempt, init in enumerate(init_candidates(X, init_spacing, init_sigma)):
        try:
            fit = fit_grid(
                X, spec, mix, init=init, tol=tol, max_iter=max_iter,
                sigma_norm=sigma_norm,
            )
        except (DegenerateFit, ArithmeticError) as exc:
            last_error = exc
            continue
        inliers = int((np.argmax(fit.gamma, axis=1) < spec.n_components).sum())
        key = (inliers < 4, fit.nll_history[-1], attempt)
        if best_key is None or key < best_key:
            best_key = key
            best_fit = fit
    if best_fit is None:
        raise last_error if last_error is not None else DegenerateFit(
            "all grid-fit initializations degenerated"
        )
    return best_fit


def select_grid_dims(
    X: DetectionSet,
    mix: MixtureConfig,
    row_range,
    col_range,
    init: GridParams | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> GridSpec:
    """Pick lattice dimensions by BIC over a candidate grid of (rows, cols).

    The score is ``2 * NLL + 6 * ln N`` (six free lattice parameters); ties
    are broken by smaller K, then fewer rows.
    """
    rows_list = list(row_range)
    cols_list = list(col_range)
    if not rows_list or not cols_list:
        raise ValueError("candidate ranges must be non-empty")
    n = len(X)
    best: tuple[float, int, int] | None = None
    best_spec: GridSpec | None = None
    for rows in rows_list:
        for cols in cols_list:
            spec = GridSpec(rows, cols)
            if spec.n_components > 4 * n:
                raise ValueError(
                    f"candidate {rows}x{cols} has K={spec.n_components} > 4N={4 * n}"
                )
            try:
                fit = fit_grid(X, spec, mix, init=init, tol=tol, max_iter=max_iter)
            except DegenerateFit:
                continue
            bic = 2.0 * fit.nll_history[-1] + 6.0 * np.log(n)
            key = (bic, spec.n_components, rows)
            if best is None or key < best:
                best = key
                best_spec = spec
    if best_spec is None:
        raise NoViableSpec("every candidate grid dimension degenerated")
    return best_spec
