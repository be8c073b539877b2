"""Batch command-line surface: strict JSON I/O, PNG warping, evaluation.

Exit-code contract: 0 success, 1 malformed input or I/O failure, 2 numeric
failure (degenerate fit, underflow, too few inliers), 3 geometric failure
(cheirality violation, singular map, point at infinity). Robot-stack callers
can branch on the code without parsing stderr.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .core import DetectionSet, Intrinsics, Pose, rotation_log, rotation_matrix
from .errors import (
    CheiralityViolation,
    DegenerateFit,
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
    default_init,
    fit_grid,
    select_grid_dims,
)
from .pose import PoseSolution
from .rectify import (
    Homography,
    ImageBuffer,
    RectifyResult,
    decompose_plane_map,
    forward_plane_map,
    rectify_pipeline,
    warp_image,
    warp_points,
)
from .synth import SynthInstance, make_benchmark, render

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2
EXIT_GEOMETRIC = 3

_NUMERIC_ERRORS = (DegenerateFit, NoViableSpec, TooFewInliers, ArithmeticError)
_GEOMETRIC_ERRORS = (CheiralityViolation, SingularMap, PointAtInfinity, InvisibleGrid)


class InputError(Exception):
    """Malformed input file or inconsistent flags."""


# --------------------------------------------------------------------------
# Detection / report JSON schemas


def _require_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InputError(f"{where} must be a number")
    if not np.isfinite(value):
        raise InputError(f"{where} must be finite")
    return float(value)


def _require_positive_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InputError(f"{where} must be an integer")
    if value <= 0:
        raise InputError(f"{where} must be positive")
    return value


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise InputError(f"unknown field(s) in {where}: {', '.join(sorted(unknown))}")


def parse_detection_file(data) -> tuple[DetectionSet, str | None]:
    """Validate a detection document and build the DetectionSet.

    Schema: {"image"?: str, "width": int, "height": int,
             "points": [{"x": number, "y": number}, ...]}.
    Unknown fields are rejected.
    """
    if not isinstance(data, dict):
        raise InputError("detection file must be a JSON object")
    _reject_unknown(data, {"image", "width", "height", "points"}, "detection file")
    for key in ("width", "height", "points"):
        if key not in data:
            raise InputError(f"detection file is missing {key!r}")
    image = data.get("image")
    if image is not None and not isinstance(image, str):
        raise InputError("'image' must be a string path")
    width = _require_positive_int(data["width"], "'width'")
    height = _require_positive_int(data["height"], "'height'")
    if not isinstance(data["points"], list):
        raise InputError("'points' must be an array")
    pts = []
    for n, entry in enumerate(data["points"]):
        if not isinstance(entry, dict):
            raise InputError(f"points[{n}] must be an object")
        _reject_unknown(entry, {"x", "y"}, f"points[{n}]")
        if "x" not in entry or "y" not in entry:
            raise InputError(f"points[{n}] needs both 'x' and 'y'")
        pts.append(
            [
                _require_number(entry["x"], f"points[{n}].x"),
                _require_number(entry["y"], f"points[{n}].y"),
            ]
        )
    points = np.array(pts, dtype=np.float64).reshape(-1, 2)
    return DetectionSet(points=points, width=width, height=height), image


def detection_file_dict(X: DetectionSet, image: str | None = None) -> dict:
    doc: dict = {}
    if image is not None:
        doc["image"] = image
    doc["width"] = int(X.width)
    doc["height"] = int(X.height)
    doc["points"] = [{"x": float(x), "y": float(y)} for x, y in X.points]
    return doc


def load_detection_file(path: Path) -> tuple[DetectionSet, str | None]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    return parse_detection_file(data)


def _assignments(fit: FitResult) -> list[int]:
    """Per-detection arg-max component index; -1 denotes the outlier column."""
    k = fit.gamma.shape[1] - 1
    assign = np.argmax(fit.gamma, axis=1)
    return [int(a) if a < k else -1 for a in assign]


def grid_report(fit: FitResult, spec: GridSpec) -> dict:
    p = fit.params
    return {
        "rows": spec.rows,
        "cols": spec.cols,
        "origin": [float(v) for v in p.origin],
        "spacing": [float(v) for v in p.spacing],
        "sigma": [float(v) for v in p.sigma],
        "nll_history": [float(v) for v in fit.nll_history],
        "iterations": fit.iterations,
        "converged": fit.converged,
    }


def pose_report(sol: PoseSolution) -> dict:
    return {
        "theta": [float(v) for v in sol.pose.theta],
        "t": [float(v) for v in sol.pose.t],
        "final_cost": float(sol.final_cost),
        "iterations": sol.iterations,
        "converged": sol.converged,
    }


def full_report(result: RectifyResult) -> dict:
    return {
        "grid": grid_report(result.grid, result.spec),
        "pose": pose_report(result.pose),
        "homography": result.homography.flat(),
        "metric": float(result.metric),
        "rounds": result.rounds,
        "assignments": _assignments(result.grid),
    }


def _write_json(doc: dict, out: Path | None) -> None:
    text = json.dumps(doc, indent=2)
    if out is None:
        click.echo(text)
    else:
        Path(out).write_text(text + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# PNG I/O


def load_png(path: Path) -> ImageBuffer:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return ImageBuffer(arr)


def save_png(buf: ImageBuffer, path: Path) -> None:
    arr = buf.data[:, :, 0] if buf.channels == 1 else buf.data
    Image.fromarray(arr).save(path, format="PNG")


# --------------------------------------------------------------------------
# Shared option parsing


def _parse_floats(text: str, n: int, what: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != n:
        raise InputError(f"{what} needs {n} comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise InputError(f"{what}: {exc}") from exc


def _parse_intrinsics(text: str) -> Intrinsics:
    fx, fy, cx, cy = _parse_floats(text, 4, "--intrinsics")
    if fx <= 0 or fy <= 0:
        raise InputError("--intrinsics focal lengths must be positive")
    return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy)


def _parse_range(text: str, what: str) -> range:
    lo, hi = (int(round(v)) for v in _parse_floats(text, 2, what))
    if lo < 1 or hi < lo:
        raise InputError(f"{what} must be a non-empty ascending range")
    return range(lo, hi + 1)


def _resolve_spec(
    X: DetectionSet,
    mix: MixtureConfig,
    rows: int | None,
    cols: int | None,
    auto_dims: bool,
    row_range: range,
    col_range: range,
) -> GridSpec:
    if auto_dims:
        if rows is not None or cols is not None:
            raise InputError("--auto-dims conflicts with --rows/--cols")
        return select_grid_dims(X, mix, row_range, col_range)
    if rows is None or cols is None:
        raise InputError("either both --rows and --cols or --auto-dims is required")
    if rows < 1 or cols < 1:
        raise InputError("--rows and --cols must be positive")
    return GridSpec(rows, cols)


def _run(body) -> None:
    """Execute a command body under the exit-code contract."""
    try:
        body()
    except (InputError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT)
    except _NUMERIC_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    except _GEOMETRIC_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_GEOMETRIC)


def _max_workers(n_tasks: int) -> int:
    env = os.environ.get("GRID_RECTIFY_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


# --------------------------------------------------------------------------
# Commands


@click.group()
def cli() -> None:
    """Grid fitting, pose estimation and perspective rectification."""


@cli.command("fit")
@click.argument("detections", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--rows", type=int, default=None, help="Grid rows.")
@click.option("--cols", type=int, default=None, help="Grid columns.")
@click.option("--auto-dims", is_flag=True, help="Select rows/cols by BIC.")
@click.option("--row-range", default="2,8", show_default=True, help="Rows for --auto-dims.")
@click.option("--col-range", default="2,6", show_default=True, help="Cols for --auto-dims.")
@click.option("--alpha", type=float, default=0.8, show_default=True, help="Inlier mass.")
@click.option("--init-spacing", default="100,100", show_default=True)
@click.option("--init-sigma", default="640,640", show_default=True)
@click.option("--tol", type=float, default=1e-8, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Report path (default: stdout).")
def cmd_fit(detections, rows, cols, auto_dims, row_range, col_range, alpha,
            init_spacing, init_sigma, tol, max_iter, out):
    """Fit the grid mixture to a detection file and report the parameters."""

    def body():
        X, _ = load_detection_file(detections)
        if not 0.0 < alpha <= 1.0:
            raise InputError("--alpha must lie in (0, 1]")
        mix = MixtureConfig.for_image(X.width, X.height, alpha=alpha)
        spec = _resolve_spec(
            X, mix, rows, cols, auto_dims,
            _parse_range(row_range, "--row-range"),
            _parse_range(col_range, "--col-range"),
        )
        init = default_init(
            X,
            spacing=_parse_floats(init_spacing, 2, "--init-spacing"),
            sigma=_parse_floats(init_sigma, 2, "--init-sigma"),
        )
        fit = fit_grid(X, spec, mix, init=init, tol=tol, max_iter=max_iter)
        _write_json(
            {"grid": grid_report(fit, spec), "assignments": _assignments(fit)}, out
        )

    _run(body)


def _fit_canvas(H: Homography, width: int, height: int) -> tuple[Homography, int, int]:
    """Translate/clip the map so the warped image quadrilateral fits exactly."""
    corners = np.array(
        [[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]], float
    )
    warped = warp_points(H, corners)
    lo = np.floor(warped.min(axis=0))
    hi = np.ceil(warped.max(axis=0))
    shift = np.array([[1.0, 0.0, -lo[0]], [0.0, 1.0, -lo[1]], [0.0, 0.0, 1.0]])
    size = np.maximum(hi - lo + 1, 1).astype(int)
    return Homography(shift @ H.matrix), int(size[0]), int(size[1])


@cli.command("rectify")
@click.argument("detections", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--image", "image_path", type=click.Path(path_type=Path), default=None,
              help="PNG to warp (default: the detection file's 'image', if set).")
@click.option("--intrinsics", default="320,320,320,240", show_default=True,
              help="fx,fy,cx,cy in pixels.")
@click.option("--rounds", type=int, default=3, show_default=True,
              help="Maximum grid-fit/pose alternations.")
@click.option("--rows", type=int, default=None)
@click.option("--cols", type=int, default=None)
@click.option("--auto-dims", is_flag=True, default=False,
              help="Select rows/cols by BIC (default when --rows/--cols absent).")
@click.option("--row-range", default="2,8", show_default=True)
@click.option("--col-range", default="2,6", show_default=True)
@click.option("--alpha", type=float, default=0.8, show_default=True)
@click.option("--xi0", default=None, help="Pose init t1,..,t6 (default: identity).")
@click.option("--auto-canvas", is_flag=True, help="Size the output PNG to the warped quad.")
@click.option("--out-report", type=click.Path(path_type=Path), default=None)
@click.option("--out-image", type=click.Path(path_type=Path), default=None)
def cmd_rectify(detections, image_path, intrinsics, rounds, rows, cols, auto_dims,
                row_range, col_range, alpha, xi0, auto_canvas, out_report, out_image):
    """Run the full rectification pipeline on a detection file."""

    def body():
        X, image_field = load_detection_file(detections)
        K = _parse_intrinsics(intrinsics)
        if not 0.0 < alpha <= 1.0:
            raise InputError("--alpha must lie in (0, 1]")
        if rounds < 1:
            raise InputError("--rounds must be at least 1")
        spec = None
        if rows is not None or cols is not None:
            if auto_dims:
                raise InputError("--auto-dims conflicts with --rows/--cols")
            if rows is None or cols is None:
                raise InputError("--rows and --cols must be given together")
            spec = GridSpec(rows, cols)
        pose0 = None
        if xi0 is not None:
            pose0 = Pose.from_vector(_parse_floats(xi0, 6, "--xi0"))
        result = rectify_pipeline(
            X,
            K,
            spec=spec,
            alpha=alpha,
            max_rounds=rounds,
            xi0=pose0,
            row_range=_parse_range(row_range, "--row-range"),
            col_range=_parse_range(col_range, "--col-range"),
        )
        _write_json(full_report(result), out_report)

        src = image_path if image_path is not None else (
            detections.parent / image_field if image_field else None
        )
        if out_image is not None:
            if src is None:
                raise InputError("--out-image given but no input image available")
            img = load_png(src)
            H = result.homography
            if auto_canvas:
                H, out_w, out_h = _fit_canvas(H, img.width, img.height)
                warped = warp_image(img, H, out_w, out_h)
            else:
                warped = warp_image(img, H)
            save_png(warped, out_image)

    _run(body)


@cli.command("synth")
@click.option("--groups", type=int, default=5, show_default=True)
@click.option("--per-group", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--noise", type=float, default=1.0, show_default=True,
              help="Detection noise std (px).")
@click.option("--outlier-fraction", type=float, default=0.1, show_default=True)
@click.option("--dropout", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--render", "do_render", is_flag=True, help="Also write PNGs.")
def cmd_synth(groups, per_group, seed, noise, outlier_fraction, dropout, out_dir, do_render):
    """Generate a synthetic benchmark: detection files plus truth sidecars."""

    def body():
        if groups < 0 or per_group < 0:
            raise InputError("--groups and --per-group must be non-negative")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        instances = make_benchmark(
            n_groups=groups,
            per_group=per_group,
            seed=seed,
            noise_sigma=noise,
            outlier_fraction=outlier_fraction,
            dropout_count=dropout,
        )
        for idx, inst in enumerate(instances):
            g, i = divmod(idx, per_group) if per_group else (0, idx)
            stem = f"g{g:02d}_i{i:02d}"
            image_name = f"{stem}.png" if do_render else None
            (out / f"{stem}.json").write_text(
                json.dumps(detection_file_dict(inst.detections, image_name), indent=2)
                + "\n",
                encoding="utf-8",
            )
            (out / f"{stem}.truth.json").write_text(
                json.dumps(_truth_dict(inst, g, i), indent=2) + "\n", encoding="utf-8"
            )
            if do_render:
                save_png(render(inst), out / image_name)

    _run(body)


def _truth_dict(inst: SynthInstance, group: int, instance: int) -> dict:
    scene = inst.truth
    return {
        "group": group,
        "instance": instance,
        "rows": scene.spec.rows,
        "cols": scene.spec.cols,
        "origin": [float(v) for v in scene.true_params.origin],
        "spacing": [float(v) for v in scene.true_params.spacing],
        "pose": {
            "theta": [float(v) for v in scene.true_pose.theta],
            "t": [float(v) for v in scene.true_pose.t],
        },
        "intrinsics": {
            "fx": scene.intrinsics.fx,
            "fy": scene.intrinsics.fy,
            "cx": scene.intrinsics.cx,
            "cy": scene.intrinsics.cy,
        },
        "width": scene.width,
        "height": scene.height,
        "noise_sigma": scene.noise_sigma,
        "outlier_count": scene.outlier_count,
        "dropout_count": scene.dropout_count,
        "seed": scene.seed,
        "labels": [int(v) for v in inst.labels],
    }


def _load_truth(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def pose_errors_vs_truth(
    result: RectifyResult, truth: dict, intrinsics: Intrinsics
) -> tuple[float, float]:
    """Rotation (deg) and relative translation error of the recovered motion.

    The pipeline's total claim is its composed homography together with the
    grid it fitted on the corrected image; the in-plane origin and scale of
    that grid are unobservable from a single view. The claim is re-expressed
    in the true grid's coordinates (an in-plane affine change of reference)
    and decomposed into the nearest rigid pose, which is then compared with
    the generating pose.
    """
    R_true = rotation_matrix(np.array(truth["pose"]["theta"]))
    t_true = np.array(truth["pose"]["t"])

    fit_p = result.reference_lattice
    sx = fit_p.spacing[0] / truth["spacing"][0]
    sy = fit_p.spacing[1] / truth["spacing"][1]
    vx = (fit_p.origin[0] - intrinsics.cx) / intrinsics.fx - sx * (
        truth["origin"][0] - intrinsics.cx
    ) / intrinsics.fx
    vy = (fit_p.origin[1] - intrinsics.cy) / intrinsics.fy - sy * (
        truth["origin"][1] - intrinsics.cy
    ) / intrinsics.fy
    regauge = np.array([[sx, 0.0, vx], [0.0, sy, vy], [0.0, 0.0, 1.0]])

    claim = forward_plane_map(result.homography, intrinsics) @ regauge
    rt = decompose_plane_map(claim)
    if rt is None:
        return float("inf"), float("inf")
    R_est, t_est = rt
    rot_err = float(np.degrees(np.linalg.norm(rotation_log(R_est @ R_true.T))))
    trans_err = float(np.linalg.norm(t_est - t_true) / np.linalg.norm(t_true))
    return rot_err, trans_err


def _eval_one(det_path: Path, truth_path: Path, rounds: int, alpha: float) -> dict:
    X, _ = load_detection_file(det_path)
    truth = _load_truth(truth_path)
    K = Intrinsics(**truth["intrinsics"])
    spec = GridSpec(truth["rows"], truth["cols"])
    result = rectify_pipeline(X, K, spec=spec, alpha=alpha, max_rounds=rounds)
    rot_err, trans_err = pose_errors_vs_truth(result, truth, K)
    return {
        "group": int(truth["group"]),
        "instance": int(truth["instance"]),
        "metric_x1000": float(result.metric),
        "rot_err_deg": rot_err,
        "trans_err": trans_err,
        "rounds": result.rounds,
    }


_EVAL_COLUMNS = ["group", "instance", "metric_x1000", "rot_err_deg", "trans_err", "rounds"]


def evaluate_benchmark(bench_dir: Path, rounds: int = 3, alpha: float = 0.8) -> str:
    """Run the pipeline over a benchmark directory; return the CSV text."""
    bench_dir = Path(bench_dir)
    det_files = sorted(
        p for p in bench_dir.glob("*.json") if not p.name.endswith(".truth.json")
    )
    if not det_files:
        raise InputError(f"no detection files found in {bench_dir}")
    pairs = []
    for det in det_files:
        truth = det.with_name(det.stem + ".truth.json")
        if not truth.exists():
            raise InputError(f"missing truth sidecar for {det.name}")
        pairs.append((det, truth))

    workers = _max_workers(len(pairs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(
                pool.map(lambda p: _eval_one(p[0], p[1], rounds, alpha), pairs)
            )
    else:
        records = [_eval_one(det, truth, rounds, alpha) for det, truth in pairs]

    records.sort(key=lambda r: (r["group"], r["instance"]))
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(_EVAL_COLUMNS)
    for rec in records:
        writer.writerow([rec[c] for c in _EVAL_COLUMNS])
    for group in sorted({r["group"] for r in records}):
        rows_g = [r for r in records if r["group"] == group]
        writer.writerow(
            [
                group,
                "average",
                sum(r["metric_x1000"] for r in rows_g) / len(rows_g),
                sum(r["rot_err_deg"] for r in rows_g) / len(rows_g),
                sum(r["trans_err"] for r in rows_g) / len(rows_g),
                sum(r["rounds"] for r in rows_g) / len(rows_g),
            ]
        )
    return buf.getvalue()


@cli.command("eval")
@click.option("--bench-dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True)
@click.option("--rounds", type=int, default=3, show_default=True)
@click.option("--alpha", type=float, default=0.8, show_default=True)
@click.option("--out", "out_csv", type=click.Path(path_type=Path), default=None,
              help="CSV path (default: stdout).")
def cmd_eval(bench_dir, rounds, alpha, out_csv):
    """Evaluate the pipeline against a synthetic benchmark's ground truth."""

    def body():
        text = evaluate_benchmark(bench_dir, rounds=rounds, alpha=alpha)
        if out_csv is None:
            click.echo(text, nl=False)
        else:
            Path(out_csv).write_text(text, encoding="utf-8", newline="")

    _run(body)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_INPUT)
    except click.Abort:
        sys.exit(EXIT_INPUT)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
