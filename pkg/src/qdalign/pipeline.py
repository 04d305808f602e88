"""Scene-level orchestration: frames in, registered coordinates out.

Chains the single-purpose modules into the workflows the command line
exposes.  `locate` turns a marker/emitter frame pair into grid-frame
emitter coordinates with combined uncertainty; `misalign` measures each
fabricated guide axis against the pre-localized emitter it was placed
on; the spectral passes reduce spectrum pairs and voltage-wavelength
maps to shift statistics and quadratic field-response parameters.

Everything here is deterministic and side-effect free except for the
explicit artifact writers; CSV and JSON outputs are written atomically
and in stable order so reruns are byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .emitters import EmitterFit, detect_spots, fit_emitter_airy, fit_emitter_gaussian
from .errors import (
    ContractError,
    DecodeError,
    DegenerateCrossError,
    EdgeError,
    FitError,
    NoFeaturesError,
    UnderdeterminedError,
)
from .fileio import atomic_write_text, read_csv, write_csv
from .imgproc import Image, crop, estimate_rotation, load_image, rotate, subtract_background
from .markers import (
    CROSS_CSV_COLUMNS,
    CrossFit,
    GridGeometry,
    GridLabel,
    cross_rows,
    decode_label,
    detect_crosses,
    fit_cross,
)
from .registration import (
    FrameTransform,
    GlobalPoint,
    correlate_devices,
    frame_uncertainty,
    save_transform,
    solve_transform,
    to_global,
)
from .stark import (
    SHIFT_CSV_COLUMNS,
    FieldConfig,
    ShiftRecord,
    Spectrum,
    compare_stark,
    extract_plateaus,
    fit_stark,
    read_plateau_map,
    shift_rows,
    shift_stats,
    spectral_shift,
)
from .waveguides import (
    MISALIGN_CSV_COLUMNS,
    WaveguideAxis,
    fit_waveguide,
    histogram_rows,
    misalign,
    misalign_stats,
)

__all__ = [
    "StageFailure",
    "LocatedScene",
    "locate_scene",
    "run_locate",
    "run_misalign",
    "run_stark",
    "histogram_svg",
]

# The illumination envelope spans more than +-2 MAD of the frame, so the
# background fit must keep envelope pixels and reject only the shadows.
ENVELOPE_MASK_MAD = 6.0
# Wetting-layer-lit frames put the footprint contrast near 4.8 robust
# sigmas; the default 5.0 would drop valid nodes.
CROSS_MIN_CONTRAST = 4.5
# Below this the similarity transform absorbs the rotation exactly and
# resampling would only add interpolation noise.
ROTATE_MIN_DEG = 0.05
EMITTER_ROI_SIDE = 31
# A bright spot's own secondary maxima (noise ties on the peak, Airy
# rings) merge its region with itself, up to ring radius plus the box
# halo on both sides (~70 px here).  Regions beyond this limit can only
# be two overlapping spots and are skipped as ambiguous.
MERGED_ROI_LIMIT_PX = 96
# Guide-axis ROI: +-30 px keeps ~5 px beyond the trench-edge glow peaks
# and excludes the membrane plateau that biases the three-peak model.
GUIDE_ROI_HALF_PX = 30
GUIDE_MARGIN_NM = 3000.0
QD_MATCH_WINDOW_NM = 300.0
YIELD_RADIUS_NM = 150.0

GLOBAL_CSV_COLUMNS = ("emitter_id", "x_nm", "y_nm", "delta_nm", "model", "photons")


class StageFailure(Exception):
    """A pipeline stage could not produce its output.

    ``config_error`` separates bad inputs (missing files, inconsistent
    settings) from runtime failures on valid inputs.
    """

    def __init__(self, stage: str, message: str, config_error: bool = False):
        super().__init__(message)
        self.stage = stage
        self.config_error = config_error

    def record(self) -> dict:
        return {
            "stage": self.stage,
            "error": "config" if self.config_error else "runtime",
            "message": str(self),
        }


@dataclass
class LocatedScene:
    scene_id: str
    epoch: str
    rotation_deg: float
    transform: FrameTransform
    crosses: list[CrossFit]
    nodes: list[tuple[float, float]]
    label: GridLabel | None
    emitters: list[EmitterFit]
    points: list[GlobalPoint]
    warnings: list[str] = field(default_factory=list)

    @property
    def delta_mean_nm(self) -> float:
        if not self.points:
            return float("nan")
        return float(np.mean([p.unc for p in self.points]))


@dataclass
class DeviceAxis:
    device_id: str
    axis: WaveguideAxis
    axis_grid_nm: float
    frame_unc_nm: float


@dataclass
class _QdPoint:
    """Adapter carrying a grid-frame point into the misalign contract."""

    x: float
    y: float
    unc_x: float
    unc_y: float


def _geometry(settings: dict) -> GridGeometry:
    ox, oy = settings["grid_origin_nm"]
    return GridGeometry(
        origin_x=float(ox),
        origin_y=float(oy),
        pitch=float(settings["grid_pitch_nm"]),
        rows=int(settings["grid_rows"]),
        cols=int(settings["grid_cols"]),
        arm_length=float(settings["arm_length_nm"]),
        arm_width=float(settings["arm_width_nm"]),
    )


def _load_image(root: Path, rel: str, stage: str) -> Image:
    path = Path(root) / rel
    if not path.exists():
        raise StageFailure(stage, f"missing input {path}", config_error=True)
    try:
        return load_image(path)
    except (ContractError, OSError, ValueError) as err:
        raise StageFailure(stage, f"unreadable image {path}: {err}") from err


def _derotate(img: Image, angle_deg: float) -> Image:
    if abs(angle_deg) < ROTATE_MIN_DEG:
        return img
    return rotate(img, -angle_deg)


def register_markers(
    img: Image, geometry: GridGeometry
) -> tuple[list[CrossFit], list[tuple[float, float]], FrameTransform, object, list[str]]:
    """Detect, fit and register the marker grid of one frame.

    Returns the paired cross fits and nominal nodes, the grid-to-image
    transform, the fitted background model, and any per-node warnings.
    """
    warnings: list[str] = []
    _, model = subtract_background(img, mask_mad=ENVELOPE_MASK_MAD)
    rois = detect_crosses(img, geometry, background=model, min_contrast=CROSS_MIN_CONTRAST)
    if not rois:
        raise StageFailure("markers", "no marker crosses detected")

    fits: list[CrossFit] = []
    for roi in rois:
        try:
            fits.append(fit_cross(roi, geometry.arm_width / img.pixel_pitch))
        except (FitError, DegenerateCrossError, ContractError) as err:
            warnings.append(f"cross at ({roi.x0}, {roi.y0}) px rejected: {err}")

    # detect_crosses returns anonymous regions; recover each node
    # identity from proximity to the nominal grid.
    limit = geometry.pitch / 4.0
    paired_fits, paired_nodes, used = [], [], set()
    for fit in fits:
        best, best_d = None, limit
        for node, x_nm, y_nm in geometry.nodes():
            d = math.hypot(fit.center_x - x_nm, fit.center_y - y_nm)
            if d < best_d and node not in used:
                best, best_d = (node, x_nm, y_nm), d
        if best is None:
            warnings.append(
                f"cross at ({fit.center_x:.0f}, {fit.center_y:.0f}) nm "
                "matches no grid node"
            )
            continue
        used.add(best[0])
        paired_fits.append(fit)
        paired_nodes.append((best[1], best[2]))

    try:
        transform = solve_transform(paired_fits, paired_nodes)
    except (UnderdeterminedError, ContractError) as err:
        raise StageFailure("markers", f"marker registration failed: {err}") from err
    return paired_fits, paired_nodes, transform, model, warnings


def _read_label(
    img: Image, settings: dict, transform: FrameTransform, bg_model
) -> GridLabel:
    ox, oy = settings["grid_origin_nm"]
    dx, dy = settings["label_offset_nm"]
    cx_nm, cy_nm = transform.apply((ox + dx, oy + dy))
    pitch = img.pixel_pitch
    # 8 bars at 1770 nm pitch, the tallest 1180 nm: a half-size with
    # margin on both axes.
    half_w = int((7 * 1770.0 / 2.0 + 1180.0) / pitch) + 2
    half_h = int(1180.0 / pitch) + 2
    x0 = int(round(cx_nm / pitch)) - half_w
    y0 = int(round(cy_nm / pitch)) - half_h
    if x0 < 0 or y0 < 0 or x0 + 2 * half_w + 1 > img.width or y0 + 2 * half_h + 1 > img.height:
        raise DecodeError("label region clips the frame")
    roi = crop(img, x0, y0, 2 * half_w + 1, 2 * half_h + 1)
    shadow = np.maximum(bg_model.evaluate(img.counts.shape)[
        y0 : y0 + roi.height, x0 : x0 + roi.width
    ] - roi.data, 0.0)
    return decode_label(dataclasses.replace(roi, data=shadow))


def locate_scene(
    settings: dict,
    files: dict[str, str],
    root: Path,
    epoch: str,
    scene_id: str,
) -> LocatedScene:
    """Full localization pass over one scene at one epoch."""
    if epoch not in ("pre", "post"):
        raise StageFailure("config", f"unknown epoch {epoch!r}", config_error=True)

    def rel(key: str, stage: str) -> str:
        if key not in files:
            raise StageFailure(
                stage, f"scene {scene_id} lists no {key} input", config_error=True
            )
        return files[key]

    markers_img = _load_image(root, rel(f"{epoch}_markers", "markers"), "markers")
    emitters_img = _load_image(root, rel(f"{epoch}_emitters", "emitters"), "emitters")

    try:
        angle = estimate_rotation(markers_img).angle_deg
    except NoFeaturesError as err:
        raise StageFailure("markers", f"rotation estimate failed: {err}") from err
    markers_img = _derotate(markers_img, angle)
    # The emitter frame shares the stage orientation but has no lines to
    # estimate from; reuse the marker angle.
    emitters_img = _derotate(emitters_img, angle)

    geometry = _geometry(settings)
    crosses, nodes, transform, bg_model, warnings = register_markers(markers_img, geometry)

    label = None
    try:
        label = _read_label(markers_img, settings, transform, bg_model)
    except (DecodeError, ContractError) as err:
        warnings.append(f"label not decoded: {err}")

    spots = detect_spots(emitters_img, roi_side=EMITTER_ROI_SIDE)
    fit_one = fit_emitter_gaussian if epoch == "pre" else fit_emitter_airy
    emitters: list[EmitterFit] = []
    points: list[GlobalPoint] = []
    for roi in spots:
        if roi.merged and max(roi.width, roi.height) > MERGED_ROI_LIMIT_PX:
            warnings.append(
                f"merged spot region at ({roi.x0}, {roi.y0}) px skipped"
            )
            continue
        try:
            fit = fit_one(roi, emitters_img.pixel_pitch)
        except (FitError, ContractError) as err:
            warnings.append(f"spot at ({roi.x0}, {roi.y0}) px rejected: {err}")
            continue
        grid_xy = transform.apply_inverse((fit.x, fit.y))
        marker_unc = frame_uncertainty(transform, crosses, grid_xy)
        points.append(
            to_global((fit.x, fit.y), max(fit.unc_x, fit.unc_y), transform, marker_unc)
        )
        emitters.append(fit)

    return LocatedScene(
        scene_id=scene_id,
        epoch=epoch,
        rotation_deg=float(angle),
        transform=transform,
        crosses=crosses,
        nodes=nodes,
        label=label,
        emitters=emitters,
        points=points,
        warnings=warnings,
    )


def write_locate_outputs(scene: LocatedScene, out_dir: Path) -> dict[str, str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = (
        f"scene_id={scene.scene_id}",
        f"epoch={scene.epoch}",
        f"rotation_deg={scene.rotation_deg:.6f}",
    )
    write_csv(out_dir / "markers.csv", CROSS_CSV_COLUMNS, cross_rows(scene.crosses), meta)
    rows = [
        (i, p.x, p.y, p.unc, f.model, f.photons)
        for i, (p, f) in enumerate(zip(scene.points, scene.emitters))
    ]
    write_csv(out_dir / "emitters.csv", GLOBAL_CSV_COLUMNS, rows, meta)
    save_transform(scene.transform, out_dir / "transform.json")
    return {
        "markers": str(out_dir / "markers.csv"),
        "emitters": str(out_dir / "emitters.csv"),
        "transform": str(out_dir / "transform.json"),
    }


def run_locate(config: dict, root: Path, out: Path, epoch: str = "pre") -> dict:
    """Locate every scene of a corpus; returns the run summary."""
    settings = config["settings"]
    out = Path(out)
    scene_summaries = []
    deltas = []
    for entry in config.get("scenes", []):
        scene = locate_scene(settings, entry["files"], root, epoch, entry["scene_id"])
        write_locate_outputs(scene, out / scene.scene_id)
        scene_summaries.append(
            {
                "scene_id": scene.scene_id,
                "n_emitters": len(scene.points),
                "delta_mean_nm": scene.delta_mean_nm,
                "rotation_deg": scene.rotation_deg,
                "label": None
                if scene.label is None
                else {"row": scene.label.row, "column": scene.label.column},
                "warnings": scene.warnings,
            }
        )
        deltas.extend(p.unc for p in scene.points)
    summary = {
        "epoch": epoch,
        "n_scenes": len(scene_summaries),
        "n_emitters": len(deltas),
        "delta_mean_nm": float(np.mean(deltas)) if deltas else None,
        "scenes": scene_summaries,
    }
    atomic_write_text(out / "locate.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------------------
# misalignment pass


def fit_device_axes(
    img: Image,
    transform: FrameTransform,
    crosses: list[CrossFit],
    settings: dict,
    devices: list[dict],
) -> tuple[list[DeviceAxis], list[str]]:
    """Fit each fabricated guide axis on the registered post frame."""
    warnings: list[str] = []
    ox, _oy = settings["grid_origin_nm"]
    grid_pitch = settings["grid_pitch_nm"]
    pitch = img.pixel_pitch
    axes: list[DeviceAxis] = []
    for dev in devices:
        if dev.get("orientation", "along-x") != "along-x":
            warnings.append(f"{dev['device_id']}: unsupported orientation, skipped")
            continue
        y_nm = float(dev["design_axis_nm"])
        x_lo, _ = transform.apply((ox + GUIDE_MARGIN_NM, y_nm))
        x_hi, _ = transform.apply((ox + grid_pitch - GUIDE_MARGIN_NM, y_nm))
        _, y_img = transform.apply((ox + grid_pitch / 2.0, y_nm))
        x0 = max(int(round(min(x_lo, x_hi) / pitch)), 0)
        x1 = min(int(round(max(x_lo, x_hi) / pitch)), img.width)
        y0 = int(round(y_img / pitch)) - GUIDE_ROI_HALF_PX
        height = 2 * GUIDE_ROI_HALF_PX + 1
        if y0 < 0 or y0 + height > img.height or x1 - x0 < 3:
            warnings.append(f"{dev['device_id']}: guide region clips the frame")
            continue
        roi = crop(img, x0, y0, x1 - x0, height)
        try:
            axis = fit_waveguide(img, roi, "along-x")
        except (FitError, ContractError) as err:
            warnings.append(f"{dev['device_id']}: axis fit failed: {err}")
            continue
        mid_x_img = (x0 + x1) / 2.0 * pitch
        grid_pt = transform.apply_inverse((mid_x_img, axis.axis_coordinate))
        axes.append(
            DeviceAxis(
                device_id=dev["device_id"],
                axis=axis,
                axis_grid_nm=float(grid_pt[1]),
                frame_unc_nm=frame_uncertainty(transform, crosses, grid_pt),
            )
        )
    return axes, warnings


def misalign_devices(
    pre_points: list[GlobalPoint], axes: list[DeviceAxis]
) -> tuple[list[tuple], list[float], list[str]]:
    """Match each guide axis to its pre-localized emitter and measure."""
    rows: list[tuple] = []
    deltas: list[float] = []
    warnings: list[str] = []
    used: set[int] = set()
    for dev in axes:
        best, best_d = None, QD_MATCH_WINDOW_NM
        for i, p in enumerate(pre_points):
            d = abs(p.y - dev.axis_grid_nm)
            if d < best_d and i not in used:
                best, best_d = i, d
        if best is None:
            warnings.append(f"{dev.device_id}: no emitter within match window")
            continue
        used.add(best)
        p = pre_points[best]
        qd = _QdPoint(
            x=p.x,
            y=p.y,
            unc_x=math.hypot(p.unc, dev.frame_unc_nm),
            unc_y=math.hypot(p.unc, dev.frame_unc_nm),
        )
        wg = dataclasses.replace(dev.axis, axis_coordinate=dev.axis_grid_nm)
        m = misalign(qd, wg)
        deltas.append(m.delta)
        rows.append(
            (
                dev.device_id,
                wg.orientation,
                dev.axis_grid_nm,
                dev.axis.unc,
                p.y,
                m.delta,
                m.unc,
            )
        )
    return rows, deltas, warnings


def _load_pre_points(locate_dir: Path, scene_id: str) -> list[GlobalPoint] | None:
    path = Path(locate_dir) / scene_id / "emitters.csv"
    if not path.exists():
        return None
    _, rows = read_csv(path)
    return [
        GlobalPoint(
            x=float(r["x_nm"]), y=float(r["y_nm"]), unc=float(r["delta_nm"]),
            source="emitter",
        )
        for r in rows
    ]


def run_misalign(
    config: dict, root: Path, out: Path, locate_dir: Path | None = None
) -> dict:
    """Misalignment statistics over a device corpus.

    Pre-fabrication emitter positions come from an earlier locate run
    when ``locate_dir`` holds them, otherwise they are recomputed here.
    """
    settings = config["settings"]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    all_rows: list[tuple] = []
    deltas: list[float] = []
    warnings: list[str] = []
    matched = unmatched = 0
    yield_pairs = yield_total = 0
    for entry in config.get("scenes", []):
        scene_id = entry["scene_id"]
        pre_points = None
        if locate_dir is not None:
            pre_points = _load_pre_points(locate_dir, scene_id)
        if pre_points is None:
            pre = locate_scene(settings, entry["files"], root, "pre", scene_id)
            warnings.extend(f"{scene_id}: {w}" for w in pre.warnings)
            pre_points = pre.points

        post = locate_scene(settings, entry["files"], root, "post", scene_id)
        warnings.extend(f"{scene_id}: {w}" for w in post.warnings)
        markers_img = _derotate(
            _load_image(root, entry["files"]["post_markers"], "markers"),
            post.rotation_deg,
        )
        axes, axis_warnings = fit_device_axes(
            markers_img, post.transform, post.crosses, settings, entry.get("devices", [])
        )
        warnings.extend(f"{scene_id}: {w}" for w in axis_warnings)
        rows, scene_deltas, match_warnings = misalign_devices(pre_points, axes)
        warnings.extend(f"{scene_id}: {w}" for w in match_warnings)
        matched += len(rows)
        unmatched += len(axes) - len(rows)
        all_rows.extend((scene_id,) + row for row in rows)
        deltas.extend(scene_deltas)

        pairing = correlate_devices(pre_points, post.points, YIELD_RADIUS_NM)
        yield_pairs += len(pairing.pairs)
        yield_total += len(pre_points)

    stats = None
    if len(deltas) >= 5:
        s = misalign_stats(deltas)
        stats = {
            "mean_nm": s.mean,
            "std_nm": s.std,
            "anderson_stat": s.anderson_stat,
            "n": s.n,
        }
    write_csv(
        out / "misalignment.csv",
        ("scene_id",) + MISALIGN_CSV_COLUMNS,
        all_rows,
        (f"n_devices={matched}", f"n_unmatched={unmatched}"),
    )
    write_csv(out / "histogram.csv", ("bin_center_nm", "count"), histogram_rows(deltas))
    atomic_write_text(out / "histogram.svg", histogram_svg(histogram_rows(deltas)))
    summary = {
        "stats": stats,
        "n_matched": matched,
        "n_unmatched": unmatched,
        "emitter_yield": (yield_pairs / yield_total) if yield_total else None,
        "warnings": warnings,
    }
    atomic_write_text(
        out / "misalign.json", json.dumps(summary, indent=1, sort_keys=True) + "\n"
    )
    return summary


# ---------------------------------------------------------------------------
# spectral passes


def _read_spectrum(root: Path, rel: str) -> Spectrum:
    path = Path(root) / rel
    if not path.exists():
        raise StageFailure("stark", f"missing input {path}", config_error=True)
    _, rows = read_csv(path)
    return Spectrum(
        wavelengths=np.array([float(r["wavelength_nm"]) for r in rows]),
        intensities=np.array([float(r["intensity"]) for r in rows]),
    )


def _stark_scene(entry: dict, root: Path, cfg: FieldConfig) -> dict:
    """Plateau maps -> per-line quadratic models and their change."""
    result = {"scene_id": entry["scene_id"], "lines": {}, "warnings": []}
    fitted: dict[str, dict] = {}
    for epoch in ("pre", "post"):
        path = Path(root) / entry["files"][epoch]
        if not path.exists():
            raise StageFailure("stark", f"missing input {path}", config_error=True)
        plateau_map = read_plateau_map(path)
        try:
            traces = extract_plateaus(plateau_map)
        except (FitError, ContractError) as err:
            result["warnings"].append(f"{epoch}: plateau extraction failed: {err}")
            continue
        for trace in traces:
            try:
                model = fit_stark(trace, cfg)
            except (FitError, UnderdeterminedError, EdgeError) as err:
                result["warnings"].append(
                    f"{epoch}/{trace.label}: quadratic fit failed: {err}"
                )
                continue
            fitted.setdefault(trace.label, {})[epoch] = model
    for label, models in sorted(fitted.items()):
        line: dict = {}
        for epoch, model in models.items():
            line[epoch] = {
                "lambda0_nm": model.lambda0_nm,
                "dipole_mev_kv_cm": model.dipole,
                "polarizability_mev_kv2_cm2": model.polarizability,
                "unc_lambda0_nm": model.unc_lambda0,
                "unc_dipole": model.unc_dipole,
                "unc_polarizability": model.unc_polarizability,
            }
        if "pre" in models and "post" in models:
            delta = compare_stark(models["pre"], models["post"])
            line["delta"] = {
                "d_lambda0_nm": delta.d_lambda0,
                "d_dipole": delta.d_dipole,
                "d_polarizability": delta.d_polarizability,
                "unc_lambda0_nm": delta.unc_lambda0,
            }
        result["lines"][label] = line
    return result


def run_stark(config: dict, root: Path, out: Path) -> dict:
    """Spectral pass over a corpus of maps or spectrum pairs."""
    settings = config["settings"]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = config.get("scenes", [])
    records: list[ShiftRecord] = []
    map_results = []
    warnings: list[str] = []
    for entry in scenes:
        files = entry.get("files", {})
        if "pre" in files and "post" in files:
            field_cfg = entry.get("field", settings)
            cfg = FieldConfig(v_i=float(field_cfg["v_i"]), t_nm=float(field_cfg["t_nm"]))
            result = _stark_scene(entry, root, cfg)
            warnings.extend(f"{entry['scene_id']}: {w}" for w in result["warnings"])
            map_results.append(result)
        elif "before" in files and "after" in files:
            before = _read_spectrum(root, files["before"])
            after = _read_spectrum(root, files["after"])
            try:
                delta, _unc = spectral_shift(before, after)
            except (FitError, EdgeError) as err:
                warnings.append(f"{entry['scene_id']}: shift fit failed: {err}")
                continue
            records.append(
                ShiftRecord(
                    qd_id=entry["scene_id"],
                    structure=entry["structure"],
                    group_key=float(entry["group_key"]),
                    delta_lambda=float(delta),
                )
            )
        else:
            raise StageFailure(
                "stark",
                f"{entry['scene_id']}: needs either pre/post maps or "
                "before/after spectra",
                config_error=True,
            )

    groups = None
    if records:
        write_csv(out / "shifts.csv", SHIFT_CSV_COLUMNS, shift_rows(records))
        groups = {
            str(key): {
                "mean_nm": s.mean,
                "std_nm": s.std,
                "n": s.n,
            }
            for key, s in sorted(shift_stats(records).items())
        }
    summary = {
        "groups": groups,
        "maps": map_results or None,
        "n_scenes": len(scenes),
        "warnings": warnings,
    }
    atomic_write_text(out / "stark.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------------------
# plotting helper shared by misalign and report


def histogram_svg(
    rows: list[tuple[float, int]],
    width: int = 640,
    height: int = 360,
    x_label: str = "misalignment (nm)",
) -> str:
    """Minimal standalone SVG bar chart for (bin_center, count) rows."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if rows:
        margin = 45
        plot_w = width - 2 * margin
        plot_h = height - 2 * margin
        centers = [r[0] for r in rows]
        counts = [r[1] for r in rows]
        top = max(max(counts), 1)
        step = centers[1] - centers[0] if len(centers) > 1 else 10.0
        lo = centers[0] - step / 2.0
        span = centers[-1] + step / 2.0 - lo
        for c, n in rows:
            x = margin + (c - step / 2.0 - lo) / span * plot_w
            bar_h = n / top * plot_h
            parts.append(
                f'<rect x="{x:.1f}" y="{margin + plot_h - bar_h:.1f}" '
                f'width="{step / span * plot_w:.1f}" height="{bar_h:.1f}" '
                'fill="#4878a8" stroke="white" stroke-width="0.5"/>'
            )
        parts.append(
            f'<line x1="{margin}" y1="{margin + plot_h}" x2="{margin + plot_w}" '
            f'y2="{margin + plot_h}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" '
            f'font-size="13" font-family="sans-serif">{x_label}</text>'
        )
        for c in (centers[0], centers[-1]):
            x = margin + (c - lo) / span * plot_w
            parts.append(
                f'<text x="{x:.1f}" y="{margin + plot_h + 16}" text-anchor="middle" '
                f'font-size="11" font-family="sans-serif">{c:.0f}</text>'
            )
        parts.append(
            f'<text x="{margin - 8}" y="{margin + 4}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{top}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
