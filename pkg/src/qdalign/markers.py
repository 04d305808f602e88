"""Alignment-cross localization in preprocessed marker frames.

Crosses are gold fiducials that absorb the sample emission, so a
background-subtracted frame shows them as shadows.  All fitting here
happens on the inverted residual (background model minus counts), where
every arm section is a positive blurred-box bump that
:class:`~qdalign.fitcore.ErfEdgeModel` describes directly.

Coordinates follow the image convention: x along columns, y along rows,
origin at pixel (0, 0), lengths in nm unless a name says px.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError, DecodeError, DegenerateCrossError, FitError
from .fitcore import (
    ERF_EDGE_PARAMS,
    FitProblem,
    eval_erf_edge,
    jac_erf_edge,
    lm_fit,
)
from .imgproc import BackgroundModel, Image, Roi

__all__ = [
    "GridGeometry",
    "ArmFit",
    "CrossFit",
    "GridLabel",
    "detect_crosses",
    "fit_arm_section",
    "fit_cross",
    "decode_label",
    "cross_rows",
]

CROSS_CSV_COLUMNS = ("cross_id", "x_nm", "y_nm", "unc_x_nm", "unc_y_nm", "n_sections")

# Section offsets along each arm, in units of the arm width d.  The center
# is excluded because sections there run across the perpendicular arm.
SECTION_OFFSETS_D = (-6, -5, -4, -3, -2, 2, 3, 4, 5, 6)


# ---------------------------------------------------------------------------
# types


@dataclass
class GridGeometry:
    """Nominal marker grid: node (r, c) sits at origin + (c, r) * pitch."""

    origin_x: float
    origin_y: float
    pitch: float = 40000.0
    rows: int = 2
    cols: int = 2
    arm_length: float = 5900.0
    arm_width: float = 472.0

    def __post_init__(self):
        if self.pitch <= 0 or self.arm_length <= 0 or self.arm_width <= 0:
            raise ContractError("grid lengths must be positive")
        if self.rows < 1 or self.cols < 1:
            raise ContractError("grid must have at least one node")

    def nodes(self) -> list[tuple[int, float, float]]:
        """(node_id, x_nm, y_nm) in row-major order."""
        out = []
        for r in range(self.rows):
            for c in range(self.cols):
                out.append(
                    (r * self.cols + c, self.origin_x + c * self.pitch, self.origin_y + r * self.pitch)
                )
        return out


@dataclass
class ArmFit:
    """Weighted straight-line fit through one arm's section centers.

    The line is expressed in local ROI pixels relative to the coarse
    center estimate: transverse = slope * along + intercept.  The 2x2
    covariance is ordered (slope, intercept).
    """

    slope: float
    intercept: float
    covariance: np.ndarray
    n_sections: int


@dataclass
class CrossFit:
    center_x: float
    center_y: float
    unc_x: float
    unc_y: float
    n_sections_used: tuple[int, int]
    arm_vertical: ArmFit
    arm_horizontal: ArmFit

    def __post_init__(self):
        if not (self.unc_x > 0 and self.unc_y > 0):
            raise ContractError("cross uncertainties must be positive")
        if min(self.n_sections_used) < 3:
            raise ContractError("need at least 3 sections per arm")


@dataclass
class GridLabel:
    """Grid square identity, decoded from the binary bar label."""

    row: int
    column: int

    def __post_init__(self):
        if self.row < 0 or self.column < 0:
            raise ContractError("label indices are non-negative")


# ---------------------------------------------------------------------------
# detection


def _shadow_map(img: Image, background: BackgroundModel | None) -> np.ndarray:
    if background is not None:
        bg = background.evaluate(img.counts.shape)
    else:
        bg = np.full(img.counts.shape, float(np.median(img.counts)))
    return bg - img.counts


def _footprint_mask(shape, cx_px, cy_px, half_len_px, half_wid_px) -> np.ndarray:
    rows = np.arange(shape[0])[:, None]
    cols = np.arange(shape[1])[None, :]
    du = np.abs(cols - cx_px)
    dv = np.abs(rows - cy_px)
    horiz = (du <= half_len_px) & (dv <= half_wid_px)
    vert = (du <= half_wid_px) & (dv <= half_len_px)
    return horiz | vert


def detect_crosses(
    img: Image,
    geometry: GridGeometry,
    background: BackgroundModel | None = None,
    min_contrast: float = 5.0,
) -> list[Roi]:
    """Cut one shadow-map ROI per expected grid node.

    Nodes whose cross footprint would clip the frame are skipped, as are
    nodes whose mean footprint shadow stays below ``min_contrast`` robust
    noise sigmas.  The returned ROIs carry the inverted residual, ready
    for :func:`fit_cross`.
    """
    shadow = _shadow_map(img, background)
    pitch = img.pixel_pitch
    half_roi = int(math.ceil((geometry.arm_length / 2.0 + 2.0 * geometry.arm_width) / pitch))
    half_len = geometry.arm_length / 2.0 / pitch
    half_wid = geometry.arm_width / 2.0 / pitch

    out = []
    for _node, x_nm, y_nm in geometry.nodes():
        cx = x_nm / pitch
        cy = y_nm / pitch
        x0 = int(round(cx)) - half_roi
        y0 = int(round(cy)) - half_roi
        side = 2 * half_roi + 1
        if x0 < 0 or y0 < 0 or x0 + side > img.width or y0 + side > img.height:
            continue
        patch = shadow[y0 : y0 + side, x0 : x0 + side]
        mask = _footprint_mask(patch.shape, cx - x0, cy - y0, half_len, half_wid)
        noise = 1.4826 * float(np.median(np.abs(patch - np.median(patch))))
        depth = float(patch[mask].mean())
        if noise <= 0 or depth < min_contrast * noise:
            continue
        out.append(Roi(x0=x0, y0=y0, data=patch.copy(), pitch_nm=pitch))
    return out


# ---------------------------------------------------------------------------
# section and cross fitting


def fit_arm_section(profile: np.ndarray, d: float) -> tuple[float, float]:
    """Sub-pixel center of one blurred-box arm section.

    ``profile`` is a 1-d slice of the inverted residual perpendicular to
    the arm, at least 3 d samples long; ``d`` is the nominal arm width in
    pixels and is held fixed in the fit.  Returns (center, unc) in
    pixels, the uncertainty being half the 95.4% confidence interval.
    Raises FitError when the fit does not converge.
    """
    profile = np.asarray(profile, dtype=float)
    if profile.ndim != 1:
        raise ContractError("profile must be 1-d")
    if profile.size < 3 * d:
        raise ContractError("profile shorter than 3 arm widths")

    x = np.arange(profile.size, dtype=float)
    smooth = ndimage.uniform_filter1d(profile, size=max(3, int(round(d))))
    c0 = float(np.argmax(smooth))
    base = float(np.median(profile))
    amp0 = max(float(profile.max()) - base, 1e-3)
    x0 = np.array([amp0, c0, (d / 2.0) ** 2, 0.0, base])

    lower = np.array([0.0, 0.0, 1e-4, -np.inf, -np.inf])
    upper = np.array([np.inf, profile.size - 1.0, profile.size**2, np.inf, np.inf])
    result = lm_fit(
        FitProblem(
            residual=lambda p: eval_erf_edge(p, x, d) - profile,
            x0=x0,
            jacobian=lambda p: jac_erf_edge(p, x, d),
            lower=lower,
            upper=upper,
            param_names=ERF_EDGE_PARAMS,
        )
    )
    if not result.converged:
        raise FitError("arm section fit did not converge")
    center = result.named("center")
    unc = float(result.ci95[ERF_EDGE_PARAMS.index("center")])
    if not (0.0 < center < profile.size - 1.0) or not np.isfinite(unc) or unc <= 0:
        raise FitError("arm section fit left the window")
    return center, unc


def _coarse_center(data: np.ndarray, d_px: float) -> tuple[float, float]:
    # Marginal sums turn each arm into a plateau plus a bump at the
    # perpendicular arm; the smoothed argmax of each marginal seeds the
    # section layout well enough.
    size = max(3, int(round(d_px)))
    cx = float(np.argmax(ndimage.uniform_filter1d(data.sum(axis=0), size=size)))
    cy = float(np.argmax(ndimage.uniform_filter1d(data.sum(axis=1), size=size)))
    return cx, cy


def _fit_sections(
    data: np.ndarray, d_px: float, c_along: float, c_across: float, vertical: bool
):
    """Fit erf-edge sections across one arm; returns (offsets, centers, uncs).

    ``vertical`` selects the arm whose long axis runs along rows: its
    sections are row profiles and locate the arm in x.
    """
    half_win = int(round(3.0 * d_px))
    offsets, centers, uncs = [], [], []
    n_rows, n_cols = data.shape
    for k in SECTION_OFFSETS_D:
        along = int(round(c_along + k * d_px))
        lo = int(round(c_across)) - half_win
        hi = int(round(c_across)) + half_win + 1
        if vertical:
            if not (0 <= along < n_rows and 0 <= lo and hi <= n_cols):
                continue
            profile = data[along, lo:hi]
        else:
            if not (0 <= along < n_cols and 0 <= lo and hi <= n_rows):
                continue
            profile = data[lo:hi, along]
        try:
            center, unc = fit_arm_section(profile, d_px)
        except (FitError, ContractError):
            continue
        if unc > d_px:
            continue
        offsets.append(along - c_along)
        centers.append(lo + center - c_across)
        uncs.append(unc)
    return np.array(offsets, float), np.array(centers, float), np.array(uncs, float)


def _weighted_line(t: np.ndarray, y: np.ndarray, unc: np.ndarray) -> ArmFit:
    # unc is the half-95.4% interval, i.e. two standard deviations.
    sigma = unc / 2.0
    w = 1.0 / sigma**2
    design = np.column_stack([t, np.ones_like(t)])
    normal = design.T @ (design * w[:, None])
    rhs = design.T @ (w * y)
    cov = np.linalg.inv(normal)
    slope, intercept = cov @ rhs
    return ArmFit(float(slope), float(intercept), cov, n_sections=t.size)


def fit_cross(roi: Roi, d: float) -> CrossFit:
    """Localize one cross from its shadow-map ROI.

    ``d`` is the nominal arm width in pixels.  Each arm contributes up
    to ten erf-edge sections at +-(2..6) d from the center; their centers
    are combined by an inverse-variance weighted line fit, and the cross
    center is the intersection of the two arm axes with first-order
    uncertainty propagation.  Less than three valid sections on either
    arm raises DegenerateCrossError.
    """
    data = np.asarray(roi.data, dtype=float)
    cx0, cy0 = _coarse_center(data, d)

    t_v, x_v, u_v = _fit_sections(data, d, cy0, cx0, vertical=True)
    t_h, y_h, u_h = _fit_sections(data, d, cx0, cy0, vertical=False)
    if t_v.size < 3 or t_h.size < 3:
        raise DegenerateCrossError(
            f"only {t_v.size}/{t_h.size} valid sections (vertical/horizontal)"
        )

    arm_v = _weighted_line(t_v, x_v, u_v)
    arm_h = _weighted_line(t_h, y_h, u_h)

    # Intersection of xi = a eta + b with eta = c xi + e, in local pixels
    # about the coarse center.
    a, b = arm_v.slope, arm_v.intercept
    c, e = arm_h.slope, arm_h.intercept
    det = 1.0 - a * c
    if abs(det) < 1e-9:
        raise DegenerateCrossError("arm axes are parallel")
    xi = (a * e + b) / det
    eta = c * xi + e

    dxi = np.array([e / det + (a * e + b) * c / det**2, 1.0 / det])
    dxi_h = np.array([(a * e + b) * a / det**2, a / det])
    deta = c * dxi
    deta_h = np.array([xi + c * dxi_h[0], c * dxi_h[1] + 1.0])

    var_x = float(dxi @ arm_v.covariance @ dxi + dxi_h @ arm_h.covariance @ dxi_h)
    var_y = float(deta @ arm_v.covariance @ deta + deta_h @ arm_h.covariance @ deta_h)

    pitch = roi.pitch_nm
    return CrossFit(
        center_x=(roi.x0 + cx0 + xi) * pitch,
        center_y=(roi.y0 + cy0 + eta) * pitch,
        unc_x=math.sqrt(var_x) * pitch,
        unc_y=math.sqrt(var_y) * pitch,
        n_sections_used=(int(t_v.size), int(t_h.size)),
        arm_vertical=arm_v,
        arm_horizontal=arm_h,
    )


# ---------------------------------------------------------------------------
# label decoding


def decode_label(roi: Roi, threshold: float = 0.4) -> GridLabel:
    """Read the binary bar label from its shadow-map ROI.

    Each bar is one bit: long axis vertical means 1, horizontal means 0,
    most significant bit leftmost.  The decoded value packs (row, col)
    as the high and low halves of the bit string.  A bar whose bounding
    box is too close to square to call raises DecodeError.
    """
    data = np.asarray(roi.data, dtype=float)
    level = threshold * float(data.max())
    if level <= 0:
        raise DecodeError("label region is empty")
    labeled, count = ndimage.label(data > level)
    if count == 0:
        raise DecodeError("no bars found above threshold")

    bars = []
    for sl in ndimage.find_objects(labeled):
        height = sl[0].stop - sl[0].start
        width = sl[1].stop - sl[1].start
        if height * width < 12:
            continue
        aspect = height / width
        if 0.8 <= aspect <= 1.25:
            raise DecodeError(f"ambiguous bar aspect ratio {aspect:.2f}")
        bars.append((sl[1].start, 1 if aspect > 1.0 else 0))
    if not bars or len(bars) % 2:
        raise DecodeError(f"expected an even number of bars, found {len(bars)}")

    bars.sort()
    bits = [b for _pos, b in bars]
    code = 0
    for b in bits:
        code = (code << 1) | b
    half = len(bits) // 2
    return GridLabel(row=code >> half, column=code & ((1 << half) - 1))


def cross_rows(fits: list[CrossFit]) -> list[tuple]:
    """Rows for the cross CSV, matching CROSS_CSV_COLUMNS."""
    return [
        (
            i,
            f.center_x,
            f.center_y,
            f.unc_x,
            f.unc_y,
            min(f.n_sections_used),
        )
        for i, f in enumerate(fits)
    ]
