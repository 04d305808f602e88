"""Waveguide axis extraction and emitter-to-guide misalignment.

A suspended guide imaged through the diffraction limit shows three
peaks per cross-section: scattered light at the two outer trench edges
and the blurred guide ridge between them.  The axis is the
inverse-variance weighted mean of the middle-peak centers over many
sections.  An along-x guide constrains only the y coordinate, and vice
versa.

Sign convention: misalignment is emitter minus axis, positive toward
increasing coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .emitters import EmitterFit
from .errors import ContractError, FitError
from .fitcore import (
    TRIPLE_GAUSSIAN_PARAMS,
    FitProblem,
    eval_triple_gaussian,
    jac_triple_gaussian,
    lm_fit,
)
from .imgproc import Image, Roi

__all__ = [
    "WaveguideAxis",
    "Misalignment",
    "MisalignStats",
    "fit_guide_section",
    "fit_waveguide",
    "misalign",
    "misalign_stats",
    "histogram_rows",
]

MISALIGN_CSV_COLUMNS = (
    "device_id", "orientation", "axis_nm", "axis_unc_nm",
    "qd_nm", "delta_nm", "delta_unc_nm",
)

ORIENTATIONS = ("along-x", "along-y")

# Default transverse offset of the trench-edge peaks from the guide, px.
SIDE_OFFSET_PX = 25.0

_MID_CENTER = TRIPLE_GAUSSIAN_PARAMS.index("center_mid")


# ---------------------------------------------------------------------------
# types


@dataclass
class WaveguideAxis:
    orientation: str
    axis_coordinate: float
    unc: float
    sections: list[tuple[float, float, float]]

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ContractError(f"unknown orientation {self.orientation!r}")
        if self.unc <= 0:
            raise ContractError("axis uncertainty must be positive")
        if len(self.sections) < 3:
            raise ContractError("axis needs at least 3 sections")


@dataclass
class Misalignment:
    delta: float
    unc: float

    def __post_init__(self):
        if self.unc <= 0:
            raise ContractError("misalignment uncertainty must be positive")


@dataclass
class MisalignStats:
    mean: float
    std: float
    anderson_stat: float
    n: int


# ---------------------------------------------------------------------------
# section fitting


def _seed_sections(profile: np.ndarray, mid0: float, side_offset: float):
    n = profile.size
    baseline = float(np.percentile(profile, 10))
    left0 = max(mid0 - side_offset, 1.0)
    right0 = min(mid0 + side_offset, n - 2.0)

    def level(c):
        return max(float(profile[int(round(c))]) - baseline, 1.0)

    return np.array(
        [
            level(left0), left0, 4.0,
            level(mid0), mid0, 4.0,
            level(right0), right0, 4.0,
            0.0, baseline,
        ]
    ), left0, right0


def fit_guide_section(
    profile: np.ndarray, side_offset: float = SIDE_OFFSET_PX
) -> tuple[float, float]:
    """Center of the middle peak of one guide cross-section, in pixels.

    ``side_offset`` seeds the trench-edge peaks relative to the profile
    midpoint.  Returns (center, unc) with unc half the 95.4% confidence
    interval.  If the solution violates the left < middle < right
    ordering the fit is retried with perturbed center seeds; persistent
    failure raises FitError.
    """
    profile = np.asarray(profile, dtype=float)
    if profile.ndim != 1:
        raise ContractError("profile must be 1-d")
    if profile.size < 2 * side_offset:
        raise ContractError("profile does not span both trench edges")

    x = np.arange(profile.size, dtype=float)
    mid0 = (profile.size - 1) / 2.0
    seed, left0, right0 = _seed_sections(profile, mid0, side_offset)

    lower = np.array([0.0, 0.0, 0.5, 0.0, mid0 - side_offset / 2.0, 0.5,
                      0.0, mid0, 0.5, -np.inf, -np.inf])
    upper = np.array([np.inf, mid0, 20.0, np.inf, mid0 + side_offset / 2.0, 20.0,
                      np.inf, profile.size - 1.0, 20.0, np.inf, np.inf])

    last_error = None
    for jitter in (0.0, 2.0, -2.0):
        x0 = seed.copy()
        x0[TRIPLE_GAUSSIAN_PARAMS.index("center_left")] = left0 + jitter
        x0[TRIPLE_GAUSSIAN_PARAMS.index("center_right")] = right0 - jitter
        try:
            result = lm_fit(
                FitProblem(
                    residual=lambda p: eval_triple_gaussian(p, x) - profile,
                    x0=x0,
                    jacobian=lambda p: jac_triple_gaussian(p, x),
                    lower=lower,
                    upper=upper,
                    param_names=TRIPLE_GAUSSIAN_PARAMS,
                )
            )
        except FitError as err:
            last_error = err
            continue
        if not result.converged:
            last_error = FitError("guide section fit did not converge")
            continue
        c_left = result.named("center_left")
        c_mid = result.named("center_mid")
        c_right = result.named("center_right")
        if not (c_left < c_mid < c_right):
            last_error = FitError("guide section peaks out of order")
            continue
        unc = float(result.ci95[_MID_CENTER])
        if not np.isfinite(unc) or unc <= 0:
            last_error = FitError("guide section center unconstrained")
            continue
        return c_mid, unc
    raise last_error if last_error is not None else FitError("guide section fit failed")


def fit_waveguide(
    img: Image,
    roi: Roi,
    orientation: str,
    n_sections: int = 9,
    side_offset: float = SIDE_OFFSET_PX,
) -> WaveguideAxis:
    """Guide axis from multiple cross-sections within one ROI.

    Sections are spread over the central 60% of the guide length inside
    the ROI; each contributes the middle-peak center of its transverse
    profile, and the axis is their inverse-variance weighted mean.
    Fewer than 3 usable sections raises FitError.  An along-x guide
    yields only the y coordinate (and vice versa), which is what the
    returned ``axis_coordinate`` is.
    """
    if orientation not in ORIENTATIONS:
        raise ContractError(f"unknown orientation {orientation!r}")
    if n_sections < 3:
        raise ContractError("need at least 3 sections")
    data = np.asarray(roi.data, dtype=float)
    pitch = img.pixel_pitch
    length = data.shape[1] if orientation == "along-x" else data.shape[0]
    lo = int(round(0.2 * length))
    hi = int(round(0.8 * length)) - 1
    positions = np.unique(np.linspace(lo, hi, n_sections).round().astype(int))

    sections = []
    for pos in positions:
        profile = data[:, pos] if orientation == "along-x" else data[pos, :]
        try:
            center, unc = fit_guide_section(profile, side_offset)
        except (FitError, ContractError):
            continue
        if orientation == "along-x":
            along_nm = (roi.x0 + pos) * pitch
            center_nm = (roi.y0 + center) * pitch
        else:
            along_nm = (roi.y0 + pos) * pitch
            center_nm = (roi.x0 + center) * pitch
        sections.append((along_nm, center_nm, unc * pitch))

    if len(sections) < 3:
        raise FitError(f"only {len(sections)} valid guide sections")

    centers = np.array([s[1] for s in sections])
    uncs = np.array([s[2] for s in sections])
    weights = 1.0 / uncs**2
    axis = float((weights * centers).sum() / weights.sum())
    unc = math.sqrt(1.0 / weights.sum())
    return WaveguideAxis(
        orientation=orientation, axis_coordinate=axis, unc=unc, sections=sections
    )


# ---------------------------------------------------------------------------
# misalignment


def misalign(qd: EmitterFit, wg: WaveguideAxis) -> Misalignment:
    """Signed emitter-to-axis distance perpendicular to the guide.

    Positive toward increasing coordinate; uncertainties add in
    quadrature.  Both inputs must live in the same registered frame.
    """
    if wg.orientation == "along-x":
        delta = qd.y - wg.axis_coordinate
        qd_unc = qd.unc_y
    elif wg.orientation == "along-y":
        delta = qd.x - wg.axis_coordinate
        qd_unc = qd.unc_x
    else:
        raise ContractError(f"unknown orientation {wg.orientation!r}")
    return Misalignment(delta=delta, unc=math.sqrt(qd_unc**2 + wg.unc**2))


def misalign_stats(deltas) -> MisalignStats:
    """Normal-fit summary of a misalignment sample.

    Maximum-likelihood normal location is the sample mean; the spread is
    the n-1 sample standard deviation.  The Anderson-Darling statistic
    quantifies normality (undefined for a degenerate sample).
    """
    arr = np.asarray(list(deltas), dtype=float)
    if arr.size < 5:
        raise ContractError("need at least 5 samples")
    std = float(arr.std(ddof=1))
    if std > 0:
        anderson = float(stats.anderson(arr, dist="norm").statistic)
    else:
        anderson = float("nan")
    return MisalignStats(
        mean=float(arr.mean()), std=std, anderson_stat=anderson, n=int(arr.size)
    )


def histogram_rows(deltas, bin_width: float = 10.0) -> list[tuple[float, int]]:
    """(bin_center_nm, count) rows for the misalignment histogram CSV."""
    arr = np.asarray(list(deltas), dtype=float)
    if arr.size == 0:
        return []
    lo = math.floor(arr.min() / bin_width) * bin_width
    hi = math.ceil(arr.max() / bin_width) * bin_width + bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, _ = np.histogram(arr, bins=edges)
    centers = (edges[:-1] + edges[1:]) / 2.0
    return [(float(c), int(n)) for c, n in zip(centers, counts)]
