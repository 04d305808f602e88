"""Sub-pixel emitter localization: 2-d Gaussian and elliptical Airy fits.

Pre-fabrication spots are clean enough for a Gaussian model, whose
localization precision follows the analytic variance prediction in
:func:`mortensen_variance`.  Post-fabrication frames carry structured
background and defocus, where the heavier-tailed Airy model with an
elliptical radius fits better; its uncertainty comes from the fit
covariance instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError, FitError
from .fitcore import (
    ELLIPTICAL_AIRY_PARAMS,
    GAUSSIAN2D_PARAMS,
    FitProblem,
    Gaussian2DModel,
    eval_elliptical_airy,
    eval_gaussian2d,
    jac_elliptical_airy,
    jac_gaussian2d,
    lm_fit,
)
from .imgproc import Image, Roi

__all__ = [
    "MortensenInputs",
    "EmitterFit",
    "detect_spots",
    "mortensen_variance",
    "fit_emitter_gaussian",
    "fit_emitter_airy",
    "emitter_rows",
]

EMITTER_CSV_COLUMNS = (
    "emitter_id", "x_nm", "y_nm", "model", "photons", "b2", "unc_x_nm", "unc_y_nm",
)

DEFAULT_ROI_SIDE = 15


# ---------------------------------------------------------------------------
# types


@dataclass
class MortensenInputs:
    """Ingredients of the localization-variance prediction.

    ``sigma`` is the fitted PSF width in pixels, ``photons`` the total
    signal, ``background_var`` the background level b^2 in counts^2 per
    pixel, ``pixel_area`` the pixel area a^2 (1 in pixel units).
    """

    sigma: float
    photons: float
    background_var: float
    pixel_area: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0 or self.photons <= 0 or self.pixel_area <= 0:
            raise ContractError("sigma, photons and pixel area must be positive")
        if self.background_var < 0:
            raise ContractError("background variance cannot be negative")


@dataclass
class EmitterFit:
    x: float
    y: float
    model: str
    sigma_x: float
    sigma_y: float
    photons: float
    background_var: float
    unc_x: float
    unc_y: float
    ci95_x: float
    ci95_y: float
    merged: bool = False

    def __post_init__(self):
        if self.model not in ("gaussian2d", "airy2d"):
            raise ContractError(f"unknown emitter model {self.model!r}")
        if self.photons <= 0:
            raise ContractError("fitted photon count must be positive")
        if not (self.unc_x > 0 and self.unc_y > 0):
            raise ContractError("uncertainties must be positive")


# ---------------------------------------------------------------------------
# detection


def detect_spots(
    img: Image, k: float = 8.0, roi_side: int = DEFAULT_ROI_SIDE
) -> list[Roi]:
    """Local maxima above median + k robust sigmas, cut into square ROIs.

    Overlapping ROIs are merged into their bounding box and flagged, so
    close spot pairs come back as a single ``merged`` region.  Maxima too
    close to the frame edge for a full ROI are dropped.
    """
    counts = img.counts
    med = float(np.median(counts))
    noise = 1.4826 * float(np.median(np.abs(counts - med)))
    threshold = med + k * noise

    peak = ndimage.maximum_filter(counts, size=3, mode="nearest")
    half = roi_side // 2
    rows, cols = np.nonzero((counts >= peak) & (counts > threshold))
    keep = (
        (rows >= half)
        & (rows < img.height - half)
        & (cols >= half)
        & (cols < img.width - half)
    )
    boxes = [
        [c - half, r - half, c + half + 1, r + half + 1, False]
        for r, c in zip(rows[keep], cols[keep])
    ]

    merged_any = True
    while merged_any:
        merged_any = False
        out = []
        for box in boxes:
            for other in out:
                if (
                    box[0] < other[2]
                    and other[0] < box[2]
                    and box[1] < other[3]
                    and other[1] < box[3]
                ):
                    other[0] = min(other[0], box[0])
                    other[1] = min(other[1], box[1])
                    other[2] = max(other[2], box[2])
                    other[3] = max(other[3], box[3])
                    other[4] = True
                    merged_any = True
                    break
            else:
                out.append(box)
        boxes = out

    return [
        Roi(
            x0=x0,
            y0=y0,
            data=counts[y0:y1, x0:x1].copy(),
            pitch_nm=img.pixel_pitch,
            merged=flag,
        )
        for x0, y0, x1, y1, flag in boxes
    ]


# ---------------------------------------------------------------------------
# precision prediction


def mortensen_variance(m: MortensenInputs) -> float:
    """Predicted localization variance per axis, in pixels squared.

    The effective width folds in pixelation, sigma_a^2 = sigma^2 + a^2/12;
    the prefactor 16/9 is the least-squares-estimator value, and the
    second term is the background penalty.
    """
    sigma_a2 = m.sigma**2 + m.pixel_area / 12.0
    return (sigma_a2 / m.photons) * (
        16.0 / 9.0
        + 8.0 * math.pi * sigma_a2 * m.background_var / (m.photons * m.pixel_area)
    )


# ---------------------------------------------------------------------------
# fitting


def _spot_seed(data: np.ndarray):
    border = np.concatenate([data[0], data[-1], data[1:-1, 0], data[1:-1, -1]])
    offset = float(np.median(border))
    amp = max(float(data.max()) - offset, 1e-3)
    weight = np.clip(data - offset, 0.0, None)
    total = weight.sum()
    ys, xs = np.mgrid[0 : data.shape[0], 0 : data.shape[1]]
    if total > 0:
        cx = float((weight * xs).sum() / total)
        cy = float((weight * ys).sum() / total)
    else:
        cy, cx = ((s - 1) / 2.0 for s in data.shape)
    return offset, amp, cx, cy, xs, ys


def fit_emitter_gaussian(roi: Roi, pitch: float) -> EmitterFit:
    """Gaussian spot fit with Mortensen-predicted uncertainty.

    The photon count N is the volume under the fitted peak, the
    background level b^2 the residual variance outside the 3 sigma
    ellipse.  ``unc`` is the per-axis Mortensen standard deviation in
    nm; ``ci95`` reports the fit-covariance interval for comparison.
    A width pinned at its bound means the ROI does not contain a
    fittable spot and raises FitError.
    """
    data = np.asarray(roi.data, dtype=float)
    h, w = data.shape
    offset0, amp0, cx0, cy0, xs, ys = _spot_seed(data)

    x0 = np.array([amp0, cx0, cy0, 2.0, 2.0, offset0])
    lower = np.array([0.0, 0.0, 0.0, 0.3, 0.3, -np.inf])
    upper = np.array([np.inf, w - 1.0, h - 1.0, float(max(h, w)), float(max(h, w)), np.inf])
    xf = xs.ravel().astype(float)
    yf = ys.ravel().astype(float)
    flat = data.ravel()

    result = lm_fit(
        FitProblem(
            residual=lambda p: eval_gaussian2d(p, xf, yf) - flat,
            x0=x0,
            jacobian=lambda p: jac_gaussian2d(p, xf, yf),
            lower=lower,
            upper=upper,
            param_names=GAUSSIAN2D_PARAMS,
        )
    )
    if not result.converged:
        raise FitError("gaussian spot fit did not converge")
    amp, gx, gy, sx, sy, off = result.params
    for value, lo, hi, name in (
        (sx, 0.3, max(h, w), "sigma_x"),
        (sy, 0.3, max(h, w), "sigma_y"),
    ):
        if value <= lo + 1e-9 or value >= hi - 1e-9:
            raise FitError(f"{name} pinned at bound ({value:.3g})")
    if amp <= 0:
        raise FitError("fitted amplitude is not positive")

    model = Gaussian2DModel.from_vector(result.params)
    photons = model.volume
    outside = ((xf - gx) / sx) ** 2 + ((yf - gy) / sy) ** 2 > 9.0
    residual = flat - eval_gaussian2d(result.params, xf, yf)
    b2 = float(np.var(residual[outside])) if outside.sum() >= 8 else 0.0

    unc_x = math.sqrt(
        mortensen_variance(MortensenInputs(sigma=sx, photons=photons, background_var=b2))
    )
    unc_y = math.sqrt(
        mortensen_variance(MortensenInputs(sigma=sy, photons=photons, background_var=b2))
    )
    ix = GAUSSIAN2D_PARAMS.index("x0")
    iy = GAUSSIAN2D_PARAMS.index("y0")
    return EmitterFit(
        x=(roi.x0 + gx) * pitch,
        y=(roi.y0 + gy) * pitch,
        model="gaussian2d",
        sigma_x=float(sx),
        sigma_y=float(sy),
        photons=float(photons),
        background_var=b2,
        unc_x=unc_x * pitch,
        unc_y=unc_y * pitch,
        ci95_x=float(result.ci95[ix]) * pitch,
        ci95_y=float(result.ci95[iy]) * pitch,
        merged=roi.merged,
    )


def _circular_airy_full(p5: np.ndarray) -> np.ndarray:
    a, x0, y0, s, off = p5
    return np.array([a, x0, y0, s, s, 0.0, off])


def _fit_circular_airy(flat, xf, yf, seed, h, w):
    """Isotropic Airy fit: well posed even when ellipticity is not."""

    def residual(p):
        return eval_elliptical_airy(_circular_airy_full(p), xf, yf) - flat

    def jacobian(p):
        full = jac_elliptical_airy(_circular_airy_full(p), xf, yf)
        out = np.empty((full.shape[0], 5))
        out[:, :3] = full[:, :3]
        out[:, 3] = full[:, 3] + full[:, 4]
        out[:, 4] = full[:, 6]
        return out

    return lm_fit(
        FitProblem(
            residual=residual,
            x0=seed,
            jacobian=jacobian,
            lower=np.array([0.0, 0.0, 0.0, 0.2, -np.inf]),
            upper=np.array([np.inf, w - 1.0, h - 1.0, 4.0 * max(h, w), np.inf]),
            param_names=("amplitude", "x0", "y0", "scale", "offset"),
        )
    )


def fit_emitter_airy(roi: Roi, pitch: float) -> EmitterFit:
    """Elliptical Airy spot fit for post-fabrication frames.

    Fits an isotropic Airy first, then refines with independent axis
    scales and orientation.  A circular spot leaves the orientation
    unidentifiable, in which case the refinement is rejected and the
    isotropic solution reported with scale_major = scale_minor.
    ``unc`` is half the 95.4% confidence interval of each center
    coordinate; N is the fitted intensity above offset summed over the
    ROI and b^2 the residual variance over background-dominated pixels.
    """
    data = np.asarray(roi.data, dtype=float)
    h, w = data.shape
    offset0, amp0, cx0, cy0, xs, ys = _spot_seed(data)

    weight = np.clip(data - offset0, 0.0, None)
    total = weight.sum()
    if total <= 0:
        raise FitError("roi has no signal above its border level")
    r2 = (xs - cx0) ** 2 + (ys - cy0) ** 2
    rms = math.sqrt(float((weight * r2).sum() / total))
    scale0 = max(rms / 1.5, 0.5)
    xf = xs.ravel().astype(float)
    yf = ys.ravel().astype(float)
    flat = data.ravel()

    base = _fit_circular_airy(
        flat, xf, yf, np.array([amp0, cx0, cy0, scale0, offset0]), h, w
    )
    if not base.converged:
        raise FitError("airy spot fit did not converge")
    a_c, x_c, y_c, s_c, off_c = base.params

    elliptical = None
    try:
        # Split the scales slightly so the orientation column is nonzero.
        seed = np.array([a_c, x_c, y_c, 1.02 * s_c, 0.98 * s_c, 0.0, off_c])
        lower = np.array([0.0, 0.0, 0.0, 0.2, 0.2, -180.0, -np.inf])
        upper = np.array(
            [np.inf, w - 1.0, h - 1.0, 4.0 * max(h, w), 4.0 * max(h, w), 360.0, np.inf]
        )
        candidate = lm_fit(
            FitProblem(
                residual=lambda p: eval_elliptical_airy(p, xf, yf) - flat,
                x0=seed,
                jacobian=lambda p: jac_elliptical_airy(p, xf, yf),
                lower=lower,
                upper=upper,
                param_names=ELLIPTICAL_AIRY_PARAMS,
            )
        )
        if candidate.converged and np.all(np.isfinite(candidate.ci95)):
            elliptical = candidate
    except FitError:
        pass

    if elliptical is not None:
        amp, ax, ay, s_major, s_minor, theta, off = elliptical.params
        ci = elliptical.ci95.copy()
        if s_major < s_minor:
            # The model names the axes by size; swap and rotate to comply.
            s_major, s_minor = s_minor, s_major
            theta += 90.0
            ia = ELLIPTICAL_AIRY_PARAMS.index("scale_major")
            ib = ELLIPTICAL_AIRY_PARAMS.index("scale_minor")
            ci[[ia, ib]] = ci[[ib, ia]]
        params_full = np.array([amp, ax, ay, s_major, s_minor, theta % 180.0, off])
        ci_x = float(ci[ELLIPTICAL_AIRY_PARAMS.index("x0")])
        ci_y = float(ci[ELLIPTICAL_AIRY_PARAMS.index("y0")])
    else:
        amp, ax, ay, off = a_c, x_c, y_c, off_c
        s_major = s_minor = s_c
        params_full = _circular_airy_full(base.params)
        ci_x = float(base.ci95[1])
        ci_y = float(base.ci95[2])

    if amp <= 0:
        raise FitError("fitted amplitude is not positive")
    fitted = eval_elliptical_airy(params_full, xf, yf)
    photons = float((fitted - off).sum())
    if photons <= 0:
        raise FitError("fitted volume is not positive")
    background_pixels = (fitted - off) < 0.05 * amp
    residual = flat - fitted
    if background_pixels.sum() >= 8:
        b2 = float(np.var(residual[background_pixels]))
    else:
        b2 = float(np.var(residual))

    unc_x = ci_x * pitch
    unc_y = ci_y * pitch
    return EmitterFit(
        x=(roi.x0 + ax) * pitch,
        y=(roi.y0 + ay) * pitch,
        model="airy2d",
        sigma_x=float(s_major),
        sigma_y=float(s_minor),
        photons=photons,
        background_var=b2,
        unc_x=unc_x,
        unc_y=unc_y,
        ci95_x=unc_x,
        ci95_y=unc_y,
        merged=roi.merged,
    )


def emitter_rows(fits: list[EmitterFit]) -> list[tuple]:
    """Rows for the emitter CSV, matching EMITTER_CSV_COLUMNS."""
    return [
        (i, f.x, f.y, f.model, f.photons, f.background_var, f.unc_x, f.unc_y)
        for i, f in enumerate(fits)
    ]
