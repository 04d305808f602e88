"""Wide-field image container, PGM storage, rotation and background removal.

Coordinate conventions used throughout the toolkit:

* ``counts[row, col]`` with pixel centers on integer indices;
* physical position ``x = col * pixel_pitch``, ``y = row * pixel_pitch``
  in nanometers;
* a positive rotation angle moves content from the +x (column) axis
  toward the +y (row) axis about the geometric image center.

Images store photoelectron counts as float64 and are immutable after
construction.  On disk they are 16-bit big-endian binary PGM (P5) with
``# key=value`` header comments restricted to the keys ``pitch_nm``,
``exposure_s`` and ``mode``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError, NoFeaturesError, TruncatedFileError
from .fileio import atomic_write_bytes
from .fitcore import (
    FitProblem,
    Gaussian2DModel,
    eval_gaussian2d,
    jac_gaussian2d,
    lm_fit,
)

__all__ = [
    "PITCH_DEFAULT_NM",
    "Image",
    "Roi",
    "load_image",
    "save_image",
    "RotationEstimate",
    "estimate_rotation",
    "rotate",
    "BackgroundModel",
    "subtract_background",
    "crop",
]

PITCH_DEFAULT_NM = 59.0

_PGM_MAXVAL = 65535
_META_KEYS = ("exposure_s", "mode")


@dataclass
class Image:
    """A single wide-field frame with its pixel pitch and optional metadata."""

    counts: np.ndarray
    pixel_pitch: float = PITCH_DEFAULT_NM
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ContractError("image counts must be a non-empty 2-d array")
        if not np.all(np.isfinite(arr)):
            raise ContractError("image counts must be finite")
        if arr.min() < 0:
            raise ContractError("image counts must be non-negative")
        if not (self.pixel_pitch > 0):
            raise ContractError("pixel pitch must be positive")
        for key in self.meta:
            if key not in _META_KEYS:
                raise ContractError(f"unsupported metadata key: {key!r}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "counts", arr)

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def center_px(self) -> tuple[float, float]:
        """Geometric center (x, y) in pixel coordinates."""
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)


@dataclass
class Roi:
    """A rectangular cutout with its origin in full-frame pixel coordinates."""

    x0: int
    y0: int
    data: np.ndarray
    pitch_nm: float
    merged: bool = False

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def crop(img: Image, x0: int, y0: int, width: int, height: int) -> Roi:
    if x0 < 0 or y0 < 0 or x0 + width > img.width or y0 + height > img.height:
        raise ContractError("crop region extends outside the frame")
    return Roi(
        x0=x0,
        y0=y0,
        data=img.counts[y0 : y0 + height, x0 : x0 + width].copy(),
        pitch_nm=img.pixel_pitch,
    )


# ---------------------------------------------------------------------------
# PGM storage


def save_image(img: Image, path: str | Path) -> None:
    """Write a 16-bit big-endian binary PGM with canonical headers.

    Counts are rounded to the nearest integer and clipped to the 16-bit
    range.  The header always carries ``pitch_nm`` and then any
    ``exposure_s`` / ``mode`` metadata in that order, so saving a loaded
    file reproduces it byte for byte.
    """
    lines = [b"P5\n"]
    lines.append(f"# pitch_nm={img.pixel_pitch!r}\n".encode("ascii"))
    for key in _META_KEYS:
        if key in img.meta:
            value = img.meta[key]
            if "\n" in value or "#" in value:
                raise ContractError(f"metadata value for {key!r} is not header-safe")
            lines.append(f"# {key}={value}\n".encode("ascii"))
    lines.append(f"{img.width} {img.height}\n{_PGM_MAXVAL}\n".encode("ascii"))
    payload = np.rint(np.clip(img.counts, 0, _PGM_MAXVAL)).astype(">u2").tobytes()
    atomic_write_bytes(path, b"".join(lines) + payload)


def load_image(path: str | Path) -> Image:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatError("not a binary PGM (missing P5 magic)")
    pos = 2
    tokens: list[int] = []
    pitch: float | None = None
    meta: dict[str, str] = {}
    while len(tokens) < 3:
        if pos >= len(raw):
            raise FormatError("header ended before width/height/maxval")
        ch = raw[pos : pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated header comment")
            try:
                comment = raw[pos + 1 : end].decode("ascii").strip()
            except UnicodeDecodeError as exc:
                raise FormatError("non-ASCII header comment") from exc
            key, sep, value = comment.partition("=")
            key = key.strip()
            if not sep:
                raise FormatError(f"header comment is not key=value: {comment!r}")
            if key == "pitch_nm":
                try:
                    pitch = float(value)
                except ValueError as exc:
                    raise FormatError(f"bad pitch_nm value: {value!r}") from exc
            elif key in _META_KEYS:
                meta[key] = value.strip()
            else:
                raise FormatError(f"unsupported header key: {key!r}")
            pos = end + 1
        elif ch.isdigit():
            end = pos
            while end < len(raw) and raw[end : end + 1].isdigit():
                end += 1
            tokens.append(int(raw[pos:end]))
            pos = end
        else:
            raise FormatError(f"unexpected byte in header: {ch!r}")
    width, height, maxval = tokens
    if width <= 0 or height <= 0:
        raise FormatError("image dimensions must be positive")
    if maxval != _PGM_MAXVAL:
        raise FormatError(f"expected 16-bit maxval {_PGM_MAXVAL}, got {maxval}")
    if pos >= len(raw) or raw[pos : pos + 1] not in b" \t\r\n":
        raise FormatError("missing whitespace before payload")
    pos += 1
    expected = width * height * 2
    payload = raw[pos:]
    if len(payload) < expected:
        raise TruncatedFileError(
            f"payload holds {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise FormatError("trailing bytes after payload")
    counts = (
        np.frombuffer(payload, dtype=">u2").astype(np.float64).reshape(height, width)
    )
    return Image(
        counts=counts,
        pixel_pitch=PITCH_DEFAULT_NM if pitch is None else pitch,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# rotation


@dataclass
class RotationEstimate:
    angle_deg: float
    uncertainty_deg: float


def rotate(img: Image, angle_deg: float) -> Image:
    """Rotate image content by ``angle_deg`` about the center.

    Bilinear interpolation, zero fill outside the original support.  A
    feature at center + (r, 0) moves to center + (r cos a, r sin a) in
    (x, y) = (col, row) coordinates.
    """
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    cx, cy = img.center_px
    cols, rows = np.meshgrid(
        np.arange(img.width, dtype=float), np.arange(img.height, dtype=float)
    )
    dx = cols - cx
    dy = rows - cy
    src_col = cx + c * dx + s * dy
    src_row = cy - s * dx + c * dy
    out = ndimage.map_coordinates(
        img.counts, [src_row, src_col], order=1, mode="constant", cval=0.0
    )
    # Interpolation of non-negative data stays non-negative; clip guards
    # against -0.0 and tiny negative round-off.
    out = np.maximum(out, 0.0)
    return Image(counts=out, pixel_pitch=img.pixel_pitch, meta=dict(img.meta))


def _profile_sharpness(
    dx: np.ndarray,
    dy: np.ndarray,
    weights: np.ndarray,
    nbins: int,
    angles_deg: np.ndarray,
    whiten: bool = False,
) -> tuple:
    """High-pass projection-profile roughness for each candidate angle.

    Profiles are per-chord mean intensities binned along the rotated axes
    inside a centered disk; differencing the profile before taking the
    variance suppresses smooth illumination structure.  Returns the raw
    curve and, when ``whiten`` is set, a noise-bandwidth-normalized copy
    used by the featureless gate (None otherwise).
    """
    half = nbins / 2.0
    # Central bins only: near the rim the chord support gets short and the
    # intensity/support ratio turns noisy.
    margin = int(math.ceil(0.15 * half)) + 1
    sl = slice(margin, nbins + 2 - margin)
    raw = np.empty(angles_deg.size)
    whitened = np.empty(angles_deg.size) if whiten else None
    for i, ang in enumerate(np.radians(angles_deg)):
        c, s = math.cos(ang), math.sin(ang)
        u = c * dx + s * dy + half
        v = -s * dx + c * dy + half
        ru, wu = _ratio_roughness(u, weights, nbins, sl, whiten)
        rv, wv = _ratio_roughness(v, weights, nbins, sl, whiten)
        raw[i] = ru + rv
        if whiten:
            whitened[i] = wu + wv
    return raw, whitened


def _ratio_roughness(
    t: np.ndarray, weights: np.ndarray, nbins: int, sl: slice, whiten: bool
) -> tuple:
    # Linear (two-bin) deposition keeps the profiles continuous in angle;
    # nearest-bin truncation would make the metric jump discontinuously.
    lo = np.floor(t).astype(np.int64)
    frac = t - lo
    wlo = 1.0 - frac
    n = nbins + 2
    intensity = np.bincount(lo, weights=weights * wlo, minlength=n)
    intensity += np.bincount(lo + 1, weights=weights * frac, minlength=n)
    support = np.bincount(lo, weights=wlo, minlength=n)
    support += np.bincount(lo + 1, weights=frac, minlength=n)
    # Mean intensity per chord rather than summed intensity: the chord-length
    # dome and the jagged sampled rim of the disk divide out exactly, so a
    # featureless frame scores zero at every angle instead of peaking at the
    # grid-aligned angles.
    ratio = intensity[sl] / support[sl]
    raw = float(np.var(np.diff(ratio)))
    if not whiten:
        return raw, None
    # Unit-variance white noise pushed through the same deposition has a
    # differenced-ratio variance that depends on how the fractional offsets
    # cluster, which is itself angle-structured near grid alignment.  Dividing
    # by that prediction flattens the pure-noise response so the feature gate
    # can threshold it; the raw curve keeps the undistorted peak for locating.
    sq = np.bincount(lo, weights=wlo * wlo, minlength=n)
    sq += np.bincount(lo + 1, weights=frac * frac, minlength=n)
    cross = np.bincount(lo, weights=wlo * frac, minlength=n)
    var_term = sq[sl] / support[sl] ** 2
    cov_term = cross[sl][:-1] / (support[sl][:-1] * support[sl][1:])
    bandwidth = float(np.mean(var_term[1:] + var_term[:-1] - 2.0 * cov_term))
    return raw, raw / bandwidth


def _disk_samples(counts: np.ndarray):
    h, w = counts.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    radius = min(cx, cy)
    cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dx = cols - cx
    dy = rows - cy
    inside = dx * dx + dy * dy <= radius * radius
    return dx[inside], dy[inside], counts[inside], int(2 * radius) + 2


def estimate_rotation(
    img: Image,
    search_deg: float = 5.0,
    fine_step_deg: float = 0.01,
) -> RotationEstimate:
    """Estimate the in-plane rotation of line-like features.

    Scans candidate angles for the maximum of the projection-profile
    sharpness, coarsely on a 2x2-binned copy and then at
    ``fine_step_deg`` resolution at full resolution, finishing with a
    parabolic refinement of the peak.  The returned angle is the one to
    undo with ``rotate(img, -angle)``.

    Raises NoFeaturesError when the sharpness profile is flat, which is
    what featureless or pure-noise frames produce.
    """
    h, w = img.counts.shape
    hb, wb = h - (h % 2), w - (w % 2)
    binned = img.counts[:hb, :wb].reshape(hb // 2, 2, wb // 2, 2).mean(axis=(1, 3))

    dx, dy, wts, nbins = _disk_samples(binned)
    coarse_step = 0.1
    coarse = np.arange(-search_deg, search_deg + coarse_step / 2, coarse_step)
    metric, gate = _profile_sharpness(dx, dy, wts, nbins, coarse, whiten=True)
    scale = float(binned.mean())
    if metric.max() <= 1e-18 * scale * scale:
        raise NoFeaturesError("projection profiles are constant; no line features found")
    baseline = float(np.median(gate))
    # Pure-noise frames stay within ~30% of their own whitened median across
    # the scan; line features rise at least 2x clear of it.
    if baseline <= 0 or (gate.max() - baseline) / baseline < 0.45:
        raise NoFeaturesError("projection sharpness is flat; no line features found")
    best = float(coarse[int(np.argmax(metric))])

    dx, dy, wts, nbins = _disk_samples(img.counts)
    span = 15 * fine_step_deg
    fine = np.arange(best - span, best + span + fine_step_deg / 2, fine_step_deg)
    metric, _ = _profile_sharpness(dx, dy, wts, nbins, fine)
    peak = int(np.argmax(metric))
    peak = min(max(peak, 3), fine.size - 4)

    # Parabola through the seven samples around the discrete maximum.
    sl = slice(peak - 3, peak + 4)
    coeffs, cov = np.polyfit(fine[sl] - fine[peak], metric[sl], 2, cov=True)
    a2, a1, _ = coeffs
    if a2 >= 0:
        return RotationEstimate(angle_deg=float(fine[peak]), uncertainty_deg=fine_step_deg)
    vertex = -a1 / (2.0 * a2)
    vertex = float(np.clip(vertex, -3 * fine_step_deg, 3 * fine_step_deg))
    # First-order variance of the vertex position from the polyfit covariance.
    g = np.array([a1 / (2.0 * a2 * a2), -1.0 / (2.0 * a2)])
    var = float(g @ cov[:2, :2] @ g)
    unc = math.sqrt(max(var, 0.0))
    return RotationEstimate(
        angle_deg=float(fine[peak]) + vertex,
        uncertainty_deg=max(unc, 1e-4),
    )


# ---------------------------------------------------------------------------
# background


@dataclass
class BackgroundModel:
    """Smooth illumination envelope: 2-d Gaussian plus constant, pixel units.

    The constant-median fallback is encoded with ``amplitude = 0`` and
    infinite widths.
    """

    amplitude: float
    center_x: float
    center_y: float
    sigma_x: float
    sigma_y: float
    offset: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ContractError("background widths must be positive")

    @property
    def is_constant(self) -> bool:
        return math.isinf(self.sigma_x) or math.isinf(self.sigma_y)

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.amplitude, self.center_x, self.center_y,
             self.sigma_x, self.sigma_y, self.offset]
        )

    def evaluate(self, shape: tuple[int, int]) -> np.ndarray:
        """Evaluate on a full pixel grid of ``(height, width)``."""
        cols, rows = np.meshgrid(
            np.arange(shape[1], dtype=float), np.arange(shape[0], dtype=float)
        )
        return eval_gaussian2d(self.to_vector(), cols, rows)


def _block_reduce_masked(counts, keep, block):
    h, w = counts.shape
    hb, wb = h - (h % block), w - (w % block)
    c = counts[:hb, :wb].reshape(hb // block, block, wb // block, block)
    k = keep[:hb, :wb].reshape(hb // block, block, wb // block, block)
    num = (c * k).sum(axis=(1, 3))
    den = k.sum(axis=(1, 3))
    centers_x = (np.arange(wb // block) * block) + (block - 1) / 2.0
    centers_y = (np.arange(hb // block) * block) + (block - 1) / 2.0
    return num, den, centers_x, centers_y


def subtract_background(
    img: Image,
    mask_mad: float = 2.0,
    block: int = 8,
) -> tuple[Image, BackgroundModel]:
    """Fit and remove the smooth illumination envelope.

    Pixels further than ``mask_mad`` median absolute deviations from the
    median are excluded from the fit so that shadows and bright spots do
    not drag the envelope.  The fit runs on ``block``-averaged samples,
    which is plenty for a structure this smooth.  If the fit cannot
    converge the median is subtracted instead and the returned model has
    infinite widths.

    Returns the residual image clamped at zero along with the model.
    """
    counts = img.counts
    med = float(np.median(counts))
    mad = float(np.median(np.abs(counts - med)))
    if mad == 0.0:
        keep = np.ones_like(counts, dtype=bool)
    else:
        keep = np.abs(counts - med) <= mask_mad * mad

    num, den, cx, cy = _block_reduce_masked(counts, keep, block)
    good = den > 0
    fallback = BackgroundModel(
        amplitude=0.0,
        center_x=img.center_px[0],
        center_y=img.center_px[1],
        sigma_x=math.inf,
        sigma_y=math.inf,
        offset=med,
    )
    model = fallback
    if good.sum() >= 12:
        values = (num[good] / den[good]).ravel()
        gx, gy = np.meshgrid(cx, cy)
        xs = gx[good].ravel()
        ys = gy[good].ravel()
        peak = int(np.argmax(values))
        x0 = np.array(
            [
                max(values.max() - values.min(), 1.0),
                xs[peak],
                ys[peak],
                img.width / 3.0,
                img.height / 3.0,
                values.min(),
            ]
        )
        problem = FitProblem(
            residual=lambda p: eval_gaussian2d(p, xs, ys) - values,
            x0=x0,
            jacobian=lambda p: jac_gaussian2d(p, xs, ys),
            lower=np.array([0.0, -img.width, -img.height, 1.0, 1.0, -np.inf]),
            upper=np.array(
                [np.inf, 2 * img.width, 2 * img.height, 10 * img.width, 10 * img.height, np.inf]
            ),
            param_names=("amplitude", "center_x", "center_y", "sigma_x", "sigma_y", "offset"),
        )
        try:
            fit = lm_fit(problem)
            if fit.converged:
                model = BackgroundModel(*fit.params)
        except Exception:
            model = fallback

    if model.is_constant:
        residual = np.maximum(counts - model.offset, 0.0)
    else:
        residual = np.maximum(counts - model.evaluate(counts.shape), 0.0)
    out = Image(counts=residual, pixel_pitch=img.pixel_pitch, meta=dict(img.meta))
    return out, model
