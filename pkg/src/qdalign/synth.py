"""Synthetic wide-field scenes with exact ground truth.

Structures (marker crosses, binary labels, etched waveguide trenches)
are rendered through an analytic transmission model: every rectangle is
a product of one-dimensional boxes convolved with the Gaussian optical
blur, so feature positions enter at full floating-point precision and
never suffer rasterization bias.  Emitter spots are pixel-integrated
Gaussians or sampled Airy patterns normalized to their photon number.

Two image families exist per the measurement protocol: marker-mode
frames (illuminated membrane, structures as shadows, trench edges as
bright lines) and emitter-mode frames (dark field, isolated spots).
Doped-sample marker frames are dimmer by a configurable factor.

Shot noise is Poisson per pixel on the expected counts, followed by
additive Gaussian read noise.  All randomness flows from a named
counter-based generator (Philox) so corpora are reproducible bit for
bit from ``(seed, scene index)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError
from .fileio import write_csv
from .fitcore import airy_core
from .imgproc import BackgroundModel, Image

__all__ = [
    "RNG_ALGORITHM",
    "PSF_SIGMA_DEFAULT_NM",
    "AIRY_SCALE_DEFAULT_NM",
    "airy_psf",
    "CrossSpec",
    "EmitterSpec",
    "WaveguideSpec",
    "LabelSpec",
    "Scene",
    "MODES",
    "expected_counts",
    "render",
    "scene_rng",
    "subseed",
    "CorpusConfig",
    "CorpusResult",
    "emit_corpus",
]

RNG_ALGORITHM = "philox4x64-10"
PSF_SIGMA_DEFAULT_NM = 240.0
AIRY_SCALE_DEFAULT_NM = 174.0

MODES = (
    "intrinsic-markers",
    "intrinsic-emitters",
    "doped-markers",
    "doped-emitters",
)


def airy_psf(r, scale: float):
    """Radial Airy intensity ``(2 J1(r/scale)/(r/scale))**2``, 1 at r = 0."""
    if scale <= 0:
        raise ContractError("airy scale must be positive")
    return airy_core(np.asarray(r, dtype=float) / scale)


# ---------------------------------------------------------------------------
# scene specification


@dataclass
class CrossSpec:
    """Alignment marker: two orthogonal shadow bars through one center."""

    x: float
    y: float
    arm_length: float = 5900.0
    arm_width: float = 472.0
    depth: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.depth <= 1.0):
            raise ContractError("shadow depth must lie in [0, 1]")
        if self.arm_width <= 0 or self.arm_length < self.arm_width:
            raise ContractError("cross arms must be at least as long as wide")


@dataclass
class EmitterSpec:
    """Point emitter with expected photon number and PSF shape."""

    x: float
    y: float
    photons: float
    psf: str = "gaussian"
    psf_scale: float = PSF_SIGMA_DEFAULT_NM
    ellipticity: float = 1.0
    orientation: float = 0.0

    def __post_init__(self):
        if self.psf not in ("gaussian", "airy"):
            raise ContractError("psf must be 'gaussian' or 'airy'")
        if self.photons <= 0 or self.psf_scale <= 0:
            raise ContractError("photons and psf_scale must be positive")
        if self.ellipticity < 1.0:
            raise ContractError("ellipticity is major/minor and must be >= 1")


@dataclass
class WaveguideSpec:
    """Suspended waveguide: dark trench band with a bright guide ridge.

    ``axis_coordinate`` is the guide center along the transverse
    direction (y for an along-x guide).  ``trench_edge_offsets`` are the
    outer trench boundaries relative to the axis; scattered light at
    those edges is rendered as Gaussian lines of ``edge_brightness``
    peak counts.
    """

    axis_coordinate: float
    orientation: str = "along-x"
    width: float = 300.0
    trench_edge_offsets: tuple[float, float] = (-1475.0, 1475.0)
    edge_brightness: float = 120.0

    def __post_init__(self):
        if self.orientation not in ("along-x", "along-y"):
            raise ContractError("orientation must be 'along-x' or 'along-y'")
        lo, hi = self.trench_edge_offsets
        if not (lo < -self.width / 2 < self.width / 2 < hi):
            raise ContractError("trench edges must straddle the guide")
        if self.width <= 0:
            raise ContractError("guide width must be positive")


@dataclass
class LabelSpec:
    """Binary position label: a row of bars, vertical bar = 1, horizontal = 0.

    Bits are most significant first, left to right.  The decoded value
    packs (row, col) as the high and low halves of ``n_bits``.
    """

    x: float
    y: float
    code: int
    n_bits: int = 8
    bar_long: float = 1180.0
    bar_short: float = 295.0
    bar_pitch: float = 1770.0
    depth: float = 1.0

    def __post_init__(self):
        if self.n_bits <= 0 or self.n_bits % 2:
            raise ContractError("n_bits must be a positive even number")
        if not (0 <= self.code < 2**self.n_bits):
            raise ContractError("code does not fit in n_bits")
        if not (0 < self.bar_short < self.bar_long):
            raise ContractError("bars must be longer than wide")

    def bits(self) -> list[int]:
        return [(self.code >> (self.n_bits - 1 - i)) & 1 for i in range(self.n_bits)]


@dataclass
class Scene:
    """Complete description of one synthetic frame."""

    mode: str
    width_px: int = 1024
    height_px: int = 1024
    pitch_nm: float = 59.0
    background: BackgroundModel | None = None
    crosses: list[CrossSpec] = field(default_factory=list)
    emitters: list[EmitterSpec] = field(default_factory=list)
    waveguides: list[WaveguideSpec] = field(default_factory=list)
    labels: list[LabelSpec] = field(default_factory=list)
    psf_sigma_nm: float = PSF_SIGMA_DEFAULT_NM
    read_noise_sigma: float = 3.0
    doped_dim_factor: float = 0.2
    rotation_deg: float = 0.0
    seed: int = 0
    exposure_s: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode: {self.mode!r}")
        if self.width_px <= 0 or self.height_px <= 0 or self.pitch_nm <= 0:
            raise ContractError("frame dimensions and pitch must be positive")
        w_nm = (self.width_px - 1) * self.pitch_nm
        h_nm = (self.height_px - 1) * self.pitch_nm
        for c in self.crosses:
            half = c.arm_length / 2.0
            if not (0 <= c.x - half and c.x + half <= w_nm and 0 <= c.y - half and c.y + half <= h_nm):
                raise ContractError(f"cross at ({c.x}, {c.y}) extends outside the frame")
        for e in self.emitters:
            if not (0 <= e.x <= w_nm and 0 <= e.y <= h_nm):
                raise ContractError(f"emitter at ({e.x}, {e.y}) lies outside the frame")
        for g in self.waveguides:
            lo, hi = g.trench_edge_offsets
            limit = h_nm if g.orientation == "along-x" else w_nm
            if not (0 <= g.axis_coordinate + lo and g.axis_coordinate + hi <= limit):
                raise ContractError("waveguide trench extends outside the frame")
        for lab in self.labels:
            half = (lab.n_bits - 1) / 2.0 * lab.bar_pitch + lab.bar_long
            if not (0 <= lab.x - half and lab.x + half <= w_nm and 0 <= lab.y - half and lab.y + half <= h_nm):
                raise ContractError("label extends outside the frame")

    @property
    def is_marker_mode(self) -> bool:
        return self.mode.endswith("markers")

    @property
    def is_doped(self) -> bool:
        return self.mode.startswith("doped")


# ---------------------------------------------------------------------------
# rendering


def _blurred_box(t: np.ndarray, lo: float, hi: float, sigma: float) -> np.ndarray:
    """Indicator of [lo, hi] convolved with a Gaussian of std ``sigma``."""
    s = math.sqrt(2.0) * sigma
    return 0.5 * (erf((t - lo) / s) - erf((t - hi) / s))


class _Frame:
    """Pixel grid with the inverse scene rotation baked in."""

    def __init__(self, scene: Scene, width: int, height: int, pitch: float):
        self.width = width
        self.height = height
        self.pitch = pitch
        self.cx = (width - 1) / 2.0 * pitch
        self.cy = (height - 1) / 2.0 * pitch
        a = math.radians(scene.rotation_deg)
        self.cos = math.cos(a)
        self.sin = math.sin(a)
        self.rotated = scene.rotation_deg != 0.0

    def forward(self, x: float, y: float) -> tuple[float, float]:
        """Scene coordinates to image coordinates (where a feature lands)."""
        dx, dy = x - self.cx, y - self.cy
        return (
            self.cx + self.cos * dx - self.sin * dy,
            self.cy + self.sin * dx + self.cos * dy,
        )

    def patch(self, x_img: float, y_img: float, half_nm: float):
        """Slices of the pixel grid covering a disk around an image point."""
        half_px = int(math.ceil(half_nm / self.pitch)) + 2
        col = int(round(x_img / self.pitch))
        row = int(round(y_img / self.pitch))
        r0 = max(row - half_px, 0)
        r1 = min(row + half_px + 1, self.height)
        c0 = max(col - half_px, 0)
        c1 = min(col + half_px + 1, self.width)
        if r0 >= r1 or c0 >= c1:
            return None
        return slice(r0, r1), slice(c0, c1)

    def uv(self, rows: slice, cols: slice) -> tuple[np.ndarray, np.ndarray]:
        """Scene-frame coordinates of the pixel centers in a patch."""
        x = np.arange(cols.start, cols.stop, dtype=float)[None, :] * self.pitch
        y = np.arange(rows.start, rows.stop, dtype=float)[:, None] * self.pitch
        if not self.rotated:
            u = np.broadcast_to(x, (y.size, x.size))
            v = np.broadcast_to(y, (y.size, x.size))
            return u, v
        dx = x - self.cx
        dy = y - self.cy
        u = self.cx + self.cos * dx + self.sin * dy
        v = self.cy - self.sin * dx + self.cos * dy
        return u, v


def _shadow_cross(u, v, c: CrossSpec, sigma: float) -> np.ndarray:
    half_l = c.arm_length / 2.0
    half_w = c.arm_width / 2.0
    bu_long = _blurred_box(u, c.x - half_l, c.x + half_l, sigma)
    bu_short = _blurred_box(u, c.x - half_w, c.x + half_w, sigma)
    bv_long = _blurred_box(v, c.y - half_l, c.y + half_l, sigma)
    bv_short = _blurred_box(v, c.y - half_w, c.y + half_w, sigma)
    # Union of the two arms: horizontal + vertical - their central overlap.
    return bu_long * bv_short + bu_short * bv_long - bu_short * bv_short


def _render_structures(scene: Scene, frame: _Frame, transmission: np.ndarray, glow: np.ndarray):
    sigma = scene.psf_sigma_nm
    margin = 6.0 * sigma
    for c in scene.crosses:
        xi, yi = frame.forward(c.x, c.y)
        half = c.arm_length / 2.0 + margin
        sl = frame.patch(xi, yi, half * 1.05)
        if sl is None:
            continue
        u, v = frame.uv(*sl)
        transmission[sl] *= 1.0 - c.depth * _shadow_cross(u, v, c, sigma)
    for lab in scene.labels:
        xi, yi = frame.forward(lab.x, lab.y)
        half = (lab.n_bits - 1) / 2.0 * lab.bar_pitch + lab.bar_long / 2.0 + margin
        sl = frame.patch(xi, yi, half * 1.05)
        if sl is None:
            continue
        u, v = frame.uv(*sl)
        shadow = np.zeros_like(u)
        for i, bit in enumerate(lab.bits()):
            bx = lab.x + (i - (lab.n_bits - 1) / 2.0) * lab.bar_pitch
            if bit:
                du = lab.bar_short / 2.0
                dv = lab.bar_long / 2.0
            else:
                du = lab.bar_long / 2.0
                dv = lab.bar_short / 2.0
            shadow += _blurred_box(u, bx - du, bx + du, sigma) * _blurred_box(
                v, lab.y - dv, lab.y + dv, sigma
            )
        transmission[sl] *= 1.0 - lab.depth * np.clip(shadow, 0.0, 1.0)
    for g in scene.waveguides:
        lo, hi = g.trench_edge_offsets
        # Work on the full frame: guides span it end to end.
        u, v = frame.uv(slice(0, frame.height), slice(0, frame.width))
        perp = (v if g.orientation == "along-x" else u) - g.axis_coordinate
        trench = _blurred_box(perp, lo, hi, sigma)
        ridge = _blurred_box(perp, -g.width / 2.0, g.width / 2.0, sigma)
        transmission *= 1.0 - trench + ridge
        glow += g.edge_brightness * (
            np.exp(-0.5 * ((perp - lo) / sigma) ** 2)
            + np.exp(-0.5 * ((perp - hi) / sigma) ** 2)
        )


def _render_emitters(scene: Scene, frame: _Frame, out: np.ndarray):
    for e in scene.emitters:
        s_minor = e.psf_scale
        s_major = e.psf_scale * e.ellipticity
        if e.psf == "gaussian":
            half = 7.0 * s_major
        else:
            half = 12.0 * s_major
        xi, yi = frame.forward(e.x, e.y)
        sl = frame.patch(xi, yi, half)
        if sl is None:
            continue
        u, v = frame.uv(*sl)
        axis_aligned = e.ellipticity == 1.0 or e.orientation % 180.0 == 0.0
        if e.psf == "gaussian" and axis_aligned and not frame.rotated:
            # Exact per-pixel integral of the Gaussian, separable erf boxes.
            p = frame.pitch / 2.0
            rt2 = math.sqrt(2.0)
            ix = 0.5 * (erf((u - e.x + p) / (rt2 * s_major)) - erf((u - e.x - p) / (rt2 * s_major)))
            iy = 0.5 * (erf((v - e.y + p) / (rt2 * s_minor)) - erf((v - e.y - p) / (rt2 * s_minor)))
            patch = ix * iy
        else:
            t = math.radians(e.orientation)
            ct, st = math.cos(t), math.sin(t)
            du = u - e.x
            dv = v - e.y
            pu = ct * du + st * dv
            pv = -st * du + ct * dv
            if e.psf == "gaussian":
                patch = np.exp(-0.5 * (pu / s_major) ** 2 - 0.5 * (pv / s_minor) ** 2)
            else:
                rho = np.sqrt((pu / s_major) ** 2 + (pv / s_minor) ** 2)
                patch = airy_core(rho)
        total = patch.sum()
        if total > 0:
            out[sl] += e.photons * patch / total


def expected_counts(
    scene: Scene,
    width: int | None = None,
    height: int | None = None,
    pitch: float | None = None,
) -> np.ndarray:
    """Noise-free expected counts for a scene."""
    width = scene.width_px if width is None else width
    height = scene.height_px if height is None else height
    pitch = scene.pitch_nm if pitch is None else pitch
    frame = _Frame(scene, width, height, pitch)

    if scene.background is not None:
        bg = scene.background.evaluate((height, width))
    else:
        bg = np.zeros((height, width))

    if scene.is_marker_mode:
        factor = scene.doped_dim_factor if scene.is_doped else 1.0
        transmission = np.ones((height, width))
        glow = np.zeros((height, width))
        _render_structures(scene, frame, transmission, glow)
        out = bg * factor * transmission + glow
    else:
        out = np.array(bg, dtype=float, copy=True)
        _render_emitters(scene, frame, out)
    return np.maximum(out, 0.0)


def scene_rng(seed: int) -> np.random.Generator:
    """The toolkit's named generator (philox4x64-10) for one seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def subseed(seed: int, index: int) -> int:
    """Deterministic 64-bit sub-seed for scene ``index`` of a corpus."""
    state = np.random.SeedSequence(entropy=seed, spawn_key=(index,)).generate_state(
        1, np.uint64
    )
    return int(state[0])


def render(
    scene: Scene,
    width: int | None = None,
    height: int | None = None,
    pitch: float | None = None,
) -> Image:
    """Render a scene to an Image: expected counts plus shot and read noise."""
    width = scene.width_px if width is None else width
    height = scene.height_px if height is None else height
    pitch = scene.pitch_nm if pitch is None else pitch
    expected = expected_counts(scene, width, height, pitch)
    rng = scene_rng(scene.seed)
    counts = rng.poisson(expected).astype(np.float64)
    if scene.read_noise_sigma > 0:
        counts = counts + rng.normal(0.0, scene.read_noise_sigma, counts.shape)
    counts = np.maximum(counts, 0.0)
    meta = {"mode": scene.mode}
    if scene.exposure_s is not None:
        meta["exposure_s"] = repr(scene.exposure_s)
    return Image(counts=counts, pixel_pitch=pitch, meta=meta)


# ---------------------------------------------------------------------------
# corpus


@dataclass
class CorpusConfig:
    """What to generate: a named preset, how many scenes, where, which seed."""

    preset: str
    out_dir: Path
    n_scenes: int = 1
    seed: int = 0
    kind: str | None = None
    jobs: int = 1


@dataclass
class CorpusResult:
    truth_path: Path
    config_path: Path | None
    image_paths: list[Path]


def emit_corpus(config: CorpusConfig) -> CorpusResult:
    """Generate a scene corpus with its ground-truth table.

    The heavy lifting (scene construction per preset, calibrated
    settings) lives in :mod:`qdalign.presets`; this function owns the
    file layout, sub-seed derivation and determinism guarantees.
    """
    from . import presets

    preset = presets.get(config.preset)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = config.kind or preset.default_kind

    builder = presets.builder_for(preset, kind)
    truth_rows: list[tuple] = []
    image_paths: list[Path] = []
    artifacts = []
    items = [
        (i, subseed(config.seed, i)) for i in range(config.n_scenes)
    ]

    def run(item):
        index, sub = item
        return builder(preset, index, sub, out)

    if config.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(presets.run_builder, [
                (config.preset, kind, index, sub, str(out)) for index, sub in items
            ]))
    else:
        results = [run(item) for item in items]

    for res in results:
        truth_rows.extend(res.truth_rows)
        image_paths.extend(Path(p) for p in res.paths)
        artifacts.append(res)

    truth_path = out / "truth.csv"
    write_csv(
        truth_path,
        ("scene_id", "feature_kind", "true_x_nm", "true_y_nm", "params"),
        truth_rows,
        comments=(
            f"rng={RNG_ALGORITHM}",
            f"seed={config.seed}",
            f"preset={config.preset}",
            f"kind={kind}",
            "delta_convention=emitter-minus-axis,positive-toward-increasing-coordinate",
        ),
    )
    config_path = presets.write_run_config(preset, kind, out, [r for r in results])
    return CorpusResult(
        truth_path=truth_path, config_path=config_path, image_paths=image_paths
    )
