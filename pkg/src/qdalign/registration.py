"""Image-frame to marker-frame registration and pre/post correlation.

The marker grid defines the global frame.  A weighted least-squares
similarity transform (rotation, isotropic scale, translation) maps
nominal grid coordinates onto fitted cross centers; points measured in
the image are then carried into the global frame together with their
uncertainty.

The global localization accuracy of a point combines three terms in
quadrature: the point's own fit uncertainty, the mean cross-center
uncertainty of the frame (both axes), and the transform-parameter
covariance propagated to the point, summarized by its larger principal
standard deviation.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, MisidentificationWarning, UnderdeterminedError
from .fileio import atomic_write_text
from .markers import CrossFit

__all__ = [
    "FrameTransform",
    "GlobalPoint",
    "DeviceMatching",
    "solve_transform",
    "frame_uncertainty",
    "to_global",
    "correlate_devices",
    "save_transform",
    "load_transform",
]

POINT_SOURCES = ("marker", "emitter", "waveguide")

# Similarity scale outside this range means the pairing or the optics
# are wrong; the optics preserve scale to well below a percent.
SCALE_LIMITS = (0.9, 1.1)

MATCH_RADIUS_DEFAULT_NM = 150.0


@dataclass
class FrameTransform:
    """Mapping from nominal grid coordinates to image coordinates.

    ``kind`` is "similarity" (4 parameters) or "affine" (6); rotation
    and scale are always reported, for the affine case via polar
    decomposition.  ``params`` and ``covariance`` keep the raw solver
    output for uncertainty propagation.
    """

    rotation_deg: float
    translation: tuple[float, float]
    scale: float
    residual_rms: float
    kind: str = "similarity"
    params: np.ndarray | None = None
    covariance: np.ndarray | None = None

    def __post_init__(self):
        lo, hi = SCALE_LIMITS
        if not (lo <= self.scale <= hi):
            raise ContractError(
                f"similarity scale {self.scale:.4f} outside [{lo}, {hi}]"
            )
        if self.residual_rms < 0:
            raise ContractError("residual_rms must be non-negative")
        if self.kind not in ("similarity", "affine"):
            raise ContractError(f"unknown transform kind {self.kind!r}")
        if self.params is None:
            t = math.radians(self.rotation_deg)
            a = self.scale * math.cos(t)
            b = self.scale * math.sin(t)
            self.params = np.array([a, b, *self.translation])

    @property
    def matrix(self) -> np.ndarray:
        p = self.params
        if self.kind == "similarity":
            return np.array([[p[0], -p[1]], [p[1], p[0]]])
        return np.array([[p[0], p[1]], [p[2], p[3]]])

    @property
    def offset(self) -> np.ndarray:
        return np.asarray(self.params[-2:], dtype=float)

    def apply(self, points) -> np.ndarray:
        """Map nominal-frame points (N,2) or (2,) into the image frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = pts @ self.matrix.T + self.offset
        return out[0] if np.ndim(points) == 1 else out

    def apply_inverse(self, points) -> np.ndarray:
        """Map image-frame points back into the nominal grid frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inv = np.linalg.inv(self.matrix)
        out = (pts - self.offset) @ inv.T
        return out[0] if np.ndim(points) == 1 else out

    def point_jacobian(self, point) -> np.ndarray:
        """d(mapped point)/d(params) at one nominal point, shape (2, n)."""
        x, y = float(point[0]), float(point[1])
        if self.kind == "similarity":
            return np.array([[x, -y, 1.0, 0.0], [y, x, 0.0, 1.0]])
        return np.array(
            [[x, y, 0.0, 0.0, 1.0, 0.0], [0.0, 0.0, x, y, 0.0, 1.0]]
        )

    def point_covariance(self, point) -> np.ndarray:
        """2x2 covariance of the mapped point from parameter uncertainty."""
        if self.covariance is None:
            return np.zeros((2, 2))
        jac = self.point_jacobian(point)
        return jac @ self.covariance @ jac.T


@dataclass
class GlobalPoint:
    x: float
    y: float
    unc: float
    source: str

    def __post_init__(self):
        if self.unc <= 0:
            raise ContractError("global point uncertainty must be positive")
        if self.source not in POINT_SOURCES:
            raise ContractError(f"unknown point source {self.source!r}")


@dataclass
class DeviceMatching:
    pairs: list[tuple[int, int, float]]
    yield_fraction: float
    unmatched_pre: list[int] = field(default_factory=list)
    unmatched_post: list[int] = field(default_factory=list)


def _decompose_affine(m: np.ndarray) -> tuple[float, float]:
    u, s, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        s = s.copy()
        s[-1] *= -1.0
        r = u @ vt
    angle = math.degrees(math.atan2(r[1, 0], r[0, 0]))
    return angle, float(np.sqrt(abs(s[0] * s[1])))


def solve_transform(
    observed: Sequence[CrossFit],
    nominal: Sequence[tuple[float, float]],
    affine: bool = False,
) -> FrameTransform:
    """Weighted least squares transform from nominal grid to image frame.

    ``observed[i]`` must be the fitted cross at grid node ``nominal[i]``.
    Each coordinate is weighted by its inverse variance.  Residual rms
    above 3x the median cross uncertainty indicates a wrong pairing and
    emits MisidentificationWarning.
    """
    n = len(observed)
    if n != len(nominal):
        raise ContractError("observed and nominal lists differ in length")
    minimum = 3 if affine else 2
    if n < minimum:
        raise UnderdeterminedError(
            f"{n} matched crosses cannot constrain a {'6' if affine else '4'}"
            "-parameter transform"
        )

    n_params = 6 if affine else 4
    design = np.zeros((2 * n, n_params))
    target = np.zeros(2 * n)
    sigma = np.zeros(2 * n)
    for i, (cross, (nx, ny)) in enumerate(zip(observed, nominal)):
        if affine:
            design[2 * i] = (nx, ny, 0.0, 0.0, 1.0, 0.0)
            design[2 * i + 1] = (0.0, 0.0, nx, ny, 0.0, 1.0)
        else:
            design[2 * i] = (nx, -ny, 1.0, 0.0)
            design[2 * i + 1] = (ny, nx, 0.0, 1.0)
        target[2 * i] = cross.center_x
        target[2 * i + 1] = cross.center_y
        sigma[2 * i] = cross.unc_x
        sigma[2 * i + 1] = cross.unc_y

    weights = 1.0 / sigma**2
    normal = design.T @ (design * weights[:, None])
    rhs = design.T @ (target * weights)
    try:
        covariance = np.linalg.inv(normal)
    except np.linalg.LinAlgError as err:
        raise UnderdeterminedError(f"degenerate cross geometry: {err}") from None
    params = covariance @ rhs
    residuals = design @ params - target
    rms = float(np.sqrt(np.mean(residuals**2)))

    if affine:
        rotation, scale = _decompose_affine(
            np.array([[params[0], params[1]], [params[2], params[3]]])
        )
    else:
        rotation = math.degrees(math.atan2(params[1], params[0]))
        scale = float(np.hypot(params[0], params[1]))

    median_unc = float(np.median(sigma))
    if rms > 3.0 * median_unc:
        warnings.warn(
            f"residual rms {rms:.2f} nm exceeds 3x median cross unc "
            f"{median_unc:.2f} nm; check the marker pairing",
            MisidentificationWarning,
            stacklevel=2,
        )

    return FrameTransform(
        rotation_deg=rotation,
        translation=(float(params[-2]), float(params[-1])),
        scale=scale,
        residual_rms=rms,
        kind="affine" if affine else "similarity",
        params=params,
        covariance=covariance,
    )


def frame_uncertainty(
    transform: FrameTransform, crosses: Sequence[CrossFit], point
) -> float:
    """Marker-frame contribution to a point's global uncertainty, nm.

    Quadrature of the mean cross uncertainty on both axes and the larger
    principal standard deviation of the transform covariance propagated
    to the point.
    """
    if not crosses:
        raise ContractError("frame uncertainty needs the fitted crosses")
    mean_ux2 = float(np.mean([c.unc_x**2 for c in crosses]))
    mean_uy2 = float(np.mean([c.unc_y**2 for c in crosses]))
    cov = transform.point_covariance(point)
    principal = float(np.max(np.linalg.eigvalsh(cov)))
    return math.sqrt(mean_ux2 + mean_uy2 + max(principal, 0.0))


def to_global(
    point: tuple[float, float],
    point_unc: float,
    transform: FrameTransform,
    marker_unc: float,
    source: str = "emitter",
) -> GlobalPoint:
    """Carry an image-frame point and its uncertainty into the grid frame.

    ``marker_unc`` is the frame term from :func:`frame_uncertainty`; the
    result's unc is the quadrature sum of both contributions.
    """
    if point_unc < 0 or marker_unc < 0:
        raise ContractError("uncertainties must be non-negative")
    x, y = transform.apply_inverse(point)
    return GlobalPoint(
        x=float(x),
        y=float(y),
        unc=math.sqrt(point_unc**2 + marker_unc**2),
        source=source,
    )


def correlate_devices(
    pre: Sequence[GlobalPoint],
    post: Sequence[GlobalPoint],
    radius: float = MATCH_RADIUS_DEFAULT_NM,
) -> DeviceMatching:
    """Greedy nearest-neighbor pairing of pre- and post-fabrication points.

    Candidate pairs within ``radius`` are taken closest-first, each point
    used at most once.  Yield is matched pairs over pre-fabrication
    points.
    """
    if radius <= 0:
        raise ContractError("matching radius must be positive")
    candidates = []
    for i, p in enumerate(pre):
        for j, q in enumerate(post):
            d = math.hypot(p.x - q.x, p.y - q.y)
            if d <= radius:
                candidates.append((d, i, j))
    candidates.sort()
    used_pre: set[int] = set()
    used_post: set[int] = set()
    pairs = []
    for d, i, j in candidates:
        if i in used_pre or j in used_post:
            continue
        used_pre.add(i)
        used_post.add(j)
        pairs.append((i, j, d))
    fraction = len(pairs) / len(pre) if pre else 0.0
    return DeviceMatching(
        pairs=pairs,
        yield_fraction=fraction,
        unmatched_pre=[i for i in range(len(pre)) if i not in used_pre],
        unmatched_post=[j for j in range(len(post)) if j not in used_post],
    )


# ---------------------------------------------------------------------------
# persistence: one small JSON record per analyzed field of view


def save_transform(transform: FrameTransform, path: str | Path) -> None:
    record = {
        "kind": transform.kind,
        "rotation_deg": transform.rotation_deg,
        "translation_nm": list(transform.translation),
        "scale": transform.scale,
        "residual_rms_nm": transform.residual_rms,
        "params": [float(v) for v in transform.params],
    }
    if transform.covariance is not None:
        record["covariance"] = [
            [float(v) for v in row] for row in transform.covariance
        ]
    atomic_write_text(path, json.dumps(record, indent=1, sort_keys=True) + "\n")


def load_transform(path: str | Path) -> FrameTransform:
    record = json.loads(Path(path).read_text())
    covariance = record.get("covariance")
    return FrameTransform(
        rotation_deg=float(record["rotation_deg"]),
        translation=tuple(float(v) for v in record["translation_nm"]),
        scale=float(record["scale"]),
        residual_rms=float(record["residual_rms_nm"]),
        kind=record["kind"],
        params=np.array(record["params"], dtype=float),
        covariance=None if covariance is None else np.array(covariance, dtype=float),
    )
