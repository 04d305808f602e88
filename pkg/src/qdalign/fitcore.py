"""Damped nonlinear least-squares engine and the model zoo built on it.

All sub-pixel fits in the toolkit (marker arm sections, emitter spots,
waveguide cross-sections, spectral peaks) run through :func:`lm_fit`,
a classic Levenberg-Marquardt loop with an additive damping term.  The
models live here as small dataclasses plus vectorized evaluate/Jacobian
pairs keyed by a fixed parameter order, so fits stay cheap and the
Jacobians can be checked against central finite differences.

Parameter uncertainty convention: ``ci95`` is half of the 95.4 percent
confidence interval, i.e. two standard deviations of the parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, j1, jv

from .errors import ContractError, RankDeficiencyError

__all__ = [
    "FitProblem",
    "FitResult",
    "lm_fit",
    "finite_difference_jacobian",
    "ErfEdgeModel",
    "Gaussian2DModel",
    "TripleGaussianModel",
    "EllipticalAiryModel",
    "eval_model",
    "ERF_EDGE_PARAMS",
    "GAUSSIAN2D_PARAMS",
    "TRIPLE_GAUSSIAN_PARAMS",
    "ELLIPTICAL_AIRY_PARAMS",
    "PEAK_PARAMS",
    "erf_edge",
    "eval_erf_edge",
    "jac_erf_edge",
    "eval_gaussian2d",
    "jac_gaussian2d",
    "eval_triple_gaussian",
    "jac_triple_gaussian",
    "eval_elliptical_airy",
    "jac_elliptical_airy",
    "eval_peak",
    "jac_peak",
    "airy_core",
]

# Half-width of the 95.4% interval in units of one standard deviation.
CI95_SIGMA = 2.0

_SQRT2_OVER_SQRTPI = 2.0 / math.sqrt(math.pi)


# ---------------------------------------------------------------------------
# engine


@dataclass
class FitProblem:
    """A least-squares problem: minimize ``sum(residual(p)**2)`` over ``p``.

    ``jacobian`` returns the m-by-n matrix of residual derivatives; when
    omitted the engine falls back to central finite differences.  Bounds
    are enforced by projecting each trial step into the box, which keeps
    the loop simple and is adequate for the positivity constraints used
    here.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    max_iterations: int = 200
    tolerance: float = 1e-10
    param_names: tuple[str, ...] | None = None


@dataclass
class FitResult:
    params: np.ndarray
    covariance: np.ndarray
    cost: float
    iterations: int
    converged: bool
    ci95: np.ndarray
    param_names: tuple[str, ...] | None = None
    cost_history: list[float] = field(default_factory=list)

    def named(self, name: str) -> float:
        if self.param_names is None:
            raise KeyError("fit has no parameter names")
        return float(self.params[self.param_names.index(name)])


def finite_difference_jacobian(
    fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    rel_step: float = 1e-6,
) -> np.ndarray:
    """Central-difference Jacobian with steps of ``rel_step`` of parameter scale."""
    x = np.asarray(x, dtype=float)
    r0 = np.asarray(fn(x), dtype=float)
    out = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        out[:, i] = (np.asarray(fn(xp), float) - np.asarray(fn(xm), float)) / (2.0 * h)
    return out


def _project(x: np.ndarray, lower, upper) -> np.ndarray:
    if lower is None and upper is None:
        return x
    return np.clip(x, -np.inf if lower is None else lower, np.inf if upper is None else upper)


def _name(names: tuple[str, ...] | None, i: int) -> str:
    if names is not None and i < len(names):
        return names[i]
    return f"p[{i}]"


def lm_fit(problem: FitProblem) -> FitResult:
    """Minimize a sum of squared residuals by Levenberg-Marquardt.

    The damping parameter starts at 1e-3 times the largest diagonal entry
    of J'J, grows tenfold on every rejected step and shrinks tenfold on
    every accepted one.  Convergence is declared once the relative cost
    decrease has stayed below ``tolerance`` on two consecutive accepted
    steps (rejected trials in between do not reset the count).  A
    maxed-out iteration budget returns a result flagged unconverged
    rather than raising.

    The covariance is ``inv(J'J) * cost / (m - n)`` at the final point,
    the standard unweighted-residual estimate; ``ci95`` is twice the
    square root of its diagonal.

    Raises
    ------
    RankDeficiencyError
        If J'J is singular, naming the parameter the data does not
        constrain.
    """
    x = np.asarray(problem.x0, dtype=float).copy()
    if x.ndim != 1:
        raise ContractError("initial parameters must be a 1-d vector")
    x = _project(x, problem.lower, problem.upper)
    names = problem.param_names

    jac_fn = problem.jacobian
    if jac_fn is None:
        jac_fn = lambda p: finite_difference_jacobian(problem.residual, p)

    r = np.asarray(problem.residual(x), dtype=float)
    cost = float(r @ r)
    history = [cost]

    J = np.asarray(jac_fn(x), dtype=float)
    if J.shape != (r.size, x.size):
        raise ContractError(
            f"jacobian shape {J.shape} does not match ({r.size}, {x.size})"
        )
    m, n = J.shape
    jtj = J.T @ J
    diag = np.diag(jtj)
    if not np.all(np.isfinite(diag)):
        bad = int(np.argmax(~np.isfinite(diag)))
        raise RankDeficiencyError(_name(names, bad), "non-finite jacobian column")
    if np.any(diag == 0.0):
        raise RankDeficiencyError(_name(names, int(np.argmax(diag == 0.0))))

    lam = 1e-3 * float(diag.max())
    eye = np.eye(n)
    low_streak = 0
    converged = cost == 0.0
    iterations = 0

    while not converged and iterations < problem.max_iterations:
        iterations += 1
        g = J.T @ r
        try:
            step = np.linalg.solve(jtj + lam * eye, -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        x_new = _project(x + step, problem.lower, problem.upper)
        r_new = np.asarray(problem.residual(x_new), dtype=float)
        cost_new = float(r_new @ r_new)
        if cost_new <= cost and np.isfinite(cost_new):
            rel = 0.0 if cost == 0.0 else (cost - cost_new) / cost
            x, r, cost = x_new, r_new, cost_new
            history.append(cost)
            J = np.asarray(jac_fn(x), dtype=float)
            jtj = J.T @ J
            lam = max(lam / 10.0, 1e-300)
            low_streak = low_streak + 1 if rel < problem.tolerance else 0
            if low_streak >= 2 or cost == 0.0:
                converged = True
        else:
            lam *= 10.0
            if lam > 1e300:
                break

    try:
        cov = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        # Identify the degenerate direction so the error names a parameter.
        w, v = np.linalg.eigh(jtj)
        bad = int(np.argmax(np.abs(v[:, int(np.argmin(np.abs(w)))])))
        raise RankDeficiencyError(_name(names, bad)) from None
    scale = cost / (m - n) if m > n else cost
    cov = cov * scale
    ci95 = CI95_SIGMA * np.sqrt(np.maximum(np.diag(cov), 0.0))

    return FitResult(
        params=x,
        covariance=cov,
        cost=cost,
        iterations=iterations,
        converged=converged,
        ci95=ci95,
        param_names=names,
        cost_history=history,
    )


# ---------------------------------------------------------------------------
# blurred-edge profile (marker arm cross-sections)

ERF_EDGE_PARAMS = ("amplitude", "center", "sigma", "slope", "offset")


@dataclass
class ErfEdgeModel:
    """Box of width ``width`` blurred by a Gaussian kernel, on a linear ramp.

    ``sigma`` parameterizes the blur kernel ``exp(-x^2 / (2 sigma))``,
    i.e. it plays the role of the kernel's variance.  Set
    ``sigma_is_variance=False`` for the conventional standard-deviation
    reading ``exp(-x^2 / (2 sigma^2))``; the profile shape is the same
    family either way, only the meaning of the fitted ``sigma`` changes.
    The peak value at ``center`` is ``amplitude + slope*center + offset``.
    """

    amplitude: float
    center: float
    sigma: float
    width: float
    slope: float = 0.0
    offset: float = 0.0
    sigma_is_variance: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractError("erf-edge sigma must be positive")
        if self.width <= 0:
            raise ContractError("erf-edge width must be positive")

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.amplitude, self.center, self.sigma, self.slope, self.offset]
        )

    @classmethod
    def from_vector(
        cls, v: Sequence[float], width: float, sigma_is_variance: bool = True
    ) -> "ErfEdgeModel":
        a, c, s, sl, of = (float(q) for q in v)
        return cls(a, c, s, width, sl, of, sigma_is_variance)


def _edge_k(sigma, sigma_is_variance: bool):
    if sigma_is_variance:
        return 1.0 / np.sqrt(2.0 * sigma)
    return 1.0 / (math.sqrt(2.0) * sigma)


def eval_erf_edge(
    params: np.ndarray,
    x: np.ndarray,
    width: float,
    sigma_is_variance: bool = True,
) -> np.ndarray:
    """Evaluate the blurred-box profile for params ``(A, center, sigma, slope, offset)``."""
    a, c, s, slope, offset = params
    k = _edge_k(s, sigma_is_variance)
    h = width / 2.0
    num = erf(k * (c - h - x)) - erf(k * (c + h - x))
    den = erf(-k * h) - erf(k * h)
    return a * num / den + slope * x + offset


def erf_edge(x, model: ErfEdgeModel):
    return eval_erf_edge(
        model.to_vector(), np.asarray(x, float), model.width, model.sigma_is_variance
    )


def jac_erf_edge(
    params: np.ndarray,
    x: np.ndarray,
    width: float,
    sigma_is_variance: bool = True,
) -> np.ndarray:
    a, c, s, _slope, _offset = params
    k = _edge_k(s, sigma_is_variance)
    h = width / 2.0
    u1 = k * (c - h - x)
    u2 = k * (c + h - x)
    num = erf(u1) - erf(u2)
    den = -2.0 * erf(k * h)
    phi1 = _SQRT2_OVER_SQRTPI * np.exp(-u1 * u1)
    phi2 = _SQRT2_OVER_SQRTPI * np.exp(-u2 * u2)
    # dk/dsigma differs between the two sigma conventions.
    dk = -k / (2.0 * s) if sigma_is_variance else -k / s
    dnum_ds = (dk / k) * (phi1 * u1 - phi2 * u2)
    dden_ds = -2.0 * _SQRT2_OVER_SQRTPI * math.exp(-((k * h) ** 2)) * h * dk
    out = np.empty((np.size(x), 5))
    out[:, 0] = num / den
    out[:, 1] = a * k * (phi1 - phi2) / den
    out[:, 2] = a * (dnum_ds * den - num * dden_ds) / den**2
    out[:, 3] = x
    out[:, 4] = 1.0
    return out


# ---------------------------------------------------------------------------
# 2-d Gaussian (emitter spots pre-fabrication, smooth image background)

GAUSSIAN2D_PARAMS = ("amplitude", "x0", "y0", "sigma_x", "sigma_y", "offset")


@dataclass
class Gaussian2DModel:
    """Axis-aligned elliptical Gaussian on a constant offset."""

    amplitude: float
    x0: float
    y0: float
    sigma_x: float
    sigma_y: float
    offset: float = 0.0

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ContractError("gaussian widths must be positive")

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.amplitude, self.x0, self.y0, self.sigma_x, self.sigma_y, self.offset]
        )

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "Gaussian2DModel":
        return cls(*(float(q) for q in v))

    @property
    def volume(self) -> float:
        """Integral of the peak above the offset."""
        return 2.0 * math.pi * self.amplitude * self.sigma_x * self.sigma_y


def eval_gaussian2d(params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, x0, y0, sx, sy, off = params
    dx = x - x0
    dy = y - y0
    return a * np.exp(-0.5 * (dx / sx) ** 2 - 0.5 * (dy / sy) ** 2) + off


def jac_gaussian2d(params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, x0, y0, sx, sy, _off = params
    dx = x - x0
    dy = y - y0
    g = np.exp(-0.5 * (dx / sx) ** 2 - 0.5 * (dy / sy) ** 2)
    out = np.empty((np.size(x), 6))
    out[:, 0] = g
    out[:, 1] = a * g * dx / sx**2
    out[:, 2] = a * g * dy / sy**2
    out[:, 3] = a * g * dx**2 / sx**3
    out[:, 4] = a * g * dy**2 / sy**3
    out[:, 5] = 1.0
    return out


# ---------------------------------------------------------------------------
# triple Gaussian (waveguide cross-sections: two trench edges and the guide)

TRIPLE_GAUSSIAN_PARAMS = (
    "amp_left", "center_left", "width_left",
    "amp_mid", "center_mid", "width_mid",
    "amp_right", "center_right", "width_right",
    "slope", "offset",
)


@dataclass
class TripleGaussianModel:
    """Three 1-d Gaussians on a shared linear background, centers ordered."""

    amp_left: float
    center_left: float
    width_left: float
    amp_mid: float
    center_mid: float
    width_mid: float
    amp_right: float
    center_right: float
    width_right: float
    slope: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if min(self.width_left, self.width_mid, self.width_right) <= 0:
            raise ContractError("gaussian widths must be positive")
        if not (self.center_left < self.center_mid < self.center_right):
            raise ContractError("centers must be ordered left < middle < right")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in TRIPLE_GAUSSIAN_PARAMS])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "TripleGaussianModel":
        return cls(*(float(q) for q in v))


def eval_triple_gaussian(params: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = params[9] * x + params[10]
    for i in range(3):
        a, c, w = params[3 * i : 3 * i + 3]
        out = out + a * np.exp(-0.5 * ((x - c) / w) ** 2)
    return out


def jac_triple_gaussian(params: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.empty((np.size(x), 11))
    for i in range(3):
        a, c, w = params[3 * i : 3 * i + 3]
        d = x - c
        g = np.exp(-0.5 * (d / w) ** 2)
        out[:, 3 * i] = g
        out[:, 3 * i + 1] = a * g * d / w**2
        out[:, 3 * i + 2] = a * g * d**2 / w**3
    out[:, 9] = x
    out[:, 10] = 1.0
    return out


# ---------------------------------------------------------------------------
# elliptical Airy (emitter spots post-fabrication)

ELLIPTICAL_AIRY_PARAMS = (
    "amplitude", "x0", "y0", "scale_major", "scale_minor", "orientation_deg", "offset",
)


@dataclass
class EllipticalAiryModel:
    """Airy pattern on a rotated, anisotropically scaled radius.

    ``orientation_deg`` rotates the major axis counterclockwise from the
    x axis.  The first dark ring sits at scaled radius 3.8317 along each
    principal axis.
    """

    amplitude: float
    x0: float
    y0: float
    scale_major: float
    scale_minor: float
    orientation_deg: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if self.scale_minor <= 0 or self.scale_major <= 0:
            raise ContractError("airy scales must be positive")
        if self.scale_major < self.scale_minor:
            raise ContractError("scale_major must be >= scale_minor")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in ELLIPTICAL_AIRY_PARAMS])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "EllipticalAiryModel":
        return cls(*(float(q) for q in v))

    @property
    def ellipticity(self) -> float:
        return self.scale_major / self.scale_minor


def airy_core(rho: np.ndarray) -> np.ndarray:
    """``(2 J1(rho)/rho)**2`` with the removable singularity filled in.

    Equals 1 at rho = 0 and first reaches 0 at rho = 3.8317059702075125.
    """
    rho = np.asarray(rho, dtype=float)
    out = np.empty_like(rho)
    small = np.abs(rho) < 1e-8
    rs = rho[small]
    out[small] = 1.0 - rs * rs / 4.0
    rb = rho[~small]
    out[~small] = (2.0 * j1(rb) / rb) ** 2
    return out


def _airy_slope_over_rho(rho: np.ndarray) -> np.ndarray:
    """d(airy_core)/drho divided by rho; finite everywhere, -1/2 at zero."""
    out = np.empty_like(rho)
    small = np.abs(rho) < 1e-4
    rs = rho[small]
    out[small] = -0.5 + (5.0 / 48.0) * rs * rs
    rb = rho[~small]
    out[~small] = -8.0 * j1(rb) * jv(2, rb) / rb**3
    return out


def _airy_uv(params, x, y):
    _a, x0, y0, sa, sb, th, _off = params
    t = math.radians(th)
    ct, st = math.cos(t), math.sin(t)
    dx = x - x0
    dy = y - y0
    u = ct * dx + st * dy
    v = -st * dx + ct * dy
    rho = np.sqrt((u / sa) ** 2 + (v / sb) ** 2)
    return u, v, rho, ct, st


def eval_elliptical_airy(params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a = params[0]
    off = params[6]
    _u, _v, rho, _ct, _st = _airy_uv(params, x, y)
    return a * airy_core(rho) + off


def jac_elliptical_airy(params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, _x0, _y0, sa, sb, _th, _off = params
    u, v, rho, ct, st = _airy_uv(params, x, y)
    w = _airy_slope_over_rho(rho)  # A'(rho)/rho, smooth through zero
    aw = a * w
    out = np.empty((np.size(x), 7))
    out[:, 0] = airy_core(rho)
    # Columns below are a*A'(rho)*(drho/dp); writing them as
    # a*(A'/rho)*(rho*drho/dp) avoids 1/rho singularities at the center.
    out[:, 1] = aw * (-(u * ct) / sa**2 + (v * st) / sb**2)
    out[:, 2] = aw * (-(u * st) / sa**2 - (v * ct) / sb**2)
    out[:, 3] = aw * (-(u * u) / sa**3)
    out[:, 4] = aw * (-(v * v) / sb**3)
    out[:, 5] = aw * (u * v * (1.0 / sa**2 - 1.0 / sb**2)) * (math.pi / 180.0)
    out[:, 6] = 1.0
    return out


# ---------------------------------------------------------------------------
# single Gaussian peak on a linear background (spectral lines)

PEAK_PARAMS = ("amplitude", "center", "sigma", "slope", "offset")


def eval_peak(params: np.ndarray, x: np.ndarray) -> np.ndarray:
    a, c, s, slope, off = params
    return a * np.exp(-0.5 * ((x - c) / s) ** 2) + slope * x + off


def jac_peak(params: np.ndarray, x: np.ndarray) -> np.ndarray:
    a, c, s, _slope, _off = params
    d = x - c
    g = np.exp(-0.5 * (d / s) ** 2)
    out = np.empty((np.size(x), 5))
    out[:, 0] = g
    out[:, 1] = a * g * d / s**2
    out[:, 2] = a * g * d**2 / s**3
    out[:, 3] = x
    out[:, 4] = 1.0
    return out


# ---------------------------------------------------------------------------


def eval_model(model, coords) -> np.ndarray:
    """Evaluate a model dataclass at coordinates.

    1-d models take an array of positions; 2-d models take an ``(x, y)``
    pair of equally shaped arrays.
    """
    if isinstance(model, ErfEdgeModel):
        return eval_erf_edge(
            model.to_vector(), np.asarray(coords, float), model.width,
            model.sigma_is_variance,
        )
    if isinstance(model, Gaussian2DModel):
        x, y = coords
        return eval_gaussian2d(model.to_vector(), np.asarray(x, float), np.asarray(y, float))
    if isinstance(model, TripleGaussianModel):
        return eval_triple_gaussian(model.to_vector(), np.asarray(coords, float))
    if isinstance(model, EllipticalAiryModel):
        x, y = coords
        return eval_elliptical_airy(model.to_vector(), np.asarray(x, float), np.asarray(y, float))
    raise ContractError(f"unknown model type: {type(model).__name__}")
