"""Spectral-shift statistics and quadratic field-tuning analysis.

Two measurement families share this module.  The first compares peak
wavelengths of spectrum pairs taken before and after fabrication and
aggregates the shifts per device group.  The second tracks emission
lines through voltage-wavelength maps and fits their field dependence:
in energy units the transition follows

    E(F) = E0 - p_z * F + alpha * F^2

with F the applied field, p_z the permanent-dipole term and alpha the
polarizability term.  Fitting happens in the energy domain; wavelengths
are converted, never fitted directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, EdgeError, FitError, UnderdeterminedError
from .fileio import atomic_write_text
from .fitcore import PEAK_PARAMS, FitProblem, eval_peak, jac_peak, lm_fit

__all__ = [
    "HC_EV_NM",
    "FieldConfig",
    "Spectrum",
    "PlateauMap",
    "PlateauTrace",
    "StarkModel",
    "StarkDelta",
    "ShiftRecord",
    "ShiftGroupStats",
    "field_kv_cm",
    "fit_peak",
    "spectral_shift",
    "shift_stats",
    "extract_plateaus",
    "fit_stark",
    "compare_stark",
    "read_plateau_map",
    "write_plateau_map",
    "save_stark_model",
    "load_stark_model",
]

# Planck constant times speed of light; fixes the eV <-> nm conversion.
HC_EV_NM = 1239.842

EXCITON_LABELS = ("X0", "Xplus", "other")

STRUCTURE_KINDS = ("nanoguide", "phcw")

_CENTER = PEAK_PARAMS.index("center")

SHIFT_CSV_COLUMNS = ("qd_id", "structure", "group_key", "delta_lambda_nm")


# ---------------------------------------------------------------------------
# types


@dataclass
class FieldConfig:
    """Diode geometry turning a bias voltage into a field.

    ``v_i`` is the built-in voltage and ``t_nm`` the intrinsic-region
    thickness.
    """

    v_i: float
    t_nm: float

    def __post_init__(self):
        if self.t_nm <= 0:
            raise ContractError("intrinsic-region thickness must be positive")


def field_kv_cm(voltage: float, cfg: FieldConfig) -> float:
    """Applied field in kV/cm at a given bias voltage.

    (V - v_i)/t, converted from V/nm; affine in V, zero at v_i.  The
    division runs before the unit scaling so the published constants
    (v_i = 1.56968 V, t = 70 nm) reproduce -224.24 at zero bias without
    a rounding ulp.
    """
    return (voltage - cfg.v_i) / cfg.t_nm * 1e4


@dataclass
class Spectrum:
    wavelengths: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=float)
        self.intensities = np.asarray(self.intensities, dtype=float)
        if self.wavelengths.ndim != 1 or self.wavelengths.size < 8:
            raise ContractError("spectrum needs at least 8 samples")
        if self.wavelengths.shape != self.intensities.shape:
            raise ContractError("wavelength and intensity lengths differ")
        if not np.all(np.diff(self.wavelengths) > 0):
            raise ContractError("wavelengths must be strictly increasing")


@dataclass
class PlateauMap:
    voltages: np.ndarray
    wavelengths: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.voltages = np.asarray(self.voltages, dtype=float)
        self.wavelengths = np.asarray(self.wavelengths, dtype=float)
        self.intensity = np.asarray(self.intensity, dtype=float)
        if self.intensity.shape != (self.voltages.size, self.wavelengths.size):
            raise ContractError("intensity grid does not match the axes")
        if not np.all(np.diff(self.voltages) > 0):
            raise ContractError("voltages must be strictly increasing")
        if not np.all(np.diff(self.wavelengths) > 0):
            raise ContractError("wavelengths must be strictly increasing")
        if np.any(self.intensity < 0):
            raise ContractError("map intensities must be non-negative")


@dataclass
class PlateauTrace:
    label: str
    points: list[tuple[float, float, float]]  # (V, lambda_nm, weight)

    def __post_init__(self):
        if self.label not in EXCITON_LABELS:
            raise ContractError(f"unknown exciton label {self.label!r}")
        if len(self.points) < 5:
            raise ContractError("plateau trace needs at least 5 points")
        volts = [p[0] for p in self.points]
        if not all(b > a for a, b in zip(volts, volts[1:])):
            raise ContractError("trace voltages must be strictly increasing")

    @property
    def voltage_span(self) -> tuple[float, float]:
        return self.points[0][0], self.points[-1][0]


@dataclass
class StarkModel:
    """Quadratic field response of one emission line.

    ``dipole`` is the permanent-dipole coefficient p_z/e in
    meV/(kV/cm); ``polarizability`` in meV/(kV/cm)^2.  Uncertainties
    are half the 95.4% interval.
    """

    lambda0_nm: float
    dipole: float
    polarizability: float
    config: FieldConfig
    unc_lambda0: float = 0.0
    unc_dipole: float = 0.0
    unc_polarizability: float = 0.0

    def __post_init__(self):
        if self.lambda0_nm <= 0:
            raise ContractError("zero-field wavelength must be positive")

    def energy_ev(self, field: float) -> float:
        """Model transition energy at a field in kV/cm."""
        return (
            HC_EV_NM / self.lambda0_nm
            - self.dipole * 1e-3 * field
            + self.polarizability * 1e-3 * field**2
        )

    @property
    def vertex_field(self) -> float:
        """Field of the energy extremum, p_z/(2*alpha), kV/cm."""
        if self.polarizability == 0:
            raise ContractError("flat response has no vertex")
        return self.dipole / (2.0 * self.polarizability)


@dataclass
class StarkDelta:
    d_lambda0: float
    d_dipole: float
    d_polarizability: float
    unc_lambda0: float
    unc_dipole: float
    unc_polarizability: float


@dataclass
class ShiftRecord:
    qd_id: str
    structure: str
    group_key: float
    delta_lambda: float

    def __post_init__(self):
        if self.structure not in STRUCTURE_KINDS:
            raise ContractError(f"unknown structure {self.structure!r}")
        if not math.isfinite(self.delta_lambda):
            raise ContractError("shift must be finite")


@dataclass
class ShiftGroupStats:
    mean: float
    std: float  # nan when the group is a singleton
    n: int

    @property
    def singleton(self) -> bool:
        return self.n < 2


# ---------------------------------------------------------------------------
# peak fitting and spectral shifts


def _fit_line(spectrum: Spectrum):
    """Gaussian-plus-linear-background fit around the global maximum."""
    intens = spectrum.intensities
    peak = int(np.argmax(intens))
    if peak < 2 or peak > intens.size - 3:
        raise EdgeError("dominant line sits at the edge of the sampled window")
    lo = max(0, peak - 10)
    hi = min(intens.size, peak + 11)
    x = spectrum.wavelengths[lo:hi]
    y = intens[lo:hi]

    step = float(np.mean(np.diff(x)))
    offset0 = float(min(y[0], y[-1]))
    x0 = np.array([float(y.max()) - offset0, float(x[peak - lo]), 2.0 * step, 0.0, offset0])
    lower = np.array([0.0, x[0], step / 4.0, -np.inf, -np.inf])
    upper = np.array([np.inf, x[-1], float(x[-1] - x[0]), np.inf, np.inf])
    result = lm_fit(
        FitProblem(
            residual=lambda p: eval_peak(p, x) - y,
            x0=x0,
            jacobian=lambda p: jac_peak(p, x),
            lower=lower,
            upper=upper,
            param_names=PEAK_PARAMS,
        )
    )
    if not result.converged:
        raise FitError("line fit did not converge")
    center = float(result.params[_CENTER])
    if not (x[0] < center < x[-1]):
        raise FitError("fitted line center left the window")
    return result


def fit_peak(spectrum: Spectrum) -> tuple[float, float]:
    """Wavelength of the dominant line, with uncertainty.

    Gaussian plus linear background fitted over the global maximum
    +-10 samples; unc is half the 95.4% interval.  A maximum at the
    array edge cannot be fitted and raises EdgeError.
    """
    result = _fit_line(spectrum)
    return float(result.params[_CENTER]), float(result.ci95[_CENTER])


def spectral_shift(before: Spectrum, after: Spectrum) -> tuple[float, float]:
    """Peak shift after minus before, nm, with quadrature uncertainty."""
    lam_b, unc_b = fit_peak(before)
    lam_a, unc_a = fit_peak(after)
    return lam_a - lam_b, math.sqrt(unc_a**2 + unc_b**2)


def shift_stats(
    records: Iterable[ShiftRecord],
    grouping: str | Callable[[ShiftRecord], object] = "structure",
) -> dict:
    """Normal-fit mean/std of shifts per group.

    ``grouping`` is an attribute name ("structure", "group_key", ...)
    or a callable.  Singleton groups are reported with std set to nan
    rather than rejected.
    """
    if callable(grouping):
        key = grouping
    else:
        key = lambda r: getattr(r, grouping)
    groups: dict = {}
    for record in records:
        groups.setdefault(key(record), []).append(record.delta_lambda)
    out = {}
    for name, values in groups.items():
        arr = np.asarray(values, dtype=float)
        std = float(arr.std(ddof=1)) if arr.size > 1 else float("nan")
        out[name] = ShiftGroupStats(mean=float(arr.mean()), std=std, n=int(arr.size))
    return out


# ---------------------------------------------------------------------------
# plateau tracking


def _column_peaks(
    spectrum: Spectrum, max_peaks: int, threshold: float
) -> list[tuple[float, float]]:
    """(lambda, weight) for up to max_peaks lines in one voltage column."""
    intens = spectrum.intensities.copy()
    found = []
    step = float(np.mean(np.diff(spectrum.wavelengths)))
    for _ in range(max_peaks):
        if intens.max() <= threshold:
            break
        try:
            result = _fit_line(Spectrum(spectrum.wavelengths, intens))
        except (EdgeError, FitError):
            break
        center = float(result.named("center"))
        width = abs(float(result.named("sigma")))
        weight = float(intens[int(np.argmax(intens))])
        found.append((center, weight))
        # Blank the whole fitted line, wings included, so the next pass
        # finds the next physical line instead of this one's shoulder.
        mask = np.abs(spectrum.wavelengths - center) <= max(3.0 * width, 4.0 * step)
        intens[mask] = 0.0
    return found


def extract_plateaus(
    plateau_map: PlateauMap,
    max_peaks: int = 3,
    continuity_nm: float = 0.15,
    max_gap: int = 1,
    min_points: int = 5,
) -> list[PlateauTrace]:
    """Track emission lines column by column through a voltage map.

    Peaks above median + 5 MAD are fitted per voltage step and linked
    to the nearest trace within ``continuity_nm``; a trace survives
    ``max_gap`` silent steps.  Traces shorter than ``min_points`` are
    dropped.  The surviving trace starting at the lowest bias is the
    charged exciton (it emits before the neutral one as the bias
    rises); the next is the neutral line; any further traces are
    labeled "other".  A lone trace is labeled "X0".
    """
    level = float(np.median(plateau_map.intensity))
    mad = float(np.median(np.abs(plateau_map.intensity - level)))
    threshold = level + 5.0 * 1.4826 * mad

    open_traces: list[dict] = []
    closed: list[dict] = []
    for row, voltage in enumerate(plateau_map.voltages):
        column = Spectrum(plateau_map.wavelengths, plateau_map.intensity[row])
        peaks = _column_peaks(column, max_peaks, threshold)
        claimed = [False] * len(peaks)
        for trace in open_traces:
            last_lambda = trace["points"][-1][1]
            best = None
            for idx, (lam, weight) in enumerate(peaks):
                if claimed[idx]:
                    continue
                if abs(lam - last_lambda) <= continuity_nm:
                    if best is None or abs(lam - last_lambda) < abs(peaks[best][0] - last_lambda):
                        best = idx
            if best is None:
                trace["gap"] += 1
            else:
                claimed[best] = True
                trace["points"].append((float(voltage), *peaks[best]))
                trace["gap"] = 0
        still_open = []
        for trace in open_traces:
            (still_open if trace["gap"] <= max_gap else closed).append(trace)
        open_traces = still_open
        for idx, (lam, weight) in enumerate(peaks):
            if not claimed[idx]:
                open_traces.append(
                    {"points": [(float(voltage), lam, weight)], "gap": 0}
                )
    closed.extend(open_traces)

    survivors = [t["points"] for t in closed if len(t["points"]) >= min_points]
    survivors.sort(key=lambda pts: pts[0][0])
    traces = []
    for rank, points in enumerate(survivors):
        if len(survivors) == 1:
            label = "X0"
        else:
            label = "Xplus" if rank == 0 else ("X0" if rank == 1 else "other")
        traces.append(PlateauTrace(label=label, points=points))
    return traces


# ---------------------------------------------------------------------------
# quadratic field-response fit


def fit_stark(trace: PlateauTrace, cfg: FieldConfig) -> StarkModel:
    """Weighted quadratic fit of transition energy against field.

    Fields are centered and scaled before solving so the normal
    equations stay conditioned; coefficients and covariance are mapped
    back analytically.  Uniformly rescaling the point weights leaves
    the parameters unchanged.  A trace spanning too narrow a field
    range cannot separate the three coefficients and raises
    UnderdeterminedError.
    """
    volts = np.array([p[0] for p in trace.points])
    lams = np.array([p[1] for p in trace.points])
    weights = np.array([max(p[2], 0.0) for p in trace.points])
    if np.all(weights == 0):
        weights = np.ones_like(weights)
    weights = weights / weights.max()

    fields = (volts - cfg.v_i) / cfg.t_nm * 1e4
    if np.unique(fields).size < 3:
        raise UnderdeterminedError("need at least 3 distinct field values")
    center = float(fields.mean())
    spread = float(fields.std())
    if spread <= 0 or spread < 1e-9 * max(abs(center), 1.0):
        raise UnderdeterminedError("field span too narrow for a quadratic")

    u = (fields - center) / spread
    energies = HC_EV_NM / lams
    design = np.column_stack([np.ones_like(u), u, u * u])
    normal = design.T @ (design * weights[:, None])
    try:
        inv_normal = np.linalg.inv(normal)
    except np.linalg.LinAlgError:
        raise UnderdeterminedError("degenerate field sampling") from None
    b = inv_normal @ (design.T @ (weights * energies))

    residuals = design @ b - energies
    dof = max(energies.size - 3, 1)
    s2 = float((weights * residuals**2).sum() / dof)
    cov_b = inv_normal * s2

    # Back to the raw-field basis: c0 + c1 F + c2 F^2.
    m, s = center, spread
    lin = np.array(
        [
            [1.0, -m / s, m * m / (s * s)],
            [0.0, 1.0 / s, -2.0 * m / (s * s)],
            [0.0, 0.0, 1.0 / (s * s)],
        ]
    )
    c = lin @ b
    cov_c = lin @ cov_b @ lin.T

    c0, c1, c2 = (float(v) for v in c)
    if c0 <= 0:
        raise FitError("fitted zero-field energy is not positive")
    sig = np.sqrt(np.clip(np.diag(cov_c), 0.0, None))
    lambda0 = HC_EV_NM / c0
    return StarkModel(
        lambda0_nm=lambda0,
        dipole=-c1 * 1e3,
        polarizability=c2 * 1e3,
        config=cfg,
        unc_lambda0=2.0 * float(sig[0]) * HC_EV_NM / c0**2,
        unc_dipole=2.0 * float(sig[1]) * 1e3,
        unc_polarizability=2.0 * float(sig[2]) * 1e3,
    )


def compare_stark(before: StarkModel, after: StarkModel) -> StarkDelta:
    """Componentwise parameter changes, after minus before."""
    if before.config != after.config:
        raise ContractError("models were taken under different field configs")
    return StarkDelta(
        d_lambda0=after.lambda0_nm - before.lambda0_nm,
        d_dipole=after.dipole - before.dipole,
        d_polarizability=after.polarizability - before.polarizability,
        unc_lambda0=math.hypot(after.unc_lambda0, before.unc_lambda0),
        unc_dipole=math.hypot(after.unc_dipole, before.unc_dipole),
        unc_polarizability=math.hypot(
            after.unc_polarizability, before.unc_polarizability
        ),
    )


# ---------------------------------------------------------------------------
# file formats


def write_plateau_map(plateau_map: PlateauMap, path: str | Path) -> None:
    """CSV layout: header row of wavelengths, first column voltages.

    Cells use shortest-roundtrip decimals so reading the file back
    reproduces the array bit for bit.
    """
    lines = ["v," + ",".join(repr(float(w)) for w in plateau_map.wavelengths)]
    for voltage, row in zip(plateau_map.voltages, plateau_map.intensity):
        lines.append(
            repr(float(voltage)) + "," + ",".join(repr(float(v)) for v in row)
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_plateau_map(path: str | Path) -> PlateauMap:
    text = Path(path).read_text()
    rows = [line.split(",") for line in text.splitlines() if line]
    wavelengths = [float(v) for v in rows[0][1:]]
    voltages = [float(row[0]) for row in rows[1:]]
    intensity = [[float(v) for v in row[1:]] for row in rows[1:]]
    return PlateauMap(
        voltages=np.array(voltages),
        wavelengths=np.array(wavelengths),
        intensity=np.array(intensity),
    )


def save_stark_model(model: StarkModel, path: str | Path) -> None:
    record = {
        "lambda0_nm": model.lambda0_nm,
        "dipole_mev_per_kv_cm": model.dipole,
        "polarizability_mev_per_kv_cm2": model.polarizability,
        "unc_lambda0_nm": model.unc_lambda0,
        "unc_dipole": model.unc_dipole,
        "unc_polarizability": model.unc_polarizability,
        "v_i": model.config.v_i,
        "t_nm": model.config.t_nm,
    }
    atomic_write_text(path, json.dumps(record, indent=1, sort_keys=True) + "\n")


def load_stark_model(path: str | Path) -> StarkModel:
    record = json.loads(Path(path).read_text())
    return StarkModel(
        lambda0_nm=float(record["lambda0_nm"]),
        dipole=float(record["dipole_mev_per_kv_cm"]),
        polarizability=float(record["polarizability_mev_per_kv_cm2"]),
        config=FieldConfig(v_i=float(record["v_i"]), t_nm=float(record["t_nm"])),
        unc_lambda0=float(record["unc_lambda0_nm"]),
        unc_dipole=float(record["unc_dipole"]),
        unc_polarizability=float(record["unc_polarizability"]),
    )


def shift_rows(records: Sequence[ShiftRecord]) -> list[tuple]:
    """Rows for the shift-statistics CSV."""
    return [
        (r.qd_id, r.structure, r.group_key, r.delta_lambda) for r in records
    ]
