"""Calibrated synthetic corpus presets.

Each preset encodes the scene settings that reproduce the measured
statistics on synthetic data: localization scatter of the marker
crosses, emitter photon budgets, waveguide-section signal levels,
misalignment injection, spectral-shift distributions and plateau-map
parameters.  The numeric values here are calibration results; change
them only together with the acceptance thresholds they feed.

A corpus scene is a set of files under ``scene_NNN/``:

  pre_markers.pgm    marker grid, pre-fabrication illumination
  pre_emitters.pgm   narrowband emitter frame, Gaussian spots
  post_markers.pgm   marker grid plus etched guides, wetting-layer light
  post_emitters.pgm  emitter frame after fabrication, Airy spots

Spectral presets write CSV pairs instead of images.  Builders receive a
64-bit sub-seed and derive every stream from it, so corpora are
reproducible byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synth
from .errors import ContractError
from .fileio import atomic_write_text, write_csv
from .imgproc import BackgroundModel, save_image
from .stark import HC_EV_NM, PlateauMap, StarkModel, FieldConfig, write_plateau_map

__all__ = ["Preset", "BuiltScene", "get", "builder_for", "run_builder", "write_run_config"]


@dataclass(frozen=True)
class Preset:
    name: str
    kinds: tuple[str, ...]
    default_kind: str
    description: str
    settings: dict


@dataclass
class BuiltScene:
    truth_rows: list[tuple]
    paths: list[str]
    config_entry: dict = field(default_factory=dict)


# Device-corpus geometry: one 40 um grid square centered in the default
# 1024 px frame, crosses on its corners, emitters and guides inside.
_DEVICE_COMMON = dict(
    frame_px=1024,
    pitch_nm=59.0,
    grid_origin_nm=(10208.0, 10208.0),
    grid_pitch_nm=40000.0,
    grid_rows=2,
    grid_cols=2,
    arm_length_nm=5900.0,
    arm_width_nm=472.0,
    label_offset_nm=(20000.0, -2700.0),
    pre_bg_sigma_px=350.0,
    emitter_bg_offset=10.0,
    read_noise=3.0,
    psf_sigma_nm=240.0,
    airy_scale_nm=174.0,
    ellipticity_post=1.15,
    post_bg_offset=2000.0,
    edge_glow=5000.0,
    n_emitters=15,
    n_devices=5,
    dropout=0.04,
    rotation_sigma_deg=0.12,
    rotation_max_deg=0.30,
)

_PRESETS = {
    "fig2b": Preset(
        name="fig2b",
        kinds=("devices", "rotated"),
        default_kind="devices",
        description="Intrinsic-wafer device corpus: bright markers, "
        "3e5-photon emitters, guides with 9+-46 nm placement error.",
        settings=dict(
            _DEVICE_COMMON,
            mode="intrinsic",
            pre_bg_amplitude=1060.0,
            pre_bg_offset=60.0,
            doped_dim=1.0,
            photons_pre=3.0e5,
            photons_post=2.2e5,
            delta_mean_nm=9.0,
            delta_std_nm=46.0,
        ),
    ),
    "fig2c": Preset(
        name="fig2c",
        kinds=("devices", "rotated"),
        default_kind="devices",
        description="Doped-wafer device corpus: wetting-layer-dim markers, "
        "2.1e5-photon emitters, guides with 1+-33 nm placement error.",
        settings=dict(
            _DEVICE_COMMON,
            mode="doped",
            pre_bg_amplitude=1060.0,
            pre_bg_offset=60.0,
            doped_dim=0.313,
            photons_pre=2.1e5,
            photons_post=2.2e5,
            delta_mean_nm=1.0,
            delta_std_nm=33.0,
        ),
    ),
    "fig3": Preset(
        name="fig3",
        kinds=("intrinsic", "doped"),
        default_kind="intrinsic",
        description="Before/after spectrum pairs with structure-dependent "
        "shift distributions.",
        settings=dict(
            lambda_start_nm=933.0,
            lambda_stop_nm=937.5,
            lambda_step_nm=0.005,
            line_sigma_nm=0.05,
            line_amplitude=1200.0,
            bg_offset=60.0,
            center_low_nm=934.3,
            center_high_nm=935.7,
            # (mean, std) of the injected shift per structure and wafer
            shift_nm=dict(
                intrinsic=dict(nanoguide=(0.8, 0.6), phcw=(0.1, 0.7)),
                doped=dict(nanoguide=(-0.2, 0.3), phcw=(-1.1, 0.6)),
            ),
            group_key=dict(nanoguide=300.0, phcw=0.0),
        ),
    ),
    "fig5": Preset(
        name="fig5",
        kinds=("pair",),
        default_kind="pair",
        description="Voltage-wavelength plateau maps before and after "
        "fabrication; both excitons blue shift by 0.3 nm.",
        settings=dict(
            v_start=0.0,
            v_stop=1.4,
            n_voltages=71,
            lambda_start_nm=933.5,
            lambda_stop_nm=936.5,
            lambda_step_nm=0.02,
            line_sigma_nm=0.06,
            bg_offset=20.0,
            v_i=1.56968,
            t_nm=70.0,
            blue_shift_nm=0.3,
            xplus=dict(lambda0_nm=935.2, dipole=2.0e-3, polarizability=-1.0e-6,
                       amplitude=900.0, v_on=0.08, v_off=0.85),
            xzero=dict(lambda0_nm=934.7, dipole=1.5e-3, polarizability=-8.0e-7,
                       amplitude=700.0, v_on=0.50, v_off=1.38),
        ),
    ),
}


def get(name: str) -> Preset:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ContractError(
            f"unknown preset {name!r}; choose from {sorted(_PRESETS)}"
        ) from None


def builder_for(preset: Preset, kind: str):
    if kind not in preset.kinds:
        raise ContractError(
            f"preset {preset.name!r} has kinds {preset.kinds}, not {kind!r}"
        )
    if preset.name in ("fig2b", "fig2c"):
        rotated = kind == "rotated"
        return lambda p, i, sub, out: _build_device_scene(p, i, sub, out, rotated)
    if preset.name == "fig3":
        return lambda p, i, sub, out: _build_spectrum_pair(p, i, sub, out, kind)
    return lambda p, i, sub, out: _build_plateau_pair(p, i, sub, out)


def run_builder(args: tuple) -> BuiltScene:
    """Top-level entry point usable from a process pool."""
    preset_name, kind, index, sub, out_str = args
    preset = get(preset_name)
    return builder_for(preset, kind)(preset, index, sub, Path(out_str))


def write_run_config(preset: Preset, kind: str, out: Path, results) -> Path:
    """One JSON document describing the whole corpus for the pipeline."""
    record = {
        "preset": preset.name,
        "kind": kind,
        "description": preset.description,
        "settings": _jsonable(preset.settings),
        "scenes": [r.config_entry for r in results if r.config_entry],
    }
    path = Path(out) / "run.json"
    atomic_write_text(path, json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _stream(sub: int, key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=sub, spawn_key=(key,))
    return np.random.Generator(np.random.Philox(seq))


def _stream_seed(sub: int, key: int) -> int:
    seq = np.random.SeedSequence(entropy=sub, spawn_key=(key,))
    return int(seq.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# device corpus (fig2b / fig2c)


def _grid_nodes(s: dict) -> list[tuple[str, float, float]]:
    ox, oy = s["grid_origin_nm"]
    pitch = s["grid_pitch_nm"]
    return [
        (f"r{r}c{c}", ox + c * pitch, oy + r * pitch)
        for r in range(s["grid_rows"])
        for c in range(s["grid_cols"])
    ]


def marker_scene(
    name: str, label_code: int = 0, rotation_deg: float = 0.0, seed: int = 0
) -> synth.Scene:
    """Pre-fabrication marker frame for one wafer preset.

    Exactly the construction the corpus builder uses, exposed so that
    repeated noise draws of a single frame (calibration scripts,
    acceptance checks) stay in lockstep with emitted corpora.
    """
    s = get(name).settings
    if "arm_length_nm" not in s:
        raise ContractError(f"preset {name!r} has no marker frames")
    frame = s["frame_px"]
    mid = (frame - 1) / 2.0
    crosses = [
        synth.CrossSpec(x=x, y=y, arm_length=s["arm_length_nm"], arm_width=s["arm_width_nm"])
        for _, x, y in _grid_nodes(s)
    ]
    ox, oy = s["grid_origin_nm"]
    label = synth.LabelSpec(
        x=ox + s["label_offset_nm"][0], y=oy + s["label_offset_nm"][1], code=label_code
    )
    bg = BackgroundModel(
        amplitude=s["pre_bg_amplitude"], center_x=mid, center_y=mid,
        sigma_x=s["pre_bg_sigma_px"], sigma_y=s["pre_bg_sigma_px"],
        offset=s["pre_bg_offset"],
    )
    mode = "doped-markers" if s["mode"] == "doped" else "intrinsic-markers"
    return synth.Scene(
        mode=mode, background=bg, crosses=crosses, labels=[label],
        rotation_deg=rotation_deg, seed=seed,
        width_px=frame, height_px=frame, pitch_nm=s["pitch_nm"],
        read_noise_sigma=s["read_noise"], doped_dim_factor=s["doped_dim"],
    )


def _sample_positions(s: dict, rng: np.random.Generator):
    """Device slots plus extra emitters, all inside one grid square.

    Device guides are along-x and must not overlap: their y slots are
    evenly spaced with jitter.  Extra emitters keep clear of the trench
    band around each guide axis.  The Chebyshev separation is sized so
    the detection boxes of two distinct spots (core plus first ring of
    the widest PSF, plus the box halo) can never chain into one merged
    region; only a spot's own secondary maxima may merge.
    """
    ox, oy = s["grid_origin_nm"]
    pitch = s["grid_pitch_nm"]
    n_dev = s["n_devices"]
    lo_x, hi_x = ox + 4200.0, ox + pitch - 4200.0
    lo_y, hi_y = oy + 7000.0, oy + pitch - 7000.0

    slot = (hi_y - lo_y) / n_dev
    devices = []
    for k in range(n_dev):
        y = lo_y + (k + 0.5) * slot + rng.uniform(-700.0, 700.0)
        x = lo_x + (k + 0.5) * (hi_x - lo_x) / n_dev + rng.uniform(-500.0, 500.0)
        devices.append((x, y))

    extras = []
    guard = 1900.0
    for _ in range(200_000):
        if len(extras) >= s["n_emitters"] - n_dev:
            break
        x = rng.uniform(lo_x, hi_x)
        y = rng.uniform(lo_y, hi_y)
        if any(abs(y - dy) < guard for _, dy in devices):
            continue
        if any(
            max(abs(x - px), abs(y - py)) < 5000.0 for px, py in devices + extras
        ):
            continue
        extras.append((x, y))
    else:
        raise ContractError("emitter placement did not converge")
    return devices, extras


def _build_device_scene(
    preset: Preset, index: int, sub: int, out: Path, rotated: bool
) -> BuiltScene:
    s = preset.settings
    doped = s["mode"] == "doped"
    scene_id = f"scene_{index:03d}"
    scene_dir = Path(out) / scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)

    geom_rng = _stream(sub, 0)
    devices, extras = _sample_positions(s, geom_rng)
    emitters_xy = devices + extras
    deltas = geom_rng.normal(s["delta_mean_nm"], s["delta_std_nm"], len(devices))
    dropped = geom_rng.random(len(emitters_xy)) < s["dropout"]

    if rotated:
        sigma, cap = s["rotation_sigma_deg"], s["rotation_max_deg"]
        rot_pre = float(np.clip(geom_rng.normal(0.0, sigma), -cap, cap))
        rot_post = float(np.clip(geom_rng.normal(0.0, sigma), -cap, cap))
    else:
        rot_pre = rot_post = 0.0

    frame = s["frame_px"]
    mid = (frame - 1) / 2.0
    crosses = [
        synth.CrossSpec(x=x, y=y, arm_length=s["arm_length_nm"], arm_width=s["arm_width_nm"])
        for _, x, y in _grid_nodes(s)
    ]
    ox, oy = s["grid_origin_nm"]
    label_code = ((index // 10) % 16) << 4 | (index % 10)
    label = synth.LabelSpec(
        x=ox + s["label_offset_nm"][0], y=oy + s["label_offset_nm"][1], code=label_code
    )

    flat = lambda level: BackgroundModel(
        amplitude=0.0, center_x=mid, center_y=mid, sigma_x=1.0, sigma_y=1.0,
        offset=level,
    )

    marker_mode = "doped-markers" if doped else "intrinsic-markers"
    emitter_mode = "doped-emitters" if doped else "intrinsic-emitters"
    common = dict(
        width_px=frame, height_px=frame, pitch_nm=s["pitch_nm"],
        read_noise_sigma=s["read_noise"], doped_dim_factor=s["doped_dim"],
    )

    pre_markers = marker_scene(
        preset.name, label_code=label_code, rotation_deg=rot_pre,
        seed=_stream_seed(sub, 10),
    )
    pre_emitters = synth.Scene(
        mode=emitter_mode, background=flat(s["emitter_bg_offset"]),
        emitters=[
            synth.EmitterSpec(x=x, y=y, photons=s["photons_pre"], psf="gaussian",
                              psf_scale=s["psf_sigma_nm"])
            for x, y in emitters_xy
        ],
        rotation_deg=rot_pre, seed=_stream_seed(sub, 11), **common,
    )
    guides = [
        synth.WaveguideSpec(axis_coordinate=qd_y - delta, orientation="along-x",
                            edge_brightness=s["edge_glow"])
        for (_, qd_y), delta in zip(devices, deltas)
    ]
    post_markers = synth.Scene(
        mode=marker_mode, background=flat(s["post_bg_offset"]), crosses=crosses,
        labels=[label], waveguides=guides,
        rotation_deg=rot_post, seed=_stream_seed(sub, 12), **common,
    )
    post_spots = [
        synth.EmitterSpec(
            x=x, y=y, photons=s["photons_post"], psf="airy",
            psf_scale=s["airy_scale_nm"], ellipticity=s["ellipticity_post"],
            orientation=float(geom_rng.uniform(0.0, 180.0)),
        )
        for keep, (x, y) in zip(~dropped, emitters_xy) if keep
    ]
    post_emitters = synth.Scene(
        mode=emitter_mode, background=flat(s["emitter_bg_offset"]),
        emitters=post_spots, rotation_deg=rot_post,
        seed=_stream_seed(sub, 13), **common,
    )

    paths = []
    for name, scene in (
        ("pre_markers", pre_markers),
        ("pre_emitters", pre_emitters),
        ("post_markers", post_markers),
        ("post_emitters", post_emitters),
    ):
        path = scene_dir / f"{name}.pgm"
        save_image(synth.render(scene), path)
        paths.append(str(path))

    rows = []
    for node, x, y in _grid_nodes(s):
        rows.append((scene_id, "cross", x, y, f"node={node}"))
    rows.append((scene_id, "label", label.x, label.y, f"code={label_code}"))
    for k, (x, y) in enumerate(emitters_xy):
        device = f"d{k}" if k < len(devices) else ""
        rows.append(
            (scene_id, "emitter", x, y,
             f"photons={s['photons_pre']:.0f};psf=gaussian;device={device};"
             f"dropped={int(dropped[k])}")
        )
    for k, (guide, delta) in enumerate(zip(guides, deltas)):
        rows.append(
            (scene_id, "waveguide", 0.0, guide.axis_coordinate,
             f"orientation=along-x;delta_nm={delta:.6f};device=d{k}")
        )
    rows.append(
        (scene_id, "frame", 0.0, 0.0,
         f"rotation_pre_deg={rot_pre:.6f};rotation_post_deg={rot_post:.6f}")
    )

    entry = {
        "scene_id": scene_id,
        "label_code": label_code,
        "files": {
            "pre_markers": f"{scene_id}/pre_markers.pgm",
            "pre_emitters": f"{scene_id}/pre_emitters.pgm",
            "post_markers": f"{scene_id}/post_markers.pgm",
            "post_emitters": f"{scene_id}/post_emitters.pgm",
        },
        "devices": [
            {
                "device_id": f"d{k}",
                "design_axis_nm": round(devices[k][1], 0),
                "orientation": "along-x",
            }
            for k in range(len(devices))
        ],
    }
    return BuiltScene(truth_rows=rows, paths=paths, config_entry=entry)


# ---------------------------------------------------------------------------
# spectrum pairs (fig3)


def _render_spectrum(
    wavelengths: np.ndarray, center: float, s: dict, rng: np.random.Generator
) -> np.ndarray:
    line = s["line_amplitude"] * np.exp(
        -0.5 * ((wavelengths - center) / s["line_sigma_nm"]) ** 2
    )
    expected = line + s["bg_offset"]
    return rng.poisson(expected).astype(float)


def _build_spectrum_pair(
    preset: Preset, index: int, sub: int, out: Path, kind: str
) -> BuiltScene:
    s = preset.settings
    scene_id = f"scene_{index:03d}"
    scene_dir = Path(out) / scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)

    structure = "nanoguide" if index % 2 == 0 else "phcw"
    mean, std = s["shift_nm"][kind][structure]
    rng = _stream(sub, 0)
    center = rng.uniform(s["center_low_nm"], s["center_high_nm"])
    shift = float(rng.normal(mean, std))

    wavelengths = np.arange(
        s["lambda_start_nm"], s["lambda_stop_nm"], s["lambda_step_nm"]
    )
    noise = _stream(sub, 1)
    before = _render_spectrum(wavelengths, center, s, noise)
    after = _render_spectrum(wavelengths, center + shift, s, noise)

    paths = []
    for name, intensities in (("before", before), ("after", after)):
        path = scene_dir / f"{name}.csv"
        write_csv(
            path, ("wavelength_nm", "intensity"),
            list(zip(wavelengths, intensities)),
        )
        paths.append(str(path))

    rows = [
        (scene_id, "shift", 0.0, 0.0,
         f"structure={structure};group_key={s['group_key'][structure]};"
         f"center_nm={center:.6f};delta_nm={shift:.6f}")
    ]
    entry = {
        "scene_id": scene_id,
        "structure": structure,
        "group_key": s["group_key"][structure],
        "files": {"before": f"{scene_id}/before.csv", "after": f"{scene_id}/after.csv"},
    }
    return BuiltScene(truth_rows=rows, paths=paths, config_entry=entry)


# ---------------------------------------------------------------------------
# plateau-map pairs (fig5)


def _plateau_intensity(
    s: dict, models: dict, volts: np.ndarray, waves: np.ndarray,
    cfg: FieldConfig, rng: np.random.Generator,
) -> np.ndarray:
    expected = np.full((volts.size, waves.size), s["bg_offset"])
    for name, model in models.items():
        spec = s[name]
        for i, v in enumerate(volts):
            if not (spec["v_on"] <= v <= spec["v_off"]):
                continue
            f = (v - cfg.v_i) * 1e4 / cfg.t_nm
            lam = HC_EV_NM / model.energy_ev(f)
            expected[i] += spec["amplitude"] * np.exp(
                -0.5 * ((waves - lam) / s["line_sigma_nm"]) ** 2
            )
    return rng.poisson(expected).astype(float)


def _build_plateau_pair(preset: Preset, index: int, sub: int, out: Path) -> BuiltScene:
    s = preset.settings
    scene_id = f"scene_{index:03d}"
    scene_dir = Path(out) / scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    cfg = FieldConfig(v_i=s["v_i"], t_nm=s["t_nm"])

    jitter = _stream(sub, 0)
    volts = np.linspace(s["v_start"], s["v_stop"], s["n_voltages"])
    waves = np.arange(s["lambda_start_nm"], s["lambda_stop_nm"], s["lambda_step_nm"])

    models = {}
    rows = []
    for name in ("xplus", "xzero"):
        spec = s[name]
        lambda0 = spec["lambda0_nm"] + float(jitter.uniform(-0.1, 0.1))
        dipole = spec["dipole"] * float(jitter.uniform(0.8, 1.2))
        polar = spec["polarizability"] * float(jitter.uniform(0.8, 1.2))
        models[name] = {
            "pre": StarkModel(lambda0_nm=lambda0, dipole=dipole,
                              polarizability=polar, config=cfg),
            "post": StarkModel(lambda0_nm=lambda0 - s["blue_shift_nm"],
                               dipole=dipole, polarizability=polar, config=cfg),
        }
        for epoch in ("pre", "post"):
            m = models[name][epoch]
            rows.append(
                (scene_id, "stark", 0.0, 0.0,
                 f"line={name};epoch={epoch};lambda0_nm={m.lambda0_nm:.6f};"
                 f"dipole={m.dipole:.8f};polarizability={m.polarizability:.10f}")
            )

    paths = []
    for epoch, key in (("pre", 1), ("post", 2)):
        rng = _stream(sub, key)
        intensity = _plateau_intensity(
            s, {n: models[n][epoch] for n in models}, volts, waves, cfg, rng
        )
        path = scene_dir / f"{epoch}_map.csv"
        write_plateau_map(
            PlateauMap(voltages=volts, wavelengths=waves, intensity=intensity), path
        )
        paths.append(str(path))

    entry = {
        "scene_id": scene_id,
        "files": {"pre": f"{scene_id}/pre_map.csv", "post": f"{scene_id}/post_map.csv"},
        "field": {"v_i": s["v_i"], "t_nm": s["t_nm"]},
    }
    return BuiltScene(truth_rows=rows, paths=paths, config_entry=entry)
