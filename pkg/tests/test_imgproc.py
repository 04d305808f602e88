"""Image container, PGM storage, rotation and background removal."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as npst

from qdalign.errors import (
    ContractError,
    FormatError,
    NoFeaturesError,
    TruncatedFileError,
)
from qdalign.fitcore import eval_gaussian2d
from qdalign.imgproc import (
    BackgroundModel,
    Image,
    crop,
    estimate_rotation,
    load_image,
    rotate,
    save_image,
    subtract_background,
)


# ---------------------------------------------------------------------------
# container


def test_image_validation():
    with pytest.raises(ContractError):
        Image(counts=np.zeros(4))
    with pytest.raises(ContractError):
        Image(counts=np.full((3, 3), -1.0))
    with pytest.raises(ContractError):
        Image(counts=np.full((3, 3), np.nan))
    with pytest.raises(ContractError):
        Image(counts=np.zeros((3, 3)), pixel_pitch=0.0)
    with pytest.raises(ContractError):
        Image(counts=np.zeros((3, 3)), meta={"temperature": "4K"})


def test_image_counts_are_immutable():
    img = Image(counts=np.zeros((4, 4)))
    with pytest.raises(ValueError):
        img.counts[0, 0] = 1.0


def test_crop_bounds_and_origin():
    img = Image(counts=np.arange(36.0).reshape(6, 6), pixel_pitch=10.0)
    roi = crop(img, 1, 2, 3, 2)
    assert (roi.x0, roi.y0) == (1, 2)
    assert roi.pitch_nm == 10.0
    np.testing.assert_array_equal(roi.data, img.counts[2:4, 1:4])
    with pytest.raises(ContractError):
        crop(img, 4, 0, 3, 3)


# ---------------------------------------------------------------------------
# PGM roundtrip


@given(
    counts=npst.arrays(
        dtype=np.uint16,
        shape=st.tuples(st.integers(1, 12), st.integers(1, 12)),
    ),
    pitch=st.floats(1.0, 500.0),
)
@settings(max_examples=30, deadline=None)
def test_pgm_roundtrip(tmp_path_factory, counts, pitch):
    path = tmp_path_factory.mktemp("pgm") / "frame.pgm"
    img = Image(counts=counts.astype(float), pixel_pitch=pitch)
    save_image(img, path)
    back = load_image(path)
    np.testing.assert_array_equal(back.counts, img.counts)
    assert back.pixel_pitch == pitch  # repr() roundtrips doubles exactly


def test_pgm_meta_roundtrip(tmp_path):
    img = Image(
        counts=np.ones((3, 3)),
        meta={"exposure_s": "1.5", "mode": "doped-markers"},
    )
    save_image(img, tmp_path / "a.pgm")
    back = load_image(tmp_path / "a.pgm")
    assert back.meta == {"exposure_s": "1.5", "mode": "doped-markers"}


def test_pgm_save_is_deterministic(tmp_path):
    img = Image(counts=np.arange(20.0).reshape(4, 5))
    save_image(img, tmp_path / "a.pgm")
    save_image(img, tmp_path / "b.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_pgm_clips_and_rounds(tmp_path):
    img = Image(counts=np.array([[0.4, 70000.0], [1.6, 2.0]]))
    save_image(img, tmp_path / "a.pgm")
    back = load_image(tmp_path / "a.pgm")
    np.testing.assert_array_equal(back.counts, [[0.0, 65535.0], [2.0, 2.0]])


def test_pgm_load_errors(tmp_path):
    good = tmp_path / "good.pgm"
    save_image(Image(counts=np.ones((4, 4))), good)
    raw = good.read_bytes()

    bad_magic = tmp_path / "magic.pgm"
    bad_magic.write_bytes(b"P6" + raw[2:])
    with pytest.raises(FormatError):
        load_image(bad_magic)

    truncated = tmp_path / "short.pgm"
    truncated.write_bytes(raw[:-3])
    with pytest.raises(TruncatedFileError):
        load_image(truncated)

    trailing = tmp_path / "long.pgm"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError):
        load_image(trailing)

    bad_key = tmp_path / "key.pgm"
    bad_key.write_bytes(raw.replace(b"# pitch_nm=", b"# gain_db=", 1))
    with pytest.raises(FormatError):
        load_image(bad_key)


def test_pgm_truncated_is_oserror(tmp_path):
    # Callers treating storage problems as I/O failures should catch it.
    assert issubclass(TruncatedFileError, OSError)


# ---------------------------------------------------------------------------
# rotation


def _smooth_frame(size=96):
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    params = np.array([200.0, size / 2 + 4, size / 2 - 6, size / 5, size / 4, 10.0])
    return Image(counts=eval_gaussian2d(params, xs, ys))


def test_rotate_zero_is_identity():
    img = _smooth_frame()
    np.testing.assert_allclose(rotate(img, 0.0).counts, img.counts, atol=1e-9)


def test_rotate_inverse_restores_interior():
    img = _smooth_frame()
    back = rotate(rotate(img, 2.0), -2.0)
    sl = slice(16, -16)
    peak = float(img.counts.max())
    assert np.max(np.abs(back.counts[sl, sl] - img.counts[sl, sl])) < 0.02 * peak


def test_rotate_direction_convention():
    # A spot at center + (r, 0) must land at center + (r cos a, r sin a).
    size = 101
    counts = np.zeros((size, size))
    counts[50, 80] = 1000.0
    img = Image(counts=counts)
    out = rotate(img, 12.0)
    row, col = np.unravel_index(np.argmax(out.counts), out.counts.shape)
    r = 30.0
    a = np.radians(12.0)
    assert abs(col - (50 + r * np.cos(a))) <= 1.0
    assert abs(row - (50 + r * np.sin(a))) <= 1.0


@pytest.mark.parametrize("angle", [-1.3, 0.7])
def test_estimate_rotation_recovers_angle(angle):
    rng = np.random.default_rng(5)
    size = 256
    counts = np.full((size, size), 50.0)
    counts[:, 60:66] += 300.0
    counts[:, 180:186] += 300.0
    counts[120:126, :] += 300.0
    img = Image(counts=counts + rng.normal(0.0, 3.0, counts.shape).clip(-40, 40) + 40)
    estimate = estimate_rotation(rotate(img, angle))
    assert estimate.angle_deg == pytest.approx(angle, abs=0.02)
    assert estimate.uncertainty_deg > 0


def test_estimate_rotation_rejects_featureless():
    rng = np.random.default_rng(0)
    noise = Image(counts=rng.uniform(40.0, 60.0, (128, 128)))
    with pytest.raises(NoFeaturesError):
        estimate_rotation(noise)
    with pytest.raises(NoFeaturesError):
        estimate_rotation(Image(counts=np.full((128, 128), 7.0)))


# ---------------------------------------------------------------------------
# background


def test_subtract_background_recovers_envelope():
    rng = np.random.default_rng(1)
    size = 256
    truth = BackgroundModel(
        amplitude=900.0,
        center_x=130.0,
        center_y=120.0,
        sigma_x=90.0,
        sigma_y=110.0,
        offset=45.0,
    )
    counts = truth.evaluate((size, size)) + rng.normal(0.0, 4.0, (size, size))
    residual, model = subtract_background(Image(counts=np.maximum(counts, 0.0)))
    assert not model.is_constant
    assert model.amplitude == pytest.approx(900.0, rel=0.05)
    assert model.center_x == pytest.approx(130.0, abs=3.0)
    assert model.sigma_y == pytest.approx(110.0, rel=0.05)
    # Residual is clamped, so check its mean stays near the noise floor.
    assert float(residual.counts.mean()) < 4.0
    assert float(residual.counts.min()) >= 0.0


def test_subtract_background_flat_frame():
    residual, model = subtract_background(Image(counts=np.full((64, 64), 33.0)))
    assert np.allclose(residual.counts, 0.0)
    assert model.offset == pytest.approx(33.0, abs=1e-6)


def test_background_model_evaluate_matches_gaussian():
    model = BackgroundModel(100.0, 10.0, 12.0, 5.0, 6.0, 2.0)
    grid = model.evaluate((20, 24))
    cols, rows = np.meshgrid(np.arange(24.0), np.arange(20.0))
    np.testing.assert_allclose(grid, eval_gaussian2d(model.to_vector(), cols, rows))
    assert grid.shape == (20, 24)
