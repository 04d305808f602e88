"""Engine and model-function tests for the shared least-squares core."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdalign.errors import ContractError, RankDeficiencyError
from qdalign.fitcore import (
    CI95_SIGMA,
    ErfEdgeModel,
    FitProblem,
    Gaussian2DModel,
    airy_core,
    erf_edge,
    eval_erf_edge,
    eval_gaussian2d,
    finite_difference_jacobian,
    jac_gaussian2d,
    lm_fit,
)


def test_ci95_is_two_sigma():
    assert CI95_SIGMA == 2.0


# ---------------------------------------------------------------------------
# blurred-edge profile


def test_erf_edge_frozen_value():
    # Independently computed from the closed form before this test was
    # written; guards the erf convention and the sigma-as-variance reading.
    model = ErfEdgeModel(amplitude=1.0, center=0.0, sigma=2.0, width=6.0)
    assert float(erf_edge(np.array(3.0), model)) == pytest.approx(
        0.5175305778834065, abs=1e-15
    )


def test_erf_edge_sigma_conventions_agree():
    x = np.linspace(-20.0, 20.0, 201)
    var = ErfEdgeModel(amplitude=2.0, center=1.5, sigma=4.0, width=6.0)
    std = ErfEdgeModel(
        amplitude=2.0, center=1.5, sigma=2.0, width=6.0, sigma_is_variance=False
    )
    np.testing.assert_allclose(erf_edge(x, var), erf_edge(x, std), rtol=1e-12)


@given(
    amplitude=st.floats(0.1, 50.0),
    center=st.floats(-30.0, 30.0),
    sigma=st.floats(0.1, 25.0),
    width=st.floats(0.5, 15.0),
    slope=st.floats(-3.0, 3.0),
    offset=st.floats(-40.0, 40.0),
)
@settings(max_examples=60, deadline=None)
def test_erf_edge_peak_identity(amplitude, center, sigma, width, slope, offset):
    # The profile's value at its own center is amplitude plus the ramp.
    model = ErfEdgeModel(amplitude, center, sigma, width, slope, offset)
    peak = float(erf_edge(np.array(center), model))
    expected = amplitude + slope * center + offset
    assert peak == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_erf_edge_validation():
    with pytest.raises(ContractError):
        ErfEdgeModel(amplitude=1.0, center=0.0, sigma=0.0, width=6.0)
    with pytest.raises(ContractError):
        ErfEdgeModel(amplitude=1.0, center=0.0, sigma=1.0, width=-1.0)


def test_erf_edge_vector_roundtrip():
    model = ErfEdgeModel(3.0, -2.0, 1.5, 4.0, 0.1, 7.0)
    back = ErfEdgeModel.from_vector(model.to_vector(), width=4.0)
    assert back == model


# ---------------------------------------------------------------------------
# Airy core


def test_airy_core_frozen_values():
    assert float(airy_core(np.array(0.0))) == 1.0
    assert float(airy_core(np.array(1.0))) == pytest.approx(
        0.7745780720578365, abs=1e-15
    )
    # First dark ring: J1's first positive zero.
    assert float(airy_core(np.array(3.8317059702075125))) == pytest.approx(
        0.0, abs=1e-15
    )


def test_airy_core_is_even_and_bounded():
    rho = np.linspace(-12.0, 12.0, 401)
    vals = airy_core(rho)
    np.testing.assert_allclose(vals, airy_core(-rho), atol=1e-15)
    assert np.all(vals >= 0.0)
    assert np.all(vals <= 1.0)


# ---------------------------------------------------------------------------
# engine


def _gaussian_problem(noise=0.0, jacobian=True, seed=0):
    rng = np.random.default_rng(seed)
    truth = np.array([40.0, 10.0, 9.0, 2.0, 1.6, 5.0])
    ys, xs = np.mgrid[0:21, 0:21]
    x, y = xs.ravel().astype(float), ys.ravel().astype(float)
    data = eval_gaussian2d(truth, x, y)
    if noise:
        data = data + rng.normal(0.0, noise, data.size)
    x0 = truth + np.array([-8.0, 0.7, -0.9, 0.4, -0.3, 2.0])
    return truth, FitProblem(
        residual=lambda p: eval_gaussian2d(p, x, y) - data,
        x0=x0,
        jacobian=(lambda p: jac_gaussian2d(p, x, y)) if jacobian else None,
        lower=np.array([0.0, 0.0, 0.0, 0.1, 0.1, -np.inf]),
        param_names=("amplitude", "x0", "y0", "sigma_x", "sigma_y", "offset"),
    )


def test_lm_fit_recovers_clean_gaussian():
    truth, problem = _gaussian_problem()
    result = lm_fit(problem)
    assert result.converged
    np.testing.assert_allclose(result.params, truth, rtol=1e-6, atol=1e-8)
    assert result.cost < 1e-12


def test_lm_fit_finite_difference_fallback():
    truth, problem = _gaussian_problem(jacobian=False)
    result = lm_fit(problem)
    assert result.converged
    np.testing.assert_allclose(result.params, truth, rtol=1e-5, atol=1e-6)


def test_lm_fit_cost_history_non_increasing():
    _, problem = _gaussian_problem(noise=0.5)
    result = lm_fit(problem)
    history = np.asarray(result.cost_history)
    assert np.all(np.diff(history) <= 0.0)
    assert result.cost == history[-1]


def test_lm_fit_respects_bounds():
    _, problem = _gaussian_problem(noise=0.5)
    problem.lower = np.array([0.0, 0.0, 0.0, 1.9, 0.1, -np.inf])
    result = lm_fit(problem)
    assert result.named("sigma_x") >= 1.9


def test_lm_fit_covariance_tracks_noise():
    _, problem = _gaussian_problem(noise=0.5, seed=3)
    result = lm_fit(problem)
    # ci95 of the center should be of order noise/sqrt(N) scaled by the
    # PSF width; just pin the order of magnitude.
    ci = result.ci95[result.param_names.index("x0")]
    assert 1e-4 < ci < 0.5


def test_lm_fit_names_degenerate_parameter():
    # Two parameters entering only as their sum cannot be separated.
    data = np.linspace(0.0, 1.0, 9)
    problem = FitProblem(
        residual=lambda p: (p[0] + p[1]) - data,
        x0=np.array([0.0, 0.0]),
        param_names=("first", "second"),
    )
    with pytest.raises(RankDeficiencyError):
        lm_fit(problem)


def test_lm_fit_zero_jacobian_column():
    data = np.linspace(0.0, 1.0, 9)
    problem = FitProblem(
        residual=lambda p: np.full(9, p[0]) - data,
        x0=np.array([0.0, 1.0]),
        param_names=("level", "unused"),
    )
    with pytest.raises(RankDeficiencyError) as err:
        lm_fit(problem)
    assert err.value.parameter == "unused"


def test_lm_fit_rejects_bad_shapes():
    with pytest.raises(ContractError):
        lm_fit(
            FitProblem(residual=lambda p: p, x0=np.zeros((2, 2)))
        )
    with pytest.raises(ContractError):
        lm_fit(
            FitProblem(
                residual=lambda p: np.zeros(4),
                x0=np.zeros(2),
                jacobian=lambda p: np.zeros((3, 2)),
            )
        )


def test_fit_result_named():
    _, problem = _gaussian_problem()
    result = lm_fit(problem)
    assert result.named("amplitude") == result.params[0]
    result.param_names = None
    with pytest.raises(KeyError):
        result.named("amplitude")


def test_finite_difference_matches_linear_model():
    coeffs = np.array([2.0, -3.0, 0.5])
    design = np.column_stack([np.ones(7), np.arange(7.0), np.arange(7.0) ** 2])
    jac = finite_difference_jacobian(lambda p: design @ p, coeffs)
    np.testing.assert_allclose(jac, design, rtol=1e-7, atol=1e-7)


def test_gaussian2d_volume():
    model = Gaussian2DModel(amplitude=3.0, x0=0.0, y0=0.0, sigma_x=2.0, sigma_y=1.5)
    assert model.volume == pytest.approx(2.0 * math.pi * 3.0 * 2.0 * 1.5)


def test_eval_erf_edge_matches_model_wrapper():
    x = np.linspace(-10, 10, 41)
    model = ErfEdgeModel(2.0, 1.0, 3.0, 5.0, 0.2, -1.0)
    np.testing.assert_array_equal(
        erf_edge(x, model), eval_erf_edge(model.to_vector(), x, 5.0)
    )
