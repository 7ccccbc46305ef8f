import numpy as np
import pytest

import oracles
from helpers import nominal_bounds, reference_run
from fldata.errors import DimensionError
from fldata.matching import MatchingResidual, MatchingTask, match_output, verify_closed_loop
from fldata.plant import inverse_transform_state, rollout
from fldata.solver import fd_jacobian
from fldata.trajectories import build_state_sequence, hankel

L = 15


@pytest.fixture(scope="module")
def reference(true_params):
    return reference_run(true_params, L, seed=31)


@pytest.fixture(scope="module")
def nominal_outcome(nominal_data, exact_dictionary, reference):
    _, _, _, ybar = reference
    task = MatchingTask(nominal_data, ybar, exact_dictionary, nominal_bounds())
    return task, match_output(task)


def test_residual_matches_loop_oracle(nominal_data, exact_dictionary, reference):
    _, _, _, ybar = reference
    short = tuple(y[:6] for y in ybar)
    task = MatchingTask(nominal_data, short, exact_dictionary, nominal_bounds())
    res = MatchingResidual(task)
    alpha = np.random.default_rng(0).standard_normal(res.mats.cols) / res.mats.cols
    xi = build_state_sequence(nominal_data)
    ref = oracles.matching_residual_loop(lambda u, x: exact_dictionary.evaluate(u, x),
                                         nominal_data.inputs, xi, task.xi_bar, alpha, task.L)
    out = res(alpha)
    assert out.size == res.size == 2 * task.L + 4 * (task.L + 1)
    np.testing.assert_allclose(out, ref, atol=1e-9)
    np.testing.assert_allclose(res.jacobian(alpha), fd_jacobian(res, alpha), atol=1e-5, rtol=1e-5)


def test_nominal_matching_closes_the_loop(nominal_outcome, reference, true_params):
    task, out = nominal_outcome
    _, _, xi0, ybar = reference
    report = verify_closed_loop(true_params, out.uhat, xi0, ybar, out.bound)
    assert report.max_error <= 1e-6
    assert report.within_bound and report.overflow_step is None
    assert out.solve.constraint_violation <= 1e-8


def test_replay_oracle(nominal_outcome, reference, true_params):
    _, out = nominal_outcome
    _, _, xi0, ybar = reference
    xs = rollout(inverse_transform_state(xi0, true_params.Ts), out.uhat, true_params)
    report = verify_closed_loop(true_params, out.uhat, xi0, ybar)
    # outputs 0..L of the replay agree with the report's errors
    np.testing.assert_allclose(ybar[0][:L + 1] - xs[:, 0], report.errors[0][:L + 1], atol=1e-15)
    np.testing.assert_allclose(ybar[1][:L + 1] - xs[:, 2], report.errors[1][:L + 1], atol=1e-15)


def test_uhat_is_linear_image_of_data(nominal_outcome, nominal_data):
    task, out = nominal_outcome
    H = hankel(nominal_data.inputs, task.L)
    np.testing.assert_allclose(out.uhat.ravel(), H @ out.alpha_star, atol=1e-12)
    res = MatchingResidual(task)
    a, b = np.random.default_rng(1).standard_normal((2, res.mats.cols))
    np.testing.assert_allclose(res.inputs(2 * a + b), 2 * res.inputs(a) + res.inputs(b), atol=1e-12)


def test_zero_input_negative_control(nominal_outcome, reference, true_params):
    _, out = nominal_outcome
    _, _, xi0, ybar = reference
    report = verify_closed_loop(true_params, np.zeros_like(out.uhat), xi0, ybar, out.bound)
    assert report.max_error > 1e-2 and report.within_bound is False


def test_reference_length_validation(nominal_data, exact_dictionary):
    with pytest.raises(DimensionError):
        MatchingTask(nominal_data, (np.zeros(7), np.zeros(8)), exact_dictionary, nominal_bounds())
    with pytest.raises(DimensionError):
        MatchingTask(nominal_data, (np.zeros(7),), exact_dictionary, nominal_bounds())


def test_diverging_replay_is_reported(true_params):
    report = verify_closed_loop(true_params, np.full((400, 2), 1e200), np.zeros(4),
                                (np.zeros(402), np.zeros(402)), np.ones(400))
    assert report.overflow_step is not None and report.within_bound is False
