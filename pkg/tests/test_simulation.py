import numpy as np
import pytest

import oracles
from helpers import nominal_bounds, reference_run
from fldata.basis import BoundParams
from fldata.errors import DimensionError, InfeasibleError
from fldata.simulation import (DataMatrices, SimulationResidual, SimulationTask, bound_polynomial,
                               error_bound, forward_sweep_start, nu_sweep, simulate)
from fldata.trajectories import SystemStructure, Trajectory, build_state_sequence


@pytest.fixture(scope="module")
def short_task(nominal_data, exact_dictionary, true_params):
    taus, _, xi0, _ = reference_run(true_params, 4, seed=11)
    return SimulationTask(nominal_data, taus, xi0, exact_dictionary, nominal_bounds())


def test_residual_matches_loop_oracle(short_task, nominal_data, exact_dictionary):
    res = SimulationResidual(short_task)
    xi = build_state_sequence(nominal_data)
    rng = np.random.default_rng(0)
    alpha = rng.standard_normal(res.mats.cols) / res.mats.cols
    psi_fn = lambda u, x: exact_dictionary.evaluate(u, x)
    ref = oracles.simulation_residual_loop(psi_fn, nominal_data.inputs, xi, short_task.ubar,
                                           alpha, short_task.L)
    np.testing.assert_allclose(res(alpha), ref, atol=1e-9)


def test_residual_jacobian_matches_fd(short_task):
    from fldata.solver import fd_jacobian
    res = SimulationResidual(short_task)
    alpha = np.full(res.mats.cols, 1.0 / res.mats.cols)
    np.testing.assert_allclose(res.jacobian(alpha), fd_jacobian(res, alpha), atol=1e-5, rtol=1e-5)


def test_data_matrix_shapes(nominal_data, exact_dictionary):
    m = DataMatrices(nominal_data, exact_dictionary, 1)
    assert m.H_psi.shape == (2, 500) and m.H_xi.shape == (8, 500) and m.A_eq.shape == (4, 500)


def test_horizon_one_output_shapes(nominal_data, exact_dictionary, true_params):
    taus, _, xi0, ybar = reference_run(true_params, 1, seed=3)
    out = simulate(SimulationTask(nominal_data, taus, xi0, exact_dictionary, nominal_bounds()))
    assert [y.size for y in out.yhat] == [3, 3]
    assert out.bound.shape == (1,)
    assert max(np.max(np.abs(a - b)) for a, b in zip(out.yhat, ybar)) <= 1e-9


def test_bound_polynomial_examples():
    np.testing.assert_allclose(bound_polynomial([0, 1, 2, 3], 2.0), [1, 3, 7, 15])
    np.testing.assert_allclose(bound_polynomial([0, 4], 1.0), [1, 5])
    assert bound_polynomial(200, 0.5) == pytest.approx(2.0)


def test_error_bound_examples():
    bp = BoundParams(eps_star=0.1, w_star=0.01, K_Xi=2.0, K_w=3.0, g_inf=0.5)
    alpha = np.array([0.5, -0.5])
    base = 0.1 * 2 + 0.5 * 2 + 0.01 * 4 * 1
    np.testing.assert_allclose(error_bound([0, 1], bp, alpha, 4.0), [base, 3 * base])
    np.testing.assert_allclose(error_bound([0], bp, alpha, 4.0, matching=True), [base + 2])
    zero = BoundParams(0, 0, 2.0, 3.0, 0.5)
    np.testing.assert_array_equal(error_bound([0, 5], zero, alpha, 0.0), 0.0)
    with pytest.raises(ValueError):
        error_bound([0], bp, alpha, -1.0)


def test_error_bound_monotone():
    bp = BoundParams(0.1, 0.01, 1.3, 3.0, 0.5)
    b = error_bound(np.arange(30), bp, np.ones(5), 0.2)
    assert np.all(np.diff(b) > 0)
    assert np.all(error_bound(np.arange(30), bp, np.ones(5), 0.3) >= b)


def test_nominal_simulation_is_accurate(nominal_data, exact_dictionary, true_params):
    taus, _, xi0, ybar = reference_run(true_params, 15, seed=21)
    out = simulate(SimulationTask(nominal_data, taus, xi0, exact_dictionary, nominal_bounds()))
    err = max(float(np.max(np.abs(a - b))) for a, b in zip(out.yhat, ybar))
    assert err <= 1e-6
    assert out.pe.is_pe and out.solve.constraint_violation <= 1e-8
    for e, bd in zip((a - b for a, b in zip(ybar, out.yhat)), out.channel_bounds([2, 2])):
        assert np.all(np.abs(e) <= bd)


def test_initial_windows_are_exact(short_task):
    out = simulate(short_task)
    x0 = short_task.xi0_bar
    np.testing.assert_array_equal(out.yhat[0][:2], x0[:2])
    np.testing.assert_array_equal(out.yhat[1][:2], x0[2:])
    assert out.diagnostics["initial_window_deviation"] <= 1e-8


def test_forward_sweep_start_is_feasible(short_task):
    res = SimulationResidual(short_task)
    a = forward_sweep_start(res)
    np.testing.assert_allclose(res.mats.A_eq @ a, short_task.xi0_bar, atol=1e-10)
    assert np.max(np.abs(res(a))) <= 1e-6


def test_task_validation(nominal_data, exact_dictionary):
    with pytest.raises(DimensionError):
        SimulationTask(nominal_data, np.zeros((3, 3)), np.zeros(4), exact_dictionary, nominal_bounds())
    with pytest.raises(DimensionError):
        SimulationTask(nominal_data, np.zeros((501, 2)), np.zeros(4), exact_dictionary, nominal_bounds())
    with pytest.raises(ValueError):
        SimulationTask(nominal_data, np.zeros((3, 2)), np.zeros(4), exact_dictionary,
                       nominal_bounds(), lam=0.0)


def test_unreachable_initial_state(exact_dictionary):
    # constant data cannot reach a non-constant initial state
    data = Trajectory(np.zeros((20, 2)), (np.zeros(22), np.zeros(22)), SystemStructure.from_degrees([2, 2]))
    task = SimulationTask(data, np.zeros((2, 2)), np.array([1.0, 0, 0, 0]), exact_dictionary,
                          nominal_bounds())
    with pytest.raises(InfeasibleError):
        simulate(task)


def test_nu_sweep_reports_medians(nominal_data, exact_dictionary, true_params):
    def make(scale, seed):
        taus, _, xi0, ybar = reference_run(true_params, 5, seed=seed)
        return SimulationTask(nominal_data, taus, xi0, exact_dictionary, nominal_bounds()), ybar

    rows = nu_sweep(make, [0.0], [1, 2, 3])
    assert len(rows) == 1 and len(rows[0].errors) == 3
    assert rows[0].median_error == pytest.approx(np.median(rows[0].errors))
    assert rows[0].pe_verified and rows[0].note == ""
