import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fldata.basis import (BasisDictionary, BoundParams, GridSpec, estimate_lipschitz,
                          fit_coefficients, g_inf_norm, grid_points, input_state_dictionary,
                          perturbed_pendulum_dictionary)
from fldata.errors import EstimationError, EvaluationError, LinearDependenceError
from fldata.plant import OmegaBox, PendulumParams, default_box, pendulum_phi

SMALL_GRID = GridSpec.uniform(4, 6)


def test_exact_dictionary_fits_exactly(true_params, exact_dictionary):
    fit = fit_coefficients(exact_dictionary, pendulum_phi(true_params), default_box(), SMALL_GRID)
    assert fit.eps_star <= 1e-10
    np.testing.assert_allclose(fit.G, true_params.Ts ** 2 * np.eye(2), atol=1e-12)
    assert fit.full_row_rank and fit.validation_exceedances == 0


def test_toy_linear_fit():
    box = OmegaBox.symmetric([1.0], [1.0])
    phi = lambda U, X: 2 * U + 3 * X
    fit = fit_coefficients(input_state_dictionary(1, 1), phi, box, GridSpec((3, 3)))
    np.testing.assert_allclose(fit.G, [[2.0, 3.0]], atol=1e-12)
    assert fit.eps_star <= 1e-12
    assert g_inf_norm(fit) == pytest.approx(5.0)


def test_g_inf_examples():
    assert g_inf_norm([[1, -2], [0.5, 0.5]]) == 3.0
    assert g_inf_norm(np.eye(3)) == 1.0
    assert g_inf_norm(np.zeros((2, 2))) == 0.0


def test_fit_is_grid_optimal(true_params):
    d = perturbed_pendulum_dictionary(true_params.perturbed(0.05, np.random.default_rng(2)))
    phi, box = pendulum_phi(true_params), default_box()
    fit = fit_coefficients(d, phi, box, SMALL_GRID, validation_factor=0)
    U, X = grid_points(box, SMALL_GRID)
    P, F = d.evaluate(U, X), phi(U, X)
    base = np.sum((F - P @ fit.G.T) ** 2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        G2 = fit.G + 1e-3 * rng.standard_normal(fit.G.shape)
        assert np.sum((F - P @ G2.T) ** 2) >= base


def test_perturbed_eps_star_is_moderate(true_params):
    for s in range(3):
        d = perturbed_pendulum_dictionary(true_params.perturbed(0.05, np.random.default_rng(s)))
        fit = fit_coefficients(d, pendulum_phi(true_params), default_box(), SMALL_GRID,
                               validation_factor=0)
        assert 0.05 <= fit.eps_star <= 3.0
        assert fit.full_row_rank


@pytest.mark.parametrize("affine", ["folded", "none", "append"])
def test_jacobians_match_central_differences(true_params, affine):
    d = perturbed_pendulum_dictionary(true_params.perturbed(0.05, np.random.default_rng(1)), affine)
    rng = np.random.default_rng(3)
    U, X = rng.uniform(-10, 10, (15, 2)), rng.uniform(-1, 1, (15, 4))
    for analytic, attr, Z in ((d.jacobian_xi(U, X), "xi", X), (d.jacobian_u(U, X), "u", U)):
        h = 1e-6
        for j in range(Z.shape[1]):
            e = np.zeros(Z.shape[1])
            e[j] = h
            if attr == "xi":
                fd = (d.evaluate(U, X + e) - d.evaluate(U, X - e)) / (2 * h)
            else:
                fd = (d.evaluate(U + e, X) - d.evaluate(U - e, X)) / (2 * h)
            np.testing.assert_allclose(analytic[:, :, j], fd, rtol=1e-5, atol=1e-4)


def test_dictionary_injective_in_input(true_params):
    d = perturbed_pendulum_dictionary(true_params)
    X = np.random.default_rng(0).uniform(-1, 1, (10, 4))
    J = d.jacobian_u(np.zeros((10, 2)), X)
    assert np.all(np.abs(np.linalg.det(J)) > 0)
    assert d.injective_in_u


def test_append_dictionary_rank_deficient_on_data(true_params, nominal_data):
    from fldata.simulation import DataMatrices
    from fldata.trajectories import numeric_rank
    d = perturbed_pendulum_dictionary(true_params, affine="append")
    H = DataMatrices(nominal_data, d, 5).H_psi
    assert numeric_rank(H)[0] < H.shape[0]


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_lipschitz_of_linear_map(vals):
    A = np.array(vals).reshape(2, 2)
    box = OmegaBox.symmetric([1.0], [1.0, 1.0])
    phi = lambda U, X: X @ A.T
    k_xi, k_w = estimate_lipschitz(phi, box, GridSpec((2, 3, 3)), w_star=0.1, safety=1.0)
    true = np.max(np.sum(np.abs(A), axis=1))
    assert k_xi == pytest.approx(true, rel=0.1, abs=1e-12)
    assert k_w == pytest.approx(true, rel=0.1, abs=1e-12)


def test_lipschitz_noise_free_and_degenerate():
    box = OmegaBox.symmetric([1.0], [1.0, 1.0])
    phi = lambda U, X: np.sin(X)
    assert estimate_lipschitz(phi, box, GridSpec((2, 3, 3)), w_star=0.0)[1] == 0.0
    with pytest.raises(EstimationError):
        estimate_lipschitz(phi, box, GridSpec((2, 2, 3)), w_star=0.0)


def test_pendulum_lipschitz_is_positive(true_params):
    k_xi, k_w = estimate_lipschitz(pendulum_phi(true_params), default_box(),
                                   GridSpec.uniform(3, 6), 0.01)
    assert k_xi > 1.0 and k_w > 1.0


def test_linear_dependence_names_culprit():
    f = lambda U, X: np.hstack([U, X, 2 * X])
    d = BasisDictionary(1, 1, 3, f, names=("u", "x", "twice_x"))
    with pytest.raises(LinearDependenceError) as exc:
        fit_coefficients(d, lambda U, X: X, OmegaBox.symmetric([1.0], [1.0]), GridSpec((3, 3)))
    assert "x" in str(exc.value)


def test_non_finite_dictionary_raises():
    d = BasisDictionary(1, 1, 1, lambda U, X: 1.0 / X)
    with pytest.raises(EvaluationError) as exc:
        d.evaluate(np.ones((3, 1)), np.array([[1.0], [0.0], [2.0]]))
    assert exc.value.step == 1


def test_input_state_dictionary_is_input_complete():
    d = input_state_dictionary(2, 3)
    U, X = np.ones((4, 2)), np.zeros((4, 3))
    assert d.check_input_complete(U, X)
    assert d.jacobian_u(U, X).shape == (4, 5, 2)


def test_bound_params_nu_and_validation():
    assert BoundParams(0.2, 0.5, 1, 1, 1).nu == 0.5
    with pytest.raises(ValueError):
        BoundParams(-1.0, 0, 0, 0, 0)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec((1, 3))
    assert GridSpec.uniform(3, 2).total == 9
