"""Shared test fixtures that are plain functions (not pytest fixtures)."""
import numpy as np

from fldata.basis import BoundParams
from fldata.plant import (DoublePendulum, PrestabilizingController, run_closed_loop,
                          simulate_outputs, transform_state)


def reference_run(params, L, seed, model=None):
    """Fresh closed-loop torques, initial state and true outputs of length L + 2."""
    ctrl = PrestabilizingController(model=model or params, seed=seed)
    xs, taus = run_closed_loop(DoublePendulum(params), ctrl, L)
    ybar = simulate_outputs(xs[0], taus, params)
    return taus, xs[0], transform_state(xs[0], params.Ts), ybar


def nominal_bounds(g_inf=0.01, K_Xi=58.0, K_w=86.0):
    return BoundParams(eps_star=1e-14, w_star=0.0, K_Xi=K_Xi, K_w=K_w, g_inf=g_inf)
