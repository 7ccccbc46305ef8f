"""End-to-end pipeline on the double-pendulum benchmark.

Stages: collect, fit-basis, check-pe, simulate, match, sweep-nu.  All
randomness derives from one master seed through :func:`stage_seed`, so a
config plus seed reproduces a report byte for byte.
"""
from __future__ import annotations

import csv
import os
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .basis import (BasisDictionary, BoundParams, CoefficientFit, estimate_lipschitz,
                    fit_coefficients, g_inf_norm, perturbed_pendulum_dictionary)
from .brunovsky import build_block_brunovsky, is_controllable_pair, nominal_trajectory_check
from .config import ExperimentConfig
from .matching import MatchingTask, match_output, verify_closed_loop
from .plant import (PENDULUM_STRUCTURE, DoublePendulum, PendulumParams, PrestabilizingController,
                    collect_data, pendulum_phi, run_closed_loop, simulate_outputs, transform_state)
from .report import write_json
from .simulation import SimulationTask, nu_sweep, simulate
from .trajectories import (Trajectory, build_state_sequence, is_persistently_exciting,
                           read_trajectory_csv, state_sequence, write_sequence_csv,
                           write_trajectory_csv)


def stage_seed(master: int, stage: str) -> int:
    """Independent 32-bit seed for a named stage of a master seed."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(zlib.crc32(stage.encode()),))
    return int(ss.generate_state(1)[0])


class StageError(Exception):
    """A pipeline stage failed; ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Setup:
    """Everything derived from a config, a master seed and a perturbation scale."""

    config: ExperimentConfig
    seed: int
    scale: float
    true_params: PendulumParams
    model_params: PendulumParams      # estimate used by the pre-stabilizing controller
    dict_params: PendulumParams       # estimate used by the dictionary
    plant: DoublePendulum
    dictionary: BasisDictionary
    controller: PrestabilizingController
    w_star: float

    def controller_with_seed(self, seed: int) -> PrestabilizingController:
        return replace(self.controller, seed=seed)


def build_setup(cfg: ExperimentConfig, seed: int | None = None, scale: float = 1.0) -> Setup:
    """Plant, dictionary and controller for one realization.

    ``scale`` multiplies both the dictionary parameter perturbation and the
    noise level; the controller and the perturbation direction stay fixed so
    that tasks at different scales differ only in those two quantities.
    """
    seed = cfg.seed if seed is None else seed
    p = cfg.plant_params()
    pert = stage_seed(seed, "perturbation")
    model = p.perturbed(cfg.perturbation, np.random.default_rng(pert))
    if cfg.dictionary == "exact":
        dict_p = p
    else:
        dict_p = p.perturbed(cfg.perturbation * scale, np.random.default_rng(pert))
    ctrl = PrestabilizingController(model=model, kp=cfg.kp, kd=cfg.kd, dither=cfg.dither,
                                    tau_max=cfg.ctrl_tau_max,
                                    seed=stage_seed(seed, "data-controller"))
    return Setup(cfg, seed, scale, p, model, dict_p, DoublePendulum(p),
                 perturbed_pendulum_dictionary(dict_p, cfg.affine), ctrl, cfg.w_star * scale)


# -- stages -------------------------------------------------------------------

def collect_stage(setup: Setup) -> Trajectory:
    cfg = setup.config
    if cfg.data_file:
        return read_trajectory_csv(cfg.data_file)
    return collect_data(setup.plant, setup.controller, cfg.N, setup.w_star,
                        stage_seed(setup.seed, "data-noise"), cfg.box())


def fit_stage(setup: Setup) -> tuple[CoefficientFit, BoundParams]:
    """Offline oracle: coefficient fit, approximation error and Lipschitz constants."""
    cfg = setup.config
    phi = pendulum_phi(setup.true_params)
    fit = fit_coefficients(setup.dictionary, phi, cfg.box(), cfg.grid(), cfg.validation_factor,
                           seed=stage_seed(setup.seed, "validation"), rel_tol=cfg.rank_tol)
    if cfg.user_bounds:
        k_xi, k_w = cfg.user_K_Xi, cfg.user_K_w
        oracle = False
    else:
        k_xi, k_w = estimate_lipschitz(phi, cfg.box(), cfg.grid(), setup.w_star,
                                       cfg.lipschitz_safety)
        oracle = True
    bounds = BoundParams(fit.eps_star, setup.w_star, float(k_xi), float(k_w), g_inf_norm(fit),
                         oracle_backed=oracle)
    return fit, bounds


@dataclass
class Rollout:
    ubar: np.ndarray
    x0: np.ndarray
    xi0: np.ndarray
    ybar: tuple
    in_omega: bool


def fresh_rollout(setup: Setup, L: int, stage: str) -> Rollout:
    """A new closed-loop run of the plant, independent of the recorded data.

    Same controller family as data collection with a fresh dither
    realization.  ``ybar`` is the open-loop response of the true plant to the
    recorded torques from the same initial state.
    """
    ctrl = setup.controller_with_seed(stage_seed(setup.seed, stage))
    xs, taus = run_closed_loop(setup.plant, ctrl, L)
    ybar = simulate_outputs(xs[0], taus, setup.true_params)
    xi = transform_state(xs[:L], setup.true_params.Ts)
    inside = bool(np.all(setup.config.box().contains(taus, xi)))
    return Rollout(taus, xs[0], transform_state(xs[0], setup.true_params.Ts), ybar, inside)


def pe_stage(data: Trajectory, dictionary: BasisDictionary, L: int, rel_tol: float,
             candidate: Rollout | None = None, true_params: PendulumParams | None = None,
             tol: float = 1e-8) -> dict:
    """PE of the dictionary and input sequences plus the nominal membership check."""
    n = data.structure.n
    xi = build_state_sequence(data)
    psi = dictionary.evaluate(data.inputs, xi[:data.N])
    pe = is_persistently_exciting(psi, L + n, rel_tol)
    pe_u = is_persistently_exciting(data.inputs, L + n, rel_tol)
    out = {"L": L, "order": L + n,
           "psi": {"is_pe": pe.is_pe, "rank": pe.rank, "required_rank": pe.required_rank,
                   "reason": pe.reason,
                   "sigma_min_ratio": _sv_ratio(pe.singular_values)},
           "inputs": {"is_pe": pe_u.is_pe, "rank": pe_u.rank, "required_rank": pe_u.required_rank,
                      "reason": pe_u.reason}}
    if candidate is not None:
        xb = state_sequence(candidate.ybar, data.structure.d, L + 1)
        pb = dictionary.evaluate(candidate.ubar[:L], xb[:L])
        dec = nominal_trajectory_check(psi, xi, pb, xb, L, tol, rel_tol)
        out["trajectory_check"] = dec.to_dict()
    return out


def _sv_ratio(sv) -> float:
    sv = np.asarray(sv)
    return float(sv[-1] / sv[0]) if sv.size and sv[0] > 0 else 0.0


def simulation_stage(setup: Setup, data: Trajectory, bounds: BoundParams, L: int,
                     stage: str = "test-controller", lam: float | None = None) -> dict:
    cfg = setup.config
    ro = fresh_rollout(setup, L, stage)
    task = SimulationTask(data, ro.ubar, ro.xi0, setup.dictionary, bounds,
                          cfg.lam if lam is None else lam)
    out = simulate(task, cfg.solver())
    errors = tuple(yb - yh for yb, yh in zip(ro.ybar, out.yhat))
    chan_bounds = out.channel_bounds(data.structure.d)
    violations = sum(int(np.sum(np.abs(e) > bd)) for e, bd in zip(errors, chan_bounds))
    return {"rollout": ro, "outcome": out, "errors": errors, "channel_bounds": chan_bounds,
            "summary": {
                "L": L, "lambda": task.lam, "b": out.b,
                "error_l2": float(np.linalg.norm(np.concatenate(errors))),
                "error_inf": float(max(np.max(np.abs(e)) for e in errors)),
                "alpha_l1": out.diagnostics["alpha_l1"],
                "converged": out.solve.converged, "iterations": out.solve.iterations,
                "solver_message": out.solve.message, "start": out.diagnostics["start"],
                "objective": out.solve.objective, "objective_start": out.solve.objective_start,
                "pe_order_L_plus_n": bool(out.pe.is_pe) if out.pe is not None else None,
                "rollout_in_omega": ro.in_omega,
                "bound_checked": bounds.oracle_backed,
                "bound_violations": violations if bounds.oracle_backed else None,
                "bounds_advisory": not bounds.oracle_backed}}


def matching_stage(setup: Setup, data: Trajectory, bounds: BoundParams, L: int,
                   stage: str = "match-reference") -> dict:
    cfg = setup.config
    ro = fresh_rollout(setup, L, stage)
    task = MatchingTask(data, ro.ybar, setup.dictionary, bounds, cfg.lam)
    out = match_output(task, cfg.solver())
    rep = verify_closed_loop(setup.true_params, out.uhat, ro.xi0, ro.ybar,
                             out.bound if bounds.oracle_backed else None, data.structure.d)
    out.closed_loop = rep
    violations = None
    if bounds.oracle_backed and rep.errors:
        violations = sum(int(np.sum(np.abs(e[di:]) > out.bound))
                         for e, di in zip(rep.errors, data.structure.d))
    return {"rollout": ro, "outcome": out, "report": rep,
            "summary": {"L": L, "b": out.b, "closed_loop_max_error": rep.max_error,
                        "uhat_max_deviation": float(np.max(np.abs(out.uhat - ro.ubar))),
                        "converged": out.solve.converged, "iterations": out.solve.iterations,
                        "alpha_l1": out.diagnostics["alpha_l1"],
                        "rollout_in_omega": ro.in_omega,
                        "within_bound": rep.within_bound, "bound_violations": violations,
                        "overflow_step": rep.overflow_step}}


def sweep_stage(cfg: ExperimentConfig) -> list:
    seeds = [stage_seed(cfg.seed, f"sweep-{j}") for j in range(cfg.sweep_seeds)]

    def make_task(scale, seed):
        setup = build_setup(cfg, seed, scale)
        data = collect_stage(setup)
        _, bounds = fit_stage(setup)
        ro = fresh_rollout(setup, cfg.sweep_L, "test-controller")
        task = SimulationTask(data, ro.ubar, ro.xi0, setup.dictionary, bounds, cfg.lam)
        return task, ro.ybar

    return nu_sweep(make_task, cfg.sweep_scales, seeds, cfg.solver())


def structure_stage(fit: CoefficientFit, rel_tol: float) -> dict:
    tri = build_block_brunovsky(PENDULUM_STRUCTURE)
    dec = is_controllable_pair(tri.A, tri.B @ fit.G, rel_tol)
    return {"controllable": dec.controllable, "rank": dec.rank, "n": dec.n,
            "G_full_row_rank": fit.full_row_rank}


# -- full experiment --------------------------------------------------------------

def write_channel_csv(path, ybar, yhat, err, bound):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "ybar", "yhat", "abs_error", "bound"])
        for k in range(len(yhat)):
            w.writerow([k] + [format(float(v), ".17g") for v in (ybar[k], yhat[k], abs(err[k]), bound[k])])


def _run(stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(stage, exc) from exc


def run_experiment(cfg: ExperimentConfig, output_dir: str | None = None) -> dict:
    """Run all enabled stages, writing ``report.json`` and plotting CSVs.

    Files from completed stages are kept if a later stage fails.
    """
    out_dir = output_dir or cfg.output_dir
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise StageError("setup", exc) from exc
    setup = _run("setup", build_setup, cfg)
    report = {"config_hash": cfg.hash(), "seed": cfg.seed, "config": cfg.to_dict(),
              "mode": "nominal" if (cfg.dictionary == "exact" and cfg.w_star == 0) else "inexact",
              "stages": {}}

    data = _run("collect", collect_stage, setup)
    if not cfg.data_file:
        write_trajectory_csv(os.path.join(out_dir, "data.csv"), data)
    report["stages"]["collect"] = {"N": data.N, "w_star": setup.w_star,
                                   "source": cfg.data_file or "benchmark plant",
                                   "seed": stage_seed(cfg.seed, "data-noise")}

    fit, bounds = _run("fit-basis", fit_stage, setup)
    report["stages"]["fit-basis"] = {"fit": fit.to_dict(), "bounds": bounds.to_dict(),
                                     "structure": structure_stage(fit, cfg.rank_tol)}

    ro_pe = _run("check-pe", fresh_rollout, setup, cfg.L, "test-controller")
    report["stages"]["check-pe"] = _run("check-pe", pe_stage, data, setup.dictionary, cfg.L,
                                        cfg.rank_tol, ro_pe)

    sim = _run("simulate", simulation_stage, setup, data, bounds, cfg.L)
    report["stages"]["simulate"] = dict(sim["summary"])
    report["stages"]["simulate"]["bound"] = sim["outcome"].bound
    for i, (yb, yh, e, bd) in enumerate(zip(sim["rollout"].ybar, sim["outcome"].yhat,
                                            sim["errors"], sim["channel_bounds"])):
        write_channel_csv(os.path.join(out_dir, f"simulation_y{i + 1}.csv"), yb, yh, e, bd)
    write_sequence_csv(os.path.join(out_dir, "ubar.csv"), sim["rollout"].ubar)

    if cfg.match_enabled:
        mt = _run("match", matching_stage, setup, data, bounds, cfg.match_L)
        report["stages"]["match"] = dict(mt["summary"])
        report["stages"]["match"]["bound"] = mt["outcome"].bound
        write_sequence_csv(os.path.join(out_dir, "uhat.csv"), mt["outcome"].uhat)

    if cfg.sweep_enabled:
        rows = _run("sweep-nu", sweep_stage, cfg)
        report["stages"]["sweep-nu"] = [
            {"scale": r.scale, "median_error": r.median_error, "errors": r.errors,
             "pe_verified": r.pe_verified, "note": r.note} for r in rows]

    write_json(os.path.join(out_dir, "report.json"), report)
    return report
