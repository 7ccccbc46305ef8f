"""Command-line interface.

Exit codes: 0 success, 1 domain error (rank deficiency, infeasibility,
divergence, ...), 2 I/O or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from .basis import BoundParams
from .config import ConfigError, ExperimentConfig, load_config
from .errors import FLDataError
from .experiment import (Rollout, StageError, build_setup, collect_stage, fit_stage,
                         fresh_rollout, matching_stage, pe_stage, run_experiment, simulation_stage,
                         stage_seed, structure_stage, sweep_stage, write_channel_csv)
from .plant import inverse_transform_state, simulate_outputs
from .report import dumps, read_json, write_json
from .matching import MatchingTask, match_output, verify_closed_loop
from .simulation import SimulationTask, error_bound, simulate
from .trajectories import (read_sequence_csv, read_trajectory_csv, write_sequence_csv,
                           write_trajectory_csv)

log = logging.getLogger("fldata")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


class InputFormatError(Exception):
    """An input file exists but cannot be parsed (exit code 2)."""


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed)


def _read(fn, path, *a):
    try:
        return fn(path, *a)
    except OSError:
        raise
    except (ValueError, KeyError, IndexError, StopIteration, FLDataError) as exc:
        raise InputFormatError(f"cannot parse {path}: {exc}") from exc


def _emit(obj, path):
    if path:
        d = os.path.dirname(path)
        if d:
            os.makedirs(d, exist_ok=True)
        write_json(path, obj)
    else:
        sys.stdout.write(dumps(obj))


def _data(cfg, setup, path):
    return _read(read_trajectory_csv, path) if path else collect_stage(setup)


def _bounds_from(path, setup):
    if not path:
        return fit_stage(setup)[1]
    raw = _read(read_json, path)
    try:
        b = raw.get("bounds", raw)
        return BoundParams(b["eps_star"], b["w_star"], b["K_Xi"], b["K_w"], b["g_inf"],
                           bool(b.get("oracle_backed", False)))
    except (KeyError, TypeError, AttributeError) as exc:
        raise InputFormatError(f"{path} does not contain bound parameters: {exc}") from exc


def _rollout_from_files(setup, ubar_path, xi0_text, L):
    ubar = _read(read_sequence_csv, ubar_path)
    if L is not None:
        ubar = ubar[:L]
    try:
        xi0 = np.array([float(v) for v in xi0_text.split(",")]) if xi0_text else np.zeros(4)
    except ValueError as exc:
        raise InputFormatError(f"bad --xi0 {xi0_text!r}: {exc}") from exc
    p = setup.true_params
    x0 = inverse_transform_state(xi0, p.Ts)
    ybar = simulate_outputs(x0, ubar, p)
    return Rollout(ubar, x0, xi0, ybar, True)


# -- subcommands -----------------------------------------------------------------

def cmd_collect(args):
    cfg = _load_cfg(args)
    setup = build_setup(cfg)
    data = collect_stage(setup)
    write_trajectory_csv(args.out, data)
    meta = {k: v for k, v in data.metadata.items() if k != "true_states"}
    meta.update({"config_hash": cfg.hash(), "master_seed": cfg.seed,
                 "noise_seed": stage_seed(cfg.seed, "data-noise"),
                 "controller_gains": {"kp": cfg.kp, "kd": cfg.kd}})
    write_json(args.meta or os.path.splitext(args.out)[0] + ".meta.json", meta)


def cmd_fit_basis(args):
    cfg = _load_cfg(args)
    setup = build_setup(cfg)
    fit, bounds = fit_stage(setup)
    _emit({"config_hash": cfg.hash(), "seed": cfg.seed, "fit": fit.to_dict(),
           "bounds": bounds.to_dict(), "structure": structure_stage(fit, cfg.rank_tol)}, args.out)


def cmd_check_pe(args):
    cfg = _load_cfg(args)
    setup = build_setup(cfg)
    data = _data(cfg, setup, args.data)
    L = args.L or cfg.L
    cand = None
    if args.candidate:
        tr = _read(read_trajectory_csv, args.candidate)
        cand = Rollout(tr.inputs, None, None, tr.outputs, True)
        L = tr.N
    elif not args.no_candidate:
        cand = fresh_rollout(setup, L, "test-controller")
    rep = pe_stage(data, setup.dictionary, L, cfg.rank_tol, cand)
    _emit({"config_hash": cfg.hash(), "seed": cfg.seed, **rep}, args.out)


def cmd_simulate(args):
    cfg = _load_cfg(args).with_overrides(lam=args.lam, L=args.L)
    setup = build_setup(cfg)
    data = _data(cfg, setup, args.data)
    bounds = _bounds_from(args.bounds, setup)
    if args.ubar:
        ro = _rollout_from_files(setup, args.ubar, args.xi0, args.L)
        out = simulate(SimulationTask(data, ro.ubar, ro.xi0, setup.dictionary, bounds, cfg.lam),
                       cfg.solver())
        errors = tuple(yb - yh for yb, yh in zip(ro.ybar, out.yhat))
        sim = {"rollout": ro, "outcome": out, "errors": errors,
               "channel_bounds": out.channel_bounds(data.structure.d),
               "summary": {"L": ro.ubar.shape[0], "lambda": cfg.lam, "b": out.b,
                           "error_l2": float(np.linalg.norm(np.concatenate(errors))),
                           "error_inf": float(max(np.max(np.abs(e)) for e in errors)),
                           "converged": out.solve.converged}}
    else:
        sim = simulation_stage(setup, data, bounds, cfg.L)
    out = sim["outcome"]
    report = {"config_hash": cfg.hash(), "seed": cfg.seed, **sim["summary"],
              "alpha_star": out.alpha_star, "yhat": list(out.yhat), "bound": out.bound,
              "bounds": bounds.to_dict()}
    _emit(report, args.out)
    if args.csv_dir:
        os.makedirs(args.csv_dir, exist_ok=True)
        for i, (yb, yh, e, bd) in enumerate(zip(sim["rollout"].ybar, out.yhat, sim["errors"],
                                                sim["channel_bounds"])):
            write_channel_csv(os.path.join(args.csv_dir, f"simulation_y{i + 1}.csv"), yb, yh, e, bd)


def cmd_match(args):
    cfg = _load_cfg(args).with_overrides(match_L=args.L)
    setup = build_setup(cfg)
    data = _data(cfg, setup, args.data)
    bounds = _bounds_from(args.bounds, setup)
    if args.reference:
        ref = _read(read_trajectory_csv, args.reference)
        task = MatchingTask(data, ref.outputs, setup.dictionary, bounds, cfg.lam)
        out = match_output(task, cfg.solver())
        rep = verify_closed_loop(setup.true_params, out.uhat, task.xi_bar[0], ref.outputs,
                                 out.bound if bounds.oracle_backed else None, data.structure.d)
        summary = {"L": task.L, "b": out.b, "closed_loop_max_error": rep.max_error,
                   "within_bound": rep.within_bound, "converged": out.solve.converged}
    else:
        mt = matching_stage(setup, data, bounds, cfg.match_L)
        out, summary = mt["outcome"], mt["summary"]
    if args.uhat:
        write_sequence_csv(args.uhat, out.uhat, prefix="u")
    _emit({"config_hash": cfg.hash(), "seed": cfg.seed, **summary,
           "alpha_star": out.alpha_star, "uhat": out.uhat, "bound": out.bound,
           "bounds": bounds.to_dict()}, args.out)


def cmd_bounds(args):
    cfg = _load_cfg(args)
    setup = build_setup(cfg)
    bounds = _bounds_from(args.fit, setup)
    L = args.L or cfg.L
    alpha_l1, b = args.alpha_l1, args.b
    if args.outcome:
        raw = _read(read_json, args.outcome)
        try:
            alpha_l1 = float(np.sum(np.abs(raw["alpha_star"])))
            b = float(raw["b"])
        except (KeyError, TypeError) as exc:
            raise InputFormatError(f"{args.outcome} lacks alpha_star/b: {exc}") from exc
    k = np.arange(L)
    a = np.array([alpha_l1])
    _emit({"config_hash": cfg.hash(), "seed": cfg.seed, "bounds": bounds.to_dict(),
           "alpha_l1": alpha_l1, "b": b,
           "simulation_bound": error_bound(k, bounds, a, b),
           "matching_bound": error_bound(k, bounds, a, b, matching=True)}, args.out)


def cmd_sweep_nu(args):
    cfg = _load_cfg(args).with_overrides(
        sweep_scales=tuple(float(v) for v in args.scales.split(",")) if args.scales else None,
        sweep_seeds=args.seeds, sweep_L=args.L)
    rows = sweep_stage(cfg)
    _emit({"config_hash": cfg.hash(), "seed": cfg.seed, "L": cfg.sweep_L,
           "rows": [asdict(r) for r in rows]}, args.out)


def cmd_run_experiment(args):
    cfg = _load_cfg(args)
    if args.sweep:
        cfg = cfg.with_overrides(sweep_enabled=True)
    report = run_experiment(cfg, args.out_dir)
    sim = report["stages"]["simulate"]
    print(f"simulate: |ybar - yhat|_2 = {sim['error_l2']:.6g}, b = {sim['b']:.3g}, "
          f"bound violations = {sim['bound_violations']}")


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fldata", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file (defaults used if omitted)")
        p.add_argument("--seed", type=int, help="master seed override")
        return p

    p = common(sub.add_parser("collect", help="record closed-loop benchmark data"))
    p.add_argument("--out", required=True, help="trajectory CSV")
    p.add_argument("--meta", help="metadata JSON (default: <out>.meta.json)")
    p.set_defaults(func=cmd_collect)

    p = common(sub.add_parser("fit-basis", help="fit G, eps* and Lipschitz constants"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_basis)

    p = common(sub.add_parser("check-pe", help="persistency of excitation and trajectory check"))
    p.add_argument("--data", help="trajectory CSV (collected if omitted)")
    p.add_argument("--L", type=int)
    p.add_argument("--candidate", help="candidate trajectory CSV for the membership check")
    p.add_argument("--no-candidate", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_pe)

    p = common(sub.add_parser("simulate", help="data-based simulation"))
    p.add_argument("--data")
    p.add_argument("--ubar", help="input CSV (fresh benchmark rollout if omitted)")
    p.add_argument("--xi0", help="initial transformed state, comma separated")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--L", type=int)
    p.add_argument("--bounds", help="fit-basis JSON with bound parameters")
    p.add_argument("--out")
    p.add_argument("--csv-dir", help="directory for per-channel plotting CSVs")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("match", help="output matching with closed-loop verification"))
    p.add_argument("--data")
    p.add_argument("--reference", help="reference trajectory CSV")
    p.add_argument("--L", type=int)
    p.add_argument("--bounds")
    p.add_argument("--uhat", help="write the estimated input CSV here")
    p.add_argument("--out")
    p.set_defaults(func=cmd_match)

    p = common(sub.add_parser("bounds", help="error-bound curves"))
    p.add_argument("--fit", help="fit-basis JSON")
    p.add_argument("--outcome", help="simulate/match JSON providing alpha_star and b")
    p.add_argument("--alpha-l1", type=float, default=1.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--L", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bounds)

    p = common(sub.add_parser("sweep-nu", help="error versus noise/perturbation scale"))
    p.add_argument("--scales", help="comma separated, e.g. 1,0.1,0.01,0")
    p.add_argument("--seeds", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_nu)

    p = common(sub.add_parser("run-experiment", help="full pipeline with report"))
    p.add_argument("--out-dir")
    p.add_argument("--sweep", action="store_true", help="include the nu sweep")
    p.set_defaults(func=cmd_run_experiment)
    return ap


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, (ConfigError, OSError, InputFormatError, json.JSONDecodeError)):
        return EXIT_IO
    if isinstance(exc, (FLDataError, ValueError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_DOMAIN
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
