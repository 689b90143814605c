"""Command line entry points.

Five subcommands cover the full workflow:

- ``simulate``: draw a ground-truth sequence and write it to a directory
  (config echo, template, per-frame matrices and PGM previews, states.csv).
- ``track``: run one or more trackers over a simulated directory and write
  estimates, metrics against the stored truth, and a step log.
- ``experiment``: the full Monte Carlo comparison (runs.csv, aggregate.csv,
  summary.json).
- ``analyze-support``: energy-support statistics of a coefficient or patch
  matrix.
- ``solve``: one mode-tracking solve from a problem directory.

All failures exit nonzero with a single JSON line on stderr:
``{"error": "<message>", "type": "<exception class>"}``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import fileio
from .dictionary import TemplatePatch, build_dictionary
from .filters import run_tracker
from .harness import (
    SimConfig,
    analyze_support,
    generate_sequence,
    location_error,
    nmse_components,
    parse_filter_label,
    resolve_filter_config,
    run_experiment,
    sim_config_from_kv,
    sim_config_to_kv,
    write_membership_csv,
    _anchored_template,
    _pad_coeffs,
)
from .models import FullState, ModelParams, MotionState, SupportSet
from .observation import Frame
from .solver import (
    ModeTrackingProblem,
    SolverConfig,
    solve,
    solve_with_outliers,
    write_trace_csv,
)
from .dictionary import Dictionary


def _load_sim_config(args) -> SimConfig:
    kv = fileio.read_kv(args.config) if args.config else {}
    cfg = sim_config_from_kv(kv)
    overrides = {}
    for name in ("seed", "n_frames", "n_jobs", "d", "n_pf"):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "n_runs", None) is not None:
        overrides["n_monte_carlo"] = args.n_runs
    if getattr(args, "filters", None):
        labels = [s.strip() for s in args.filters.split(",") if s.strip()]
        d = overrides.get("d", cfg.d)
        overrides["filters"] = tuple(parse_filter_label(lbl, d) for lbl in labels)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _write_template_dir(out_dir, template: TemplatePatch) -> None:
    fileio.write_kv(
        os.path.join(out_dir, "template.cfg"),
        {
            "height": template.height,
            "width": template.width,
            "origin_i": int(template.coord_i[0]),
            "origin_j": int(template.coord_j[0]),
        },
    )
    fileio.save_matrix(
        os.path.join(out_dir, "template.mat"),
        template.image(),
        (template.height, template.width, 0),
    )


def _read_template_dir(sim_dir) -> TemplatePatch:
    meta = fileio.read_kv(os.path.join(sim_dir, "template.cfg"))
    image, _ = fileio.load_matrix(os.path.join(sim_dir, "template.mat"))
    return TemplatePatch.from_image(
        image, origin=(int(meta["origin_i"]), int(meta["origin_j"]))
    )


def _support_field(support: SupportSet) -> str:
    return "|".join(str(i) for i in support.indices)


def _parse_support_field(text: str, n_lambda: int) -> SupportSet:
    indices = [int(tok) for tok in text.split("|") if tok]
    return SupportSet.from_indices(indices, n_lambda)


def cmd_simulate(args) -> int:
    cfg = _load_sim_config(args)
    os.makedirs(args.out, exist_ok=True)
    fileio.write_kv(os.path.join(args.out, "config.cfg"), sim_config_to_kv(cfg))
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    truth = generate_sequence(cfg, rng)
    _write_template_dir(args.out, truth.template)

    n_lambda = cfg.params.n_lambda
    with open(os.path.join(args.out, "states.csv"), "w") as fh:
        lam_cols = ",".join(f"lam_{k}" for k in range(n_lambda))
        fh.write(f"frame,u_x,u_y,s,support,{lam_cols}\n")
        for t, state in enumerate(truth.states):
            lam = ",".join(fileio.fmt_float(v) for v in state.coeffs)
            fh.write(
                f"{t},{fileio.fmt_float(state.motion.u_x)},"
                f"{fileio.fmt_float(state.motion.u_y)},"
                f"{fileio.fmt_float(state.motion.s)},"
                f"{_support_field(state.support)},{lam}\n"
            )
    for t, frame in enumerate(truth.frames):
        image = frame.image()
        fileio.save_matrix(
            os.path.join(args.out, f"frame_{t:04d}.mat"),
            image,
            (frame.height, frame.width, t),
        )
        fileio.write_pgm(os.path.join(args.out, f"frame_{t:04d}.pgm"), image)
    print(f"wrote {len(truth.frames)} frames to {args.out}")
    return 0


def _read_states_csv(path, n_lambda: int):
    motion = []
    supports = []
    coeffs = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:5] != ["frame", "u_x", "u_y", "s", "support"]:
            raise ValueError(f"{path}: unexpected states header")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            motion.append([float(parts[1]), float(parts[2]), float(parts[3])])
            supports.append(_parse_support_field(parts[4], n_lambda))
            coeffs.append([float(v) for v in parts[5 : 5 + n_lambda]])
    return np.array(motion), supports, np.array(coeffs)


def cmd_track(args) -> int:
    sim_dir = args.sim
    cfg = sim_config_from_kv(fileio.read_kv(os.path.join(sim_dir, "config.cfg")))
    if args.filters:
        labels = [s.strip() for s in args.filters.split(",") if s.strip()]
        cfg = dataclasses.replace(
            cfg, filters=tuple(parse_filter_label(lbl, cfg.d) for lbl in labels)
        )
    template = _read_template_dir(sim_dir)
    t_motion, t_supports, t_coeffs = _read_states_csv(
        os.path.join(sim_dir, "states.csv"), cfg.params.n_lambda
    )
    frames = []
    for t in range(len(t_motion)):
        image, _ = fileio.load_matrix(os.path.join(sim_dir, f"frame_{t:04d}.mat"))
        frames.append(Frame.from_image(image))
    init_state = FullState(
        MotionState.from_array(t_motion[0]), t_supports[0], t_coeffs[0]
    )

    os.makedirs(args.out, exist_ok=True)
    seed = cfg.seed if args.seed is None else args.seed
    # one spawned seed per tracker, in filter order
    children = np.random.SeedSequence(seed).spawn(len(cfg.filters))

    n_lambda = cfg.params.n_lambda
    lam_cols = ",".join(f"lam_{k}" for k in range(n_lambda))
    est_fh = open(os.path.join(args.out, "estimates.csv"), "w")
    est_fh.write(f"filter,frame,u_x,u_y,s,{lam_cols}\n")
    met_fh = open(os.path.join(args.out, "metrics.csv"), "w")
    met_fh.write("filter,frame,err_sq,ref_sq,nmse,loc_err\n")
    log_fh = open(os.path.join(args.out, "tracker_log.csv"), "w")
    log_fh.write("filter,frame,ess,max_log_weight,mean_support_size\n")
    summary = {}
    try:
        for k, spec in enumerate(cfg.filters):
            fcfg = resolve_filter_config(spec, cfg)
            result = run_tracker(
                frames, template, cfg.params, fcfg, init_state, children[k]
            )
            est_coeffs = _pad_coeffs(result.coeffs, n_lambda)
            ref = np.sum(t_motion**2, axis=1) + np.sum(t_coeffs**2, axis=1)
            err = np.sum((t_motion - result.motion) ** 2, axis=1) + np.sum(
                (t_coeffs - est_coeffs) ** 2, axis=1
            )
            le = np.asarray(location_error(t_motion, result.motion)).reshape(-1)
            for t in range(len(frames)):
                lam = ",".join(fileio.fmt_float(v) for v in est_coeffs[t])
                est_fh.write(
                    f"{spec.label},{t},{fileio.fmt_float(result.motion[t, 0])},"
                    f"{fileio.fmt_float(result.motion[t, 1])},"
                    f"{fileio.fmt_float(result.motion[t, 2])},{lam}\n"
                )
                ratio = err[t] / ref[t] if ref[t] > 0 else float("nan")
                met_fh.write(
                    f"{spec.label},{t},{fileio.fmt_float(err[t])},"
                    f"{fileio.fmt_float(ref[t])},{fileio.fmt_float(ratio)},"
                    f"{fileio.fmt_float(le[t])}\n"
                )
                log_fh.write(
                    f"{spec.label},{t},{fileio.fmt_float(result.ess[t])},"
                    f"{fileio.fmt_float(result.max_log_weight[t])},"
                    f"{fileio.fmt_float(np.mean(result.support_sizes[t]))}\n"
                )
            summary[spec.label] = {
                "final_nmse": float(err[-1] / ref[-1]) if ref[-1] > 0 else None,
                "final_loc_err": float(le[-1]),
                "lost_at": result.lost_at,
            }
    finally:
        est_fh.close()
        met_fh.close()
        log_fh.close()
    with open(os.path.join(args.out, "track_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"tracked {len(cfg.filters)} filters over {len(frames)} frames")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_sim_config(args)
    result = run_experiment(cfg, args.out)
    finals = {
        label: float(series.nmse[-1]) for label, series in result.metrics.items()
    }
    print(json.dumps({"final_nmse": finals, "n_runs": result.n_runs}, sort_keys=True))
    return 0


def cmd_analyze_support(args) -> int:
    source, _ = fileio.load_matrix(args.input)
    image, _ = fileio.load_matrix(args.template)
    template = TemplatePatch.from_image(image)
    dictionary = build_dictionary(template, args.d)
    trace = analyze_support(source, dictionary, template, fraction=args.fraction)
    trace.write_csv(args.out)
    if args.membership:
        write_membership_csv(trace, args.membership)
    print(f"analyzed {len(trace.supports)} frames")
    return 0


def _load_problem_dir(problem_dir):
    kv = fileio.read_kv(os.path.join(problem_dir, "problem.cfg"))
    y, _ = fileio.load_matrix(os.path.join(problem_dir, "y.mat"))
    lam_prev, _ = fileio.load_matrix(os.path.join(problem_dir, "lambda_prev.mat"))
    phi, header = fileio.load_matrix(os.path.join(problem_dir, "phi.mat"))
    n_pixels, n_lambda, order = header
    if phi.shape != (n_pixels, n_lambda):
        raise ValueError("phi.mat header does not match its data")
    kind = "legendre" if n_lambda == 2 * order + 1 else "custom"
    dictionary = Dictionary(matrix=phi, order=order, kind=kind)
    support = _parse_support_field(kv.get("cond_support", ""), n_lambda)
    problem = ModeTrackingProblem(
        y_residual_base=y.ravel(),
        dictionary=dictionary,
        lambda_prev=lam_prev.ravel(),
        cond_support=support,
        sigma_o_sq=float(kv["sigma_o_sq"]),
        sigma_l_sq=float(kv["sigma_l_sq"]),
        beta=float(kv.get("beta", 1.0)),
        gamma=float(kv.get("gamma", 0.7)),
        gamma_outlier=float(kv["gamma_outlier"]) if "gamma_outlier" in kv else None,
    )
    config = SolverConfig(
        max_iterations=int(kv.get("max_iterations", 2000)),
        kkt_tolerance=float(kv.get("kkt_tolerance", 1e-6)),
    )
    return problem, config


def cmd_solve(args) -> int:
    problem, config = _load_problem_dir(args.problem)
    if args.trace:
        config = dataclasses.replace(config, record_trace=True)
    os.makedirs(args.out, exist_ok=True)
    if problem.gamma_outlier is not None:
        result = solve_with_outliers(problem, config)
        fileio.save_matrix(
            os.path.join(args.out, "outliers.mat"),
            result.outlier_opt.reshape(1, -1),
            (1, result.outlier_opt.size, 0),
        )
    else:
        result = solve(problem, config)
    fileio.save_matrix(
        os.path.join(args.out, "solution.mat"),
        result.lambda_opt.reshape(1, -1),
        (1, result.lambda_opt.size, 0),
    )
    payload = {
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "kkt_residual": float(result.kkt_residual),
        "objective": float(result.objective),
    }
    with open(os.path.join(args.out, "result.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.trace and result.trace is not None:
        write_trace_csv(result.trace, os.path.join(args.out, "trace.csv"))
    print(json.dumps(payload, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pafimocs",
        description="Particle-filtered template tracking with sparse coefficient changes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw and store a ground-truth sequence")
    p_sim.add_argument("--config", help="key-value config file (defaults when omitted)")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--seed", type=int, help="override the config seed")
    p_sim.add_argument("--n-frames", type=int, dest="n_frames")
    p_sim.set_defaults(func=cmd_simulate)

    p_trk = sub.add_parser("track", help="run trackers over a simulated directory")
    p_trk.add_argument("--sim", required=True, help="directory written by simulate")
    p_trk.add_argument("--out", required=True)
    p_trk.add_argument("--filters", help="comma-separated filter labels")
    p_trk.add_argument("--seed", type=int, help="tracker seed (defaults to config seed)")
    p_trk.set_defaults(func=cmd_track)

    p_exp = sub.add_parser("experiment", help="Monte Carlo tracker comparison")
    p_exp.add_argument("--config", help="key-value config file (defaults when omitted)")
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--seed", type=int)
    p_exp.add_argument("--n-frames", type=int, dest="n_frames")
    p_exp.add_argument("--n-runs", type=int, dest="n_runs")
    p_exp.add_argument("--n-jobs", type=int, dest="n_jobs")
    p_exp.add_argument("--n-pf", type=int, dest="n_pf", help="particles per tracker")
    p_exp.add_argument("--d", type=int, help="dictionary order (config params must match)")
    p_exp.add_argument("--filters", help="comma-separated filter labels")
    p_exp.set_defaults(func=cmd_experiment)

    p_sup = sub.add_parser(
        "analyze-support", help="energy-support statistics of a matrix of frames"
    )
    p_sup.add_argument("--input", required=True, help="matrix of coefficient or patch rows")
    p_sup.add_argument("--template", required=True, help="template matrix file")
    p_sup.add_argument("--d", type=int, required=True, help="dictionary order")
    p_sup.add_argument("--fraction", type=float, default=0.99)
    p_sup.add_argument("--out", required=True, help="trace CSV path")
    p_sup.add_argument("--membership", help="optional membership CSV path")
    p_sup.set_defaults(func=cmd_analyze_support)

    p_sol = sub.add_parser("solve", help="one mode-tracking solve from a problem directory")
    p_sol.add_argument("--problem", required=True)
    p_sol.add_argument("--out", required=True)
    p_sol.add_argument("--trace", action="store_true", help="also write trace.csv")
    p_sol.set_defaults(func=cmd_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # argparse errors exit earlier with code 2
        line = json.dumps({"error": str(exc), "type": type(exc).__name__})
        print(line, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))
