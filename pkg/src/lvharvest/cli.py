"""Command-line front end.

Exit codes: 0 when every check passes, 1 when a verification fails, 2 on a
runtime error (bad config, failed stage, solver divergence).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import hjb
from .diffusion import average_reward_diffusion
from .harness import (ExperimentConfig, StageError, builtin_config, export_plot_data,
                      load_config, run_epsilon_ladder, run_extinction_study,
                      run_lyapunov_battery, run_pipeline, _Writer)
from .markov_noise import center_noise
from .model import averaged_coeffs
from .policy import PolicyTable
from .wideband import average_reward_wideband

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


def _config(args) -> ExperimentConfig:
    cfg = builtin_config("default") if args.config is None else (
        builtin_config(args.config[len("builtin:"):]) if args.config.startswith("builtin:")
        else load_config(args.config))
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _policy(args, cfg, coeffs):
    if getattr(args, "policy", None):
        return PolicyTable.from_json(Path(args.policy).read_text(encoding="utf-8"))
    if getattr(args, "constant", None) is not None:
        return PolicyTable.constant(cfg.grid, args.constant, cfg.params.M)
    _log(args, "no --policy given: solving the HJB equation first")
    mdp = hjb.build_mdp(cfg.params, cfg.harvest, coeffs, cfg.grid)
    _, raw = hjb.solve_average_reward(mdp, cfg.tol, int(cfg.solver.get("max_iters", 2_000_000)))
    return hjb.lipschitz_regularize(raw, cfg.radius)


def _summary(args, rep) -> int:
    for c in rep.checks:
        _log(args, f"{'PASS' if c.passed else 'FAIL'} {c.name}: value={c.value:.6g} threshold={c.threshold:.6g}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_avg_coeffs(args, cfg):
    spec = center_noise(cfg.chain)
    coeffs = averaged_coeffs(cfg.params, spec)
    w = _Writer(Path(cfg.output_dir))
    w.json("averaging/coeffs.json", coeffs.to_dict())
    print(json.dumps(coeffs.to_dict()))
    return EXIT_OK


def cmd_solve(args, cfg):
    coeffs = averaged_coeffs(cfg.params, center_noise(cfg.chain))
    mdp = hjb.build_mdp(cfg.params, cfg.harvest, coeffs, cfg.grid)
    vf, raw = hjb.solve_average_reward(mdp, cfg.tol, int(cfg.solver.get("max_iters", 2_000_000)))
    res = hjb.hjb_residual(vf, mdp)
    pol = hjb.lipschitz_regularize(raw, cfg.radius)
    w = _Writer(Path(cfg.output_dir))
    w.text("hjb/value.csv", vf.to_csv())
    w.json("hjb/value.json", {**vf.header(), "residual": res})
    w.json("hjb/policy_raw.json", raw.to_dict())
    w.json("hjb/policy.json", pol.to_dict())
    w.text("hjb/policy.csv", pol.to_csv())
    ok = res < 10 * cfg.tol
    _log(args, f"rho={vf.rho:.8g} iterations={vf.iterations} residual={res:.3g} "
               f"({'PASS' if ok else 'FAIL'} < {10 * cfg.tol:.3g})")
    print(json.dumps({"rho": vf.rho, "residual": res, "pass": ok}))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_simulate(args, cfg, system):
    spec = center_noise(cfg.chain)
    coeffs = averaged_coeffs(cfg.params, spec)
    pol = _policy(args, cfg, coeffs)
    w = _Writer(Path(cfg.output_dir))
    if system == "diffusion":
        est = average_reward_diffusion(cfg.params, cfg.harvest, coeffs, pol,
                                       cfg.diffusion_config((cfg.seed, 3, 0)), args.n_paths or cfg.n_paths,
                                       box=cfg.tightness_box, hist_grid=cfg.grid, keep_paths=3,
                                       threads=args.threads)
        tag = "diffusion"
    else:
        eps = args.epsilon if args.epsilon is not None else cfg.epsilon_ladder[-1]
        est = average_reward_wideband(cfg.params, cfg.harvest, spec, pol,
                                      cfg.wideband_config(eps, (cfg.seed, 4, 0)), args.n_paths or cfg.n_paths,
                                      box=cfg.tightness_box, hist_grid=cfg.grid, keep_paths=3,
                                      threads=args.threads)
        tag = f"wideband_eps_{eps:g}"
    w.text(f"{tag}/reward.json", est.to_json() + "\n")
    w.text(f"{tag}/occupation.csv", est.histogram.to_csv())
    w.text(f"{tag}/occupation_outside.json", est.histogram.outside_json() + "\n")
    for k, r in enumerate(est.records):
        w.text(f"{tag}/path_{k}.csv", r.to_csv())
    print(est.to_json())
    return EXIT_OK


def cmd_verify(args, cfg):
    neg = None
    if args.negative:
        neg = builtin_config(args.negative[len("builtin:"):]) if args.negative.startswith("builtin:") \
            else load_config(args.negative)
    rep = run_lyapunov_battery(cfg, threads=args.threads, negative=neg)
    return _summary(args, rep)


def cmd_pipeline(args, cfg):
    rep = run_pipeline(cfg, threads=args.threads, progress=lambda s: _log(args, f"stage: {s}"))
    return _summary(args, rep)


def cmd_extinction(args, cfg):
    rep = run_extinction_study(cfg, threads=args.threads)
    return _summary(args, rep)


def cmd_ladder(args, cfg):
    spec = center_noise(cfg.chain)
    coeffs = averaged_coeffs(cfg.params, spec)
    pol = _policy(args, cfg, coeffs)
    w = _Writer(Path(cfg.output_dir))
    out = run_epsilon_ladder(cfg, pol, coeffs=coeffs, spec=spec, threads=args.threads, writer=w)
    for r in out["rows"]:
        print(json.dumps(r))
    bad = [c for c in out["checks"] if not c.passed]
    for c in out["checks"]:
        _log(args, f"{'PASS' if c.passed else 'FAIL'} {c.name}: value={c.value:.6g} threshold={c.threshold:.6g}")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_export(args, cfg):
    fams = export_plot_data(Path(cfg.output_dir))
    for k, v in fams.items():
        _log(args, f"{k}: {len(v)} file(s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config JSON path, or builtin:NAME (default builtin:default)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo")
    common.add_argument("--quiet", action="store_true", help="suppress progress on stderr")
    ap = argparse.ArgumentParser(prog="lvharvest", description="Harvested predator-prey control toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("avg-coeffs", parents=[common], help="averaged diffusion coefficients")
    sub.add_parser("solve", parents=[common], help="solve the ergodic HJB equation")
    for name in ("simulate-diffusion", "simulate-wideband", "ladder"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--policy", help="PolicyTable JSON (default: solve first)")
        sp.add_argument("--constant", type=float, help="use a constant effort instead")
        sp.add_argument("--n-paths", type=int, dest="n_paths")
        if name == "simulate-wideband":
            sp.add_argument("--epsilon", type=float)
    vp = sub.add_parser("verify-lyapunov", parents=[common], help="Lyapunov verification battery")
    vp.add_argument("--negative", help="extinct config used as a negative control (e.g. builtin:extinct)")
    sub.add_parser("pipeline", parents=[common], help="full six-stage experiment")
    sub.add_parser("extinction", parents=[common], help="extinction study (needs margin < 0)")
    sub.add_parser("export", parents=[common], help="collect plot-ready CSVs from a finished run")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        handler = {
            "avg-coeffs": cmd_avg_coeffs,
            "solve": cmd_solve,
            "simulate-diffusion": lambda a, c: cmd_simulate(a, c, "diffusion"),
            "simulate-wideband": lambda a, c: cmd_simulate(a, c, "wideband"),
            "verify-lyapunov": cmd_verify,
            "pipeline": cmd_pipeline,
            "extinction": cmd_extinction,
            "ladder": cmd_ladder,
            "export": cmd_export,
        }[args.command]
        return handler(args, cfg)
    except (StageError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
