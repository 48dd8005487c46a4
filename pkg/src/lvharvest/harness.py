"""Experiment configuration, the canonical experiments and their artifacts.

Seeds are split by ``(seed, stage, job)``: every Monte Carlo batch in a stage
gets its own job index and path ``i`` of that batch draws from
``SeedSequence([seed, stage, job, i])``.  Nothing depends on thread count or
execution order, so reruns give byte-identical files.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import hjb
from .diffusion import DiffusionConfig, average_reward_diffusion
from .lyapunov import (LyapunovFunctions, VerificationReport, boundary_average_check,
                       choose_exponents, comparison_check, drift_inequality_scan,
                       perturbed_sandwich_check, v2_inequality_scan)
from .markov_noise import JumpChainSpec, center_noise
from .model import HarvestSpec, ModelParams, averaged_coeffs, persistence_check
from .policy import Grid, PolicyTable
from .wideband import WidebandConfig, average_reward_wideband

__all__ = [
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "ExperimentReport",
    "Check",
    "StageError",
    "load_config",
    "builtin_config",
    "run_pipeline",
    "run_extinction_study",
    "run_epsilon_ladder",
    "run_lyapunov_battery",
    "export_plot_data",
]

SCHEMA_VERSION = 1
STAGES = ("averaging", "lyapunov", "hjb", "diffusion", "wideband", "baselines")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """One JSON document describing a full experiment."""

    name: str
    params: ModelParams
    harvest: HarvestSpec
    chain: JumpChainSpec
    grid: Grid
    solver: dict
    diffusion: dict
    wideband: dict
    epsilon_ladder: list
    n_paths: int
    seed: int
    output_dir: str
    tightness_box: tuple = (0.01, 3.0)
    lyapunov: dict = field(default_factory=dict)
    extinction: dict = field(default_factory=dict)

    def __post_init__(self):
        lad = [float(e) for e in self.epsilon_ladder]
        if not lad:
            raise ValueError("epsilon_ladder must not be empty")
        if any(not 0 < e <= 1 for e in lad):
            raise ValueError(f"epsilon_ladder entries must lie in (0, 1], got {lad}")
        if any(b >= a for a, b in zip(lad, lad[1:])):
            raise ValueError(f"epsilon_ladder must be strictly decreasing, got {lad}")
        self.epsilon_ladder = lad
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        self.tightness_box = tuple(float(v) for v in self.tightness_box)
        # templates must build valid configs
        self.diffusion_config(0)
        for e in lad:
            self.wideband_config(e, 0)
        if self.solver.get("tol", 1e-6) <= 0:
            raise ValueError("solver tol must be positive")

    # sub-config builders -------------------------------------------------
    def diffusion_config(self, seed, **over) -> DiffusionConfig:
        d = {k: self.diffusion[k] for k in ("dt", "t_end", "burn_in")}
        d["initial"] = tuple(self.diffusion.get("initial", (0.5, 0.5)))
        d["record_dt"] = self.diffusion.get("record_dt", 1.0)
        d.update(over)
        return DiffusionConfig(seed=seed, **d)

    def wideband_config(self, epsilon, seed, **over) -> WidebandConfig:
        d = {k: self.wideband[k] for k in ("t_end", "burn_in")}
        for k, default in (("max_substep", 0.05), ("record_dt", 1.0), ("step_budget", 2e9)):
            d[k] = self.wideband.get(k, default)
        d["initial"] = tuple(self.wideband.get("initial", (0.5, 0.5)))
        d.update(over)
        return WidebandConfig(epsilon=float(epsilon), seed=seed, **d)

    @property
    def tol(self) -> float:
        return float(self.solver.get("tol", 1e-6))

    @property
    def radius(self) -> int:
        return int(self.solver.get("radius", 1))

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "model": self.params.to_dict(),
            "harvest": self.harvest.to_dict(),
            "chain": self.chain.to_dict(),
            "grid": self.grid.to_dict(),
            "solver": dict(self.solver),
            "diffusion": dict(self.diffusion),
            "wideband": dict(self.wideband),
            "epsilon_ladder": list(self.epsilon_ladder),
            "n_paths": self.n_paths,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "tightness_box": list(self.tightness_box),
            "lyapunov": copy.deepcopy(self.lyapunov),
            "extinction": dict(self.extinction),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        ver = d.get("schema_version")
        if ver != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {ver!r} (expected {SCHEMA_VERSION})")
        required = ("name", "model", "harvest", "chain", "grid", "solver", "diffusion",
                    "wideband", "epsilon_ladder", "n_paths", "seed", "output_dir")
        missing = [k for k in required if k not in d]
        if missing:
            raise ValueError(f"config is missing keys {missing}")
        diff = dict(d["diffusion"])
        wb = dict(d["wideband"])
        for sub in (diff, wb):
            if "initial" in sub:
                sub["initial"] = list(sub["initial"])
        return cls(
            name=str(d["name"]),
            params=ModelParams.from_dict(d["model"]),
            harvest=HarvestSpec.from_dict(d["harvest"]),
            chain=JumpChainSpec.from_dict(d["chain"]),
            grid=Grid.from_dict(d["grid"]),
            solver=dict(d["solver"]),
            diffusion=diff,
            wideband=wb,
            epsilon_ladder=list(d["epsilon_ladder"]),
            n_paths=int(d["n_paths"]),
            seed=int(d["seed"]),
            output_dir=str(d["output_dir"]),
            tightness_box=tuple(d.get("tightness_box", (0.01, 3.0))),
            lyapunov=copy.deepcopy(d.get("lyapunov", {})),
            extinction=dict(d.get("extinction", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        """Content hash of everything except the output location."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if k == "params":
                d["model"] = v.to_dict()
            elif k == "harvest":
                d["harvest"] = v.to_dict()
            elif k == "chain":
                d["chain"] = v.to_dict()
            elif k == "grid":
                d["grid"] = v.to_dict()
            else:
                d[k] = v
        return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text(encoding="utf-8"))


def builtin_config(name: str = "default") -> ExperimentConfig:
    """Shipped configurations: ``"default"`` (persistent) and ``"extinct"``."""
    text = resources.files("lvharvest").joinpath("configs", f"{name}.json").read_text(encoding="utf-8")
    return ExperimentConfig.from_json(text)


@dataclass
class Check:
    """A quantitative verdict: ``value`` compared against ``threshold``."""

    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "pass": bool(self.passed), "value": _num(self.value),
                "threshold": _num(self.threshold), "detail": self.detail}


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else str(v)


@dataclass
class ExperimentReport:
    """Results of one experiment.  ``outputs`` maps stage to summary data,
    ``files`` maps stage to the artifact paths (relative to ``root``)."""

    kind: str
    config_hash: str
    root: Path
    outputs: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "outputs": self.outputs,
            "files": self.files,
            "checks": [c.to_dict() for c in self.checks],
            "pass": self.passed,
            "failed_stage": self.failed_stage,
            "error": self.error,
        }


class _Writer:
    """Single writer for a run directory; records every file it creates."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def text(self, rel: str, content: str) -> str:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(content.encode("utf-8"))
        if rel not in self.written:
            self.written.append(rel)
        return rel

    def json(self, rel: str, obj) -> str:
        return self.text(rel, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def rows(self, rel: str, header, rows) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        return self.text(rel, buf.getvalue())

    def report(self, rel: str, rep: VerificationReport) -> str:
        base = rel.rsplit(".", 1)[0]
        rep.details_csv_path = base + ".csv"
        self.text(base + ".csv", rep.details_csv())
        return self.text(base + ".json", rep.to_json() + "\n")

    def manifest(self) -> str:
        rows = []
        for rel in sorted(self.written):
            data = (self.root / rel).read_bytes()
            rows.append((rel, hashlib.sha256(data).hexdigest(), len(data)))
        return self.rows("manifest.csv", ["path", "sha256", "bytes"], rows)


def _stage_seed(cfg: ExperimentConfig, stage: str, job: int = 0):
    return (int(cfg.seed), STAGES.index(stage) if stage in STAGES else 99, int(job))


def _ladder_tag(eps: float) -> str:
    return f"eps_{eps:g}"


def _run_stage(rep: ExperimentReport, name: str, fn):
    t0 = time.perf_counter()
    try:
        return fn()
    except Exception as exc:  # noqa: BLE001 - reported with stage name
        rep.failed_stage = name
        rep.error = f"{type(exc).__name__}: {exc}"
        raise StageError(name, rep.error) from exc
    finally:
        rep.timings[name] = time.perf_counter() - t0


def _finish(rep: ExperimentReport, w: _Writer):
    """Write report (deterministic), timings (not hashed) and the manifest."""
    w.json("report.json", rep.to_dict())
    w.manifest()
    (rep.root / "timings.json").write_text(json.dumps(rep.timings, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")


def _estimate_rows(est, system, eps, policy):
    return [system, "" if eps is None else repr(float(eps)), policy, est.estimate, est.stderr,
            est.n_paths, est.outside_fraction, est.mean_sq_norm]


def _write_estimate(w, rel_dir, est, keep):
    files = [w.text(f"{rel_dir}/reward.json", est.to_json() + "\n")]
    if est.histogram is not None:
        files.append(w.text(f"{rel_dir}/occupation.csv", est.histogram.to_csv()))
        files.append(w.text(f"{rel_dir}/occupation_outside.json", est.histogram.outside_json() + "\n"))
    for k, r in enumerate(est.records[:keep]):
        files.append(w.text(f"{rel_dir}/path_{k}.csv", r.to_csv()))
    return files


def _constant_levels(M):
    return [0.0, M / 4, M / 2, 3 * M / 4, M]


def run_pipeline(cfg: ExperimentConfig, out_dir=None, threads: int = 1, progress=None) -> ExperimentReport:
    """End-to-end near-optimality experiment (six stages).

    1. center the noise and average it into diffusion coefficients;
    2. choose Lyapunov exponents and run the drift scans;
    3. solve the HJB equation, check the residual, regularize the policy;
    4. diffusion reward of the regularized policy;
    5. wideband reward across the epsilon ladder;
    6. constant-policy baselines on both systems.

    A failing stage stops the run; the partial manifest and the stage name
    are written before :class:`StageError` propagates.
    """
    root = Path(out_dir if out_dir is not None else cfg.output_dir)
    w = _Writer(root)
    rep = ExperimentReport("pipeline", cfg.hash(), root)
    say = progress or (lambda msg: None)
    w.json("config.json", cfg.to_dict())
    keep = 3
    box = cfg.tightness_box
    p, hs = cfg.params, cfg.harvest
    state: dict = {}
    try:
        # 1 -------------------------------------------------------------
        def s_avg():
            spec = center_noise(cfg.chain)
            coeffs = averaged_coeffs(p, spec)
            state.update(spec=spec, coeffs=coeffs)
            rep.files["averaging"] = [w.json("averaging/coeffs.json", coeffs.to_dict())]
            rep.outputs["averaging"] = coeffs.to_dict()
        say("averaging")
        _run_stage(rep, "averaging", s_avg)
        spec, coeffs = state["spec"], state["coeffs"]

        # 2 -------------------------------------------------------------
        def s_lyap():
            files = []
            pc = persistence_check(p)
            out = {"persistent": pc.persistent, "margin": pc.margin}
            if pc.persistent:
                lp = choose_exponents(p, hs, coeffs)
                vg = Grid.from_dict(cfg.lyapunov.get("verify_grid", {
                    "x_min": 1e-8, "x_max": 1e3, "y_min": 1e-8, "y_max": 1e3, "nx": 120, "ny": 120}))
                files.append(w.json("lyapunov/exponents.json", lp.to_dict()))
                dr = drift_inequality_scan(p, hs, coeffs, lp, vg)
                v2 = v2_inequality_scan(p, hs, coeffs, vg)
                files += [w.report("lyapunov/drift_inequality.json", dr),
                          w.report("lyapunov/v2_inequality.json", v2)]
                rep.checks.append(Check("drift_inequality", dr.passed, dr.worst_value, dr.threshold,
                                        "sup of L_uV/V over |z| >= H, u in {0, M}"))
                rep.checks.append(Check("v2_inequality", v2.passed, v2.worst_value, v2.threshold,
                                        "grid K5 vs completed-square bound"))
                out.update(lp.to_dict())
                state["lp"] = lp
            rep.outputs["lyapunov"] = out
            rep.files["lyapunov"] = files
        say("lyapunov")
        _run_stage(rep, "lyapunov", s_lyap)

        # 3 -------------------------------------------------------------
        def s_hjb():
            mdp = hjb.build_mdp(p, hs, coeffs, cfg.grid)
            vf, raw = hjb.solve_average_reward(mdp, cfg.tol, int(cfg.solver.get("max_iters", 2_000_000)))
            res = hjb.hjb_residual(vf, mdp)
            pol = hjb.lipschitz_regularize(raw, cfg.radius)
            consts = {u: hjb.policy_evaluation(mdp, u)[0] for u in _constant_levels(p.M)}
            best_u = max(consts, key=lambda u: consts[u])
            rep.checks.append(Check("hjb_residual", res < 10 * cfg.tol, res, 10 * cfg.tol,
                                    "max interior residual of the discrete HJB"))
            rep.checks.append(Check("rho_dominates_constants", vf.rho >= consts[best_u] - cfg.tol,
                                    vf.rho - consts[best_u], -cfg.tol,
                                    f"rho minus best constant-policy chain reward (u={best_u:g})"))
            out = {"rho": vf.rho, "iterations": vf.iterations, "residual": res,
                   "constant_policy_rho": {repr(u): r for u, r in consts.items()}}
            if cfg.solver.get("refinement_check", False):
                fine = cfg.grid.refined(2)
                V0 = _prolong(vf.values, cfg.grid, fine)
                vf2, _ = hjb.solve_average_reward(hjb.build_mdp(p, hs, coeffs, fine), cfg.tol,
                                                  int(cfg.solver.get("max_iters", 2_000_000)), V0=V0)
                rel = abs(vf2.rho - vf.rho) / abs(vf.rho) if vf.rho else abs(vf2.rho)
                out["rho_refined"] = vf2.rho
                out["refinement_change"] = rel
                rep.checks.append(Check("grid_refinement", rel < 0.02, rel, 0.02,
                                        f"relative change of rho on the {fine.nx}x{fine.ny} grid"))
            files = [w.text("hjb/value.csv", vf.to_csv()), w.json("hjb/value.json", vf.header()),
                     w.json("hjb/policy_raw.json", raw.to_dict()), w.json("hjb/policy.json", pol.to_dict()),
                     w.text("hjb/policy.csv", pol.to_csv())]
            state.update(vf=vf, policy=pol, mdp=mdp)
            rep.outputs["hjb"] = out
            rep.files["hjb"] = files
        say("hjb")
        _run_stage(rep, "hjb", s_hjb)
        vf, pol = state["vf"], state["policy"]

        # 4 -------------------------------------------------------------
        def s_diff():
            dcfg = cfg.diffusion_config(_stage_seed(cfg, "diffusion"))
            est = average_reward_diffusion(p, hs, coeffs, pol, dcfg, cfg.n_paths, box=box,
                                           hist_grid=cfg.grid, keep_paths=keep, threads=threads)
            budget = 3 * est.stderr + 0.05 * abs(vf.rho)
            gap = abs(est.estimate - vf.rho)
            rep.checks.append(Check("diffusion_vs_rho", gap <= budget, gap, budget,
                                    "|J_diffusion - rho| vs 3 stderr + 5% of rho"))
            state["diff"] = est
            rep.outputs["diffusion"] = {**est.to_dict(), "outside_fraction": est.outside_fraction}
            rep.files["diffusion"] = _write_estimate(w, "diffusion/solver", est, keep)
        say("diffusion")
        _run_stage(rep, "diffusion", s_diff)

        # 5 -------------------------------------------------------------
        def s_wide():
            ladder = run_epsilon_ladder(cfg, pol, coeffs=coeffs, spec=spec, diffusion=state["diff"],
                                        threads=threads, writer=w, keep=keep)
            rep.files["wideband"] = ladder["files"]
            rep.outputs["wideband"] = ladder["rows"]
            rep.checks.extend(ladder["checks"])
            state["ladder"] = ladder
        say("wideband")
        _run_stage(rep, "wideband", s_wide)

        # 6 -------------------------------------------------------------
        def s_base():
            rows, files = [], []
            diff_est = state["diff"]
            tight = [("diffusion", None, "solver", diff_est.outside_fraction)]
            tight += [("wideband", e, "solver", est.outside_fraction)
                      for e, est in state["ladder"]["estimates"].items()]
            rows.append(_estimate_rows(diff_est, "diffusion", None, "solver"))
            for e, est in state["ladder"]["estimates"].items():
                rows.append(_estimate_rows(est, "wideband", e, "solver"))
            levels = _constant_levels(p.M)
            eps_min = cfg.epsilon_ladder[-1]
            wb_const = {}
            for k, u in enumerate(levels):
                cp = PolicyTable.constant(cfg.grid, u, p.M)
                est = average_reward_diffusion(p, hs, coeffs, cp, cfg.diffusion_config(_stage_seed(cfg, "baselines", k)),
                                               cfg.n_paths, box=box, threads=threads)
                rows.append(_estimate_rows(est, "diffusion", None, f"const_{u:g}"))
                if k in (0, len(levels) - 1):
                    tight.append(("diffusion", None, f"const_{u:g}", est.outside_fraction))
                for j, e in enumerate(cfg.epsilon_ladder):
                    # full sweep at the smallest epsilon; endpoints everywhere for tightness
                    if e != eps_min and k not in (0, len(levels) - 1):
                        continue
                    wcfg = cfg.wideband_config(e, _stage_seed(cfg, "baselines", 100 * (j + 1) + k))
                    est = average_reward_wideband(p, hs, spec, cp, wcfg, cfg.n_paths, box=box, threads=threads)
                    rows.append(_estimate_rows(est, "wideband", e, f"const_{u:g}"))
                    if k in (0, len(levels) - 1):
                        tight.append(("wideband", e, f"const_{u:g}", est.outside_fraction))
                    if e == eps_min:
                        wb_const[u] = est
            files.append(w.rows("baselines.csv", ["system", "epsilon", "policy", "estimate", "stderr",
                                                  "n_paths", "outside_fraction", "mean_sq_norm"], rows))
            files.append(w.rows("tightness.csv", ["system", "epsilon", "policy", "outside_fraction"],
                                [(s, "" if e is None else repr(float(e)), pn, f) for s, e, pn, f in tight]))
            sol = state["ladder"]["estimates"][eps_min]
            worst = None
            for u, est in wb_const.items():
                margin = sol.estimate - (est.estimate - 2 * math.hypot(est.stderr, sol.stderr))
                if worst is None or margin < worst[0]:
                    worst = (margin, u)
            rep.checks.append(Check("policy_beats_constants", worst[0] >= 0, worst[0], 0.0,
                                    f"J(policy) - (J(const) - 2 combined stderr) at eps={eps_min:g}, "
                                    f"tightest u={worst[1]:g}"))
            max_out = max(t[3] for t in tight)
            rep.checks.append(Check("tightness", max_out < 0.01, max_out, 0.01,
                                    f"max post-burn-in time fraction outside [{box[0]:g}, {box[1]:g}]^2"))
            rep.outputs["baselines"] = {"rows": len(rows), "max_outside_fraction": max_out}
            rep.files["baselines"] = files
        say("baselines")
        _run_stage(rep, "baselines", s_base)
    except StageError:
        _finish(rep, w)
        raise
    _finish(rep, w)
    export_plot_data(rep)
    return rep


def _prolong(values, coarse: Grid, fine: Grid):
    """Bilinear interpolation of node values onto a finer grid of the same box."""
    from scipy.interpolate import RegularGridInterpolator
    f = RegularGridInterpolator((coarse.lx, coarse.ly), values)
    LX, LY = np.meshgrid(fine.lx, fine.ly, indexing="ij")
    pts = np.column_stack([np.clip(LX.ravel(), coarse.lx[0], coarse.lx[-1]),
                           np.clip(LY.ravel(), coarse.ly[0], coarse.ly[-1])])
    return f(pts).reshape(fine.shape)


def run_epsilon_ladder(cfg: ExperimentConfig, policy: PolicyTable, coeffs=None, spec=None,
                       diffusion=None, threads: int = 1, writer: _Writer | None = None,
                       keep: int = 3) -> dict:
    """Wideband reward of ``policy`` at each ``epsilon`` and its gap to the diffusion reward.

    Returns a dict with ``rows`` (epsilon, estimate, stderr, gap), the
    per-epsilon estimates, the trend check and any files written.  With more
    than one rung the gap must be nonincreasing within 2 combined standard
    errors.
    """
    spec = center_noise(cfg.chain) if spec is None else spec
    coeffs = averaged_coeffs(cfg.params, spec) if coeffs is None else coeffs
    if diffusion is None:
        diffusion = average_reward_diffusion(cfg.params, cfg.harvest, coeffs, policy,
                                             cfg.diffusion_config(_stage_seed(cfg, "diffusion")),
                                             cfg.n_paths, box=cfg.tightness_box, threads=threads)
    rows, ests, files, checks = [], {}, [], []
    for j, e in enumerate(cfg.epsilon_ladder):
        wcfg = cfg.wideband_config(e, _stage_seed(cfg, "wideband", j))
        est = average_reward_wideband(cfg.params, cfg.harvest, spec, policy, wcfg, cfg.n_paths,
                                      box=cfg.tightness_box, hist_grid=cfg.grid,
                                      keep_paths=keep if writer else 0, threads=threads)
        ests[e] = est
        gap = abs(est.estimate - diffusion.estimate)
        rows.append({"epsilon": e, "estimate": est.estimate, "stderr": est.stderr, "gap": gap,
                     "gap_stderr": math.hypot(est.stderr, diffusion.stderr),
                     "outside_fraction": est.outside_fraction})
        if writer is not None:
            files += _write_estimate(writer, f"wideband/{_ladder_tag(e)}", est, keep)
    if len(rows) > 1:
        worst = -math.inf
        for a, b in zip(rows, rows[1:]):
            excess = b["gap"] - a["gap"] - 2 * math.hypot(a["stderr"], b["stderr"])
            worst = max(worst, excess)
        checks.append(Check("ladder_gap_nonincreasing", worst <= 0, worst, 0.0,
                            "max over rungs of gap increase beyond 2 combined stderr"))
    table = ["epsilon", "estimate", "stderr", "gap", "gap_stderr", "outside_fraction"]
    if writer is not None:
        files.append(writer.rows("epsilon_ladder.csv", table, [[r[k] for k in table] for r in rows]))
    return {"rows": rows, "estimates": ests, "checks": checks, "files": files,
            "diffusion": diffusion, "csv_header": table}


def run_extinction_study(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> ExperimentReport:
    """Predator extinction under ``u in {0, M}`` on both systems.

    Refuses persistent configurations.  Passes when the median terminal
    predator density and every time-average reward are below ``1e-3``.
    """
    pc = persistence_check(cfg.params)
    if pc.persistent:
        raise ValueError(f"extinction study needs a negative persistence margin; this config has "
                         f"margin {pc.margin:.4g} (predator persists)")
    ex = {"t_end": 500.0, "burn_in": 100.0, "n_paths": 50, "epsilon": 0.3, **cfg.extinction}
    root = Path(out_dir if out_dir is not None else cfg.output_dir)
    w = _Writer(root)
    rep = ExperimentReport("extinction", cfg.hash(), root)
    w.json("config.json", cfg.to_dict())
    spec = center_noise(cfg.chain)
    coeffs = averaged_coeffs(cfg.params, spec)
    T = float(ex["t_end"])
    cps = (T / 4, T / 2, T)
    rows = []
    t0 = time.perf_counter()
    for k, u in enumerate((0.0, cfg.params.M)):
        pol = PolicyTable.constant(cfg.grid, u, cfg.params.M)
        dcfg = cfg.diffusion_config((cfg.seed, 90, k), t_end=T, burn_in=float(ex["burn_in"]))
        wcfg = cfg.wideband_config(ex["epsilon"], (cfg.seed, 91, k), t_end=T, burn_in=float(ex["burn_in"]))
        for system, est in (
            ("diffusion", average_reward_diffusion(cfg.params, cfg.harvest, coeffs, pol, dcfg,
                                                   int(ex["n_paths"]), threads=threads, checkpoints=cps)),
            ("wideband", average_reward_wideband(cfg.params, cfg.harvest, spec, pol, wcfg,
                                                 int(ex["n_paths"]), threads=threads, checkpoints=cps)),
        ):
            yT = est.terminal[:, 1]
            q = np.quantile(yT, [0.1, 0.5, 0.9])
            cp = [est.checkpoints[c][0] for c in cps]
            mono = all(b <= a + 1e-15 for a, b in zip(cp, cp[1:]))
            rows.append([system, u, q[0], q[1], q[2], est.estimate, est.stderr, *cp])
            tag = f"{system} u={u:g}"
            rep.checks.append(Check(f"median_terminal_predator[{tag}]", q[1] < 1e-3, q[1], 1e-3))
            rep.checks.append(Check(f"time_average_reward[{tag}]", est.estimate < 1e-3, est.estimate, 1e-3))
            rep.checks.append(Check(f"reward_checkpoints_monotone[{tag}]", mono, cp[-1] - cp[0], 0.0,
                                    "running average at t_end/4, t_end/2, t_end must not increase"))
    rep.timings["extinction"] = time.perf_counter() - t0
    rep.files["extinction"] = [w.rows(
        "extinction.csv", ["system", "u", "y_q10", "y_median", "y_q90", "reward", "reward_stderr",
                           "avg_t_quarter", "avg_t_half", "avg_t_end"], rows)]
    rep.outputs["extinction"] = {"margin": pc.margin, "rows": len(rows)}
    _finish(rep, w)
    return rep


def run_lyapunov_battery(cfg: ExperimentConfig, out_dir=None, threads: int = 1,
                         negative: ExperimentConfig | None = None) -> ExperimentReport:
    """Exponents, drift scans, the corrector identity, boundary averages and the
    comparison system; ``negative`` (an extinct config) is run as a control
    that must fail the boundary-average check."""
    root = Path(out_dir if out_dir is not None else cfg.output_dir)
    w = _Writer(root)
    rep = ExperimentReport("lyapunov", cfg.hash(), root)
    w.json("config.json", cfg.to_dict())
    ly = cfg.lyapunov
    p, hs = cfg.params, cfg.harvest
    t0 = time.perf_counter()
    spec = center_noise(cfg.chain)
    coeffs = averaged_coeffs(p, spec)
    lp = choose_exponents(p, hs, coeffs)
    files = [w.json("lyapunov/exponents.json", lp.to_dict())]
    s1, s2 = lp.slacks(p)
    rep.checks.append(Check("lambda_positive", lp.lam > 0, lp.lam, 0.0))
    rep.checks.append(Check("exponent_slack", min(s1, s2) >= 1e-6, min(s1, s2), 1e-6,
                            "smaller slack of the two exponent inequalities"))
    vg = Grid.from_dict(ly.get("verify_grid", {"x_min": 1e-8, "x_max": 1e3, "y_min": 1e-8,
                                                "y_max": 1e3, "nx": 120, "ny": 120}))
    reports = [drift_inequality_scan(p, hs, coeffs, lp, vg), v2_inequality_scan(p, hs, coeffs, vg)]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 80]))
    n_nodes = int(ly.get("sandwich_nodes", 100))
    nodes = np.exp(rng.uniform(math.log(1e-3), math.log(1e2), size=(n_nodes, 2)))
    reports.append(perturbed_sandwich_check(spec, p, lp, None, nodes))
    bd = {"delta": 1e-200, "T1": 120.0, "k0": 1.5, "n_paths": 20, "dt": 0.01, **ly.get("boundary", {})}
    reports.append(boundary_average_check(p, hs, coeffs, lp, bd["delta"], lp.H, bd["T1"], bd["k0"],
                                          int(bd["n_paths"]), (cfg.seed, 81), dt=bd["dt"], threads=threads))
    cmp_ = {"T0": 5000.0, "n_paths": 8, "dt": 0.01, **ly.get("comparison", {})}
    reports.append(comparison_check(p, hs, coeffs, lp, lp.H, cmp_["T0"], int(cmp_["n_paths"]),
                                    (cfg.seed, 82), dt=cmp_["dt"], threads=threads))
    for r in reports:
        files.append(w.report(f"lyapunov/{r.check}.json", r))
        rep.checks.append(Check(r.check, r.passed, r.worst_value, r.threshold))
    out = {"exponents": lp.to_dict(), "reports": {r.check: r.to_dict() for r in reports}}
    if negative is not None:
        nspec = center_noise(negative.chain)
        ncoeffs = averaged_coeffs(negative.params, nspec)
        neg = boundary_average_check(negative.params, negative.harvest, ncoeffs, lp, bd["delta"], lp.H,
                                     bd["T1"], bd["k0"], int(bd["n_paths"]), (cfg.seed, 83),
                                     dt=bd["dt"], threads=threads)
        neg.check = "boundary_average_negative_control"
        files.append(w.report("lyapunov/boundary_average_negative_control.json", neg))
        rep.checks.append(Check("negative_control_fails", not neg.passed, neg.worst_value, neg.threshold,
                                "boundary averages on extinct dynamics must fail"))
        out["negative_control"] = neg.to_dict()
    rep.timings["lyapunov"] = time.perf_counter() - t0
    rep.outputs["lyapunov"] = out
    rep.files["lyapunov"] = files
    _finish(rep, w)
    return rep


_FAMILIES = {
    "policy_heatmap": ("hjb", "hjb/policy.csv"),
    "value_function": ("hjb", "hjb/value.csv"),
    "epsilon_ladder": ("wideband", "epsilon_ladder.csv"),
}


def export_plot_data(report, out_dir=None) -> dict:
    """Collect plot-ready CSV families into ``plots/`` under the run directory.

    Families: policy heatmap, value function, occupation histograms, the
    epsilon-ladder table and sample paths (first 3 per system).  ``report``
    is an :class:`ExperimentReport` or a run directory containing
    ``report.json``.  A missing stage raises ``StageError`` naming it.
    """
    if isinstance(report, ExperimentReport):
        root, files = report.root, report.files
    else:
        root = Path(report)
        files = json.loads((root / "report.json").read_text(encoding="utf-8"))["files"]
    dest = Path(out_dir) if out_dir is not None else root / "plots"
    dest.mkdir(parents=True, exist_ok=True)
    for stage in ("hjb", "diffusion", "wideband"):
        if stage not in files:
            raise StageError(stage, "report lacks this stage's output; rerun the pipeline")
    out: dict = {}
    for fam, (stage, rel) in _FAMILIES.items():
        if rel not in files[stage]:
            raise StageError(stage, f"missing artifact {rel}")
        target = dest / f"{fam}.csv"
        target.write_bytes((root / rel).read_bytes())
        out[fam] = [target]
    occ, paths = [], []
    for stage in ("diffusion", "wideband"):
        for rel in files[stage]:
            name = rel.replace("/", "__")
            if rel.endswith("occupation.csv"):
                t = dest / f"occupation__{name}"
                t.write_bytes((root / rel).read_bytes())
                occ.append(t)
            elif "/path_" in rel:
                t = dest / f"paths__{name}"
                t.write_bytes((root / rel).read_bytes())
                paths.append(t)
    out["occupation"] = occ
    out["sample_paths"] = paths
    return out
