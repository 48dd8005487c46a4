"""Simulation of the limit controlled diffusion.

Log-Euler-Maruyama: with ``l = (log x, log y)``

    dl1 = (abar1 - b1 x - c1 y - a11/2) dt + s11 dW1 + s12 dW2
    dl2 = (abar2 - h(y) v(z) - b2 y + c2 x - a22/2) dt + s12 dW1 + s22 dW2

where ``a11 = s11^2 + s12^2`` and ``a22 = s12^2 + s22^2`` are the Ito
corrections.  Positivity is exact.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np

from ._kernels import h_eval, harvest_codes, phi_eval, policy_lookup
from .markov_noise import DiffusionCoeffs
from .model import HarvestSpec, ModelParams
from .paths import (PathRecord, RewardEstimate, SimulationError, path_seed, run_paths)
from .policy import Grid, PolicyTable
from .wideband import _check_initial, _record_times, _summarize

__all__ = [
    "DiffusionConfig",
    "simulate_diffusion",
    "average_reward_diffusion",
    "log_euler_step",
    "direct_euler_step",
    "MomentSeries",
    "moment_boundedness_check",
]


@dataclass(frozen=True)
class DiffusionConfig:
    dt: float
    t_end: float
    burn_in: float
    seed: int = 0
    initial: tuple = (0.5, 0.5)
    record_dt: float = 1.0
    # each Brownian increment is the sum of this many finer draws; the law is
    # unchanged, but a run at dt with value 2k shares its noise with a run at
    # dt/2 with value k (coupled step-size comparisons)
    draws_per_step: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.draws_per_step < 1:
            raise ValueError("draws_per_step must be at least 1")
        if not 0 <= self.burn_in < self.t_end:
            raise ValueError("need 0 <= burn_in < t_end")
        if not self.record_dt > 0:
            raise ValueError("record_dt must be positive")
        object.__setattr__(self, "initial", tuple(float(v) for v in self.initial))

    def check_against(self, params: ModelParams):
        if self.dt > 1e-2 / params.a1 * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds 1e-2 / a1 = {1e-2 / params.a1:.3g}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial"] = list(self.initial)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        return cls(**d)


def _rates(params: ModelParams, coeffs: DiffusionCoeffs):
    if coeffs.abar1 is None:
        raise ValueError("coefficients lack effective rates; use model.averaged_coeffs")
    return coeffs.abar1, coeffs.abar2


@numba.njit(cache=True, nogil=True)
def _diffusion_kernel(rng, par, hk, pk, table, lx0, ly0, hx, hy, sig, lx, ly,
                      dt, n_steps, burn_step, rec_idx, box_lo, box_hi, draws):
    # par: abar1 - a11/2, b1, c1, abar2 - a22/2, b2, c2, kappa, c
    nrec = rec_idx.shape[0]
    rec = np.empty((nrec, 6))
    k = 0
    R = 0.0
    Z2 = 0.0
    R_b = 0.0
    Z2_b = 0.0
    t_out = 0.0
    llo = math.log(box_lo)
    lhi = math.log(box_hi)
    sq = math.sqrt(dt / draws)
    s11 = sig[0, 0]
    s12 = sig[0, 1]
    s22 = sig[1, 1]
    ok = True
    step = 0
    for step in range(n_steps + 1):
        x = math.exp(lx)
        y = math.exp(ly)
        u = policy_lookup(table, lx0, ly0, hx, hy, lx, ly)
        hv = h_eval(hk, par[6], y)
        rate = phi_eval(pk, par[7], y * hv * u)
        if step == burn_step:
            R_b = R
            Z2_b = Z2
        while k < nrec and rec_idx[k] == step:
            rec[k, 0] = step * dt
            rec[k, 1] = lx
            rec[k, 2] = ly
            rec[k, 3] = u
            rec[k, 4] = rate
            rec[k, 5] = R
            k += 1
        if step == n_steps:
            break
        if step >= burn_step and (lx < llo or lx > lhi or ly < llo or ly > lhi):
            t_out += dt
        R += rate * dt
        Z2 += (x * x + y * y) * dt
        g1 = 0.0
        g2 = 0.0
        for _ in range(draws):
            g1 += rng.standard_normal() * sq
            g2 += rng.standard_normal() * sq
        lx = lx + (par[0] - par[1] * x - par[2] * y) * dt + s11 * g1 + s12 * g2
        ly = ly + (par[3] - hv * u - par[4] * y + par[5] * x) * dt + s12 * g1 + s22 * g2
        if not (lx < 700.0 and ly < 700.0):
            ok = False
            break
    stats = np.empty(7)
    stats[0] = R - R_b
    stats[1] = Z2 - Z2_b
    stats[2] = t_out
    stats[3] = step
    stats[4] = 1.0 if ok else 0.0
    stats[5] = step * dt
    stats[6] = 0.0
    return rec[:k], stats, lx, ly


def _run_one(params, hs, coeffs, policy, cfg, seed, rec_t, box, initial=None):
    z0 = cfg.initial if initial is None else initial
    _check_initial(z0)
    cfg.check_against(params)
    if policy.M > params.M + 1e-12:
        raise ValueError(f"policy effort cap {policy.M} exceeds model cap {params.M}")
    abar1, abar2 = _rates(params, coeffs)
    A = coeffs.A
    hk, kappa, pk, c = harvest_codes(hs)
    par = np.array([abar1 - 0.5 * A[0, 0], params.b1, params.c1, abar2 - 0.5 * A[1, 1],
                    params.b2, params.c2, kappa, c])
    table, lx0, ly0, hx, hy = policy.kernel_args
    n_steps = int(round(cfg.t_end / cfg.dt))
    burn_step = int(round(cfg.burn_in / cfg.dt))
    rec_idx = np.unique(np.rint(np.asarray(rec_t) / cfg.dt).astype(np.int64))
    rec_idx = rec_idx[(rec_idx >= 0) & (rec_idx <= n_steps)]
    rng = np.random.default_rng(seed)
    rec, stats, lx, ly = _diffusion_kernel(
        rng, par, hk, pk, table, lx0, ly0, hx, hy, np.ascontiguousarray(coeffs.sigma),
        math.log(z0[0]), math.log(z0[1]), float(cfg.dt), n_steps, burn_step, rec_idx,
        float(box[0]), float(box[1]), int(cfg.draws_per_step))
    if stats[4] == 0.0:
        raise SimulationError(f"non-finite state (overflow) at t={stats[5]:.6g} "
                              f"(log x={lx:.3g}, log y={ly:.3g})")
    record = PathRecord(rec[:, 0].copy(), np.exp(rec[:, 1]), np.exp(rec[:, 2]),
                        rec[:, 3].copy(), rec[:, 4].copy(), rec[:, 5].copy())
    return record, stats


def simulate_diffusion(params: ModelParams, hs: HarvestSpec, coeffs: DiffusionCoeffs,
                       policy: PolicyTable, cfg: DiffusionConfig, record_times=None) -> PathRecord:
    """One trajectory of the limit diffusion under ``policy``."""
    rec_t = _record_times(cfg.t_end, cfg.record_dt) if record_times is None else np.asarray(record_times, float)
    record, _ = _run_one(params, hs, coeffs, policy, cfg, cfg.seed, rec_t, (1.0, 1.0))
    return record


def average_reward_diffusion(params: ModelParams, hs: HarvestSpec, coeffs: DiffusionCoeffs,
                             policy: PolicyTable, cfg: DiffusionConfig, n_paths: int,
                             box=(1e-3, 1e3), hist_grid: Grid | None = None,
                             keep_paths: int = 0, threads: int = 1,
                             checkpoints=()) -> RewardEstimate:
    """Across-path mean of the post-burn-in time-average reward, with standard error."""
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    rec_t = _record_times(cfg.t_end, cfg.record_dt, checkpoints)

    def job(i):
        return _run_one(params, hs, coeffs, policy, cfg, path_seed(cfg.seed, i), rec_t, box)

    results = run_paths(job, n_paths, threads)
    return _summarize(results, cfg, n_paths, hist_grid, keep_paths, checkpoints, None)


def log_euler_step(params, hs, coeffs, z, u, dW, dt):
    """One log-Euler step from ``z`` with Brownian increment ``dW``."""
    x, y = z
    A, S = coeffs.A, coeffs.sigma
    abar1, abar2 = _rates(params, coeffs)
    hv = float(hs.h(y))
    lx = math.log(x) + (abar1 - 0.5 * A[0, 0] - params.b1 * x - params.c1 * y) * dt \
        + S[0, 0] * dW[0] + S[0, 1] * dW[1]
    ly = math.log(y) + (abar2 - 0.5 * A[1, 1] - hv * u - params.b2 * y + params.c2 * x) * dt \
        + S[0, 1] * dW[0] + S[1, 1] * dW[1]
    return np.array([math.exp(lx), math.exp(ly)])


def direct_euler_step(params, hs, coeffs, z, u, dW, dt):
    """One plain Euler-Maruyama step in the original coordinates."""
    x, y = z
    S = coeffs.sigma
    abar1, abar2 = _rates(params, coeffs)
    hv = float(hs.h(y))
    return np.array([
        x + x * (abar1 - params.b1 * x - params.c1 * y) * dt + x * (S[0, 0] * dW[0] + S[0, 1] * dW[1]),
        y + y * (abar2 - hv * u - params.b2 * y + params.c2 * x) * dt + y * (S[0, 1] * dW[0] + S[1, 1] * dW[1]),
    ])


@dataclass
class MomentSeries:
    times: np.ndarray
    means: np.ndarray
    stderr: np.ndarray
    passed: bool
    threshold: float
    worst_ratio: float


def moment_boundedness_check(params, hs, coeffs, policy, cfg: DiffusionConfig, theta: float,
                             V, n_paths: int = 200, t0: float = 1.0, tolerance: float = 0.2,
                             threads: int = 1) -> MomentSeries:
    """Sample means of ``V(Z(t))**theta`` at dyadic times ``t0 * 2**k <= t_end``.

    ``V`` is a callable ``V(x, y)`` (e.g. from the lyapunov module).  Passes
    when every consecutive ratio after burn-in is at most ``1 + tolerance``.
    """
    if not 0 < theta <= 0.5:
        raise ValueError("theta must lie in (0, 0.5]")
    kmax = int(math.floor(math.log2(cfg.t_end / t0) + 1e-12))
    times = np.concatenate([[0.0], t0 * 2.0 ** np.arange(kmax + 1)])

    def job(i):
        return _run_one(params, hs, coeffs, policy, cfg, path_seed(cfg.seed, i), times, (1.0, 1.0))[0]

    recs = run_paths(job, n_paths, threads)
    vals = np.array([np.asarray(V(r.x, r.y)) ** theta for r in recs])
    means = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(n_paths) if n_paths > 1 else np.zeros_like(means)
    t = recs[0].times
    after = np.flatnonzero(t >= cfg.burn_in)
    ratios = means[after[1:]] / means[after[:-1]] if after.size > 1 else np.array([1.0])
    worst = float(ratios.max()) if ratios.size else 1.0
    return MomentSeries(t, means, se, worst <= 1.0 + tolerance, 1.0 + tolerance, worst)
