"""Simulation of the wideband-noise system as a piecewise-deterministic process.

Between jumps of the fast chain ``xi(t / eps^2)`` the state follows the ODE

    d(log x)/dt = a1 - b1 x - c1 y + r1(w) / eps
    d(log y)/dt = s2 - h(y) v(x, y) - b2 y + c2 x + r2(w) / eps

which is integrated with classical RK4 in log coordinates.  Positivity holds
by construction.  Reward and ``|z|^2`` are carried as extra quadrature
components of the same RK4 step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numba
import numpy as np

from ._kernels import h_eval, harvest_codes, phi_eval, policy_lookup
from .markov_noise import JumpChainSpec, stationary_distribution
from .model import HarvestSpec, ModelParams
from .paths import (PathRecord, RewardEstimate, SimulationError, aggregate,
                    occupation_histogram, path_seed, run_paths)
from .policy import Grid, PolicyTable

__all__ = ["WidebandConfig", "simulate_wideband", "average_reward_wideband"]


@dataclass(frozen=True)
class WidebandConfig:
    epsilon: float
    t_end: float
    burn_in: float
    max_substep: float = 0.05
    seed: int = 0
    initial: tuple = (0.5, 0.5)
    record_dt: float = 1.0
    step_budget: float = 2e9

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if not 0 <= self.burn_in < self.t_end:
            raise ValueError("need 0 <= burn_in < t_end")
        if not self.max_substep > 0:
            raise ValueError("max_substep must be positive")
        if not self.record_dt > 0:
            raise ValueError("record_dt must be positive")
        object.__setattr__(self, "initial", tuple(float(v) for v in self.initial))

    def substep(self, spec: JumpChainSpec) -> float:
        return min(self.max_substep, self.epsilon ** 2 / (10.0 * float(spec.rates.max())))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial"] = list(self.initial)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WidebandConfig":
        return cls(**d)


@numba.njit(cache=True, nogil=True, inline="always")
def _field(par, hk, pk, table, lx0, ly0, hx, hy, n1, n2, lx, ly):
    x = math.exp(lx)
    y = math.exp(ly)
    u = policy_lookup(table, lx0, ly0, hx, hy, lx, ly)
    hv = h_eval(hk, par[6], y)
    f0 = par[0] - par[1] * x - par[2] * y + n1
    f1 = par[3] - hv * u - par[4] * y + par[5] * x + n2
    f2 = phi_eval(pk, par[7], y * hv * u)
    f3 = x * x + y * y
    return f0, f1, f2, f3


@numba.njit(cache=True, nogil=True)
def _segment(par, hk, pk, table, lx0, ly0, hx, hy, n1, n2,
             t0, t1, lx, ly, R, Z2, h_max, rec_t, rec, k, count_out, box_lo, box_hi, t_out):
    span = t1 - t0
    n = int(math.ceil(span / h_max))
    if n < 1:
        n = 1
    h = span / n
    llo = math.log(box_lo)
    lhi = math.log(box_hi)
    nrec = rec_t.shape[0]
    t = t0
    for s in range(n):
        te = t0 + (s + 1) * h if s < n - 1 else t1
        if count_out and (lx < llo or lx > lhi or ly < llo or ly > lhi):
            t_out += te - t
        a0, a1, a2, a3 = _field(par, hk, pk, table, lx0, ly0, hx, hy, n1, n2, lx, ly)
        b0, b1, b2, b3 = _field(par, hk, pk, table, lx0, ly0, hx, hy, n1, n2,
                                lx + 0.5 * h * a0, ly + 0.5 * h * a1)
        c0, c1, c2, c3 = _field(par, hk, pk, table, lx0, ly0, hx, hy, n1, n2,
                                lx + 0.5 * h * b0, ly + 0.5 * h * b1)
        d0, d1, d2, d3 = _field(par, hk, pk, table, lx0, ly0, hx, hy, n1, n2,
                                lx + h * c0, ly + h * c1)
        lx_n = lx + h / 6.0 * (a0 + 2.0 * b0 + 2.0 * c0 + d0)
        ly_n = ly + h / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1)
        R_n = R + h / 6.0 * (a2 + 2.0 * b2 + 2.0 * c2 + d2)
        Z_n = Z2 + h / 6.0 * (a3 + 2.0 * b3 + 2.0 * c3 + d3)
        while k < nrec and rec_t[k] <= te:
            al = (rec_t[k] - t) / (te - t)
            rlx = lx + al * (lx_n - lx)
            rly = ly + al * (ly_n - ly)
            u = policy_lookup(table, lx0, ly0, hx, hy, rlx, rly)
            yy = math.exp(rly)
            rec[k, 0] = rec_t[k]
            rec[k, 1] = rlx
            rec[k, 2] = rly
            rec[k, 3] = u
            rec[k, 4] = phi_eval(pk, par[7], yy * h_eval(hk, par[6], yy) * u)
            rec[k, 5] = R + al * (R_n - R)
            k += 1
        lx, ly, R, Z2 = lx_n, ly_n, R_n, Z_n
        t = te
        if not (lx < 700.0 and ly < 700.0):
            return lx, ly, R, Z2, k, t_out, n, t, False
    return lx, ly, R, Z2, k, t_out, n, t, True


@numba.njit(cache=True, nogil=True)
def _wideband_kernel(rng, par, hk, pk, table, lx0, ly0, hx, hy,
                     rates, cum, r1, r2, eps, lx, ly, w, t_end, burn_in, h_max,
                     rec_t, box_lo, box_hi):
    nrec = rec_t.shape[0]
    rec = np.empty((nrec, 6))
    k = 0
    if nrec > 0 and rec_t[0] <= 0.0:
        u = policy_lookup(table, lx0, ly0, hx, hy, lx, ly)
        yy = math.exp(ly)
        rec[0, 0] = 0.0
        rec[0, 1] = lx
        rec[0, 2] = ly
        rec[0, 3] = u
        rec[0, 4] = phi_eval(pk, par[7], yy * h_eval(hk, par[6], yy) * u)
        rec[0, 5] = 0.0
        k = 1
    R = 0.0
    Z2 = 0.0
    R_b = 0.0
    Z2_b = 0.0
    t_out = 0.0
    burned = burn_in <= 0.0
    inv_eps = 1.0 / eps
    speed = 1.0 / (eps * eps)
    nstate = rates.shape[0]
    t = 0.0
    steps = 0
    ok = True
    while t < t_end and ok:
        tj = t + rng.exponential(1.0) / (rates[w] * speed)
        seg_end = tj if tj < t_end else t_end
        n1 = r1[w] * inv_eps
        n2 = r2[w] * inv_eps
        if not burned and seg_end >= burn_in:
            lx, ly, R, Z2, k, t_out, ns, t, ok = _segment(
                par, hk, pk, table, lx0, ly0, hx, hy, n1, n2, t, burn_in, lx, ly, R, Z2,
                h_max, rec_t, rec, k, False, box_lo, box_hi, t_out)
            steps += ns
            burned = True
            R_b = R
            Z2_b = Z2
            t = burn_in
            if not ok:
                break
        if seg_end > t:
            lx, ly, R, Z2, k, t_out, ns, t, ok = _segment(
                par, hk, pk, table, lx0, ly0, hx, hy, n1, n2, t, seg_end, lx, ly, R, Z2,
                h_max, rec_t, rec, k, burned, box_lo, box_hi, t_out)
            steps += ns
        t = seg_end if ok else t
        if tj < t_end:
            u = rng.random()
            nxt = nstate - 1
            for j in range(nstate):
                if u < cum[w, j]:
                    nxt = j
                    break
            w = nxt
    stats = np.empty(7)
    stats[0] = R - R_b
    stats[1] = Z2 - Z2_b
    stats[2] = t_out
    stats[3] = steps
    stats[4] = 1.0 if ok else 0.0
    stats[5] = t
    stats[6] = w
    return rec[:k], stats, lx, ly


def _record_times(t_end: float, record_dt: float, extra=()) -> np.ndarray:
    n = int(math.floor(t_end / record_dt + 1e-9))
    base = np.arange(n + 1) * record_dt
    if base[-1] < t_end:
        base = np.append(base, t_end)
    if len(extra):
        base = np.union1d(base, np.asarray(extra, dtype=float))
    return base[base <= t_end]


def _check_initial(z):
    x, y = z
    if not (x > 0 and y > 0 and math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"initial state must lie in the open quadrant, got {z}")


def _run_one(params, hs, spec, policy, cfg, seed, rec_t, box, initial_state=None):
    _check_initial(cfg.initial)
    if policy.M > params.M + 1e-12:
        raise ValueError(f"policy effort cap {policy.M} exceeds model cap {params.M}")
    h_max = cfg.substep(spec)
    projected = cfg.t_end / h_max + cfg.t_end * float(spec.rates.max()) / cfg.epsilon ** 2
    if projected > cfg.step_budget:
        raise SimulationError(
            f"epsilon={cfg.epsilon} needs about {projected:.3g} substeps, over the budget "
            f"{cfg.step_budget:.3g}; raise step_budget or shorten t_end")
    rng = np.random.default_rng(seed)
    if initial_state is None:
        w0 = int(rng.choice(spec.n, p=stationary_distribution(spec)))
    else:
        w0 = spec.index(initial_state)
    hk, kappa, pk, c = harvest_codes(hs)
    par = np.array([params.a1, params.b1, params.c1, params.s2, params.b2, params.c2, kappa, c])
    table, lx0, ly0, hx, hy = policy.kernel_args
    cum = np.cumsum(spec.kernel, axis=1)
    cum[:, -1] = 1.0
    rec, stats, lx, ly = _wideband_kernel(
        rng, par, hk, pk, table, lx0, ly0, hx, hy, spec.rates, cum,
        np.ascontiguousarray(spec.r1), np.ascontiguousarray(spec.r2), float(cfg.epsilon),
        math.log(cfg.initial[0]), math.log(cfg.initial[1]), w0, float(cfg.t_end),
        float(cfg.burn_in), h_max, rec_t, float(box[0]), float(box[1]))
    if stats[4] == 0.0:
        raise SimulationError(f"non-finite state (overflow) at t={stats[5]:.6g} "
                              f"(log x={lx:.3g}, log y={ly:.3g})")
    record = PathRecord(rec[:, 0].copy(), np.exp(rec[:, 1]), np.exp(rec[:, 2]),
                        rec[:, 3].copy(), rec[:, 4].copy(), rec[:, 5].copy())
    return record, stats


def simulate_wideband(params: ModelParams, hs: HarvestSpec, spec: JumpChainSpec,
                      policy: PolicyTable, cfg: WidebandConfig, initial_state=None,
                      record_times=None) -> PathRecord:
    """One trajectory of the wideband system under the feedback ``policy``.

    The chain starts in ``initial_state`` (a label) or, by default, is drawn
    from its stationary law.  States are recorded every ``cfg.record_dt``
    (or at ``record_times``) by interpolation inside the RK4 substep.
    """
    rec_t = _record_times(cfg.t_end, cfg.record_dt) if record_times is None else np.asarray(record_times, float)
    record, _ = _run_one(params, hs, spec, policy, cfg, cfg.seed, rec_t, (1.0, 1.0), initial_state)
    return record


def average_reward_wideband(params: ModelParams, hs: HarvestSpec, spec: JumpChainSpec,
                            policy: PolicyTable, cfg: WidebandConfig, n_paths: int,
                            box=(1e-3, 1e3), hist_grid: Grid | None = None,
                            keep_paths: int = 0, threads: int = 1,
                            checkpoints=()) -> RewardEstimate:
    """Long-run average reward of ``policy`` on the wideband system.

    Path ``i`` uses the stream ``SeedSequence([*seed, i])``, so the result does
    not depend on the number of worker threads.  ``box = (delta, R)`` sets the
    square whose complement's post-burn-in occupation time is reported as
    ``outside_fraction``; ``checkpoints`` lists times at which the mean
    cumulative time-average reward is also returned.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    rec_t = _record_times(cfg.t_end, cfg.record_dt, checkpoints)

    def job(i):
        return _run_one(params, hs, spec, policy, cfg, path_seed(cfg.seed, i), rec_t, box)

    results = run_paths(job, n_paths, threads)
    return _summarize(results, cfg, n_paths, hist_grid, keep_paths, checkpoints, cfg.epsilon)


def _summarize(results, cfg, n_paths, hist_grid, keep_paths, checkpoints, epsilon):
    horizon = cfg.t_end - cfg.burn_in
    per_path = np.array([s[0] / horizon for _, s in results])
    est, se = aggregate(per_path)
    z2 = aggregate(np.array([s[1] / horizon for _, s in results]))[0]
    out = aggregate(np.array([s[2] / horizon for _, s in results]))[0]
    terminal = np.array([[r.x[-1], r.y[-1]] for r, _ in results])
    hist = None
    if hist_grid is not None:
        hist = occupation_histogram([r.after(cfg.burn_in) for r, _ in results], hist_grid)
    cps = {}
    for tc in checkpoints:
        vals = []
        for r, _ in results:
            k = int(np.searchsorted(r.times, tc))
            vals.append(r.cumulative[k] / r.times[k])
        cps[float(tc)] = aggregate(np.array(vals))
    return RewardEstimate(
        estimate=est, stderr=se, n_paths=n_paths, t_end=cfg.t_end, burn_in=cfg.burn_in,
        epsilon=epsilon, per_path=per_path, mean_sq_norm=z2, outside_fraction=out,
        terminal=terminal, records=[r for r, _ in results[:keep_paths]], histogram=hist,
        checkpoints=cps,
    )
