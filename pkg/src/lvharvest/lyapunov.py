"""Numerical checks of the Lyapunov structure behind tightness.

The central object is

    V(x, y) = (1 + c2 x + c1 y) / (x^p1 y^p2)

which blows up at both axes and at infinity.  With ``psi = log V`` and
log-coordinate derivatives, the limit-diffusion generator satisfies

    L_u V / V = sum_i beta_i d_i psi + 1/2 sum_ij a_ij (d_ij psi + d_i psi d_j psi)

where ``beta`` is the log drift.  Everything here is closed form except the
boundary averages and the comparison system, which are Monte Carlo.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.integrate import trapezoid

from ._kernels import h_eval, harvest_codes
from .diffusion import DiffusionConfig
from .markov_noise import DiffusionCoeffs, JumpChainSpec, solve_poisson
from .model import HarvestSpec, ModelParams, persistence_check
from .paths import PathRecord, aggregate, path_seed, run_paths
from .policy import Grid

__all__ = [
    "LyapunovParams",
    "LyapunovFunctions",
    "VerificationReport",
    "ExponentSearchError",
    "choose_exponents",
    "find_box_radius",
    "drift_inequality_scan",
    "v2_inequality_scan",
    "perturbed_sandwich_check",
    "boundary_average_check",
    "comparison_system_simulate",
    "comparison_check",
    "lipschitz_estimates",
    "params_hash",
]


class ExponentSearchError(ValueError):
    pass


@dataclass(frozen=True)
class LyapunovParams:
    p0: float
    p1: float
    p2: float
    lam: float
    H: float | None = None
    readings: dict = field(default_factory=dict, compare=False, repr=False)

    def slacks(self, params: ModelParams) -> tuple[float, float]:
        p = params
        return (p.b1 - 2 * self.p0 - self.p1 * p.b1 - self.p2 * p.c2,
                p.c1 - 2 * self.p0 - self.p1 * p.c1 - self.p2 * p.b2)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("p0", "p1", "p2", "lam", "H")}
        d["readings"] = self.readings
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LyapunovParams":
        return cls(float(d["p0"]), float(d["p1"]), float(d["p2"]), float(d["lam"]),
                   None if d.get("H") is None else float(d["H"]), dict(d.get("readings", {})))


def _lambda(params: ModelParams, p1, p2):
    return np.minimum(p1 * params.a1 + p2 * params.s2, p2 * params.persistence_margin) / 11.0


def choose_exponents(params: ModelParams, hs: HarvestSpec | None = None,
                     coeffs: DiffusionCoeffs | None = None, n_scan: int = 121,
                     budget: float = 0.5) -> LyapunovParams:
    """Pick ``(p0, p1, p2)`` maximizing the threshold rate ``lam``.

    ``p1, p2`` are scanned on a log grid in ``(1e-4, 1)``.  Feasible points
    keep the quadratic-decay budgets ``p1 b1 + p2 c2`` and ``p1 c1 + p2 b2``
    at or below ``budget`` times ``b1`` and ``c1`` respectively, so that
    ``V`` decays at a definite rate far away; ``p0`` takes half of the
    remaining slack (``2 p0 = slack / 2``).  With ``hs`` and ``coeffs`` the
    drift-box radius ``H`` is filled in as well.

    ``readings`` records the signed reading used here (``p1 a1 + p2 s2 > 0``)
    and the literal one (``p1 a1 + p2 s2 < 0``), under which no positive
    threshold exists.
    """
    pc = persistence_check(params)
    if not pc.persistent:
        raise ExponentSearchError(
            f"parameters are not persistent (margin {pc.margin:.4g}); exponents are only "
            "defined when the predator persists")
    p = params
    grid = np.geomspace(1e-4, 1.0, n_scan + 1)[:-1]
    P1, P2 = np.meshgrid(grid, grid, indexing="ij")
    use1 = P1 * p.b1 + P2 * p.c2
    use2 = P1 * p.c1 + P2 * p.b2
    lam = _lambda(p, P1, P2)
    feasible = (use1 <= budget * p.b1) & (use2 <= budget * p.c1) & (lam > 0)
    if not feasible.any():
        raise ExponentSearchError(
            f"no feasible exponents on the {n_scan}x{n_scan} scan: max lambda "
            f"{lam.max():.3g}, min budget use {min(use1.min() / p.b1, use2.min() / p.c1):.3g}")
    k = np.argmax(np.where(feasible, lam, -np.inf))
    i, j = np.unravel_index(k, lam.shape)
    p1, p2 = float(P1[i, j]), float(P2[i, j])
    slack = min(p.b1 - p1 * p.b1 - p2 * p.c2, p.c1 - p1 * p.c1 - p2 * p.b2)
    p0 = slack / 4.0
    lam_lit = np.where((P1 * p.a1 + P2 * p.s2 < 0) & (use1 < p.b1) & (use2 < p.c1), lam, -np.inf)
    readings = {
        "signed": {"condition": "p1*a1 + p2*s2 > 0", "lambda": float(lam[i, j]),
                   "holds": bool(p1 * p.a1 + p2 * p.s2 > 0)},
        "literal": {"condition": "p1*a1 + p2*s2 < 0",
                    "best_lambda": float(lam_lit.max()) if np.isfinite(lam_lit.max()) else None,
                    "holds_at_choice": bool(p1 * p.a1 + p2 * p.s2 < 0),
                    "note": "no positive threshold is possible under this reading"},
        "scan_points": int(n_scan * n_scan),
        "feasible_points": int(feasible.sum()),
    }
    lp = LyapunovParams(p0, p1, p2, float(lam[i, j]), None, readings)
    if hs is not None and coeffs is not None:
        lp = LyapunovParams(p0, p1, p2, lp.lam, find_box_radius(params, hs, coeffs, lp), readings)
    return lp


class LyapunovFunctions:
    """``V``, ``V2``, ``f``, ``g`` and the generator ratios for one parameter set."""

    def __init__(self, params: ModelParams, coeffs: DiffusionCoeffs, lp: LyapunovParams,
                 hs: HarvestSpec | None = None):
        if coeffs.abar1 is None:
            raise ValueError("coefficients lack effective rates; use model.averaged_coeffs")
        self.params = params
        self.coeffs = coeffs
        self.lp = lp
        self.hs = hs

    def _N(self, x, y):
        return 1.0 + self.params.c2 * x + self.params.c1 * y

    def V(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self._N(x, y) * np.exp(-self.lp.p1 * np.log(x) - self.lp.p2 * np.log(y))

    def V2(self, x, y):
        return self._N(np.asarray(x, float), np.asarray(y, float))

    def grad_V(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        v = self.V(x, y)
        N = self._N(x, y)
        return v * (self.params.c2 / N - self.lp.p1 / x), v * (self.params.c1 / N - self.lp.p2 / y)

    def log_grads(self, x, y):
        """``(x V_x / V, y V_y / V)``: first log-coordinate derivatives of ``log V``."""
        N = self._N(x, y)
        return self.params.c2 * x / N - self.lp.p1, self.params.c1 * y / N - self.lp.p2

    def f(self, x, y):
        p, lp = self.params, self.lp
        return lp.p1 * (p.a1 - p.b1 * x - p.c1 * y) + lp.p2 * (p.s2 - p.b2 * y + p.c2 * x)

    def g(self, x, y):
        p, A = self.params, self.coeffs.A
        N = self._N(x, y)
        lin = (p.c2 * x * (self.coeffs.abar1 - p.b1 * x) + p.c1 * y * (self.coeffs.abar2 - p.b2 * y)) / N
        quad = (A[0, 0] * (p.c2 * x) ** 2 + A[1, 1] * (p.c1 * y) ** 2
                + 2 * A[0, 1] * p.c1 * p.c2 * x * y) / N ** 2
        return lin - 0.5 * quad

    def h(self, y):
        if self.hs is None:
            raise ValueError("no harvest spec attached")
        return self.hs.h(y)

    def generator_ratio(self, x, y, u, hs: HarvestSpec | None = None):
        """``L_u V / V`` of the limit diffusion, closed form."""
        hs = hs or self.hs
        p, A = self.params, self.coeffs.A
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        N = self._N(x, y)
        ex = p.c2 * x / N
        ey = p.c1 * y / N
        d1, d2 = ex - self.lp.p1, ey - self.lp.p2
        d11, d22, d12 = ex - ex ** 2, ey - ey ** 2, -ex * ey
        b1 = p.a1 - p.b1 * x - p.c1 * y
        b2 = p.s2 - hs.h(y) * u - p.b2 * y + p.c2 * x
        return (b1 * d1 + b2 * d2
                + 0.5 * (A[0, 0] * (d11 + d1 * d1) + A[1, 1] * (d22 + d2 * d2))
                + A[0, 1] * (d12 + d1 * d2))

    def generator_V2(self, x, y, u, hs: HarvestSpec | None = None):
        hs = hs or self.hs
        p, c = self.params, self.coeffs
        return (p.c2 * x * (c.abar1 - p.b1 * x - p.c1 * y)
                + p.c1 * y * (c.abar2 - hs.h(y) * u - p.b2 * y + p.c2 * x))


@dataclass(eq=False)
class VerificationReport:
    """Outcome of one check; ``details`` rows go to the CSV side file."""

    check: str
    params_hash: str
    passed: bool
    worst_value: float
    threshold: float
    details: list = field(default_factory=list, repr=False)
    extra: dict = field(default_factory=dict)
    details_csv_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "params_hash": self.params_hash,
            "pass": bool(self.passed),
            "worst_value": _jsonable(self.worst_value),
            "threshold": _jsonable(self.threshold),
            "details_csv_path": self.details_csv_path,
            "extra": _jsonable(self.extra),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def details_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        if self.details:
            keys = list(self.details[0].keys())
            w.writerow(keys)
            for row in self.details:
                w.writerow([_fmt(row[k]) for k in keys])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.check}.csv"
        csv_path.write_bytes(self.details_csv().encode("utf-8"))
        self.details_csv_path = csv_path.name
        js = out / f"{self.check}.json"
        js.write_bytes(self.to_json().encode("utf-8"))
        return js


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def params_hash(*objs) -> str:
    parts = []
    for o in objs:
        d = o.to_dict() if hasattr(o, "to_dict") else o
        parts.append(_jsonable(d))
    blob = json.dumps(parts, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _ray_points(radii, n_angles=64):
    # angles include near-axis directions so both axes are probed
    th = np.concatenate([[1e-9, 1e-6, 1e-3], np.linspace(0.0, 0.5 * np.pi, n_angles)[1:-1],
                         0.5 * np.pi - np.array([1e-3, 1e-6, 1e-9])])
    R, T = np.meshgrid(radii, th, indexing="ij")
    return R * np.cos(T), R * np.sin(T), R


def find_box_radius(params, hs, coeffs, lp, r_min=0.1, r_max=1e4, n_radii=161) -> float:
    """Smallest sampled radius beyond which ``L_u V / V <= -1`` for ``u in {0, M}``."""
    lf = LyapunovFunctions(params, coeffs, lp, hs)
    radii = np.geomspace(r_min, r_max, n_radii)
    X, Y, R = _ray_points(radii)
    worst = np.maximum(lf.generator_ratio(X, Y, 0.0), lf.generator_ratio(X, Y, params.M)).max(axis=1)
    # suffix maximum: worst value over all radii >= r
    tail = np.maximum.accumulate(worst[::-1])[::-1]
    ok = np.flatnonzero(tail <= -1.0)
    if ok.size == 0:
        raise ExponentSearchError(f"L V / V stays above -1 out to radius {r_max:g}")
    return float(radii[ok[0]])


def drift_inequality_scan(params: ModelParams, hs: HarvestSpec, coeffs: DiffusionCoeffs,
                          lp: LyapunovParams, grid: Grid, controls=None) -> VerificationReport:
    """``L_u V / V`` at every node for each control; must be ``<= -1`` where ``|z| >= H``."""
    if lp.H is None:
        raise ValueError("LyapunovParams.H is unset; call choose_exponents with hs and coeffs")
    controls = (0.0, params.M) if controls is None else tuple(controls)
    lf = LyapunovFunctions(params, coeffs, lp, hs)
    X, Y = grid.mesh()
    vals = np.stack([lf.generator_ratio(X, Y, u) for u in controls])
    worst = vals.max(axis=0)
    r = np.hypot(X, Y)
    outside = r >= lp.H
    sup_out = float(worst[outside].max()) if outside.any() else -np.inf
    C_H = float(worst[~outside].max()) if (~outside).any() else -np.inf
    if outside.any():
        k = np.argmax(np.where(outside, worst, -np.inf))
        wi = np.unravel_index(k, worst.shape)
        worst_node = {"i": int(wi[0]), "j": int(wi[1]), "x": float(X[wi]), "y": float(Y[wi])}
    else:
        worst_node = None
    details = [{"x": float(X[i, j]), "y": float(Y[i, j]), "outside": bool(outside[i, j]),
                **{f"ratio_u{k}": float(vals[k, i, j]) for k in range(len(controls))}}
               for i in range(grid.nx) for j in range(grid.ny)]
    return VerificationReport(
        "drift_inequality", params_hash(params, hs, lp), bool(sup_out <= -1.0), sup_out, -1.0,
        details, {"C_H": C_H, "H": lp.H, "controls": list(controls), "worst_node": worst_node})


def v2_inequality_scan(params: ModelParams, hs: HarvestSpec, coeffs: DiffusionCoeffs,
                       grid: Grid, controls=None) -> VerificationReport:
    """``L_u V2 <= K5 - V2 - beta |z|^2`` with ``K5`` measured on the grid.

    ``K5`` is the grid supremum of ``L_u V2 + V2 + beta |z|^2``; it must not
    exceed the completed-square bound of the same concave quadratic.
    """
    p, c = params, coeffs
    controls = (0.0, params.M) if controls is None else tuple(controls)
    beta = min(p.c2 * p.b1, p.c1 * p.b2) / 2.0
    lf = LyapunovFunctions(params, coeffs, LyapunovParams(0.0, 0.0, 0.0, 0.0), hs)
    X, Y = grid.mesh()
    res = np.stack([lf.generator_V2(X, Y, u) + lf.V2(X, Y) + beta * (X ** 2 + Y ** 2)
                    for u in controls]).max(axis=0)
    K5 = float(res.max())
    # u = 0 dominates; 1 + A x - D x^2 + B y - E y^2 with the cross terms cancelling
    qa, qb = p.c2 * (c.abar1 + 1.0), p.c1 * (c.abar2 + 1.0)
    da, db = p.c2 * p.b1 - beta, p.c1 * p.b2 - beta
    bound = 1.0 + max(qa, 0.0) ** 2 / (4 * da) + max(qb, 0.0) ** 2 / (4 * db)
    details = [{"x": float(X[i, j]), "y": float(Y[i, j]), "residual": float(res[i, j])}
               for i in range(grid.nx) for j in range(grid.ny)]
    return VerificationReport("v2_inequality", params_hash(params, hs), bool(K5 <= bound + 1e-9),
                              K5, bound, details, {"beta": beta, "K5": K5})


def perturbed_sandwich_check(spec: JumpChainSpec, params: ModelParams, lp: LyapunovParams,
                             epsilon: float | None, nodes) -> VerificationReport:
    """Corrector ``V1 = x r3 V_x + y r4 V_y`` with ``Q r3 = -r1``, ``Q r4 = -r2``.

    Checks ``Q V1 = -grad V . F`` node by node (relative to ``V``) and the
    sandwich ``|V1| <= K V``.  ``epsilon=None`` tests at ``0.5 / K``.
    """
    r3 = solve_poisson(spec, spec.r1)
    r4 = solve_poisson(spec, spec.r2)
    Q = spec.generator
    K = float(np.max(np.abs(r3) * (1 + lp.p1) + np.abs(r4) * (1 + lp.p2)))
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 2)
    p = params
    details = []
    ident = 0.0
    k_emp = 0.0
    eps = 0.5 / K if (epsilon is None and K > 0) else (epsilon or 0.0)
    sandwich_ok = True
    for x, y in nodes:
        N = 1 + p.c2 * x + p.c1 * y
        v = N * math.exp(-lp.p1 * math.log(x) - lp.p2 * math.log(y))
        d1, d2 = p.c2 * x / N - lp.p1, p.c1 * y / N - lp.p2
        V1 = v * (r3 * d1 + r4 * d2)
        dVF = v * (spec.r1 * d1 + spec.r2 * d2)
        err = np.max(np.abs(Q @ V1 + dVF)) / v
        ident = max(ident, err)
        ratio = float(np.max(np.abs(V1)) / v)
        k_emp = max(k_emp, ratio)
        ve = v + eps * V1
        ok = bool(np.all((1 - eps * K) * v <= ve * (1 + 1e-12)) and np.all(ve <= (1 + eps * K) * v * (1 + 1e-12)))
        sandwich_ok &= ok
        details.append({"x": x, "y": y, "identity_error": err, "ratio": ratio, "sandwich": ok})
    eps_max = 1.0 / k_emp if k_emp > 0 else math.inf
    passed = ident <= 1e-10 and k_emp <= K + 1e-12 and sandwich_ok
    return VerificationReport(
        "perturbed_sandwich", params_hash(spec, params, lp), bool(passed), ident, 1e-10, details,
        {"K": K, "K_empirical": k_emp, "epsilon_tested": eps, "epsilon_max": eps_max,
         "r3": r3.tolist(), "r4": r4.tolist()})


@numba.njit(cache=True, nogil=True)
def _boundary_kernel(rng, par, hk, kappa, sig, lx, ly, u, dt, n_steps, chk):
    # par: a1, b1, c1, s2, b2, c2, abar1, abar2, a11, a22, a12, p1, p2
    a1, b1, c1, s2, b2, c2 = par[0], par[1], par[2], par[3], par[4], par[5]
    ab1, ab2, a11, a22, a12, p1, p2 = par[6], par[7], par[8], par[9], par[10], par[11], par[12]
    sq = math.sqrt(dt)
    out = np.empty((chk.shape[0], 3))
    F = 0.0
    G = 0.0
    Hh = 0.0
    k = 0
    for step in range(n_steps + 1):
        while k < chk.shape[0] and chk[k] == step:
            out[k, 0] = F
            out[k, 1] = G
            out[k, 2] = Hh
            k += 1
        if step == n_steps:
            break
        x = math.exp(lx)
        y = math.exp(ly)
        hv = h_eval(hk, kappa, y)
        N = 1.0 + c2 * x + c1 * y
        F += (p1 * (a1 - b1 * x - c1 * y) + p2 * (s2 - b2 * y + c2 * x)) * dt
        G += ((c2 * x * (ab1 - b1 * x) + c1 * y * (ab2 - b2 * y)) / N
              - 0.5 * (a11 * (c2 * x) ** 2 + a22 * (c1 * y) ** 2 + 2 * a12 * c1 * c2 * x * y) / (N * N)) * dt
        Hh += hv * dt
        g1 = rng.standard_normal() * sq
        g2 = rng.standard_normal() * sq
        lx = lx + (a1 - b1 * x - c1 * y) * dt + sig[0, 0] * g1 + sig[0, 1] * g2
        ly = ly + (s2 - hv * u - b2 * y + c2 * x) * dt + sig[0, 1] * g1 + sig[1, 1] * g2
    return out


def boundary_start_points(delta: float, H: float) -> np.ndarray:
    """16 start points on the strips ``[0,H]x[0,delta] U [0,delta]x[0,H]``.

    Eight sit at height ``delta / 2`` with ``x`` in ``{delta/2, H/7, ..., H}``,
    seven mirror them across the diagonal and one more sits at ``(delta/2, H/14)``.
    """
    along = np.concatenate([[delta / 2], np.linspace(H / 7, H, 7)])
    a = np.column_stack([along, np.full(8, delta / 2)])
    b = np.column_stack([np.full(8, delta / 2), np.concatenate([along[1:], [H / 14]])])
    return np.vstack([a, b])


def boundary_average_check(params: ModelParams, hs: HarvestSpec, coeffs: DiffusionCoeffs,
                           lp: LyapunovParams, delta: float, H: float, T1: float, k0: float,
                           n_paths: int, seed, dt: float = 0.01, n_times: int = 6,
                           controls=None, threads: int = 1, lam: float | None = None) -> VerificationReport:
    """Time averages of ``f``, ``g`` and ``h(Y)`` from starts near the axes.

    For each of 16 start points on the boundary strips and each endpoint
    control, ``(1/t) int_0^t E f``, ``E g`` and ``E h(Y)`` are estimated at
    ``n_times`` horizons in ``[T1, (k0 + 1) T1]``.  Passes when, with 2
    standard errors of slack, every f-average exceeds ``9 lam``, every
    g-average is at most ``lam`` and every h-average at most ``lam / (p2 M)``.
    ``lam`` defaults to ``lp.lam``; starts use log coordinates, so
    ``delta`` may be astronomically small.
    """
    if k0 <= 1:
        raise ValueError("k0 must exceed 1")
    lam = lp.lam if lam is None else lam
    controls = (0.0, params.M) if controls is None else tuple(controls)
    T2 = (k0 + 1) * T1
    times = np.linspace(T1, T2, n_times)
    n_steps = int(round(T2 / dt))
    chk = np.rint(times / dt).astype(np.int64)
    starts = boundary_start_points(delta, H)
    hk, kappa, _, _ = harvest_codes(hs)
    A = coeffs.A
    par = np.array([params.a1, params.b1, params.c1, params.s2, params.b2, params.c2,
                    coeffs.abar1, coeffs.abar2, A[0, 0], A[1, 1], A[0, 1], lp.p1, lp.p2])
    sig = np.ascontiguousarray(coeffs.sigma)
    h_thr = lam / (lp.p2 * params.M) if params.M > 0 else math.inf
    details = []
    f_min = math.inf
    g_max = -math.inf
    h_max = -math.inf
    ok = True
    for si, (x0, y0) in enumerate(starts):
        for ui, u in enumerate(controls):
            def job(i, x0=x0, y0=y0, u=u, si=si, ui=ui):
                rng = np.random.default_rng(path_seed(seed, (si * len(controls) + ui) * 1_000_003 + i))
                return _boundary_kernel(rng, par, hk, kappa, sig, math.log(x0), math.log(y0),
                                        float(u), float(dt), n_steps, chk)

            res = np.array(run_paths(job, n_paths, threads))  # (paths, times, 3)
            avg = res / times[None, :, None]
            for ti, t in enumerate(times):
                fm, fs = aggregate(avg[:, ti, 0])
                gm, gs = aggregate(avg[:, ti, 1])
                hm, hsd = aggregate(avg[:, ti, 2])
                fs, gs, hsd = (0.0 if not math.isfinite(s) else s for s in (fs, gs, hsd))
                f_ok = fm + 2 * fs > 9 * lam
                g_ok = gm - 2 * gs <= lam
                h_ok = hm - 2 * hsd <= h_thr
                ok &= f_ok and g_ok and h_ok
                f_min = min(f_min, fm)
                g_max = max(g_max, gm)
                h_max = max(h_max, hm)
                details.append({"x0": x0, "y0": y0, "u": float(u), "t": float(t),
                                "f_avg": fm, "f_se": fs, "g_avg": gm, "g_se": gs,
                                "h_avg": hm, "h_se": hsd, "pass": bool(f_ok and g_ok and h_ok)})
    extra = {"lambda": lam, "f_threshold": 9 * lam, "g_threshold": lam, "h_threshold": h_thr,
             "f_min": f_min, "g_max": g_max, "h_max": h_max, "delta": delta, "H": H,
             "T1": T1, "T2": T2, "n_paths": n_paths}
    return VerificationReport("boundary_average", params_hash(params, hs, lp), bool(ok),
                              f_min, 9 * lam, details, extra)


@numba.njit(cache=True, nogil=True)
def _comparison_kernel(rng, par, hk, kappa, sig, lxt, lyt, lx, ly, u, coupled, dt, n_steps, rec_idx):
    # par: abar1, b1, a11, a22, tilde_y_log_drift_const, b2, a1, c1, s2, c2
    ab1, b1, a11, a22, ky, b2 = par[0], par[1], par[2], par[3], par[4], par[5]
    a1, c1, s2, c2 = par[6], par[7], par[8], par[9]
    sq = math.sqrt(dt)
    rec = np.empty((rec_idx.shape[0], 6))
    k = 0
    I = 0.0
    for step in range(n_steps + 1):
        while k < rec_idx.shape[0] and rec_idx[k] == step:
            rec[k, 0] = step * dt
            rec[k, 1] = lxt
            rec[k, 2] = lyt
            rec[k, 3] = I
            rec[k, 4] = lx
            rec[k, 5] = ly
            k += 1
        if step == n_steps:
            break
        xt = math.exp(lxt)
        yt = math.exp(lyt)
        I += yt * dt
        g1 = rng.standard_normal() * sq
        g2 = rng.standard_normal() * sq
        n1 = sig[0, 0] * g1 + sig[0, 1] * g2
        n2 = sig[0, 1] * g1 + sig[1, 1] * g2
        if coupled:
            x = math.exp(lx)
            y = math.exp(ly)
            hv = h_eval(hk, kappa, y)
            lx = lx + (a1 - b1 * x - c1 * y) * dt + n1
            ly = ly + (s2 - hv * u - b2 * y + c2 * x) * dt + n2
        lxt = lxt + (ab1 - 0.5 * a11 - b1 * xt) * dt + n1
        lyt = lyt + (ky - b2 * yt) * dt + n2
    return rec


def comparison_system_simulate(params: ModelParams, coeffs: DiffusionCoeffs, cfg: DiffusionConfig,
                               coupled_with: tuple | None = None):
    """Decoupled comparison pair ``(X~, Y~)`` under the limit diffusion's noise.

    ``X~`` is logistic with rate ``abar1``; ``Y~`` has log drift
    ``-|s2|/2 - a22 - a22/2 - b2 Y~``.  The returned record stores ``Y~`` in
    ``rewards`` and ``int_0^t Y~`` in ``cumulative`` so that
    ``running_average`` is the time average of ``Y~``.

    ``coupled_with=(hs, u)`` also runs the original pair ``(X, Y)`` with
    effort ``u`` on the same Brownian increments, started at ``cfg.initial``,
    and returns ``(tilde_record, original_record)``.
    """
    A = coeffs.A
    ky = -abs(params.s2) / 2 - A[1, 1] - 0.5 * A[1, 1]
    par = np.array([coeffs.abar1, params.b1, A[0, 0], A[1, 1], ky, params.b2,
                    params.a1, params.c1, params.s2, params.c2])
    n_steps = int(round(cfg.t_end / cfg.dt))
    rec_every = max(1, int(round(cfg.record_dt / cfg.dt)))
    rec_idx = np.arange(0, n_steps + 1, rec_every, dtype=np.int64)
    if rec_idx[-1] != n_steps:
        rec_idx = np.append(rec_idx, n_steps)
    if coupled_with is None:
        hk, kappa, u, coupled = 0, 1.0, 0.0, False
    else:
        hs, u = coupled_with
        hk, kappa, _, _ = harvest_codes(hs)
        coupled = True
    x0, y0 = cfg.initial
    rng = np.random.default_rng(cfg.seed if isinstance(cfg.seed, np.random.SeedSequence) else path_seed(cfg.seed, 0))
    rec = _comparison_kernel(rng, par, hk, kappa, np.ascontiguousarray(coeffs.sigma),
                             math.log(x0), math.log(y0), math.log(x0), math.log(y0), float(u),
                             coupled, float(cfg.dt), n_steps, rec_idx)
    yt = np.exp(rec[:, 2])
    zeros = np.zeros(len(rec))
    tilde = PathRecord(rec[:, 0].copy(), np.exp(rec[:, 1]), yt, zeros, yt, rec[:, 3].copy())
    if not coupled:
        return tilde
    orig = PathRecord(rec[:, 0].copy(), np.exp(rec[:, 4]), np.exp(rec[:, 5]),
                      np.full(len(rec), float(u)), zeros.copy(), zeros.copy())
    return tilde, orig


def lipschitz_estimates(params: ModelParams, hs: HarvestSpec, coeffs: DiffusionCoeffs,
                        lp: LyapunovParams, H: float, n: int = 201) -> dict:
    """Sampled difference-quotient bounds for ``f``, ``g`` on ``[0,H]^2`` and ``h`` on ``[0,H]``."""
    lf = LyapunovFunctions(params, coeffs, lp, hs)
    s = np.linspace(0.0, H, n)
    d = s[1] - s[0]
    X, Y = np.meshgrid(s, s, indexing="ij")
    out = {}
    for name, fn in (("f", lf.f), ("g", lf.g)):
        v = fn(X, Y)
        gx = np.abs(np.diff(v, axis=0)) / d
        gy = np.abs(np.diff(v, axis=1)) / d
        out[name] = float(np.hypot(gx[:, :-1], gy[:-1, :]).max())
    out["h"] = float((np.abs(np.diff(hs.h(s))) / d).max())
    out["ell"] = max(out.values())
    return out


def comparison_check(params: ModelParams, hs: HarvestSpec, coeffs: DiffusionCoeffs,
                     lp: LyapunovParams, H: float, T0: float, n_paths: int, seed,
                     dt: float = 0.01, threads: int = 1, n_starts: int = 4) -> VerificationReport:
    """Comparison-system averages: ``f(X~, 0) >= 10 lam`` over ``[0, T0]`` and
    ``Y~`` averaged over ``[0, 2 T0]`` below ``lam / (2 (1 + M) ell)``."""
    lf = LyapunovFunctions(params, coeffs, lp, hs)
    ell = lipschitz_estimates(params, hs, coeffs, lp, H)["ell"]
    y_thr = lp.lam / (2 * (1 + params.M) * ell)
    starts = np.linspace(H / n_starts, H, n_starts)
    details = []
    ok = True
    f_min = math.inf
    for si, s in enumerate(starts):
        cfg = DiffusionConfig(dt, 2 * T0, 0.0, seed=seed, initial=(s, s), record_dt=T0 / 100)

        def job(i, cfg=cfg, si=si):
            c = DiffusionConfig(cfg.dt, cfg.t_end, 0.0, seed=path_seed(seed, si * 1_000_003 + i),
                                initial=cfg.initial, record_dt=cfg.record_dt)
            return comparison_system_simulate(params, coeffs, c)

        recs = run_paths(job, n_paths, threads)
        # f along X~ with y = 0, integrated by the trapezoid rule on the record grid
        favg = []
        for r in recs:
            fv = lf.f(r.x, 0.0)
            m = r.times <= T0 + 1e-9
            favg.append(trapezoid(fv[m], r.times[m]) / T0)
        fm, fs = aggregate(np.array(favg))
        ym, ys = aggregate(np.array([r.cumulative[-1] / r.times[-1] for r in recs]))
        f_ok = fm + 2 * fs >= 10 * lp.lam
        y_ok = ym - 2 * ys <= y_thr
        ok &= f_ok and y_ok
        f_min = min(f_min, fm)
        details.append({"start": float(s), "f_avg": fm, "f_se": fs, "ytilde_avg": ym,
                        "ytilde_se": ys, "pass": bool(f_ok and y_ok)})
    return VerificationReport("comparison_system", params_hash(params, hs, lp), bool(ok), f_min,
                              10 * lp.lam, details, {"y_threshold": y_thr, "ell": ell, "T0": T0})
