"""Ergodic HJB solver for the limit diffusion.

The diffusion is written in ``l = (log x, log y)`` where its covariance is
the constant matrix ``A``.  A locally consistent Markov chain on a uniform
log grid (upwind drift, diagonal moves for the cross term) approximates it;
the average-reward optimality equation of that chain

    max_u [ sum_z' q(z'|z,u) (V(z') - V(z)) + Phi(y h(y) u) ] = rho

is solved by relative value iteration after uniformizing the jump rates.
Moves leaving the box are reflected onto the boundary node.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ._kernels import YIELD_LINEAR, h_eval, harvest_codes, phi_eval
from .markov_noise import DiffusionCoeffs
from .model import HarvestSpec, ModelParams
from .policy import Grid, PolicyTable

__all__ = [
    "Grid",
    "PolicyTable",
    "ValueFunction",
    "ControlledChain",
    "HJBConvergenceError",
    "build_mdp",
    "pointwise_max",
    "solve_average_reward",
    "policy_evaluation",
    "hjb_residual",
    "lipschitz_regularize",
    "STENCIL",
]

# neighbour offsets of the 9-point stencil, index 4 is the node itself
STENCIL = np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)])
GOLDEN_TOL = 1e-8


class HJBConvergenceError(RuntimeError):
    pass


@dataclass(eq=False)
class ControlledChain:
    """Jump rates of the approximating chain, split into control-free parts and
    the control-dependent vertical drift ``by0 - h(y) u``."""

    params: ModelParams
    hs: HarvestSpec
    coeffs: DiffusionCoeffs
    grid: Grid
    rate_xp: np.ndarray
    rate_xm: np.ndarray
    rate_y: np.ndarray
    diag_pp: float
    diag_pm: float
    by0: np.ndarray
    hv: np.ndarray
    dt_bar: float

    @property
    def M(self) -> float:
        return self.params.M

    def drift(self, efforts) -> tuple[np.ndarray, np.ndarray]:
        """Log-coordinate drift ``(bx, by)`` at every node under ``efforts``."""
        g = self.grid
        bx = (self.rate_xp - self.rate_xm) * g.hx
        by = self.by0 - self.hv * np.asarray(efforts, dtype=float)
        return bx, by

    def rates(self, efforts) -> np.ndarray:
        """Jump rates to the 8 neighbours, shape ``(nx, ny, 9)`` (centre is 0)."""
        g = self.grid
        u = np.broadcast_to(np.asarray(efforts, dtype=float), g.shape)
        by = self.by0 - self.hv * u
        R = np.zeros(g.shape + (9,))
        R[..., _k(1, 0)] = self.rate_xp
        R[..., _k(-1, 0)] = self.rate_xm
        R[..., _k(0, 1)] = self.rate_y + np.maximum(by, 0.0) / g.hy
        R[..., _k(0, -1)] = self.rate_y + np.maximum(-by, 0.0) / g.hy
        R[..., _k(1, 1)] = R[..., _k(-1, -1)] = self.diag_pp
        R[..., _k(1, -1)] = R[..., _k(-1, 1)] = self.diag_pm
        return R

    def transition(self, efforts) -> tuple[np.ndarray, np.ndarray]:
        """Per-node probabilities on the 9-point stencil and interpolation intervals.

        Where the total jump rate vanishes the chain stays put for one unit
        of time.
        """
        R = self.rates(efforts)
        total = R.sum(axis=-1)
        P = np.zeros_like(R)
        pos = total > 0
        P[pos] = R[pos] / total[pos, None]
        P[~pos, 4] = 1.0
        dt = np.where(pos, 1.0 / np.where(pos, total, 1.0), 1.0)
        return P, dt

    def rewards(self, efforts) -> np.ndarray:
        xs, ys = self.grid.mesh()
        return self.hs.phi(ys * self.hv * np.asarray(efforts, dtype=float))

    def generator(self, efforts) -> sp.csr_matrix:
        """Sparse generator of the reflected chain under a fixed policy."""
        g = self.grid
        nx, ny = g.shape
        R = self.rates(efforts)
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        rows, cols, vals = [], [], []
        src = (ii * ny + jj).ravel()
        for k, (di, dj) in enumerate(STENCIL):
            if di == 0 and dj == 0:
                continue
            ti = np.clip(ii + di, 0, nx - 1)
            tj = np.clip(jj + dj, 0, ny - 1)
            dst = (ti * ny + tj).ravel()
            r = R[..., k].ravel()
            keep = (dst != src) & (r > 0)
            rows.append(src[keep])
            cols.append(dst[keep])
            vals.append(r[keep])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        N = nx * ny
        G = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
        G = G - sp.diags(np.asarray(G.sum(axis=1)).ravel())
        return G.tocsr()


def _k(di, dj):
    return (di + 1) * 3 + (dj + 1)


def build_mdp(params: ModelParams, hs: HarvestSpec, coeffs: DiffusionCoeffs, grid: Grid) -> ControlledChain:
    """Locally consistent chain for the log-coordinate diffusion on ``grid``."""
    if coeffs.abar1 is None:
        raise ValueError("coefficients lack effective rates; use model.averaged_coeffs")
    A = coeffs.A
    a11, a12, a22 = A[0, 0], A[0, 1], A[1, 1]
    hx, hy = grid.hx, grid.hy
    cross = abs(a12) / (2.0 * hx * hy)
    ex = a11 / (2.0 * hx * hx) - cross
    ey = a22 / (2.0 * hy * hy) - cross
    if ex < -1e-14 or ey < -1e-14:
        i, j = 0, 0
        raise ValueError(
            f"negative transition probability at node ({i}, {j}) "
            f"(x={grid.xs[i]:.4g}, y={grid.ys[j]:.4g}): |a12|={abs(a12):.4g} too large for "
            f"a11={a11:.4g}, a22={a22:.4g} at spacings hx={hx:.4g}, hy={hy:.4g}; "
            "refine the grid to equalize spacings or rotate coordinates")
    ex, ey = max(ex, 0.0), max(ey, 0.0)
    xs, ys = grid.mesh()
    p = params
    bx = coeffs.abar1 - 0.5 * a11 - p.b1 * xs - p.c1 * ys
    by0 = coeffs.abar2 - 0.5 * a22 - p.b2 * ys + p.c2 * xs
    hv = hs.h(ys)
    rate_xp = ex + np.maximum(bx, 0.0) / hx
    rate_xm = ex + np.maximum(-bx, 0.0) / hx
    rate_y = np.full(grid.shape, ey)
    # largest total rate over nodes and controls; |by| is extremal at u in {0, M}
    base = 2 * ex + 2 * ey + 4 * cross + np.abs(bx) / hx
    top = np.maximum(np.abs(by0), np.abs(by0 - hv * p.M)) / hy
    lam = float(np.max(base + top))
    dt_bar = 1.0 / lam if lam > 0 else 1.0
    return ControlledChain(params, hs, coeffs, grid, rate_xp, rate_xm, rate_y,
                           float(max(a12, 0.0) / (2 * hx * hy)), float(max(-a12, 0.0) / (2 * hx * hy)),
                           by0, hv, dt_bar)


@numba.njit(cache=True, inline="always")
def _interval_argmax(pk, c, yh, k, lo, hi):
    """argmax of Phi(yh u) - k u on [lo, hi]; ties go to the smaller u."""
    if hi <= lo:
        return lo
    if pk == YIELD_LINEAR:
        slope = yh - k
        return hi if slope > 0.0 else lo
    # concave objective: golden-section search
    g = 0.6180339887498949
    a = lo
    b = hi
    x1 = b - g * (b - a)
    x2 = a + g * (b - a)
    f1 = phi_eval(pk, c, yh * x1) - k * x1
    f2 = phi_eval(pk, c, yh * x2) - k * x2
    while b - a > 1e-8:
        if f1 < f2:
            a = x1
            x1 = x2
            f1 = f2
            x2 = a + g * (b - a)
            f2 = phi_eval(pk, c, yh * x2) - k * x2
        else:
            b = x2
            x2 = x1
            f2 = f1
            x1 = b - g * (b - a)
            f1 = phi_eval(pk, c, yh * x1) - k * x1
    best = 0.5 * (a + b)
    fb = phi_eval(pk, c, yh * best) - k * best
    flo = phi_eval(pk, c, yh * lo) - k * lo
    fhi = phi_eval(pk, c, yh * hi) - k * hi
    if flo >= fb and flo >= fhi:
        return lo
    if fhi > fb:
        return hi
    return best


@numba.njit(cache=True, inline="always")
def _h_of_u(pk, c, yh, hv, by0, Dp, Dm, u):
    by = by0 - hv * u
    d = by * Dp if by > 0.0 else by * Dm
    return phi_eval(pk, c, yh * u) + d


@numba.njit(cache=True, nogil=True)
def _hamiltonian(V, rate_xp, rate_xm, rate_y, dpp, dpm, by0, hv, ys, hy, pk, c, M, H, U):
    nx, ny = V.shape
    for i in range(nx):
        ip = i + 1 if i + 1 < nx else i
        im = i - 1 if i > 0 else i
        for j in range(ny):
            jp = j + 1 if j + 1 < ny else j
            jm = j - 1 if j > 0 else j
            v0 = V[i, j]
            base = (rate_xp[i, j] * (V[ip, j] - v0) + rate_xm[i, j] * (V[im, j] - v0)
                    + rate_y[i, j] * (V[i, jp] - v0 + V[i, jm] - v0)
                    + dpp * (V[ip, jp] - v0 + V[im, jm] - v0)
                    + dpm * (V[ip, jm] - v0 + V[im, jp] - v0))
            Dp = (V[i, jp] - v0) / hy
            Dm = (v0 - V[i, jm]) / hy
            h = hv[i, j]
            b0 = by0[i, j]
            yh = ys[j] * h
            if h <= 0.0 or M <= 0.0:
                u = 0.0
            else:
                u0 = b0 / h
                # by >= 0 on [0, u0], upwind difference Dp; by <= 0 on [u0, M], Dm
                lo1 = 0.0
                hi1 = u0 if u0 < M else M
                lo2 = u0 if u0 > 0.0 else 0.0
                hi2 = M
                u = 0.0
                best = _h_of_u(pk, c, yh, h, b0, Dp, Dm, 0.0)
                if hi1 > lo1:
                    cand = _interval_argmax(pk, c, yh, h * Dp, lo1, hi1)
                    val = _h_of_u(pk, c, yh, h, b0, Dp, Dm, cand)
                    if val > best + 1e-13 * (1.0 + abs(best)):
                        best = val
                        u = cand
                if hi2 > lo2:
                    cand = _interval_argmax(pk, c, yh, h * Dm, lo2, hi2)
                    val = _h_of_u(pk, c, yh, h, b0, Dp, Dm, cand)
                    if val > best + 1e-13 * (1.0 + abs(best)):
                        best = val
                        u = cand
            H[i, j] = base + _h_of_u(pk, c, yh, h, b0, Dp, Dm, u)
            U[i, j] = u


@numba.njit(cache=True, nogil=True)
def _rvi(V, rate_xp, rate_xm, rate_y, dpp, dpm, by0, hv, ys, hy, pk, c, M,
         dt_bar, ri, rj, tol, max_iters, spans):
    nx, ny = V.shape
    H = np.empty((nx, ny))
    U = np.empty((nx, ny))
    it = 0
    span = np.inf
    for it in range(max_iters):
        _hamiltonian(V, rate_xp, rate_xm, rate_y, dpp, dpm, by0, hv, ys, hy, pk, c, M, H, U)
        hmax = -np.inf
        hmin = np.inf
        for i in range(nx):
            for j in range(ny):
                if H[i, j] > hmax:
                    hmax = H[i, j]
                if H[i, j] < hmin:
                    hmin = H[i, j]
        span = (hmax - hmin) * dt_bar
        spans[it] = span
        rho = 0.5 * (hmax + hmin)
        shift = V[ri, rj] + dt_bar * H[ri, rj]
        for i in range(nx):
            for j in range(ny):
                V[i, j] = V[i, j] + dt_bar * H[i, j] - shift
        if span < tol * dt_bar:
            return V, U, rho, it + 1, span, True
    return V, U, 0.5 * (hmax + hmin), it + 1, span, False


@dataclass(eq=False)
class ValueFunction:
    """Relative value (zero at the reference node) and the average reward ``rho``."""

    grid: Grid
    values: np.ndarray
    rho: float
    ref_node: tuple
    tol: float
    iterations: int
    dt_bar: float
    spans: np.ndarray = field(repr=False, default=None)

    def header(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "rho": self.rho,
            "tol": self.tol,
            "iterations": self.iterations,
            "ref_node": list(self.ref_node),
            "dt_bar": self.dt_bar,
        }

    def to_json(self) -> str:
        return json.dumps(self.header())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["x", "y", "value"])
        xs, ys = self.grid.xs, self.grid.ys
        for i in range(self.grid.nx):
            for j in range(self.grid.ny):
                w.writerow([repr(float(xs[i])), repr(float(ys[j])), repr(float(self.values[i, j]))])
        return buf.getvalue()


def pointwise_max(params: ModelParams, hs: HarvestSpec, z, dVdy: float,
                  u_lo: float = 0.0, u_hi: float | None = None) -> float:
    """Effort maximizing ``Phi(y h(y) u) - dVdy * y h(y) u`` over ``[u_lo, u_hi]``.

    Linear ``Phi`` gives a bang-bang answer decided by the sign of
    ``y h(y) (1 - dVdy)`` with ties resolved to ``u_lo``; concave ``Phi`` is
    handled by golden-section search to ``1e-8``.
    """
    y = float(z[1])
    u_hi = params.M if u_hi is None else u_hi
    h = float(hs.h(y))
    if y <= 0 or h <= 0:
        return float(u_lo)
    _, _, pk, c = harvest_codes(hs)
    yh = y * h
    return float(_interval_argmax(pk, c, yh, dVdy * yh, float(u_lo), float(u_hi)))


def default_ref_node(mdp: ControlledChain) -> tuple:
    return (mdp.grid.nx // 2, mdp.grid.ny // 2)


def solve_average_reward(mdp: ControlledChain, tol: float = 1e-6, max_iters: int = 200_000,
                         ref_node: tuple | None = None, V0: np.ndarray | None = None
                         ) -> tuple[ValueFunction, PolicyTable]:
    """Relative value iteration on the uniformized chain.

    Stops once the span of the one-step increment is below ``tol * dt_bar``;
    ``rho`` is the midpoint of that span divided by ``dt_bar``.  ``V0`` warm
    starts the iteration (e.g. a coarse solution interpolated to this grid).
    """
    g = mdp.grid
    ri, rj = default_ref_node(mdp) if ref_node is None else ref_node
    V = np.zeros(g.shape) if V0 is None else np.array(V0, dtype=float)
    V -= V[ri, rj]
    _, _, pk, c = harvest_codes(mdp.hs)
    spans = np.empty(max_iters)
    V, U, rho, iters, span, ok = _rvi(
        V, mdp.rate_xp, mdp.rate_xm, mdp.rate_y, mdp.diag_pp, mdp.diag_pm, mdp.by0, mdp.hv,
        g.ys, g.hy, pk, c, float(mdp.M), mdp.dt_bar, int(ri), int(rj), float(tol),
        int(max_iters), spans)
    if not ok:
        raise HJBConvergenceError(
            f"relative value iteration did not converge in {iters} iterations: "
            f"final span {span / mdp.dt_bar:.3e} per unit time vs tol {tol:.3e}")
    vf = ValueFunction(g, V, float(rho), (int(ri), int(rj)), float(tol), int(iters),
                       mdp.dt_bar, spans[:iters].copy())
    U = np.clip(U, 0.0, mdp.M)
    return vf, PolicyTable(g, U, mdp.M, 0)


def policy_evaluation(mdp: ControlledChain, efforts) -> tuple[float, np.ndarray]:
    """Stationary average reward of the chain under fixed ``efforts``.

    Returns ``(rho, pi)`` with ``pi`` the stationary law on the grid.
    """
    g = mdp.grid
    u = np.broadcast_to(np.asarray(efforts, dtype=float), g.shape)
    G = mdp.generator(u)
    N = G.shape[0]
    Gt = G.T.tolil()
    Gt[N - 1, :] = np.ones(N)
    b = np.zeros(N)
    b[-1] = 1.0
    pi = spsolve(Gt.tocsc(), b)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    rho = float(pi @ mdp.rewards(u).ravel())
    return rho, pi.reshape(g.shape)


def hjb_residual(value: ValueFunction, mdp: ControlledChain) -> float:
    """``max |max_u [L_u V + c] - rho|`` over interior nodes of the discrete operator."""
    g = mdp.grid
    _, _, pk, c = harvest_codes(mdp.hs)
    H = np.empty(g.shape)
    U = np.empty(g.shape)
    _hamiltonian(np.ascontiguousarray(value.values), mdp.rate_xp, mdp.rate_xm, mdp.rate_y,
                 mdp.diag_pp, mdp.diag_pm, mdp.by0, mdp.hv, g.ys, g.hy, pk, c, float(mdp.M), H, U)
    return float(np.max(np.abs(H[1:-1, 1:-1] - value.rho)))


def lipschitz_regularize(policy: PolicyTable, radius: int) -> PolicyTable:
    """Smooth a policy with a normalized tent kernel over ``(2r+1)^2`` nodes.

    The tent weights ``(r+1-|di|)(r+1-|dj|)`` are renormalized near the box
    edges; the result is clamped to ``[0, M]``.  ``radius=0`` is the identity.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if radius == 0:
        return policy
    r = int(radius)
    w1 = (r + 1 - np.abs(np.arange(-r, r + 1))).astype(float)
    E = np.asarray(policy.efforts, dtype=float)

    def smooth(arr, axis):
        num = np.apply_along_axis(lambda v: np.convolve(v, w1, mode="same"), axis, arr)
        den = np.apply_along_axis(lambda v: np.convolve(v, w1, mode="same"), axis, np.ones_like(arr))
        return num / den

    out = smooth(smooth(E, 0), 1)
    return PolicyTable(policy.grid, np.clip(out, 0.0, policy.M), policy.M, r)
