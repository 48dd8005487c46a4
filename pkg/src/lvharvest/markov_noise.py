"""Finite-state pure-jump noise process.

The chain jumps out of state ``w`` at rate ``q(w)`` and lands on a state
drawn from row ``w`` of a zero-diagonal stochastic kernel.  Its generator is
``Q = diag(q) (Lambda - I)``.  Everything the averaging theory needs from the
chain (stationary law, Poisson equation, integrated covariance of the noise
maps) reduces to dense linear algebra on ``Q``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numba
import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.fft import irfft, next_fast_len, rfft

__all__ = [
    "JumpChainSpec",
    "DiffusionCoeffs",
    "ReducibleChainError",
    "stationary_distribution",
    "center_noise",
    "solve_poisson",
    "diffusion_matrix",
    "sample_jump_path",
    "integrated_autocovariance",
    "empirical_tv_decay",
]

ROW_SUM_TOL = 1e-12
CENTER_TOL = 1e-10
PSD_CLIP = 1e-10


class ReducibleChainError(ValueError):
    """The jump chain has more than one communicating class."""


@dataclass(frozen=True, eq=False)
class JumpChainSpec:
    """Jump rates, jump kernel and the two noise maps of the driving chain."""

    states: tuple
    rates: np.ndarray
    kernel: np.ndarray
    r1: np.ndarray
    r2: np.ndarray

    def __post_init__(self):
        n = len(self.states)
        rates = np.asarray(self.rates, dtype=float).reshape(-1)
        kernel = np.asarray(self.kernel, dtype=float)
        r1 = np.asarray(self.r1, dtype=float).reshape(-1)
        r2 = np.asarray(self.r2, dtype=float).reshape(-1)
        if n < 2:
            raise ValueError("a jump chain needs at least two states")
        if len(set(self.states)) != n:
            raise ValueError("state labels must be distinct")
        if rates.shape != (n,) or r1.shape != (n,) or r2.shape != (n,):
            raise ValueError("rates, r1 and r2 must have one entry per state")
        if kernel.shape != (n, n):
            raise ValueError(f"kernel must be {n}x{n}, got {kernel.shape}")
        if not np.all(np.isfinite(rates)) or np.any(rates <= 0):
            raise ValueError("every jump rate must be positive and finite")
        if np.any(kernel < 0):
            raise ValueError("kernel entries must be nonnegative")
        if np.any(np.diag(kernel) != 0):
            raise ValueError("kernel diagonal must be zero")
        bad = np.abs(kernel.sum(axis=1) - 1.0) > ROW_SUM_TOL
        if np.any(bad):
            raise ValueError(f"kernel rows {np.flatnonzero(bad).tolist()} do not sum to 1")
        if not (np.all(np.isfinite(r1)) and np.all(np.isfinite(r2))):
            raise ValueError("noise maps must be finite")
        ncomp, labels = connected_components(kernel > 0, directed=True, connection="strong")
        if ncomp > 1:
            classes = [[self.states[i] for i in np.flatnonzero(labels == c)] for c in range(ncomp)]
            # a class with no outgoing edge to another class is closed
            closed = [
                cls for c, cls in enumerate(classes)
                if not np.any(kernel[np.ix_(labels == c, labels != c)] > 0)
            ]
            raise ReducibleChainError(
                f"chain is reducible: communicating classes {classes}; "
                f"isolated (closed) class {closed[0]}"
            )
        for name, arr in (("rates", rates), ("kernel", kernel), ("r1", r1), ("r2", r2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "states", tuple(self.states))

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def generator(self) -> np.ndarray:
        return self.rates[:, None] * (self.kernel - np.eye(self.n))

    def index(self, label) -> int:
        return self.states.index(label)

    def permuted(self, perm: Sequence[int]) -> "JumpChainSpec":
        """Relabel states: new state ``k`` is old state ``perm[k]``."""
        perm = np.asarray(perm)
        return JumpChainSpec(
            states=tuple(self.states[i] for i in perm),
            rates=self.rates[perm],
            kernel=self.kernel[np.ix_(perm, perm)],
            r1=self.r1[perm],
            r2=self.r2[perm],
        )

    def to_dict(self) -> dict:
        return {
            "states": list(self.states),
            "rates": self.rates.tolist(),
            "kernel": self.kernel.tolist(),
            "r1": self.r1.tolist(),
            "r2": self.r2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JumpChainSpec":
        return cls(
            states=tuple(d["states"]),
            rates=np.asarray(d["rates"], dtype=float),
            kernel=np.asarray(d["kernel"], dtype=float),
            r1=np.asarray(d["r1"], dtype=float),
            r2=np.asarray(d["r2"], dtype=float),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "JumpChainSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def two_state(cls, rate: float, r1: Sequence[float], r2: Sequence[float] = (0.0, 0.0)):
        """Symmetric two-state flip chain with a common jump rate."""
        return cls(
            states=(0, 1),
            rates=np.array([rate, rate], dtype=float),
            kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
            r1=np.asarray(r1, dtype=float),
            r2=np.asarray(r2, dtype=float),
        )


@dataclass(frozen=True, eq=False)
class DiffusionCoeffs:
    """Averaged covariance ``A``, its symmetric square root, and effective rates.

    ``abar1``/``abar2`` stay ``None`` until combined with model parameters
    (see :func:`lvharvest.model.averaged_coeffs`).
    """

    A: np.ndarray
    sigma: np.ndarray
    abar1: float | None = None
    abar2: float | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        S = np.asarray(self.sigma, dtype=float)
        if A.shape != (2, 2) or S.shape != (2, 2):
            raise ValueError("A and sigma must be 2x2")
        if not np.allclose(A, A.T, atol=1e-12, rtol=0):
            raise ValueError("A must be symmetric")
        if not np.allclose(S @ S.T, A, atol=1e-10, rtol=0):
            raise ValueError("sigma sigma^T must equal A")
        A.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "sigma", S)

    @classmethod
    def from_matrix(cls, A, abar1=None, abar2=None) -> "DiffusionCoeffs":
        A = np.asarray(A, dtype=float)
        A = 0.5 * (A + A.T)
        return cls(A=A, sigma=psd_sqrt(A), abar1=abar1, abar2=abar2)

    def to_dict(self) -> dict:
        d = {"A": self.A.tolist(), "sigma": self.sigma.tolist()}
        if self.abar1 is not None:
            d["abar1"] = self.abar1
            d["abar2"] = self.abar2
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionCoeffs":
        return cls(A=np.asarray(d["A"]), sigma=np.asarray(d["sigma"]),
                   abar1=d.get("abar1"), abar2=d.get("abar2"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; tiny negative eigenvalues are clipped."""
    w, U = np.linalg.eigh(np.asarray(A, dtype=float))
    if np.any(w < -PSD_CLIP):
        raise ValueError(f"matrix is not positive semidefinite: eigenvalues {w.tolist()}")
    w = np.clip(w, 0.0, None)
    S = (U * np.sqrt(w)) @ U.T
    return 0.5 * (S + S.T)


def stationary_distribution(spec: JumpChainSpec) -> np.ndarray:
    """Unique probability vector ``pi`` with ``pi Q = 0``."""
    Q = spec.generator
    n = spec.n
    M = Q.T.copy()
    M[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(M, b)
    # roundoff can leave -1e-17 entries
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def center_noise(spec: JumpChainSpec) -> JumpChainSpec:
    """Subtract the stationary mean from both noise maps."""
    pi = stationary_distribution(spec)
    m1, m2 = pi @ spec.r1, pi @ spec.r2
    # a mean at roundoff level means the maps are already centered
    tol = 1e-14 * max(1.0, np.abs(spec.r1).max(), np.abs(spec.r2).max())
    if abs(m1) <= tol and abs(m2) <= tol:
        return spec
    return replace(spec, r1=spec.r1 - m1, r2=spec.r2 - m2)


def solve_poisson(spec: JumpChainSpec, phi, pi: np.ndarray | None = None) -> np.ndarray:
    """Solve ``Q psi = -phi`` normalized by ``pi . psi = 0``.

    ``phi`` must have zero stationary mean (Fredholm alternative).  The
    bordered system ``[[Q, 1], [pi, 0]]`` is nonsingular for an irreducible
    chain; one step of iterative refinement keeps the residual at roundoff.
    """
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if phi.shape != (spec.n,):
        raise ValueError(f"phi must have {spec.n} entries")
    if pi is None:
        pi = stationary_distribution(spec)
    mean = pi @ phi
    if abs(mean) > CENTER_TOL:
        raise ValueError(f"phi is not centered: pi.phi = {mean:.3e}")
    if not np.any(phi):
        return np.zeros(spec.n)
    Q = spec.generator
    n = spec.n
    B = np.zeros((n + 1, n + 1))
    B[:n, :n] = Q
    B[:n, n] = 1.0
    B[n, :n] = pi
    rhs = np.concatenate([-phi, [0.0]])
    sol = np.linalg.solve(B, rhs)
    for _ in range(2):
        sol += np.linalg.solve(B, rhs - B @ sol)
    psi = sol[:n]
    residual = np.max(np.abs(Q @ psi + phi))
    scale = max(1.0, np.max(np.abs(phi)), np.max(np.abs(Q)) * np.max(np.abs(psi)))
    if residual > 1e-10 * scale:
        raise np.linalg.LinAlgError(
            f"Poisson solve failed: residual {residual:.3e} (scale {scale:.3e}, "
            f"border multiplier {sol[n]:.3e})"
        )
    return psi


def diffusion_matrix(spec: JumpChainSpec) -> DiffusionCoeffs:
    """Averaged covariance ``a_ij = pi.(r_i psi_j) + pi.(r_j psi_i)``.

    ``psi_j`` solves the Poisson equation with right-hand side ``r_j``; this is
    the finite-state form of integrating ``r_i r_j`` against the deviation
    kernel.  The rates ``abar1``, ``abar2`` are left unset.
    """
    pi = stationary_distribution(spec)
    r = np.vstack([spec.r1, spec.r2])
    for i in range(2):
        if abs(pi @ r[i]) > CENTER_TOL:
            raise ValueError(f"noise map r{i + 1} is not centered (pi.r = {pi @ r[i]:.3e})")
    psi = np.vstack([solve_poisson(spec, r[j], pi) for j in range(2)])
    A = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            A[i, j] = pi @ (r[i] * psi[j]) + pi @ (r[j] * psi[i])
    A = 0.5 * (A + A.T)
    w = np.linalg.eigvalsh(A)
    if w.min() < -PSD_CLIP:
        raise ValueError(f"averaged matrix is indefinite (eigenvalues {w.tolist()}); invalid spec")
    return DiffusionCoeffs.from_matrix(A)


@numba.njit(cache=True, nogil=True)
def _jump_path_kernel(rng, cum_kernel, rates, state0, t_end, time_scale):
    cap = 1024
    times = np.empty(cap)
    states = np.empty(cap, dtype=np.int64)
    times[0] = 0.0
    states[0] = state0
    n = 1
    t = 0.0
    w = state0
    nstate = rates.shape[0]
    while True:
        t += rng.exponential(1.0) / (rates[w] * time_scale)
        if t >= t_end:
            break
        u = rng.random()
        nxt = nstate - 1
        for k in range(nstate):
            if u < cum_kernel[w, k]:
                nxt = k
                break
        w = nxt
        if n == cap:
            cap *= 2
            t2 = np.empty(cap)
            s2 = np.empty(cap, dtype=np.int64)
            t2[:n] = times[:n]
            s2[:n] = states[:n]
            times = t2
            states = s2
        times[n] = t
        states[n] = w
        n += 1
    return times[:n], states[:n]


def sample_jump_path(spec: JumpChainSpec, t_end: float, seed, initial=None,
                     time_scale: float = 1.0):
    """Exact simulation of the chain on ``[0, t_end)``.

    Returns ``(times, states)``: ``times[0] = 0`` holds the initial state and
    every later entry is a jump time with the state entered.  Holding times
    are exponential with rate ``q(w) * time_scale``.  The initial state is
    drawn from the stationary law unless given as a label.

    ``seed`` may be an int, a sequence of ints, or a ``SeedSequence``.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    rng = np.random.default_rng(seed)
    if initial is None:
        state0 = int(rng.choice(spec.n, p=stationary_distribution(spec)))
    else:
        state0 = spec.index(initial)
    cum = np.cumsum(spec.kernel, axis=1)
    cum[:, -1] = 1.0
    times, idx = _jump_path_kernel(rng, cum, spec.rates, state0, float(t_end), float(time_scale))
    return times, idx


def _occupation_on_grid(times, idx, grid_t):
    pos = np.searchsorted(times, grid_t, side="right") - 1
    return idx[pos]


def integrated_autocovariance(spec: JumpChainSpec, t_total: float, dt: float,
                              t_window: float, seed) -> np.ndarray:
    """Simulation estimate of ``2 int_0^T E[r_i(xi_0) r_j(xi_t)] dt`` (symmetrized).

    A single stationary path of length ``t_total`` is sampled on a ``dt``
    grid; empirical cross-covariances up to lag ``t_window`` come from an FFT
    and are integrated with the trapezoid rule.  This route never touches
    the generator matrix.
    """
    times, idx = sample_jump_path(spec, t_total, seed)
    grid_t = np.arange(0.0, t_total, dt)
    w = _occupation_on_grid(times, idx, grid_t)
    r = np.vstack([spec.r1[w], spec.r2[w]])
    r -= r.mean(axis=1, keepdims=True)
    n = r.shape[1]
    nlag = int(round(t_window / dt)) + 1
    # padding by the window is enough to keep the wanted lags free of wrap-around
    nfft = next_fast_len(n + nlag, real=True)
    F = rfft(r, nfft, axis=1)
    A = np.empty((2, 2))
    weights = np.full(nlag, dt)
    weights[0] = weights[-1] = 0.5 * dt
    norm = n - np.arange(nlag)
    for i in range(2):
        for j in range(i, 2):
            # c_ij(k) = E[r_i(0) r_j(k dt)]
            cij = irfft(np.conj(F[i]) * F[j], nfft)[:nlag] / norm
            cji = irfft(np.conj(F[j]) * F[i], nfft)[:nlag] / norm
            A[i, j] = A[j, i] = np.sum(weights * (cij + cji))
    return A


def empirical_tv_decay(spec: JumpChainSpec, start, t_values, n_samples: int, seed) -> np.ndarray:
    """Total-variation distance between the empirical law of ``xi(t)`` and ``pi``.

    ``n_samples`` independent copies start in state ``start``; returns one
    distance per entry of ``t_values``.
    """
    pi = stationary_distribution(spec)
    t_values = np.asarray(t_values, dtype=float)
    t_max = float(t_values.max())
    ss = np.random.SeedSequence(seed)
    counts = np.zeros((len(t_values), spec.n))
    for child in ss.spawn(n_samples):
        times, idx = sample_jump_path(spec, t_max * (1 + 1e-9), child, initial=start)
        counts[np.arange(len(t_values)), _occupation_on_grid(times, idx, t_values)] += 1
    emp = counts / n_samples
    return 0.5 * np.abs(emp - pi).sum(axis=1)
