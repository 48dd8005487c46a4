"""Predator-prey model with predator harvesting.

Prey ``x`` and predator ``y`` follow

    x' = x (a1 - b1 x - c1 y)
    y' = y (s2 - h(y) u - b2 y + c2 x)

where ``s2`` is the *signed* predator intrinsic rate (negative means the
predator dies out without prey) and ``u`` in ``[0, M]`` is harvest effort.
Harvest returns ``Phi(y h(y) u)`` per unit time.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from ._kernels import EFF_MICHAELIS, EFF_RAMP, YIELD_LINEAR, YIELD_SATURATING
from .markov_noise import DiffusionCoeffs, JumpChainSpec, diffusion_matrix

__all__ = [
    "ModelParams",
    "HarvestSpec",
    "State2D",
    "Persistence",
    "PersistenceResult",
    "drift_G",
    "noise_F",
    "reward_rate",
    "persistence_check",
    "interior_equilibrium",
    "averaged_coeffs",
]

DEGENERATE_MARGIN = 1e-12


@dataclass(frozen=True)
class ModelParams:
    a1: float
    b1: float
    c1: float
    s2: float
    b2: float
    c2: float
    M: float

    def __post_init__(self):
        for name in ("a1", "b1", "c1", "b2", "c2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if not math.isfinite(self.s2):
            raise ValueError("s2 must be finite")
        # M = 0 is allowed as the no-harvest degenerate case
        if not (math.isfinite(self.M) and self.M >= 0):
            raise ValueError(f"M must be nonnegative, got {self.M}")

    @property
    def persistence_margin(self) -> float:
        return self.s2 + self.c2 * self.a1 / self.b1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(**{k: float(d[k]) for k in ("a1", "b1", "c1", "s2", "b2", "c2", "M")})


_EFFECTIVENESS = {"ramp": EFF_RAMP, "michaelis": EFF_MICHAELIS}
_YIELD = {"linear": YIELD_LINEAR, "saturating": YIELD_SATURATING}


@dataclass(frozen=True)
class HarvestSpec:
    """Harvest effectiveness ``h`` and yield ``Phi`` chosen among built-ins.

    effectiveness: ``"ramp"`` gives ``min(1, y/kappa)``, ``"michaelis"`` gives
    ``y/(kappa+y)``.  yield: ``"linear"`` gives ``Phi(r) = r``,
    ``"saturating"`` gives ``r/(c+r)``.
    """

    effectiveness: str = "michaelis"
    kappa: float = 0.25
    yield_fn: str = "linear"
    c: float = 1.0

    def __post_init__(self):
        if self.effectiveness not in _EFFECTIVENESS:
            raise ValueError(f"unknown effectiveness {self.effectiveness!r}; "
                             f"choose from {sorted(_EFFECTIVENESS)}")
        if self.yield_fn not in _YIELD:
            raise ValueError(f"unknown yield {self.yield_fn!r}; choose from {sorted(_YIELD)}")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.c > 0:
            raise ValueError("c must be positive")

    @property
    def effectiveness_code(self) -> int:
        return _EFFECTIVENESS[self.effectiveness]

    @property
    def yield_code(self) -> int:
        return _YIELD[self.yield_fn]

    @property
    def linear_yield(self) -> bool:
        return self.yield_fn == "linear"

    def h(self, y):
        y = np.maximum(np.asarray(y, dtype=float), 0.0)
        if self.effectiveness == "ramp":
            return np.minimum(1.0, y / self.kappa)
        return y / (self.kappa + y)

    def phi(self, r):
        r = np.asarray(r, dtype=float)
        if self.yield_fn == "linear":
            return r
        return r / (self.c + r)

    def lipschitz_h(self) -> float:
        return 1.0 / self.kappa

    def lipschitz_phi(self) -> float:
        return 1.0 if self.yield_fn == "linear" else 1.0 / self.c

    def check(self, y_max: float = 100.0, n: int = 20001) -> dict:
        """Dense-sampling check of the structural assumptions on ``h`` and ``Phi``."""
        y = np.linspace(0.0, y_max, n)
        hv = self.h(y)
        pv = self.phi(y)
        dq = np.abs(np.diff(pv)) / np.diff(y)
        out = {
            "h0": float(hv[0]),
            "h_monotone": bool(np.all(np.diff(hv) >= -1e-15)),
            "h_range_ok": bool(hv.min() >= 0.0 and hv.max() <= 1.0),
            "phi0": float(pv[0]),
            "phi_lipschitz": float(dq.max()),
        }
        out["ok"] = (out["h0"] == 0.0 and out["h_monotone"] and out["h_range_ok"]
                     and out["phi0"] == 0.0 and math.isfinite(out["phi_lipschitz"]))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HarvestSpec":
        return cls(**d)


class State2D(NamedTuple):
    x: float
    y: float

    @classmethod
    def of(cls, z) -> "State2D":
        x, y = float(z[0]), float(z[1])
        if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
            raise ValueError(f"state must be finite and nonnegative, got {(x, y)}")
        return cls(x, y)


def _check_effort(params: ModelParams, u: float):
    if not (0.0 <= u <= params.M):
        raise ValueError(f"effort {u} outside [0, {params.M}]")


def drift_G(params: ModelParams, hs: HarvestSpec, z, u: float) -> np.ndarray:
    x, y = State2D.of(z)
    _check_effort(params, u)
    p = params
    return np.array([
        x * (p.a1 - p.b1 * x - p.c1 * y),
        y * (p.s2 - float(hs.h(y)) * u - p.b2 * y + p.c2 * x),
    ])


def noise_F(spec: JumpChainSpec, z, w) -> np.ndarray:
    x, y = State2D.of(z)
    k = spec.index(w)
    return np.array([x * spec.r1[k], y * spec.r2[k]])


def reward_rate(hs: HarvestSpec, y, u):
    """``Phi(y h(y) u)``, elementwise."""
    y = np.asarray(y, dtype=float)
    out = hs.phi(y * hs.h(y) * np.asarray(u, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


class Persistence(enum.Enum):
    PERSISTENT = "persistent"
    EXTINCT = "extinct"


class PersistenceResult(NamedTuple):
    status: Persistence
    margin: float
    degenerate: bool

    @property
    def persistent(self) -> bool:
        return self.status is Persistence.PERSISTENT


def persistence_check(params: ModelParams) -> PersistenceResult:
    """Sign of ``s2 + c2 a1 / b1`` decides predator survival."""
    m = params.persistence_margin
    degenerate = abs(m) <= DEGENERATE_MARGIN
    if degenerate:
        warnings.warn(f"persistence margin {m:.3e} is at the threshold; "
                      "the predator's fate is undetermined", RuntimeWarning, stacklevel=2)
    status = Persistence.PERSISTENT if m > 0 else Persistence.EXTINCT
    return PersistenceResult(status, m, degenerate)


def interior_equilibrium(params: ModelParams, abar1: float | None = None,
                         abar2: float | None = None) -> np.ndarray:
    """Coexistence equilibrium of the unharvested deterministic system."""
    r1 = params.a1 if abar1 is None else abar1
    r2 = params.s2 if abar2 is None else abar2
    M = np.array([[params.b1, params.c1], [-params.c2, params.b2]])
    z = np.linalg.solve(M, np.array([r1, r2]))
    if np.any(z <= 0):
        raise ValueError(f"no interior equilibrium (solution {z.tolist()})")
    return z


def averaged_coeffs(params: ModelParams, spec: JumpChainSpec) -> DiffusionCoeffs:
    """Limit-diffusion coefficients: ``A``, ``sigma`` and the Ito-shifted rates."""
    base = diffusion_matrix(spec)
    return DiffusionCoeffs(
        A=base.A, sigma=base.sigma,
        abar1=params.a1 + 0.5 * base.A[0, 0],
        abar2=params.s2 + 0.5 * base.A[1, 1],
    )
