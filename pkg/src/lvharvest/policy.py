"""Log-spaced state grid and gridded feedback harvest policies."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ._kernels import policy_lookup

__all__ = ["Grid", "PolicyTable"]


@dataclass(frozen=True)
class Grid:
    """Truncation box ``[x_min, x_max] x [y_min, y_max]`` with uniform log spacing."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.x_min > 0 and self.y_min > 0):
            raise ValueError("grid lower bounds must be positive")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid upper bounds must exceed lower bounds")
        if self.nx < 16 or self.ny < 16:
            raise ValueError(f"grid needs at least 16 nodes per axis, got {self.nx}x{self.ny}")

    @property
    def lx(self) -> np.ndarray:
        return np.linspace(math.log(self.x_min), math.log(self.x_max), self.nx)

    @property
    def ly(self) -> np.ndarray:
        return np.linspace(math.log(self.y_min), math.log(self.y_max), self.ny)

    @property
    def xs(self) -> np.ndarray:
        return np.exp(self.lx)

    @property
    def ys(self) -> np.ndarray:
        return np.exp(self.ly)

    @property
    def hx(self) -> float:
        return (math.log(self.x_max) - math.log(self.x_min)) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (math.log(self.y_max) - math.log(self.y_min)) / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def refined(self, factor: int = 2) -> "Grid":
        """Same box, ``factor`` times as many cells per axis."""
        return Grid(self.x_min, self.x_max, self.y_min, self.y_max,
                    factor * (self.nx - 1) + 1, factor * (self.ny - 1) + 1)

    def nearest_node(self, x: float, y: float) -> tuple[int, int]:
        i = int(np.clip(round((math.log(x) - math.log(self.x_min)) / self.hx), 0, self.nx - 1))
        j = int(np.clip(round((math.log(y) - math.log(self.y_min)) / self.hy), 0, self.ny - 1))
        return i, j

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(float(d["x_min"]), float(d["x_max"]), float(d["y_min"]), float(d["y_max"]),
                   int(d["nx"]), int(d["ny"]))


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Harvest effort on grid nodes, read back by bilinear interpolation in
    ``(log x, log y)`` and clamped to the edge values outside the box."""

    grid: Grid
    efforts: np.ndarray
    M: float
    lipschitz_radius: int = 0

    def __post_init__(self):
        e = np.array(self.efforts, dtype=float)
        if e.shape != self.grid.shape:
            raise ValueError(f"efforts shape {e.shape} does not match grid {self.grid.shape}")
        if np.any(e < 0) or np.any(e > self.M) or not np.all(np.isfinite(e)):
            raise ValueError(f"efforts must lie in [0, {self.M}]")
        e.setflags(write=False)
        object.__setattr__(self, "efforts", e)

    @classmethod
    def constant(cls, grid: Grid, u: float, M: float) -> "PolicyTable":
        return cls(grid, np.full(grid.shape, float(u)), M)

    @property
    def kernel_args(self):
        g = self.grid
        return (np.ascontiguousarray(self.efforts), math.log(g.x_min), math.log(g.y_min), g.hx, g.hy)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        table, lx0, ly0, hx, hy = self.kernel_args
        lx = np.log(x).ravel()
        ly = np.broadcast_to(np.log(y), x.shape).ravel()
        out = np.array([policy_lookup(table, lx0, ly0, hx, hy, a, b) for a, b in zip(lx, ly)])
        return out.reshape(x.shape) if x.ndim else float(out[0])

    def is_constant(self) -> bool:
        return bool(np.all(self.efforts == self.efforts.flat[0]))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "M": self.M,
            "lipschitz_radius": self.lipschitz_radius,
            "interpolation": "bilinear-log-clamped",
            "efforts": self.efforts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyTable":
        return cls(Grid.from_dict(d["grid"]), np.asarray(d["efforts"], dtype=float),
                   float(d["M"]), int(d.get("lipschitz_radius", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PolicyTable":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["x", "y", "effort"])
        xs, ys = self.grid.xs, self.grid.ys
        for i in range(self.grid.nx):
            for j in range(self.grid.ny):
                w.writerow([repr(float(xs[i])), repr(float(ys[j])), repr(float(self.efforts[i, j]))])
        return buf.getvalue()
