"""Trajectory records, reward estimates and occupation measures."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .policy import Grid

__all__ = [
    "PathRecord",
    "RewardEstimate",
    "OccupationHistogram",
    "SimulationError",
    "occupation_histogram",
    "path_seed",
    "run_paths",
    "aggregate",
]


class SimulationError(RuntimeError):
    """A trajectory left the representable range or the step budget."""


@dataclass(eq=False)
class PathRecord:
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    controls: np.ndarray
    rewards: np.ndarray
    cumulative: np.ndarray

    @property
    def states(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def running_average(self) -> np.ndarray:
        out = np.zeros_like(self.cumulative)
        pos = self.times > 0
        out[pos] = self.cumulative[pos] / self.times[pos]
        return out

    def after(self, t0: float) -> "PathRecord":
        m = self.times >= t0
        return PathRecord(self.times[m], self.x[m], self.y[m], self.controls[m],
                          self.rewards[m], self.cumulative[m])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["t", "x", "y", "u", "reward_rate", "running_avg"])
        ra = self.running_average
        for row in zip(self.times, self.x, self.y, self.controls, self.rewards, ra):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def identical(self, other: "PathRecord") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("times", "x", "y", "controls", "rewards", "cumulative"))


@dataclass(eq=False)
class OccupationHistogram:
    """Cell masses on the grid's node-to-node cells plus the mass outside it."""

    grid: Grid
    mass: np.ndarray
    outside: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["x_lo", "x_hi", "y_lo", "y_hi", "mass"])
        xs, ys = self.grid.xs, self.grid.ys
        for i in range(len(xs) - 1):
            for j in range(len(ys) - 1):
                w.writerow([repr(float(xs[i])), repr(float(xs[i + 1])),
                            repr(float(ys[j])), repr(float(ys[j + 1])), repr(float(self.mass[i, j]))])
        return buf.getvalue()

    def outside_json(self) -> str:
        return json.dumps({"outside_mass": self.outside})

    def mass_outside_box(self, lo: float, hi: float) -> float:
        """Mass of cells not fully inside ``[lo, hi]^2`` plus the outside bucket."""
        xs, ys = self.grid.xs, self.grid.ys
        inx = (xs[:-1] >= lo) & (xs[1:] <= hi)
        iny = (ys[:-1] >= lo) & (ys[1:] <= hi)
        inside = self.mass[np.ix_(inx, iny)].sum()
        return float(1.0 - inside)


def occupation_histogram(path: PathRecord | Sequence[PathRecord], grid: Grid) -> OccupationHistogram:
    """Empirical occupation measure of equally spaced samples.

    Pass a record with burn-in already removed (``path.after(burn_in)``).  A
    list of records is pooled.
    """
    paths = [path] if isinstance(path, PathRecord) else list(path)
    x = np.concatenate([p.x for p in paths])
    y = np.concatenate([p.y for p in paths])
    counts = np.zeros((grid.nx - 1, grid.ny - 1))
    if x.size == 0:
        return OccupationHistogram(grid, counts, 0.0)
    lx, ly = np.log(x), np.log(y)
    fx = (lx - math.log(grid.x_min)) / grid.hx
    fy = (ly - math.log(grid.y_min)) / grid.hy
    inside = (fx >= 0) & (fx <= grid.nx - 1) & (fy >= 0) & (fy <= grid.ny - 1)
    i = np.minimum(fx[inside].astype(np.int64), grid.nx - 2)
    j = np.minimum(fy[inside].astype(np.int64), grid.ny - 2)
    np.add.at(counts, (i, j), 1.0)
    n = x.size
    return OccupationHistogram(grid, counts / n, float((n - inside.sum()) / n))


@dataclass(eq=False)
class RewardEstimate:
    """Across-path mean of post-burn-in time-average reward."""

    estimate: float
    stderr: float
    n_paths: int
    t_end: float
    burn_in: float
    epsilon: float | None = None
    per_path: np.ndarray = field(default=None, repr=False)
    mean_sq_norm: float = float("nan")
    outside_fraction: float = float("nan")
    terminal: np.ndarray = field(default=None, repr=False)
    records: list = field(default_factory=list, repr=False)
    histogram: OccupationHistogram | None = field(default=None, repr=False)
    checkpoints: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n_paths": self.n_paths,
            "t_end": self.t_end,
            "burn_in": self.burn_in,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def path_seed(seed, index: int) -> np.random.SeedSequence:
    """Per-path stream: entropy is the base seed (int or tuple) followed by the path index."""
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.SeedSequence([*base, int(index)])


def run_paths(job: Callable[[int], object], n_paths: int, threads: int = 1) -> list:
    """Run ``job(i)`` for each path index; results come back in index order."""
    if threads <= 1 or n_paths == 1:
        return [job(i) for i in range(n_paths)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(job, range(n_paths)))


def aggregate(values: np.ndarray) -> tuple[float, float]:
    """Mean (compensated summation) and standard error of per-path values."""
    values = np.asarray(values, dtype=float)
    n = values.size
    mean = math.fsum(values) / n
    if n < 2:
        return mean, float("nan")
    var = math.fsum((values - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)
