"""Numba building blocks shared by the simulators and the HJB solver.

Harvest built-ins are dispatched on small integer codes so that the compiled
kernels never call back into Python.
"""

import math

import numba
import numpy as np

EFF_RAMP = 0
EFF_MICHAELIS = 1
YIELD_LINEAR = 0
YIELD_SATURATING = 1


@numba.njit(cache=True, inline="always")
def h_eval(kind, kappa, y):
    if y <= 0.0:
        return 0.0
    if kind == EFF_RAMP:
        v = y / kappa
        return 1.0 if v > 1.0 else v
    return y / (kappa + y)


@numba.njit(cache=True, inline="always")
def phi_eval(kind, c, r):
    if kind == YIELD_LINEAR:
        return r
    return r / (c + r)


@numba.njit(cache=True, inline="always")
def policy_lookup(table, lx0, ly0, hx, hy, lx, ly):
    """Bilinear interpolation on a uniform log grid, clamped at the edges."""
    nx = table.shape[0]
    ny = table.shape[1]
    fx = (lx - lx0) / hx
    fy = (ly - ly0) / hy
    if fx <= 0.0:
        i = 0
        tx = 0.0
    elif fx >= nx - 1:
        i = nx - 2
        tx = 1.0
    else:
        i = int(math.floor(fx))
        if i > nx - 2:
            i = nx - 2
        tx = fx - i
    if fy <= 0.0:
        j = 0
        ty = 0.0
    elif fy >= ny - 1:
        j = ny - 2
        ty = 1.0
    else:
        j = int(math.floor(fy))
        if j > ny - 2:
            j = ny - 2
        ty = fy - j
    return ((1.0 - tx) * (1.0 - ty) * table[i, j] + tx * (1.0 - ty) * table[i + 1, j]
            + (1.0 - tx) * ty * table[i, j + 1] + tx * ty * table[i + 1, j + 1])


def harvest_codes(hs):
    return (np.int64(hs.effectiveness_code), float(hs.kappa),
            np.int64(hs.yield_code), float(hs.c))
