"""Generalized-exponential ("solid") splatting kernel.

The weight of a splat at Mahalanobis distance ``m2`` is

    w = exp(-(m2 / 2) ** (beta / 2))

which is the ordinary Gaussian at ``beta = 2`` and tends to the indicator of
the one-sigma ball as ``beta`` grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import InvalidInputError

M2_FLOOR = 1e-12
CULL_EPSILON = 1.0 / 255.0


@dataclass(frozen=True)
class KernelEval:
    weight: float
    d_weight_d_m2: float
    d_weight_d_beta: float


@njit(cache=True)
def solid_weight(m2, beta):
    if m2 <= 0.0:
        return 1.0
    return math.exp(-((0.5 * m2) ** (0.5 * beta)))


@njit(cache=True)
def solid_eval(m2, beta):
    """Weight and its partials in ``m2`` and ``beta`` (see module docstring)."""
    if m2 <= 0.0:
        # analytic limits at the center; log(0) avoided via the floor
        if beta > 2.0:
            dm2 = 0.0
        elif beta == 2.0:
            dm2 = -0.5
        else:
            u = 0.5 * M2_FLOOR
            p = u ** (0.5 * beta)
            w0 = math.exp(-p)
            dm2 = -0.25 * beta * p / u * w0
        u = 0.5 * M2_FLOOR
        p = u ** (0.5 * beta)
        dbeta = -math.exp(-p) * p * 0.5 * math.log(u)
        return 1.0, dm2, dbeta
    m2c = max(m2, M2_FLOOR)
    u = 0.5 * m2c
    p = u ** (0.5 * beta)
    w = math.exp(-p)
    dm2 = -0.25 * beta * (p / u) * w
    dbeta = -w * p * 0.5 * math.log(u)
    return w, dm2, dbeta


def eval_solid(m2: float, beta: float) -> KernelEval:
    if not beta > 1.0:
        raise InvalidInputError(f"beta must exceed 1, got {beta}")
    if m2 < 0:
        raise InvalidInputError("m2 must be non-negative")
    w, dm2, dbeta = solid_eval(float(m2), float(beta))
    return KernelEval(w, dm2, dbeta)


def eval_solid_array(m2, beta: float) -> np.ndarray:
    """Vectorized weight only."""
    m2 = np.asarray(m2, dtype=np.float64)
    return np.exp(-np.power(0.5 * np.maximum(m2, 0.0), 0.5 * beta))


def effective_radius(beta: float, epsilon: float = CULL_EPSILON) -> float:
    """Mahalanobis radius at which the kernel weight drops to ``epsilon``."""
    if not beta > 1.0:
        raise InvalidInputError(f"beta must exceed 1, got {beta}")
    if not 0.0 < epsilon < 1.0:
        raise InvalidInputError("epsilon must lie in (0, 1)")
    return math.sqrt(2.0 * math.log(1.0 / epsilon) ** (2.0 / beta))
