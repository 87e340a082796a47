"""Time-aware neural ODE evolution of the hidden state between visits.

The hidden point is moved to log-coordinates, integrated with a fixed-step
solver under the field eps * f(t, y), and mapped back. Because integration
happens in the flat chart, the result is always a valid Cholesky point.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import geometry as G
from . import tensor as T
from .config import SolverConfig
from .extractor import linear
from .tensor import Tensor

Field = Callable[[np.ndarray, Tensor], Tensor]


def init_params(rng: np.random.Generator, q: int, hidden: int = 64,
                std: float = 0.01) -> dict[str, np.ndarray]:
    p = G.tangent_dim(q)
    return {
        "ode.w1": rng.normal(0, 1.0 / np.sqrt(p + 1), (hidden, p + 1)),
        "ode.b1": np.zeros(hidden),
        "ode.w2": rng.normal(0, std, (p, hidden)),
        "ode.b2": np.zeros(p),
        "time.w": np.zeros(()),
        "time.b": np.zeros(()),
    }


def time_coefficient(age_norm, p) -> Tensor:
    """eps = softplus(w * age + b); strictly positive."""
    return T.softplus(T.as_tensor(age_norm) * p["time.w"] + p["time.b"])


def vector_field(t, y, eps, p) -> Tensor:
    """eps * MLP([y; t]) on vectorized tangent coordinates.

    ``y`` has shape (..., P), ``t`` broadcasts to y.shape[:-1] and ``eps`` to
    (..., 1) or a scalar.
    """
    y = T.as_tensor(y)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), y.shape[:-1])[..., None]
    hidden = T.tanh(linear(T.concat([y, t], axis=-1), p["ode.w1"], p["ode.b1"]))
    return linear(hidden, p["ode.w2"], p["ode.b2"]) * eps


def step_counts(t0, t1, h_max: float) -> np.ndarray:
    dt = np.asarray(t1, dtype=np.float64) - np.asarray(t0, dtype=np.float64)
    return np.maximum(1, np.ceil(dt / h_max)).astype(int)


def integrate(field: Field, y0, t0, t1, cfg: SolverConfig) -> Tensor:
    """Fixed-step Euler/RK4 from t0 to t1, independently per leading row.

    Each row takes n = max(1, ceil((t1 - t0) / h_max)) equal steps; rows that
    finish early take zero-length steps, which leave them unchanged.
    """
    y = T.as_tensor(y0)
    lead = y.shape[:-1]
    t0 = np.broadcast_to(np.asarray(t0, dtype=np.float64), lead)
    t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), lead)
    dt = t1 - t0
    if np.any(dt < 0):
        raise ValueError("integration end precedes start (visits must be time-ordered)")
    if np.all(dt == 0):
        return y
    n = step_counts(t0, t1, cfg.h_max)
    step = dt / n
    for k in range(int(n.max())):
        h = np.where(k < n, step, 0.0)
        t = t0 + np.minimum(k, n) * step
        hc = h[..., None]
        if cfg.method == "euler":
            y = y + hc * field(t, y)
        else:
            k1 = field(t, y)
            k2 = field(t + h / 2, y + (hc / 2) * k1)
            k3 = field(t + h / 2, y + (hc / 2) * k2)
            k4 = field(t + h, y + hc * k3)
            y = y + (hc / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def evolve(h_prev, t0, t1, eps, p, cfg: SolverConfig, space=G.CHOLESKY) -> Tensor:
    """Carry hidden points (..., Q, Q) from time t0 to t1.

    Rows with t1 == t0 are returned bit-identically.
    """
    h_prev = T.as_tensor(h_prev)
    q = h_prev.shape[-1]
    lead = h_prev.shape[:-2]
    t0 = np.broadcast_to(np.asarray(t0, dtype=np.float64), lead)
    t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), lead)
    if np.any(t1 < t0):
        raise ValueError("evolve: t1 < t0 (visits must be time-ordered)")
    still = t1 == t0
    if np.all(still):
        return h_prev
    eps = T.as_tensor(eps)
    if eps.ndim and eps.shape[-1] != 1:
        eps = T.reshape(eps, eps.shape + (1,))
    y0 = G.vec(space.log(h_prev))
    y1 = integrate(lambda t, y: vector_field(t, y, eps, p), y0, t0, t1, cfg)
    moved = space.exp(G.unvec(y1, q))
    if not np.any(still):
        return moved
    keep = still.astype(np.float64)[..., None, None]
    return h_prev * keep + moved * (1.0 - keep)
