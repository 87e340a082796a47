"""Attention-gated recurrent update on the Cholesky manifold.

At each visit the hidden point is first carried forward by the neural ODE,
then blended with a candidate built from the current encoding. Everything
runs on batches of subjects in lockstep: padded visits get a zero time step
and a closed gate, which leaves their state untouched.
"""
from __future__ import annotations

import numpy as np

from . import geometry as G
from . import tensor as T
from . import tnode
from .config import ModelConfig
from .tensor import Tensor

GATE_FLOOR = 1e-6


def init_params(rng: np.random.Generator, q: int, std: float = 0.01,
                plain_gate: bool = False) -> dict[str, np.ndarray]:
    P = G.tangent_dim(q)
    p = {
        "gru.wq": rng.normal(0, std, (P, P)),
        "gru.wk": rng.normal(0, std, (P, P)),
        "gru.wv": rng.normal(0, std, (P, P)),
        "gru.wr": np.zeros(2),
        "gru.wl": np.zeros(2),
        # biases are stored in log-coordinates; zeros give B = I
        "gru.br": rng.normal(0, std, P),
        "gru.bl": rng.normal(0, std, P),
        "gru.theta": np.zeros(()),
    }
    if plain_gate:
        p["gru.wz"] = np.zeros(2)
        p["gru.bz"] = rng.normal(0, std, P)
    return p


def _bias_point(coords, q: int, space) -> Tensor:
    return space.exp(G.unvec(coords, q))


def _map(W, x, space) -> Tensor:
    """exp(W log x) with W acting on vectorized coordinates."""
    q = T.as_tensor(x).shape[-1]
    coords = G.vec(space.log(x))
    flat = T.reshape(coords, (-1, coords.shape[-1]))
    out = T.reshape(T.matmul(flat, T.transpose(W)), coords.shape)
    return space.exp(G.unvec(out, q))


def qkv(h_prime, e, p, space=G.CHOLESKY) -> tuple[Tensor, Tensor, Tensor]:
    h_prime, e = T.as_tensor(h_prime), T.as_tensor(e)
    if h_prime.shape[-1] != e.shape[-1]:
        raise T.ShapeError(f"dimension mismatch: {h_prime.shape} vs {e.shape}")
    return _map(p["gru.wq"], h_prime, space), _map(p["gru.wk"], e, space), \
        _map(p["gru.wv"], e, space)


def interval_decay(dt, p) -> Tensor:
    """exp(-softplus(theta) * dt), one factor per leading row."""
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt < 0):
        raise ValueError("interval must be non-negative")
    return T.exp(T.softplus(p["gru.theta"]) * (-dt))


def attention_gate(q, k, v, dt, p, interval_scaling: bool = True) -> Tensor:
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    n = q.shape[-1]
    scores = T.softmax_rows(T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(n)))
    z = T.sigmoid(T.matmul(scores, v))
    if interval_scaling:
        decay = interval_decay(dt, p)
        z = z * T.reshape(decay, decay.shape + (1, 1))
    return T.clamp_min(z, GATE_FLOOR) * G.lower_mask(n)


def _sigmoid_lower(x) -> Tensor:
    x = T.as_tensor(x)
    return T.sigmoid(x) * G.lower_mask(x.shape[-1])


def reset_gate(e, h_prime, p, space=G.CHOLESKY) -> Tensor:
    q = T.as_tensor(e).shape[-1]
    mean = space.wfm([e, h_prime], p["gru.wr"])
    return _sigmoid_lower(space.oplus(mean, _bias_point(p["gru.br"], q, space)))


def plain_gate(e, h_prime, p, space=G.CHOLESKY) -> Tensor:
    """wFM-sigmoid update gate without attention (ablation)."""
    q = T.as_tensor(e).shape[-1]
    mean = space.wfm([e, h_prime], p["gru.wz"])
    return _sigmoid_lower(space.oplus(mean, _bias_point(p["gru.bz"], q, space)))


def candidate(e, r, h_prime, p, space=G.CHOLESKY) -> Tensor:
    q = T.as_tensor(e).shape[-1]
    mixed = space.wfm([e, space.oplus(r, h_prime)], p["gru.wl"])
    l = space.oplus(mixed, _bias_point(p["gru.bl"], q, space))
    return space.candidate(l)


def update(h_prime, h_bar, z) -> Tensor:
    """(1 - z) * h' + z * h_bar entrywise."""
    z = T.as_tensor(z)
    return (1.0 - z) * h_prime + z * h_bar


def space_for(cfg: ModelConfig):
    return G.CHOLESKY if cfg.manifold else G.EUCLIDEAN


def epsilon(age_norm, p, cfg: ModelConfig):
    if not cfg.time_aware:
        return 1.0
    return tnode.time_coefficient(age_norm, p)


def carry(h, t0, t1, age_norm, p, cfg: ModelConfig) -> Tensor:
    if not cfg.use_tnode:
        return T.as_tensor(h)
    eps = epsilon(age_norm, p, cfg)
    return tnode.evolve(h, t0, t1, eps, p, cfg.solver, space_for(cfg))


def cell_step(h_prev, e, t_prev, t_cur, age_norm, p, cfg: ModelConfig,
              observed=None) -> Tensor:
    """One TNODE carry followed by one gated update.

    ``observed`` (0/1 per row) closes the gate for padded visits.
    """
    space = space_for(cfg)
    t_prev = np.asarray(t_prev, dtype=np.float64)
    t_cur = np.asarray(t_cur, dtype=np.float64)
    if np.any(t_cur < t_prev):
        raise ValueError("visit times must be non-decreasing")
    h_prime = carry(h_prev, t_prev, t_cur, age_norm, p, cfg)
    if cfg.gate == "none":
        return h_prime
    if cfg.gate == "attention":
        q, k, v = qkv(h_prime, e, p, space)
        z = attention_gate(q, k, v, t_cur - t_prev, p, cfg.interval_scaling)
    else:
        z = plain_gate(e, h_prime, p, space)
        if cfg.interval_scaling:
            decay = interval_decay(t_cur - t_prev, p)
            z = z * T.reshape(decay, decay.shape + (1, 1))
    if observed is not None:
        z = z * np.asarray(observed, dtype=np.float64)[..., None, None]
    r = reset_gate(e, h_prime, p, space)
    h_bar = candidate(e, r, h_prime, p, space)
    return update(h_prime, h_bar, z)


def run_batch(E, times, observed, t_start, target_time, p, cfg: ModelConfig
              ) -> tuple[list[Tensor], Tensor]:
    """Alternate ODE carry and gated update over padded visit sequences.

    E: (B, J, Q, Q) encodings; times, observed: (B, J); t_start and
    target_time: (B,). Padded slots must repeat the previous time.
    Returns the per-visit states and the state carried to ``target_time``.
    """
    E = T.as_tensor(E)
    times = np.asarray(times, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    B, J = times.shape
    space = space_for(cfg)
    h = T.Tensor(space.identity(cfg.q, (B,)))
    t_prev = np.asarray(t_start, dtype=np.float64)
    states = []
    for j in range(J):
        t_cur = times[:, j]
        h = cell_step(h, E[:, j], t_prev, t_cur, t_prev, p, cfg, observed[:, j])
        states.append(h)
        t_prev = t_cur
    target_time = np.asarray(target_time, dtype=np.float64)
    if np.any(target_time < t_prev):
        raise ValueError("target time precedes the last visit")
    return states, carry(h, t_prev, target_time, t_prev, p, cfg)


def run_sequence(E, times, p, cfg: ModelConfig, target_time: float,
                 t_start: float | None = None) -> tuple[list[Tensor], Tensor]:
    """Single-subject recurrence. E: (J, Q, Q); times strictly increasing."""
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("visit times must be strictly increasing")
    if t_start is None:
        if len(times) == 0:
            raise ValueError("t_start is required for an empty sequence")
        t_start = float(times[0])
    if len(times) == 0:
        h0 = T.Tensor(space_for(cfg).identity(cfg.q, (1,)))
        final = carry(h0, np.array([t_start]), np.array([target_time]),
                      np.array([t_start]), p, cfg)
        return [], final[0]
    E = T.as_tensor(E)
    states, final = run_batch(
        T.reshape(E, (1,) + E.shape), times[None, :], np.ones((1, len(times))),
        np.array([t_start]), np.array([target_time]), p, cfg)
    return [s[0] for s in states], final[0]
