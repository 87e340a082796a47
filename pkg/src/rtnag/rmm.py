"""Multimodal fusion, SPD lift and Cholesky mapping, plus the task decoder."""
from __future__ import annotations

import numpy as np

from . import geometry as G
from . import tensor as T
from .extractor import linear
from .tensor import Tensor

MISSING_SCORE = 0.5


def fuse(features, scores, mask) -> Tensor:
    """Concatenate features with scores; unobserved scores become 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    filled = np.where(mask, scores, MISSING_SCORE)
    return T.concat([T.as_tensor(features), filled], axis=-1)


def lift_channels(m, kernels) -> Tensor:
    """1-channel length-W signal -> (Q, W) via a kernel-3 convolution."""
    return T.conv1d_same(m, kernels)


def to_manifold(x, ridge: float = 1e-4) -> Tensor:
    """Row covariance of the lifted signal, then its Cholesky factor."""
    return T.cholesky_factor(T.covariance_rows(x, ridge))


def to_flat(x, ridge: float = 1e-4) -> Tensor:
    """Flat counterpart of :func:`to_manifold`: the covariance's lower triangle."""
    cov = T.covariance_rows(x, ridge)
    return cov * G.lower_mask(cov.shape[-1])


def encode(m, p, ridge: float = 1e-4, manifold: bool = True) -> Tensor:
    lifted = lift_channels(m, p["rmm.conv"])
    return to_manifold(lifted, ridge) if manifold else to_flat(lifted, ridge)


def init_params(rng: np.random.Generator, q: int, n_classes: int = 3,
                n_scores: int = 3, std: float = 0.01) -> dict[str, np.ndarray]:
    p = G.tangent_dim(q)
    return {
        "rmm.conv": rng.normal(0, 1.0 / np.sqrt(3), (q, 1, 3)),
        "dec.cls_w": rng.normal(0, std, (n_classes, p)),
        "dec.cls_b": np.zeros(n_classes),
        "dec.reg_w": rng.normal(0, std, (n_scores, p)),
        "dec.reg_b": np.zeros(n_scores),
    }


def decode_coords(coords, p) -> tuple[Tensor, Tensor]:
    probs = T.softmax_rows(linear(coords, p["dec.cls_w"], p["dec.cls_b"]))
    scores = T.sigmoid(linear(coords, p["dec.reg_w"], p["dec.reg_b"]))
    return probs, scores


def decode(h, p) -> tuple[Tensor, Tensor]:
    """Class probabilities and (0, 1) scores from the log-coordinates of h."""
    return decode_coords(G.vec(G.chol_log(h)), p)
