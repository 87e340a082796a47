"""Cholesky space: lower-triangular matrices with a positive diagonal.

Points are stored as full ``(..., Q, Q)`` arrays whose upper triangle is
exactly zero. The geometry is the flat one obtained by taking the log of the
diagonal: the strict-lower part is left alone, the diagonal lives in log
space. Under that chart the group operation, the weighted Frechet mean and
the distance all have closed forms.

Every function works on :class:`~rtnag.tensor.Tensor` (so it can sit on the
tape) and also accepts plain numpy arrays, which are wrapped as constants.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class InvalidPointError(ValueError):
    pass


@lru_cache(maxsize=None)
def strict_lower_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)), -1)


@lru_cache(maxsize=None)
def lower_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def _dim(x) -> int:
    return T.as_tensor(x).shape[-1]


def strict_lower(x) -> Tensor:
    return T.mul(x, strict_lower_mask(_dim(x)))


def is_valid(L, tol: float = 0.0) -> bool:
    """True when ``L`` has a strictly positive diagonal and a zero upper part."""
    a = L.data if isinstance(L, Tensor) else np.asarray(L)
    n = a.shape[-1]
    upper = a[..., ~lower_mask(n).astype(bool)]
    diag = a[..., np.arange(n), np.arange(n)]
    return bool(np.all(diag > tol) and np.all(upper == 0.0) and np.all(np.isfinite(a)))


def identity(q: int, batch: tuple[int, ...] = ()) -> np.ndarray:
    return np.broadcast_to(np.eye(q), batch + (q, q)).copy()


def chol_log(L) -> Tensor:
    L = T.as_tensor(L)
    d = T.diagonal(L)
    if not np.all(d.data > 0):
        raise InvalidPointError("chol_log: diagonal must be strictly positive")
    return strict_lower(L) + T.diag_embed(T.log(d))


def chol_exp(X) -> Tensor:
    X = T.as_tensor(X)
    return strict_lower(X) + T.diag_embed(T.exp(T.diagonal(X)))


def _check_dims(a: Tensor, b: Tensor) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise T.ShapeError(f"dimension mismatch: {a.shape[-2:]} vs {b.shape[-2:]}")


def group_op(L1, L2) -> Tensor:
    """Add strict-lower parts, multiply diagonals."""
    L1, L2 = T.as_tensor(L1), T.as_tensor(L2)
    _check_dims(L1, L2)
    return strict_lower(L1) + strict_lower(L2) + \
        T.diag_embed(T.diagonal(L1) * T.diagonal(L2))


def wfm(points: Sequence, logits) -> Tensor:
    """Weighted Frechet mean with weights softmax(logits).

    Arithmetic mean of the strict-lower parts, geometric mean of the
    diagonals. ``logits`` has shape (..., M) for M points; leading dimensions
    broadcast against the points.
    """
    if len(points) == 0:
        raise ValueError("wfm needs at least one point")
    pts = [T.as_tensor(p) for p in points]
    for p in pts[1:]:
        _check_dims(pts[0], p)
    logits = T.as_tensor(logits)
    if logits.shape[-1] != len(pts):
        raise T.ShapeError(f"{len(pts)} points but {logits.shape[-1]} logits")
    w = T.softmax_rows(logits)
    lower = None
    logdiag = None
    for m, p in enumerate(pts):
        wm = w[..., m]
        lo = strict_lower(p) * T.reshape(wm, wm.shape + (1, 1))
        ld = T.log(T.diagonal(p)) * T.reshape(wm, wm.shape + (1,))
        lower = lo if lower is None else lower + lo
        logdiag = ld if logdiag is None else logdiag + ld
    return lower + T.diag_embed(T.exp(logdiag))


def project_to_chol(M, floor: float = 1e-8) -> Tensor:
    """Zero the upper triangle and clamp the diagonal to at least ``floor``."""
    M = T.as_tensor(M)
    return strict_lower(M) + T.diag_embed(T.clamp_min(T.diagonal(M), floor))


def chol_distance(L1, L2) -> float:
    """Frobenius norm of the difference of log-coordinates."""
    a, b = np.asarray(T.as_tensor(L1).data), np.asarray(T.as_tensor(L2).data)
    if a.shape[-2:] != b.shape[-2:]:
        raise T.ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = chol_log(a).data - chol_log(b).data
    return float(np.sqrt((diff ** 2).sum()))


def vec(X) -> Tensor:
    """Lower-triangle coordinates (..., Q(Q+1)/2)."""
    return T.tril_vec(X)


def unvec(v, q: int) -> Tensor:
    return T.tril_unvec(v, q)


def tangent_dim(q: int) -> int:
    return q * (q + 1) // 2


class CholeskySpace:
    """Manifold operations used by the recurrent cell."""

    name = "cholesky"

    def identity(self, q: int, batch: tuple[int, ...] = ()) -> np.ndarray:
        return identity(q, batch)

    def log(self, L) -> Tensor:
        return chol_log(L)

    def exp(self, X) -> Tensor:
        return chol_exp(X)

    def oplus(self, a, b) -> Tensor:
        return group_op(a, b)

    def wfm(self, points, logits) -> Tensor:
        return wfm(points, logits)

    def candidate(self, l) -> Tensor:
        l = T.as_tensor(l)
        return T.tanh(strict_lower(l)) + T.diag_embed(T.softplus(T.diagonal(l)))


class EuclideanSpace:
    """Flat stand-ins: identity charts, addition, arithmetic weighted mean."""

    name = "euclidean"

    def identity(self, q: int, batch: tuple[int, ...] = ()) -> np.ndarray:
        return np.zeros(batch + (q, q))

    def log(self, L) -> Tensor:
        return T.as_tensor(L)

    def exp(self, X) -> Tensor:
        return T.as_tensor(X)

    def oplus(self, a, b) -> Tensor:
        return T.add(a, b)

    def wfm(self, points, logits) -> Tensor:
        w = T.softmax_rows(logits)
        out = None
        for m, p in enumerate(points):
            wm = w[..., m]
            term = T.mul(p, T.reshape(wm, wm.shape + (1, 1)))
            out = term if out is None else out + term
        return out

    def candidate(self, l) -> Tensor:
        l = T.as_tensor(l)
        return T.tanh(l) * lower_mask(l.shape[-1])


CHOLESKY = CholeskySpace()
EUCLIDEAN = EuclideanSpace()
