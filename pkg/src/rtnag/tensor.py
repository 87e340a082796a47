"""Dense float64 tensors with a reverse-mode differentiation tape.

Every operation records its inputs and a backward closure on the output
node. Node ids increase monotonically, so sorting reachable nodes by id gives
a valid reverse topological order for :func:`backward`.

All primitives accept leading batch dimensions where it makes sense (the
model runs whole batches of subjects in lockstep).
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


class Tensor:
    """A node on the tape: float64 data plus how to push gradients back."""

    __slots__ = ("data", "requires_grad", "op", "parents", "backward_fn", "id")
    # make ndarray (op) Tensor dispatch to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op: str, parents: tuple, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, op, parents, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent == 0:
        return _node(np.ones(a.shape), "pow", (a,), lambda g: (np.zeros(a.shape),))
    return _node(a.data ** exponent, "pow", (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), "transpose", (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in idx)

    def backward(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], "getitem", (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), "concat",
                 tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in ts], axis=axis), "stack", tuple(ts),
                 backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where the input is above the floor."""
    a = as_tensor(a)
    keep = a.data > floor
    return _node(np.where(keep, a.data, floor), "clamp_min", (a,),
                 lambda g: (g * keep,))


# -------------------------------------------------------------- elementwise

def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _node(x.data * pos, "relu", (x,), lambda g: (g * pos,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _node(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.logaddexp(0.0, x.data), "softplus", (x,),
                 lambda g: (g * expit(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    bad = ~(x.data > 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"log of non-positive entry {x.data[idx]!r} at index {idx}")
    return _node(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


ELEMENTWISE = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid,
               "softplus": softplus, "exp": exp, "log": log}


def elementwise(kind: str, x) -> Tensor:
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(x)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, with row-max subtraction."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_rows: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, "softmax", (x,), backward)


# ------------------------------------------------------ triangular helpers

def diagonal(x) -> Tensor:
    x = as_tensor(x)
    n = x.shape[-1]
    idx = np.arange(n)

    def backward(g):
        full = np.zeros(x.shape)
        full[..., idx, idx] = g
        return (full,)

    return _node(x.data[..., idx, idx], "diagonal", (x,), backward)


def diag_embed(v) -> Tensor:
    v = as_tensor(v)
    n = v.shape[-1]
    idx = np.arange(n)
    out = np.zeros(v.shape + (n,))
    out[..., idx, idx] = v.data
    return _node(out, "diag_embed", (v,), lambda g: (g[..., idx, idx],))


def tril_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(n)


def tril_vec(x) -> Tensor:
    """Row-major lower-triangle entries of (..., n, n) as (..., n(n+1)/2)."""
    x = as_tensor(x)
    rows, cols = np.tril_indices(x.shape[-1])

    def backward(g):
        full = np.zeros(x.shape)
        full[..., rows, cols] = g
        return (full,)

    return _node(x.data[..., rows, cols], "tril_vec", (x,), backward)


def tril_unvec(v, n: int) -> Tensor:
    v = as_tensor(v)
    rows, cols = np.tril_indices(n)
    if v.shape[-1] != len(rows):
        raise ShapeError(f"tril_unvec: length {v.shape[-1]} does not fit n={n}")
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., rows, cols] = v.data
    return _node(out, "tril_unvec", (v,), lambda g: (g[..., rows, cols],))


# ------------------------------------------------------------ linear algebra

def _find_bad_pivot(a: np.ndarray) -> int:
    n = a.shape[-1]
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0:
            return j
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return -1


def cholesky_factor(a) -> Tensor:
    """Lower Cholesky factor of the symmetric part of ``a`` (batched)."""
    a = as_tensor(a)
    if a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"cholesky_factor needs square matrices, got {a.shape}")
    sym = 0.5 * (a.data + np.swapaxes(a.data, -1, -2))
    try:
        L = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        flat = sym.reshape((-1,) + sym.shape[-2:])
        for b, m in enumerate(flat):
            j = _find_bad_pivot(m)
            if j >= 0:
                raise NotPositiveDefiniteError(
                    f"not positive definite: pivot {j} of matrix {b}") from None
        raise

    def backward(gL):
        # Murray (2016) identity, symmetric gradient
        gL = np.tril(gL)
        phi = np.tril(np.swapaxes(L, -1, -2) @ gL)
        phi = 0.5 * (phi + np.swapaxes(np.tril(phi, -1), -1, -2))
        Linv = np.linalg.inv(L)
        gA = np.swapaxes(Linv, -1, -2) @ phi @ Linv
        return (0.5 * (gA + np.swapaxes(gA, -1, -2)),)

    return _node(L, "cholesky", (a,), backward)


def covariance_rows(x, ridge: float = 1e-4) -> Tensor:
    """Row covariance (1/w)(X - mean)(X - mean)^T + ridge*I over the last axis."""
    x = as_tensor(x)
    c, w = x.shape[-2], x.shape[-1]
    if w < 1:
        raise ShapeError("covariance_rows needs at least one column")
    centered = x - x.mean(axis=-1, keepdims=True)
    cov = matmul(centered, transpose(centered)) * (1.0 / w)
    return cov + ridge * np.eye(c)


# ---------------------------------------------------------------- 3D layers

def conv3d(x, kernels) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero padding 1.

    x: (..., C_in, D, H, W); kernels: (C_out, C_in, 3, 3, 3).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 5 or kernels.shape[2:] != (3, 3, 3):
        raise ShapeError(f"conv3d kernels must be C_out x C_in x 3 x 3 x 3, got {kernels.shape}")
    if x.ndim < 4 or x.shape[-4] != kernels.shape[1]:
        raise ShapeError(f"conv3d input {x.shape} does not match kernels {kernels.shape}")
    lead = x.shape[:-4]
    cin, D, H, W = x.shape[-4:]
    cout = kernels.shape[0]
    xb = x.data.reshape((-1, cin, D, H, W))
    padded = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3, 3), axis=(2, 3, 4))
    # (N, D, H, W, C_in, 3, 3, 3) -> (N, DHW, C_in*27)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(xb.shape[0], D * H * W, cin * 27)
    kmat = kernels.data.reshape(cout, cin * 27)
    out = (cols @ kmat.T).transpose(0, 2, 1).reshape(lead + (cout, D, H, W))

    def backward(g):
        gb = g.reshape(-1, cout, D * H * W)
        gk = np.einsum("nop,npk->ok", gb, cols).reshape(kernels.shape)
        gcols = (np.swapaxes(gb, 1, 2) @ kmat).reshape(-1, D, H, W, cin, 3, 3, 3)
        gpad = np.zeros(padded.shape)
        for a in range(3):
            for b in range(3):
                for c in range(3):
                    gpad[:, :, a:a + D, b:b + H, c:c + W] += \
                        gcols[..., a, b, c].transpose(0, 4, 1, 2, 3)
        gx = gpad[:, :, 1:-1, 1:-1, 1:-1].reshape(x.shape)
        return gx, gk

    return _node(out, "conv3d", (x, kernels), backward)


def maxpool3d(x) -> Tensor:
    """2x2x2 max pooling, stride 2; gradient goes to the first maximum."""
    x = as_tensor(x)
    D, H, W = x.shape[-3:]
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"maxpool3d needs even spatial extents, got {(D, H, W)}")
    lead = x.shape[:-3]
    blocks = x.data.reshape(lead + (D // 2, 2, H // 2, 2, W // 2, 2))
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3, nl + 5)
    win = blocks.transpose(perm).reshape(lead + (D // 2, H // 2, W // 2, 8))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(lead + (D // 2, H // 2, W // 2, 2, 2, 2))
        inv = np.argsort(perm)
        return (gwin.transpose(inv).reshape(x.shape),)

    return _node(out, "maxpool3d", (x,), backward)


def conv1d_same(x, kernels) -> Tensor:
    """Single-input-channel 1D cross-correlation, kernel 3, stride 1, pad 1.

    x: (..., W); kernels: (C_out, 1, 3) -> (..., C_out, W).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.shape[-1] < 3:
        raise ShapeError(f"conv1d needs signal length >= 3, got {x.shape[-1]}")
    if kernels.ndim != 3 or kernels.shape[1:] != (1, 3):
        raise ShapeError(f"conv1d kernels must be C_out x 1 x 3, got {kernels.shape}")
    w = x.shape[-1]
    zero = np.zeros(x.shape[:-1] + (1,))
    padded = concat([zero, x, zero], axis=-1)
    shifted = stack([padded[..., k:k + w] for k in range(3)], axis=-2)  # (..., 3, W)
    return matmul(kernels.reshape(kernels.shape[0], 3), shifted)


# ------------------------------------------------------------------ backward

def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients keyed by node id."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    if not loss.requires_grad:
        return grads
    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        n = stack_.pop()
        if n.id in nodes:
            continue
        nodes[n.id] = n
        for p in n.parents:
            if p.requires_grad and p.id not in nodes:
                stack_.append(p)
    for nid in sorted(nodes, reverse=True):
        n = nodes[nid]
        g = grads.get(nid)
        if g is None or n.backward_fn is None:
            continue
        for p, gp in zip(n.parents, n.backward_fn(g)):
            if not p.requires_grad or gp is None:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + gp
            else:
                grads[p.id] = gp
        if n.parents:
            del grads[nid]
    return grads


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient map over named parameters (zeros for unreached ones)."""
    g = backward(loss)
    return {k: g.get(p.id, np.zeros(p.shape)) for k, p in params.items()}


def parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
            for k, v in arrays.items()}


def gradient_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                   params: Mapping[str, np.ndarray], h: float = 1e-5,
                   coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``coords`` limits the check to a random subset of coordinates per
    parameter (useful for large models); ``None`` checks every coordinate.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tracked = parameters(base)
    analytic = grad(f(tracked), tracked)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in base.items():
        flat_idx = np.arange(value.size)
        if coords is not None and value.size > coords:
            flat_idx = rng.choice(value.size, size=coords, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, value.shape)
            orig = value[idx]
            value[idx] = orig + h
            fp = float(f({k: Tensor(v) for k, v in base.items()}).data)
            value[idx] = orig - h
            fm = float(f({k: Tensor(v) for k, v in base.items()}).data)
            value[idx] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[name][idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    return worst

