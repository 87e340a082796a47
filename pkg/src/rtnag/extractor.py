"""3D convolutional feature extractor with Gram-Schmidt channel attention.

Three conv -> relu -> maxpool units (1 -> 8 -> 16 -> 32 channels) turn a
V^3 volume into 32 maps of extent V/8. A two-layer attention net reweights
the channels from their Gram-Schmidt novelty coefficients, then FC1 gives
the feature vector and FC2 the auxiliary class logits.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHANNELS = (1, 8, 16, 32)
GS_DELTA = 1e-12


def init_params(rng: np.random.Generator, extent: int = 16, feature_dim: int = 32,
                n_classes: int = 3, att_hidden: int = 16) -> dict[str, np.ndarray]:
    if extent < 8 or extent & (extent - 1):
        raise ValueError(f"volume extent must be a power of two >= 8, got {extent}")
    p: dict[str, np.ndarray] = {}
    for i in range(3):
        cin, cout = CHANNELS[i], CHANNELS[i + 1]
        p[f"ext.conv{i + 1}_w"] = rng.normal(0, np.sqrt(2.0 / (27 * cin)), (cout, cin, 3, 3, 3))
        p[f"ext.conv{i + 1}_b"] = np.zeros(cout)
    c = CHANNELS[-1]
    p["ext.att1_w"] = rng.normal(0, np.sqrt(1.0 / c), (att_hidden, c))
    p["ext.att1_b"] = np.zeros(att_hidden)
    p["ext.att2_w"] = rng.normal(0, np.sqrt(1.0 / att_hidden), (c, att_hidden))
    p["ext.att2_b"] = np.zeros(c)
    flat = c * (extent // 8) ** 3
    p["ext.fc1_w"] = rng.normal(0, np.sqrt(1.0 / flat), (feature_dim, flat))
    p["ext.fc1_b"] = np.zeros(feature_dim)
    p["ext.fc2_w"] = rng.normal(0, np.sqrt(1.0 / feature_dim), (n_classes, feature_dim))
    p["ext.fc2_b"] = np.zeros(n_classes)
    return p


def linear(x, w, b) -> Tensor:
    """x @ w.T + b over the last axis; a single vector is treated as one row."""
    x = T.as_tensor(x)
    if x.ndim == 1:
        return T.reshape(T.matmul(T.reshape(x, (1, -1)), T.transpose(w)) + b, (-1,))
    return T.matmul(x, T.transpose(w)) + b


def conv_pool_stack(volume, p) -> Tensor:
    """(..., V, V, V) volumes -> (..., 32, V/8, V/8, V/8) channel maps."""
    x = T.as_tensor(volume)
    x = T.reshape(x, x.shape[:-3] + (1,) + x.shape[-3:])
    for i in range(1, 4):
        b = p[f"ext.conv{i}_b"]
        x = T.conv3d(x, p[f"ext.conv{i}_w"]) + T.reshape(b, (b.shape[0], 1, 1, 1))
        x = T.maxpool3d(T.relu(x))
    return x


def gram_schmidt_coeffs(maps) -> Tensor:
    """Novel-energy ratio ||u_c||^2 / (||v_c||^2 + delta) per channel.

    Channels are flattened to vectors v_c and orthogonalised in channel order
    (modified Gram-Schmidt); u_c is the residual of channel c after removing
    its projection on every earlier channel. Output shape (..., C).
    """
    maps = T.as_tensor(maps)
    lead = maps.shape[:-4] if maps.ndim >= 4 else maps.shape[:-2]
    c = maps.shape[len(lead)]
    v = T.reshape(maps, lead + (c, -1))
    energy = T.tsum(v * v, axis=-1)  # (..., C)
    rest = v
    residual_energy = []
    for k in range(c):
        u = rest[..., 0:1, :]
        uu = T.tsum(u * u, axis=-1, keepdims=True)
        residual_energy.append(uu[..., 0, :])
        if k == c - 1:
            break
        rest = rest[..., 1:, :]
        coef = T.tsum(rest * u, axis=-1, keepdims=True) / (uu + GS_DELTA)
        rest = rest - coef * u
    return T.concat(residual_energy, axis=-1) / (energy + GS_DELTA)


def channel_attention(coeffs, p) -> Tensor:
    hidden = T.relu(linear(coeffs, p["ext.att1_w"], p["ext.att1_b"]))
    return T.sigmoid(linear(hidden, p["ext.att2_w"], p["ext.att2_b"]))


def extract_features(volume, p) -> Tensor:
    maps = conv_pool_stack(volume, p)
    weights = channel_attention(gram_schmidt_coeffs(maps), p)
    lead = maps.shape[:-4]
    reweighted = maps * T.reshape(weights, weights.shape + (1, 1, 1))
    flat = T.reshape(reweighted, lead + (-1,))
    return linear(flat, p["ext.fc1_w"], p["ext.fc1_b"])


def aux_logits(features, p) -> Tensor:
    return linear(features, p["ext.fc2_w"], p["ext.fc2_b"])
