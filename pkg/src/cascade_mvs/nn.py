"""Small numpy layers with hand-written backward passes.

All convolutions are 3x3, stride 1, replicate-padded; tensors are ``(B, C, H, W)``.
"""

from __future__ import annotations

import numpy as np


def pad_edge(x: np.ndarray, r: int = 1) -> np.ndarray:
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)], mode="edge")


def pad_edge_adjoint(g: np.ndarray, r: int = 1) -> np.ndarray:
    """Adjoint of :func:`pad_edge`: fold the border back onto the edge pixels."""
    g = g.copy()
    g[..., r, :] += g[..., :r, :].sum(axis=-2)
    g[..., -r - 1, :] += g[..., -r:, :].sum(axis=-2)
    g[..., :, r] += g[..., :, :r].sum(axis=-1)
    g[..., :, -r - 1] += g[..., :, -r:].sum(axis=-1)
    return g[..., r:-r, r:-r]


def im2col(x: np.ndarray) -> np.ndarray:
    """``(B, C, H, W) -> (B, C*9, H*W)`` patches of the edge-padded input."""
    b, c, h, w = x.shape
    xp = pad_edge(x)
    cols = np.empty((b, c, 3, 3, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky : ky + h, kx : kx + w]
    return cols.reshape(b, c * 9, h * w)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(b, c, 3, 3, h, w)
    gp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            gp[:, :, ky : ky + h, kx : kx + w] += cols[:, :, ky, kx]
    return pad_edge_adjoint(gp)


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns the output and the im2col buffer needed by :func:`conv3x3_backward`."""
    b, _, h, w = x.shape
    cols = im2col(x)
    y = np.matmul(weight.reshape(weight.shape[0], -1), cols) + bias[None, :, None]
    return y.reshape(b, -1, h, w), cols


def conv3x3_backward(dy: np.ndarray, cols: np.ndarray, weight: np.ndarray, x_shape):
    b, cout, h, w = dy.shape
    dy2 = dy.reshape(b, cout, h * w)
    w2 = weight.reshape(cout, -1)
    dw = np.einsum("bop,bkp->ok", dy2, cols).reshape(weight.shape)
    db = dy2.sum(axis=(0, 2))
    dx = col2im(np.matmul(w2.T, dy2), x_shape)
    return dx, dw, db


def batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, mean, var)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps):
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], xhat


def batchnorm_train_backward(dy, gamma, xhat, inv_std):
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)
