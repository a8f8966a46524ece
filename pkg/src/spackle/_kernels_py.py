"""Pure-numpy versions of the fused kernels in ``_kernels.pyx``.

Signatures and output-buffer conventions match the compiled module exactly so
the two are interchangeable.
"""

import numpy as np

GELU_C = 0.7978845608028654
GELU_A = 0.044715


def layernorm_forward(x, gamma, beta, eps, out, xhat, rstd):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    rstd[:] = r[:, 0]
    np.multiply(centered, r, out=xhat)
    np.multiply(xhat, gamma, out=out)
    out += beta


def layernorm_backward(dy, xhat, rstd, gamma, dx, dgamma, dbeta):
    dgamma[:] = np.sum(dy * xhat, axis=0)
    dbeta[:] = np.sum(dy, axis=0)
    g = dy * gamma
    s1 = g.mean(axis=1, keepdims=True)
    s2 = np.mean(g * xhat, axis=1, keepdims=True)
    dx[:] = rstd[:, None] * (g - s1 - xhat * s2)


def gelu_forward(x, out):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    out[:] = 0.5 * x * (1.0 + t)


def gelu_backward(x, dy, dx):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    dx[:] = dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def masked_softmax_forward(scores, presence, heads, out):
    keys = np.repeat(presence.astype(bool), heads, axis=0)[:, None, :]
    masked = np.where(keys, scores, -np.inf)
    mx = masked.max(axis=2, keepdims=True)
    e = np.exp(masked - mx)
    out[:] = e / e.sum(axis=2, keepdims=True)


def softmax_backward(p, dp, ds):
    s = np.sum(dp * p, axis=2, keepdims=True)
    ds[:] = p * (dp - s)
