"""Pure-numpy reference implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx`` with identical
semantics; this module is the fallback when the extension is unavailable
and the oracle the extension is tested against.

All kernels take C-contiguous float64 arrays. Softmax and layer norm
operate row-wise on 2-D views; GELU is elementwise on flat views.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax_rows(x):
    """Row-wise softmax with max subtraction. Rows must not be all -inf."""
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_rows_grad(y, dy):
    """Backward of softmax_rows: dx = y * (dy - sum(dy * y, row))."""
    s = np.sum(dy * y, axis=1, keepdims=True)
    return y * (dy - s)


def gelu(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x, dy):
    """Backward of exact GELU."""
    d = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dy * d


def layernorm(x, gamma, beta, eps):
    """Row-wise layer norm. Returns (y, mean, rstd); mean/rstd feed backward."""
    mu = np.mean(x, axis=1)
    xc = x - mu[:, None]
    var = np.mean(xc * xc, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mu, rstd


def layernorm_grad(x, gamma, mu, rstd, dy):
    """Backward of layernorm. Returns (dx, dgamma, dbeta)."""
    xhat = (x - mu[:, None]) * rstd[:, None]
    dyg = dy * gamma
    m1 = np.mean(dyg, axis=1)
    m2 = np.mean(dyg * xhat, axis=1)
    dx = (dyg - m1[:, None] - xhat * m2[:, None]) * rstd[:, None]
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    return dx, dgamma, dbeta
