"""Pure-numpy versions of the fused kernels; same signatures as the compiled module."""
import numpy as np

GELU_C = 0.7978845608028654
GELU_K = 0.044715


def gelu_forward(x):
    t = np.tanh(GELU_C * (x + GELU_K * (x * x * x)))
    return 0.5 * x * (1.0 + t)


def gelu_backward(x, g):
    t = np.tanh(GELU_C * (x + GELU_K * (x * x * x)))
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * (x * x)))


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_backward(g, xhat, rstd, gain):
    gh = g * gain
    gx = rstd[:, None] * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def softmax_forward(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))
