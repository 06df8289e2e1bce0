"""Numpy reference implementations of the row-wise kernels.

All functions take 2-D C-contiguous float64 arrays (rows are independent)
and return freshly allocated arrays.
"""

import numpy as np


def softmax_fwd(x):
    """Row-wise stable softmax: subtract the row max before exponentiating."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    """Gradient of softmax given its output y and upstream gradient gy."""
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_fwd(x, gain, bias, eps):
    """Normalize each row to zero mean / unit variance, then affine.

    Returns (y, xhat, inv_std); xhat and inv_std are saved for backward.
    Variance is the biased (1/H) estimator.
    """
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    y = xhat * gain + bias
    return y, xhat, inv_std.ravel()


def layer_norm_bwd(gy, xhat, inv_std, gain):
    """Gradient of layer_norm_fwd w.r.t. x, gain and bias."""
    dgain = (gy * xhat).sum(axis=0)
    dbias = gy.sum(axis=0)
    dxhat = gy * gain
    mean_dxhat = dxhat.mean(axis=1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
    gx = inv_std[:, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return gx, dgain, dbias


def cross_entropy_fwd(logits, targets):
    """Per-row -log softmax probability of the target class.

    Returns (losses, probs); probs is the softmax, saved for backward.
    """
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    rows = np.arange(logits.shape[0])
    losses = np.log(z.ravel()) + m.ravel() - logits[rows, targets]
    return losses, probs


def cross_entropy_bwd(probs, targets, scale):
    """Gradient of the summed-then-scaled cross entropy: scale*(probs - onehot)."""
    g = probs * scale
    rows = np.arange(probs.shape[0])
    g[rows, targets] -= scale
    return g
