"""Pure-numpy kernels. Same signatures as the compiled ``_kernels`` module."""

import numpy as np

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


def _views(flat, dims):
    out, off = [], 0
    for fan_in, fan_out in dims:
        W = flat[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = flat[off : off + fan_out]
        off += fan_out
        out.append((W, b))
    return out


def loss_grad(flat, dims, fusion_index, X, sex, ca, shift, scale, lvshift, grad):
    """Mean Gaussian NLL of the batch; writes d(loss)/d(flat) into ``grad``."""
    layers = _views(flat, dims)
    gviews = _views(grad, dims)
    n = X.shape[0]
    last = len(layers) - 1
    h = X
    ins, acts = [], []
    for i, (W, b) in enumerate(layers):
        if i == fusion_index:
            h = np.concatenate([h, sex[:, None]], axis=1)
        ins.append(h)
        z = h @ W + b
        h = z if i == last else np.tanh(z)
        acts.append(h)

    mean = shift + scale * h[:, 0]
    s_raw = lvshift + h[:, 1]
    active = (s_raw >= LOGVAR_MIN) & (s_raw <= LOGVAR_MAX)
    s = np.clip(s_raw, LOGVAR_MIN, LOGVAR_MAX)
    resid = ca - mean
    inv_var = np.exp(-s)
    loss = float(np.mean(0.5 * resid**2 * inv_var + 0.5 * s))

    delta = np.empty((n, 2))
    delta[:, 0] = -resid * inv_var * scale / n
    delta[:, 1] = np.where(active, 0.5 * (1.0 - resid**2 * inv_var), 0.0) / n
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * (1.0 - acts[i] ** 2)
        gW, gb = gviews[i]
        np.matmul(ins[i].T, delta, out=gW)
        gb[:] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ layers[i][0].T
            if i == fusion_index:
                delta = delta[:, :-1]
    return loss


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
