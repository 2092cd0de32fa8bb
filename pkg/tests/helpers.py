"""Independent oracles shared by the test modules.

Nothing here calls into caedet's kernels: the loop convolution and the
finite differences are written from the definitions only.
"""
import math

import numpy as np


def same_padding(n, k, s):
    out = math.ceil(n / s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2


def naive_conv2d(x, kernel, bias, stride):
    """Six nested loops over (n, i, j, co, a, b) with a ci reduction; zero padding, SAME."""
    n_batch, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ho, top = same_padding(h, kh, stride)
    wo, left = same_padding(w, kw, stride)
    out = np.zeros((n_batch, ho, wo, cout))
    for n in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    acc = bias[co]
                    for a in range(kh):
                        for b in range(kw):
                            r, c = i * stride + a - top, j * stride + b - left
                            if 0 <= r < h and 0 <= c < w:
                                for ci in range(cin):
                                    acc += x[n, r, c, ci] * kernel[a, b, ci, co]
                    out[n, i, j, co] = acc
    return out


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def perturb_to_generic(model_or_store, rng, kernel_gain=2.0):
    """Move parameters off the ReLU kinks that zero biases create at initialization.

    With zero biases and dead upstream units, many pre-activations are exactly
    0 and central differences straddle the kink. Random biases and a larger
    kernel scale put the check at a generic (differentiable) point.
    """
    store = getattr(model_or_store, "store", model_or_store)
    for name, p in store:
        if name.endswith("bias"):
            p.value[...] = rng.uniform(-0.5, 0.5, p.value.shape)
        else:
            p.value *= kernel_gain
