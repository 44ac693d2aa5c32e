"""Pure-NumPy versions of the fused attention kernels."""

from __future__ import annotations

import numpy as np


def assign_aggregate(x, f, w_cluster, b_cluster, tau, n_heads, eps):
    """Soft assignment and token pooling for one bag.

    ``x`` and ``f`` are ``[N, H * D_head]`` (heads concatenated along the last
    axis). Returns weights ``[H, N, M]``, tokens ``[H, M, D_head]`` and mass
    ``[H, M]``.
    """
    n, inner = x.shape
    dh = inner // n_heads
    xt = x.reshape(n, n_heads, dh).transpose(1, 0, 2)
    ft = f.reshape(n, n_heads, dh).transpose(1, 0, 2)
    logits = (xt @ w_cluster + b_cluster) / tau[:, None, None]
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    mass = w.sum(axis=1)
    tokens = np.matmul(w.transpose(0, 2, 1), ft) / (mass + eps)[..., None]
    return w, tokens.astype(x.dtype, copy=False), mass


def broadcast(w, tokens):
    """``O[n, h*D_head + d] = sum_m w[h, n, m] * tokens[h, m, d]``."""
    nh, n, _ = w.shape
    o = np.matmul(w, tokens)
    return np.ascontiguousarray(o.transpose(1, 0, 2)).reshape(n, nh * tokens.shape[2])
