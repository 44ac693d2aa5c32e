"""Central finite-difference gradient checking in 64-bit mode."""

import numpy as np

from caprmil.numerics import Tensor

STEP = 1e-6
# below this magnitude errors are judged absolutely: FD roundoff is ~2e-10 at h=1e-6
FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR,
                   scale: float | None = None) -> float:
    """Elementwise relative error; the floor grows with the gradient scale."""
    if not analytic.size:
        return 0.0
    if scale is None:
        scale = max(1.0, float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(loss_fn, tensors, h: float = STEP) -> list[np.ndarray]:
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check(loss_fn, tensors, h: float = STEP) -> float:
    """Largest relative error over every element of every tensor."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(loss_fn, tensors, h)
    scale = max([1.0] + [float(np.abs(n).max()) for n in numeric if n.size])
    return max(relative_error(a, n, scale=scale) for a, n in zip(analytic, numeric))

