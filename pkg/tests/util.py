"""Shared test helpers."""

import numpy as np

from tppgraph import diffcore as dc


def param_grad_check(build_loss, tensors, step=1e-5, max_entries=None):
    """Central-difference check of reverse-mode gradients of live parameters.

    ``build_loss`` rebuilds the scalar loss from current parameter values;
    ``tensors`` are the parameter tensors to perturb in place.  Returns the
    maximum relative error (denominator max(|g|, 1e-8)).
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    dc.backward(loss)
    worst = 0.0
    for t in tensors:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.value)
        flat = t.value.reshape(-1)
        g_flat = g_ad.reshape(-1)
        idx = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.linspace(0, flat.size - 1, max_entries).astype(int)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            hi = float(build_loss().value)
            flat[j] = orig - step
            lo = float(build_loss().value)
            flat[j] = orig
            fd = (hi - lo) / (2 * step)
            denom = max(abs(fd), abs(g_flat[j]), 1e-8)
            worst = max(worst, abs(fd - g_flat[j]) / denom)
    return worst
