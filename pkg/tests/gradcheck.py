"""Central finite-difference gradient checking shared by the gradient suites."""
from __future__ import annotations

import numpy as np

from nerfrestore.autodiff import Tensor, backward, float64_mode, functional as F, no_grad


def relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(numeric - analytic).max() / scale)


def check_gradients(fn, arrays, rng, h=1e-5, max_coords=None) -> float:
    """Worst relative error over all inputs of ``fn(*tensors) -> Tensor``.

    The output is contracted with a fixed random cotangent so every output
    element contributes. ``max_coords`` limits the number of perturbed
    coordinates per input (chosen at random) for large parameter sets.
    """
    with float64_mode():
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        with no_grad():
            probe = fn(*[Tensor(a) for a in arrays])
        cot = rng.normal(size=probe.shape)

        def scalar(arrs):
            with no_grad():
                return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * cot))

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        backward(F.sum(F.mul(fn(*leaves), Tensor(cot))))
        worst = 0.0
        for k, a in enumerate(arrays):
            analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
            flat = np.arange(a.size)
            if max_coords is not None and a.size > max_coords:
                flat = rng.choice(a.size, max_coords, replace=False)
            numeric = np.zeros(len(flat))
            for j, i in enumerate(flat):
                idx = np.unravel_index(i, a.shape)
                old = a[idx]
                a[idx] = old + h
                fp = scalar(arrays)
                a[idx] = old - h
                fm = scalar(arrays)
                a[idx] = old
                numeric[j] = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(numeric, analytic.reshape(-1)[flat]))
        return worst
