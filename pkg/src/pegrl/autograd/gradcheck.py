"""Finite-difference verification of reverse-mode gradients."""

import numpy as np

from pegrl.errors import NumericError, UsageError
from pegrl.autograd.tensor import Tensor


def grad_check(fn, inputs, eps=1e-5, coords_per_input=None, rng=None):
    """Compare analytic gradients of a scalar-valued closure against central
    differences.

    fn takes a list of Tensors and returns a scalar Tensor; it must rebuild
    its graph on every call. inputs are numpy arrays, promoted to float64.
    By default every coordinate of every input is perturbed;
    coords_per_input caps the number of checked coordinates per input
    (sampled with rng) so large parameter sets stay tractable.

    Returns the maximum relative error over all checked coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise UsageError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    tensors = [Tensor(np.asarray(a, dtype=np.float64).copy(), requires_grad=True)
               for a in inputs]

    out = fn(tensors)
    if out.size != 1:
        raise UsageError("grad_check closure must return a scalar")
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite forward value in grad_check")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    max_err = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if coords_per_input is not None and coords_per_input < n:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=coords_per_input, replace=False)
        else:
            coords = range(n)
        gaf = ga.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(fn(tensors).data)
            flat[c] = orig - eps
            f_minus = float(fn(tensors).data)
            flat[c] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            if not (np.isfinite(num) and np.isfinite(gaf[c])):
                raise NumericError("non-finite value during finite differencing")
            denom = max(abs(num), abs(gaf[c]), 1e-3)
            max_err = max(max_err, abs(num - gaf[c]) / denom)
    return max_err
