"""Central finite-difference verification of the hand-written backward rules."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor, detect_anomaly, no_grad


def grad_check(f, inputs, eps=1e-5, sample=None, seed=0):
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over the checked elements.

    ``f`` maps the ``inputs`` (Tensors, edited in place during probing) to a
    scalar Tensor.  ``sample`` limits the check to that many elements per input,
    drawn with ``seed``; by default every element is probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    inputs = list(inputs)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    try:
        with detect_anomaly():
            out = f(*inputs)
            if out.size != 1:
                raise ValueError("grad_check needs a scalar-valued function")
            out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        rng = np.random.default_rng(seed)
        worst = 0.0
        with no_grad(), detect_anomaly():
            for t, a in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                if sample is None or sample >= flat.size:
                    idx = range(flat.size)
                else:
                    idx = rng.choice(flat.size, size=sample, replace=False)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = float(f(*inputs).data)
                    flat[i] = orig - eps
                    lo = float(f(*inputs).data)
                    flat[i] = orig
                    numeric = (hi - lo) / (2 * eps)
                    if not np.isfinite(numeric):
                        raise NumericError("grad_check", "non-finite finite difference")
                    err = abs(a.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                    worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = g


def as_inputs(*arrays):
    return [Tensor(np.array(a, dtype=np.float64)) for a in arrays]
