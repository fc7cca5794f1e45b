"""Central finite-difference verification of analytic gradients.

Runs in double precision; single precision is too noisy for reliable
finite-difference comparisons.
"""

from __future__ import annotations

import numpy as np

from .errors import GradientError
from .tensor import Tensor, tensor_sum, mul


def gradcheck(fn, inputs, eps=1e-5, rng=None):
    """Max relative error between analytic and numeric gradients.

    fn maps a list of Tensors to a single output Tensor (any shape); the
    output is reduced to a scalar through a fixed random projection so a
    single backward pass covers every output element. Every input with
    requires_grad=True is perturbed element by element.
    """
    if eps <= 0:
        raise GradientError(f"gradcheck: perturbation must be positive, got {eps}")
    inputs = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64)) for t in inputs]
    work = [Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad) for t in inputs]

    out0 = fn(work)
    if not np.all(np.isfinite(out0.data)):
        raise GradientError("gradcheck: non-finite forward value")
    if rng is None:
        rng = np.random.default_rng(0)
    proj = rng.standard_normal(out0.data.shape)

    def scalar(ts):
        out = fn(ts)
        return tensor_sum(mul(out, Tensor(proj)))

    loss = scalar(work)
    loss.backward()

    worst = 0.0
    for t in work:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(scalar([Tensor(w.data) for w in work]).data)
            flat[i] = orig - eps
            lo = float(scalar([Tensor(w.data) for w in work]).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1.0)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
