"""Named finite-difference checks over every differentiable operation.

Backs the `gradcheck` CLI command and the gradient acceptance test. All
inputs are double precision; leaky_relu inputs are kept away from the
kink and warp displacements away from integer coordinates so central
differences are well posed.
"""

from __future__ import annotations

import numpy as np

from . import regops, tensor
from .gradcheck import gradcheck
from .tensor import Tensor
from .training import LossConfig, multi_scale_loss

TOLERANCE = 1e-5


def _away_from(rng, shape, gap, scale=1.0):
    x = rng.standard_normal(shape) * scale
    x = np.where(np.abs(x) < gap, np.sign(x) * gap + x, x)
    return x


def _fractional_field(rng, dims, lo=0.15, hi=0.35):
    mag = rng.uniform(lo, hi, size=(3, *dims))
    sign = rng.choice([-1.0, 1.0], size=(3, *dims))
    return mag * sign


def build_checks(seed=0):
    """Mapping op name -> zero-arg callable returning max relative error."""
    rng = np.random.default_rng(seed)

    def conv3d_check():
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        return gradcheck(lambda ts: tensor.conv3d(ts[0], ts[1], ts[2], stride=1), [x, w, b])

    def conv3d_stride2_check():
        x = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)) * 0.3, requires_grad=True)
        b = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
        return gradcheck(lambda ts: tensor.conv3d(ts[0], ts[1], ts[2], stride=2), [x, w, b])

    def leaky_relu_check():
        x = Tensor(_away_from(rng, (2, 4, 4, 4), 0.1), requires_grad=True)
        return gradcheck(lambda ts: tensor.leaky_relu(ts[0], 0.1), [x], eps=1e-6)

    def avg_downsample2_check():
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        return gradcheck(lambda ts: tensor.avg_downsample2(ts[0]), [x])

    def concat_check():
        a = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 3, 3, 3)), requires_grad=True)
        return gradcheck(lambda ts: tensor.concat_channels([ts[0], ts[1]]), [a, b])

    def warp_check():
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        f = Tensor(_fractional_field(rng, (4, 4, 4)), requires_grad=True)
        return gradcheck(lambda ts: regops.warp(ts[0], ts[1]), [x, f])

    def upsample_field_check():
        f = Tensor(rng.standard_normal((3, 2, 2, 2)), requires_grad=True)
        return gradcheck(lambda ts: regops.upsample_field(ts[0]), [f])

    def correlation_check():
        a = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        return gradcheck(lambda ts: regops.correlation(ts[0], ts[1], 1), [a, b])

    def nlcc_check():
        a = Tensor(rng.standard_normal((1, 5, 5, 5)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 5, 5, 5)), requires_grad=True)
        return gradcheck(lambda ts: regops.nlcc(ts[0], ts[1], 3), [a, b], eps=1e-4)

    def diffusion_reg_check():
        f = Tensor(rng.standard_normal((3, 4, 4, 4)), requires_grad=True)
        return gradcheck(lambda ts: regops.diffusion_reg(ts[0]), [f])

    def multi_scale_loss_check():
        cfg = LossConfig(lam=1.0, nlcc_windows=(5, 3))
        im = Tensor(rng.uniform(0, 1, size=(1, 8, 8, 8)), requires_grad=True)
        fi = Tensor(rng.uniform(0, 1, size=(1, 8, 8, 8)))
        f1 = Tensor(_fractional_field(rng, (8, 8, 8)), requires_grad=True)
        f2 = Tensor(_fractional_field(rng, (4, 4, 4)), requires_grad=True)

        def fn(ts):
            loss, _, _ = multi_scale_loss(ts[0], fi, [ts[1], ts[2]], cfg)
            return loss

        return gradcheck(fn, [im, f1, f2], eps=1e-4)

    return {
        "conv3d": conv3d_check,
        "conv3d_stride2": conv3d_stride2_check,
        "leaky_relu": leaky_relu_check,
        "avg_downsample2": avg_downsample2_check,
        "concat": concat_check,
        "warp": warp_check,
        "upsample_field": upsample_field_check,
        "correlation": correlation_check,
        "nlcc": nlcc_check,
        "diffusion_reg": diffusion_reg_check,
        "multi_scale_loss": multi_scale_loss_check,
    }


def run_suite(seed=0, op=None, tol=TOLERANCE):
    """Returns {op: max relative error}; raises KeyError for unknown op."""
    checks = build_checks(seed)
    if op is not None:
        checks = {op: checks[op]}
    return {name: fn() for name, fn in checks.items()}
