"""Minimal reverse-mode differentiable tensor engine.

Dense numpy-backed tensors with exactly the operations the registration
network needs: 3x3x3 convolution, leaky ReLU, 2x average downsampling,
channel concatenation, and the elementwise/reduction plumbing required to
assemble losses. No broadcasting beyond python scalars.

Feature maps use the [C, D, H, W] layout throughout.
"""

from __future__ import annotations

import numpy as np

from .errors import GradientError, ShapeMismatchError


class Tensor:
    """A dense nd-array participating in the reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.asarray(g, dtype=self.data.dtype)
            if self.grad.base is not None or self.grad is g:
                self.grad = self.grad.copy()
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor to every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise GradientError(
                    f"backward() without an explicit gradient requires a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar (scalar or same-shape tensor operands only) --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))


def _wrap(out_data, parents):
    req = any(p.requires_grad for p in parents)
    return Tensor(out_data, requires_grad=req, _parents=parents if req else ())


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    if not isinstance(b, Tensor):
        out = _wrap(a.data + float(b), (a,))
        if out.requires_grad:
            out._backward = lambda g: a.accumulate_grad(g)
        return out
    _check_same_shape(a, b, "add")
    out = _wrap(a.data + b.data, (a, b))
    if out.requires_grad:

        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        out._backward = _bw
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        out = _wrap(a.data * s, (a,))
        if out.requires_grad:
            out._backward = lambda g: a.accumulate_grad(g * s)
        return out
    _check_same_shape(a, b, "mul")
    out = _wrap(a.data * b.data, (a, b))
    if out.requires_grad:

        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(g * b.data)
            if b.requires_grad:
                b.accumulate_grad(g * a.data)

        out._backward = _bw
    return out


def div(a, b):
    _check_same_shape(a, b, "div")
    out = _wrap(a.data / b.data, (a, b))
    if out.requires_grad:

        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(g / b.data)
            if b.requires_grad:
                b.accumulate_grad(-g * a.data / (b.data * b.data))

        out._backward = _bw
    return out


def tensor_sum(a):
    out = _wrap(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.full_like(a.data, float(g)))
    return out


def tensor_mean(a):
    n = a.data.size
    out = _wrap(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.full_like(a.data, float(g) / n))
    return out


def leaky_relu(x, slope=0.1):
    """max(x, slope*x); the subgradient at 0 takes the positive branch."""
    if slope < 0:
        raise ShapeMismatchError(f"leaky_relu: slope must be >= 0, got {slope}")
    pos = x.data >= 0
    out = _wrap(np.where(pos, x.data, slope * x.data), (x,))
    if out.requires_grad:
        out._backward = lambda g: x.accumulate_grad(np.where(pos, g, np.asarray(slope, x.dtype) * g))
    return out


_K_OFFSETS = [(kz, ky, kx) for kz in range(3) for ky in range(3) for kx in range(3)]


def conv3d(x, weight, bias, stride=1):
    """3x3x3 convolution with zero-padding 1.

    x: [C_in, D, H, W]; weight: [C_out, C_in, 3, 3, 3]; bias: [C_out].
    Output spatial dims are ceil(dim / stride); stride must be 1 or 2.
    The im2col buffer is kept alive until backward so both passes reduce
    to single GEMMs.
    """
    if stride not in (1, 2):
        raise ShapeMismatchError(f"conv3d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"conv3d: input must be 4-D [C,D,H,W], got {x.data.shape}")
    if weight.data.ndim != 5 or weight.data.shape[2:] != (3, 3, 3):
        raise ShapeMismatchError(f"conv3d: weight must be [C_out,C_in,3,3,3], got {weight.data.shape}")
    c_in = x.data.shape[0]
    c_out = weight.data.shape[0]
    if weight.data.shape[1] != c_in:
        raise ShapeMismatchError(
            f"conv3d: input has {c_in} channels but weight expects {weight.data.shape[1]}"
        )
    if bias.data.shape != (c_out,):
        raise ShapeMismatchError(f"conv3d: bias shape {bias.data.shape} != ({c_out},)")

    d, h, w = x.data.shape[1:]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1)))
    od, oh, ow = ((s + stride - 1) // stride for s in (d, h, w))
    npix = od * oh * ow
    # cols layout [offset, channel, voxel]; weight is reordered to match
    cols = np.empty((27, c_in, npix), dtype=x.data.dtype)
    for k, (kz, ky, kx) in enumerate(_K_OFFSETS):
        cols[k] = xp[
            :,
            kz : kz + stride * od : stride,
            ky : ky + stride * oh : stride,
            kx : kx + stride * ow : stride,
        ].reshape(c_in, npix)
    cols = cols.reshape(27 * c_in, npix)
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 4, 1, 0).reshape(27 * c_in, c_out).T)
    out_data = (wmat @ cols).reshape(c_out, od, oh, ow) + bias.data[:, None, None, None]
    out = _wrap(out_data, (x, weight, bias))
    if out.requires_grad:

        def _bw(g):
            gflat = g.reshape(c_out, npix)
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(1, 2, 3)))
            if weight.requires_grad:
                gw = (gflat @ cols.T).reshape(c_out, 3, 3, 3, c_in)
                weight.accumulate_grad(np.ascontiguousarray(gw.transpose(0, 4, 1, 2, 3)))
            if x.requires_grad:
                gcols = (wmat.T @ gflat).reshape(27, c_in, od, oh, ow)
                gp = np.zeros_like(xp)
                for k, (kz, ky, kx) in enumerate(_K_OFFSETS):
                    gp[
                        :,
                        kz : kz + stride * od : stride,
                        ky : ky + stride * oh : stride,
                        kx : kx + stride * ow : stride,
                    ] += gcols[k]
                x.accumulate_grad(gp[:, 1:-1, 1:-1, 1:-1])

        out._backward = _bw
    return out


def avg_downsample2(x):
    """2x average pooling over each spatial axis of a [C, D, H, W] tensor."""
    c, d, h, w = x.data.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeMismatchError(f"avg_downsample2: spatial dims must be even, got {x.data.shape}")
    blocks = x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
    out = _wrap(blocks.mean(axis=(2, 4, 6)), (x,))
    if out.requires_grad:

        def _bw(g):
            ge = np.broadcast_to(
                (g / 8.0)[:, :, None, :, None, :, None], (c, d // 2, 2, h // 2, 2, w // 2, 2)
            )
            x.accumulate_grad(ge.reshape(c, d, h, w))

        out._backward = _bw
    return out


def concat_channels(tensors):
    """Concatenate [C_i, D, H, W] tensors along the channel axis."""
    if not tensors:
        raise ShapeMismatchError("concat_channels: empty input list")
    spatial = tensors[0].data.shape[1:]
    for t in tensors[1:]:
        if t.data.shape[1:] != spatial:
            raise ShapeMismatchError(
                f"concat_channels: spatial dims {t.data.shape[1:]} != {spatial}"
            )
    out = _wrap(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors))
    if out.requires_grad:
        offsets = np.cumsum([0] + [t.data.shape[0] for t in tensors])

        def _bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t.accumulate_grad(g[lo:hi])

        out._backward = _bw
    return out
