"""Registration-specific differentiable operators.

Displacement fields are [3, D, H, W] tensors; channel k displaces spatial
axis k in voxel units at that resolution. The all-zero field is the
identity transform.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatchError
from .tensor import Tensor, _wrap, add, div, mul, tensor_mean


def _check_field(field):
    if field.data.ndim != 4 or field.data.shape[0] != 3:
        raise ShapeMismatchError(f"displacement field must be [3,D,H,W], got {field.data.shape}")


def _trilinear_corners(shape, gz, gy, gx):
    """Clamped corner indices, interpolation fractions, and flat indices."""
    d, h, w = shape
    iz = np.floor(gz)
    iy = np.floor(gy)
    ix = np.floor(gx)
    fz = gz - iz
    fy = gy - iy
    fx = gx - ix
    z0 = np.clip(iz.astype(np.int64), 0, d - 1)
    z1 = np.clip(iz.astype(np.int64) + 1, 0, d - 1)
    y0 = np.clip(iy.astype(np.int64), 0, h - 1)
    y1 = np.clip(iy.astype(np.int64) + 1, 0, h - 1)
    x0 = np.clip(ix.astype(np.int64), 0, w - 1)
    x1 = np.clip(ix.astype(np.int64) + 1, 0, w - 1)
    corners = {}
    for a, za in ((0, z0), (1, z1)):
        for b, yb in ((0, y0), (1, y1)):
            for c, xc in ((0, x0), (1, x1)):
                corners[(a, b, c)] = ((za * h + yb) * w + xc).reshape(-1)
    return corners, (fz, fy, fx)


def _corner_weight(abc, fz, fy, fx):
    a, b, c = abc
    wz = fz if a else 1.0 - fz
    wy = fy if b else 1.0 - fy
    wx = fx if c else 1.0 - fx
    return (wz * wy * wx).reshape(-1)


def warp(x, field):
    """Sample x at voxel + displacement by trilinear interpolation.

    Out-of-volume sample coordinates are border-clamped. Differentiable
    w.r.t. both the input and the field.
    """
    _check_field(field)
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"warp: input must be [C,D,H,W], got {x.data.shape}")
    if x.data.shape[1:] != field.data.shape[1:]:
        raise ShapeMismatchError(
            f"warp: input spatial dims {x.data.shape[1:]} != field dims {field.data.shape[1:]}"
        )
    c, d, h, w = x.data.shape
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=x.data.dtype),
        np.arange(h, dtype=x.data.dtype),
        np.arange(w, dtype=x.data.dtype),
        indexing="ij",
    )
    gz = zz + field.data[0]
    gy = yy + field.data[1]
    gx = xx + field.data[2]
    corners, (fz, fy, fx) = _trilinear_corners((d, h, w), gz, gy, gx)
    flat = x.data.reshape(c, -1)
    vals = {abc: flat[:, idx] for abc, idx in corners.items()}
    out_flat = np.zeros_like(flat)
    for abc, v in vals.items():
        out_flat += _corner_weight(abc, fz, fy, fx)[None, :] * v
    out = _wrap(out_flat.reshape(x.data.shape), (x, field))
    if out.requires_grad:

        def _bw(g):
            gflat = g.reshape(c, -1)
            if x.requires_grad:
                gx_in = np.zeros_like(flat)
                n = flat.shape[1]
                for abc, idx in corners.items():
                    wgt = _corner_weight(abc, fz, fy, fx)
                    contrib = wgt[None, :] * gflat
                    for ch in range(c):
                        gx_in[ch] += np.bincount(idx, weights=contrib[ch], minlength=n)
                x.accumulate_grad(gx_in.reshape(x.data.shape).astype(x.data.dtype))
            if field.requires_grad:
                gf = np.zeros_like(field.data)
                # d(out)/d(gz) etc. via corner differencing along each axis
                wz = (1.0 - fz.reshape(-1), fz.reshape(-1))
                wy = (1.0 - fy.reshape(-1), fy.reshape(-1))
                wx = (1.0 - fx.reshape(-1), fx.reshape(-1))
                dz = np.zeros_like(flat)
                dy = np.zeros_like(flat)
                dx = np.zeros_like(flat)
                for (a, b, cc), v in vals.items():
                    sz = 1.0 if a else -1.0
                    sy = 1.0 if b else -1.0
                    sx = 1.0 if cc else -1.0
                    dz += (sz * wy[b] * wx[cc])[None, :] * v
                    dy += (wz[a] * sy * wx[cc])[None, :] * v
                    dx += (wz[a] * wy[b] * sx)[None, :] * v
                gf[0] = (gflat * dz).sum(axis=0).reshape(d, h, w)
                gf[1] = (gflat * dy).sum(axis=0).reshape(d, h, w)
                gf[2] = (gflat * dx).sum(axis=0).reshape(d, h, w)
                field.accumulate_grad(gf)

        out._backward = _bw
    return out


def _upsample_axis(a, axis):
    """Double one axis by linear interpolation (half-voxel aligned, clamped)."""
    n = a.shape[axis]
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = (src - i0).astype(a.dtype)
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    shape = [1] * a.ndim
    shape[axis] = 2 * n
    t = t.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - t) + np.take(a, hi, axis=axis) * t


def _upsample_axis_transpose(g, axis, n_in):
    """Adjoint of _upsample_axis: scatter 2n gradients back to n slots."""
    src = (np.arange(2 * n_in) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = (src - i0).astype(g.dtype)
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    gm = np.moveaxis(g, axis, 0)
    out = np.zeros((n_in,) + gm.shape[1:], dtype=g.dtype)
    np.add.at(out, lo, gm * (1 - t).reshape((-1,) + (1,) * (gm.ndim - 1)))
    np.add.at(out, hi, gm * t.reshape((-1,) + (1,) * (gm.ndim - 1)))
    return np.moveaxis(out, 0, axis)


def upsample_field(field):
    """Double a field's resolution trilinearly and scale displacements by 2.

    One voxel of displacement at the coarse level spans two voxels at the
    finer level, so values double along with the grid.
    """
    _check_field(field)
    up = field.data
    for axis in (1, 2, 3):
        up = _upsample_axis(up, axis)
    out = _wrap(2.0 * up, (field,))
    if out.requires_grad:
        dims = field.data.shape[1:]

        def _bw(g):
            gg = 2.0 * g
            for axis, n in zip((3, 2, 1), (dims[2], dims[1], dims[0])):
                gg = _upsample_axis_transpose(gg, axis, n)
            field.accumulate_grad(gg)

        out._backward = _bw
    return out


def correlation(fixed, warped, d=1):
    """Cost volume of channel-mean dot products over a (2d+1)^3 search cube.

    Output channel o (lexicographic (dz,dy,dx) over [-d,d]^3) at voxel x is
    mean_c fixed[c,x] * warped[c,x+o]; offsets falling outside the volume
    contribute zero.
    """
    if fixed.data.shape != warped.data.shape:
        raise ShapeMismatchError(
            f"correlation: shapes {fixed.data.shape} and {warped.data.shape} differ"
        )
    if d < 0:
        raise ShapeMismatchError(f"correlation: search range must be >= 0, got {d}")
    c, dd, hh, ww = fixed.data.shape
    npix = dd * hh * ww
    n_off = (2 * d + 1) ** 3
    offsets = [(dz, dy, dx) for dz in range(-d, d + 1) for dy in range(-d, d + 1) for dx in range(-d, d + 1)]
    wpad = np.pad(warped.data, ((0, 0), (d, d), (d, d), (d, d)))
    # contiguous [offset, channel, voxel] buffer of shifted neighborhoods
    shifted = np.empty((n_off, c, npix), dtype=fixed.data.dtype)
    for o, (dz, dy, dx) in enumerate(offsets):
        shifted[o] = wpad[
            :, d + dz : d + dz + dd, d + dy : d + dy + hh, d + dx : d + dx + ww
        ].reshape(c, npix)
    fflat = fixed.data.reshape(c, npix)
    out_data = ((fflat[None] * shifted).sum(axis=1) / c).reshape(n_off, dd, hh, ww)
    out = _wrap(out_data, (fixed, warped))
    if out.requires_grad:

        def _bw(g):
            gflat = g.reshape(n_off, npix)
            if fixed.requires_grad:
                gf = (gflat[:, None, :] * shifted).sum(axis=0) / c
                fixed.accumulate_grad(gf.reshape(fixed.data.shape))
            if warped.requires_grad:
                gwp = np.zeros_like(wpad)
                contrib = gflat[:, None, :] * fflat[None] / c
                for o, (dz, dy, dx) in enumerate(offsets):
                    gwp[:, d + dz : d + dz + dd, d + dy : d + dy + hh, d + dx : d + dx + ww] += (
                        contrib[o].reshape(c, dd, hh, ww)
                    )
                warped.accumulate_grad(gwp[:, d:-d, d:-d, d:-d] if d else gwp)

        out._backward = _bw
    return out


def _box_axis(a, w, axis):
    a = np.moveaxis(a, axis, 0)
    csum = np.cumsum(a, axis=0)
    zero = np.zeros((1,) + csum.shape[1:], dtype=csum.dtype)
    cp = np.concatenate([zero, csum], axis=0)
    return np.moveaxis(cp[w:] - cp[:-w], 0, axis)


def box_sum(x, window):
    """Valid sliding-cube sums over the spatial axes of [C, D, H, W]."""
    data = x.data
    for axis in (1, 2, 3):
        if data.shape[axis] < window:
            raise ShapeMismatchError(
                f"box_sum: window {window} exceeds spatial dim {data.shape[axis]}"
            )
    res = data
    for axis in (1, 2, 3):
        res = _box_axis(res, window, axis)
    out = _wrap(res, (x,))
    if out.requires_grad:

        def _bw(g):
            p = window - 1
            gp = np.pad(g, ((0, 0), (p, p), (p, p), (p, p)))
            for axis in (1, 2, 3):
                gp = _box_axis(gp, window, axis)
            x.accumulate_grad(gp)

        out._backward = _bw
    return out


def nlcc(warped_img, fixed_img, window, eps=1e-5):
    """Negative mean squared local cross-correlation over valid windows.

    Per window: (sum (f - fbar)(m - mbar))^2 / (var_f * var_m + eps).
    Returns a scalar in [-1, 0]; -1 means perfect local linear agreement.
    """
    if warped_img.data.shape != fixed_img.data.shape:
        raise ShapeMismatchError(
            f"nlcc: shapes {warped_img.data.shape} and {fixed_img.data.shape} differ"
        )
    if window % 2 == 0 or window < 3:
        raise ShapeMismatchError(f"nlcc: window must be odd and >= 3, got {window}")
    if window > min(warped_img.data.shape[1:]):
        raise ShapeMismatchError(
            f"nlcc: window {window} exceeds volume dims {warped_img.data.shape[1:]}"
        )
    n = float(window**3)
    m, f = warped_img, fixed_img
    ms = box_sum(m, window)
    fs = box_sum(f, window)
    mm = box_sum(mul(m, m), window)
    ff = box_sum(mul(f, f), window)
    fm = box_sum(mul(f, m), window)
    cross = fm - mul(mul(fs, ms), 1.0 / n)
    var_f = ff - mul(mul(fs, fs), 1.0 / n)
    var_m = mm - mul(mul(ms, ms), 1.0 / n)
    cc = div(mul(cross, cross), add(mul(var_f, var_m), eps))
    return mul(tensor_mean(cc), -1.0)


def diffusion_reg(field):
    """Mean squared forward spatial differences of a displacement field."""
    _check_field(field)
    data = field.data
    norm = float(data.size)  # 3 * D * H * W
    total = 0.0
    diffs = []
    for axis in (1, 2, 3):
        dslice = np.diff(data, axis=axis)
        diffs.append((axis, dslice))
        total += float((dslice * dslice).sum())
    out = _wrap(np.asarray(total / norm, dtype=data.dtype), (field,))
    if out.requires_grad:

        def _bw(g):
            gf = np.zeros_like(data)
            scale = 2.0 * float(g) / norm
            for axis, dslice in diffs:
                hi = [slice(None)] * 4
                lo = [slice(None)] * 4
                hi[axis] = slice(1, None)
                lo[axis] = slice(None, -1)
                gf[tuple(hi)] += scale * dslice
                gf[tuple(lo)] -= scale * dslice
            field.accumulate_grad(gf)

        out._backward = _bw
    return out


def warp_labels(mask, field):
    """Nearest-neighbor resampling of an integer label volume (not differentiable)."""
    fdata = field.data if isinstance(field, Tensor) else np.asarray(field)
    if fdata.ndim != 4 or fdata.shape[0] != 3:
        raise ShapeMismatchError(f"warp_labels: field must be [3,D,H,W], got {fdata.shape}")
    mask = np.asarray(mask)
    if mask.shape != fdata.shape[1:]:
        raise ShapeMismatchError(
            f"warp_labels: mask dims {mask.shape} != field dims {fdata.shape[1:]}"
        )
    d, h, w = mask.shape
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    iz = np.clip(np.floor(zz + fdata[0] + 0.5).astype(np.int64), 0, d - 1)
    iy = np.clip(np.floor(yy + fdata[1] + 0.5).astype(np.int64), 0, h - 1)
    ix = np.clip(np.floor(xx + fdata[2] + 0.5).astype(np.int64), 0, w - 1)
    return mask[iz, iy, ix]
