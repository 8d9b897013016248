"""3D convolution primitives with explicit backward passes.

All operators work on arrays shaped ``(batch, channels, depth, height, width)``
with the last axis varying fastest in memory.  Convolution here means
cross-correlation (no kernel flip), the usual deep-learning convention.

Two execution paths produce identical results up to float rounding:

``direct``
    Offset accumulation: one channel-mixing ``tensordot`` per kernel tap.
    Handles any stride and is the reference implementation.

``fft``
    Stride-1 convolution evaluated as a pointwise product in the spectral
    domain (real FFTs padded to the next fast transform length).  The kept
    output region is free of circular wraparound by construction, so the
    result is exact linear correlation.  Used automatically for large
    kernels where it is far cheaper.

The forward functions can return an opaque context object that caches the
padded input (direct) or its spectrum (fft) so the matching backward reuses
the expensive intermediate.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft as _sfft

from ..errors import ShapeError
from .runtime import fft_workers

__all__ = [
    "conv_output_dim",
    "conv3d",
    "conv3d_forward",
    "conv3d_backward",
    "cross_conv3d_forward",
    "cross_conv3d_backward",
    "materialize_cross_kernel",
    "transpose_conv3d",
    "transpose_conv3d_forward",
    "transpose_conv3d_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
]


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeError(f"expected scalar or length-3 value, got {v!r}")
    return t


def conv_output_dim(size: int, kernel: int, stride: int, pad_total: int) -> int:
    """Spatial output size: ``floor((size + pad_total - kernel) / stride) + 1``."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    span = size + pad_total - kernel
    if span < 0:
        raise ShapeError(
            f"kernel {kernel} does not fit input {size} with padding {pad_total}"
        )
    return span // stride + 1


def _pad_pairs(kernel: tuple[int, int, int], padding) -> tuple[tuple[int, int], ...]:
    """Per-axis (low, high) zero padding. 'same' keeps stride-1 output size."""
    if padding == "valid":
        return ((0, 0),) * 3
    if padding == "same":
        out = []
        for k in kernel:
            lo = (k - 1) // 2
            out.append((lo, k - 1 - lo))
        return tuple(out)
    p = _triple(padding)
    return tuple((pi, pi) for pi in p)


def _pad_input(x: np.ndarray, pads) -> np.ndarray:
    if all(lo == 0 and hi == 0 for lo, hi in pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple(pads))


def _check_conv_args(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 5:
        raise ShapeError(f"input must be 5D (B,C,D,H,W), got shape {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"kernel must be 5D (O,I,kz,ky,kx), got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel input channels {w.shape[1]}"
        )


# --------------------------------------------------------------------------
# direct path

def _direct_valid_forward(xp: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    ks = w.shape[2:]
    od = tuple(
        conv_output_dim(xp.shape[2 + a], ks[a], stride[a], 0) for a in range(3)
    )
    b = xp.shape[0]
    acc = np.zeros((b,) + od + (w.shape[0],), dtype=np.result_type(xp, w))
    for dz in range(ks[0]):
        for dy in range(ks[1]):
            for dx in range(ks[2]):
                sl = xp[
                    :,
                    :,
                    dz : dz + stride[0] * (od[0] - 1) + 1 : stride[0],
                    dy : dy + stride[1] * (od[1] - 1) + 1 : stride[1],
                    dx : dx + stride[2] * (od[2] - 1) + 1 : stride[2],
                ]
                acc += np.tensordot(sl, w[:, :, dz, dy, dx], axes=([1], [1]))
    return np.ascontiguousarray(np.moveaxis(acc, -1, 1))


def _direct_valid_backward(xp, w, g, stride, need_input_grad):
    ks = w.shape[2:]
    od = g.shape[2:]
    gt = np.ascontiguousarray(np.moveaxis(g, 1, -1))  # (B, oD, oH, oW, O)
    gw = np.empty_like(w)
    gxp_acc = None
    if need_input_grad:
        gxp_acc = np.zeros(xp.shape[:1] + xp.shape[2:] + (xp.shape[1],), dtype=xp.dtype)
    for dz in range(ks[0]):
        for dy in range(ks[1]):
            for dx in range(ks[2]):
                zsl = slice(dz, dz + stride[0] * (od[0] - 1) + 1, stride[0])
                ysl = slice(dy, dy + stride[1] * (od[1] - 1) + 1, stride[1])
                xsl = slice(dx, dx + stride[2] * (od[2] - 1) + 1, stride[2])
                xs = xp[:, :, zsl, ysl, xsl]
                gw[:, :, dz, dy, dx] = np.tensordot(
                    g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
                if need_input_grad:
                    gxp_acc[:, zsl, ysl, xsl, :] += gt @ w[:, :, dz, dy, dx]
    gxp = None
    if need_input_grad:
        gxp = np.ascontiguousarray(np.moveaxis(gxp_acc, -1, 1))
    return gxp, gw


# --------------------------------------------------------------------------
# fft path

@lru_cache(maxsize=64)
def _reversal_phase(n: tuple[int, int, int], k: tuple[int, int, int], single: bool):
    """Separable phase linking the spectra of a kernel and its spatial reversal.

    For real w zero-padded to length N:
        FFT(w[::-1])[f] = exp(-2j*pi*f*(k-1)/N) * conj(FFT(w)[f])
    """
    fz = np.arange(n[0])
    fy = np.arange(n[1])
    fx = np.arange(n[2] // 2 + 1)
    ez = np.exp(-2j * np.pi * fz * (k[0] - 1) / n[0])
    ey = np.exp(-2j * np.pi * fy * (k[1] - 1) / n[1])
    ex = np.exp(-2j * np.pi * fx * (k[2] - 1) / n[2])
    ph = ez[:, None, None] * ey[None, :, None] * ex[None, None, :]
    return ph.astype(np.complex64 if single else np.complex128)


def _rfftn(a: np.ndarray, shape) -> np.ndarray:
    return _sfft.rfftn(a, s=shape, axes=(-3, -2, -1), workers=fft_workers())


def _irfftn(a: np.ndarray, shape) -> np.ndarray:
    return _sfft.irfftn(a, s=shape, axes=(-3, -2, -1), workers=fft_workers())


def _spec_bo(xh: np.ndarray, kh: np.ndarray) -> np.ndarray:
    """out[b,o,f] = sum_i xh[b,i,f] * kh[o,i,f] over shared channel axis."""
    return np.einsum("bifgh,oifgh->bofgh", xh, kh, optimize=True)


def _spec_bi(gh: np.ndarray, wh: np.ndarray) -> np.ndarray:
    """out[b,i,f] = sum_o gh[b,o,f] * wh[o,i,f]."""
    return np.einsum("bofgh,oifgh->bifgh", gh, wh, optimize=True)


def _spec_oi(xh: np.ndarray, gh: np.ndarray) -> np.ndarray:
    """out[o,i,f] = sum_b xh[b,i,f] * conj(gh[b,o,f])."""
    return np.einsum("bifgh,bofgh->oifgh", xh, np.conj(gh), optimize=True)


def _fft_sizes(padded: tuple[int, int, int]) -> tuple[int, int, int]:
    return tuple(_sfft.next_fast_len(p, real=True) for p in padded)


def _fft_valid_forward(xp, w):
    ks = w.shape[2:]
    pd = xp.shape[2:]
    n = _fft_sizes(pd)
    xh = _rfftn(xp, n)
    wh = _rfftn(w, n)
    ph = _reversal_phase(n, ks, xh.dtype == np.complex64)
    yh = _spec_bo(xh, np.conj(wh) * ph)
    yfull = _irfftn(yh, n)
    od = tuple(pd[a] - ks[a] + 1 for a in range(3))
    y = yfull[
        :,
        :,
        ks[0] - 1 : ks[0] - 1 + od[0],
        ks[1] - 1 : ks[1] - 1 + od[1],
        ks[2] - 1 : ks[2] - 1 + od[2],
    ]
    return np.ascontiguousarray(y), xh, wh, n


def _fft_valid_backward(xh, wh, n, ks, pd, g, need_input_grad):
    gh = _rfftn(g, n)
    gwfull = _irfftn(_spec_oi(xh, gh), n)
    gw = np.ascontiguousarray(gwfull[:, :, : ks[0], : ks[1], : ks[2]])
    gxp = None
    if need_input_grad:
        gxfull = _irfftn(_spec_bi(gh, wh), n)
        gxp = np.ascontiguousarray(gxfull[:, :, : pd[0], : pd[1], : pd[2]])
    return gxp, gw


# --------------------------------------------------------------------------
# public dense conv API

@dataclass
class ConvCtx:
    """Opaque forward cache consumed by :func:`conv3d_backward`."""

    method: str
    stride: tuple[int, int, int]
    pads: tuple[tuple[int, int], ...]
    x_shape: tuple[int, ...]
    w_shape: tuple[int, ...]
    xp: np.ndarray | None = None      # direct path: padded input
    xh: np.ndarray | None = None      # fft path: padded-input spectrum
    wh: np.ndarray | None = None      # fft path: kernel spectrum
    fft_shape: tuple[int, int, int] | None = None
    padded_shape: tuple[int, int, int] | None = None


def _choose_method(method: str, stride, ks, out_voxels: int) -> str:
    if method != "auto":
        return method
    if stride != (1, 1, 1):
        return "direct"
    taps = ks[0] * ks[1] * ks[2]
    if taps >= 64 and out_voxels >= 512:
        return "fft"
    return "direct"


def conv3d_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride=1,
    padding="same",
    method: str = "auto",
):
    """Dense 3D convolution. Returns ``(y, ctx)``; pass ctx to the backward."""
    _check_conv_args(x, w)
    st = _triple(stride)
    ks = w.shape[2:]
    pads = _pad_pairs(ks, padding)
    xp = _pad_input(x, pads)
    od = tuple(
        conv_output_dim(x.shape[2 + a], ks[a], st[a], sum(pads[a])) for a in range(3)
    )
    mth = _choose_method(method, st, ks, int(np.prod(od)))
    if mth == "fft":
        y, xh, wh, n = _fft_valid_forward(xp, w)
        ctx = ConvCtx(
            "fft", st, pads, x.shape, w.shape,
            xh=xh, wh=wh, fft_shape=n, padded_shape=xp.shape[2:],
        )
    elif mth == "direct":
        y = _direct_valid_forward(xp, w, st)
        ctx = ConvCtx("direct", st, pads, x.shape, w.shape, xp=xp)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if b is not None:
        y += b.reshape(1, -1, 1, 1, 1)
    return y, ctx


def conv3d(x, w, b=None, stride=1, padding="same", method: str = "auto"):
    """Convenience forward without a backward context."""
    y, _ = conv3d_forward(x, w, b, stride=stride, padding=padding, method=method)
    return y


def _unpad_grad(gxp: np.ndarray, pads, x_shape) -> np.ndarray:
    sl = tuple(
        slice(pads[a][0], pads[a][0] + x_shape[2 + a]) for a in range(3)
    )
    out = gxp[(slice(None), slice(None)) + sl]
    return np.ascontiguousarray(out)


def conv3d_backward(ctx: ConvCtx, w: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True):
    """Gradients for :func:`conv3d_forward`.

    Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None when not requested.
    """
    if grad_out.shape[1] != w.shape[0]:
        raise ShapeError(
            f"grad channels {grad_out.shape[1]} != kernel output channels {w.shape[0]}"
        )
    if ctx.method == "fft":
        gxp, gw = _fft_valid_backward(
            ctx.xh, ctx.wh, ctx.fft_shape, w.shape[2:], ctx.padded_shape,
            grad_out, need_input_grad,
        )
    else:
        gxp, gw = _direct_valid_backward(
            ctx.xp, w, grad_out, ctx.stride, need_input_grad
        )
    gx = None
    if need_input_grad:
        gx = _unpad_grad(gxp, ctx.pads, ctx.x_shape)
    gb = grad_out.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


# --------------------------------------------------------------------------
# cross-constrained separable kernel: sum of three orthogonal 1D filters

def _axis_line_forward(x: np.ndarray, w1: np.ndarray, axis: int) -> np.ndarray:
    """Same-padded 1D correlation along one spatial axis with channel mixing.

    x: (B,I,D,H,W); w1: (O,I,k). axis in {0,1,2} selecting (D,H,W).
    """
    k = w1.shape[2]
    lo = (k - 1) // 2
    pads = [(0, 0)] * 3
    pads[axis] = (lo, k - 1 - lo)
    xp = _pad_input(x, pads)
    size = x.shape[2 + axis]
    out = None
    for j in range(k):
        sl = [slice(None)] * 3
        sl[axis] = slice(j, j + size)
        xs = xp[(slice(None), slice(None)) + tuple(sl)]
        t = np.tensordot(xs, w1[:, :, j], axes=([1], [1]))
        out = t if out is None else out + t
    return out  # (B, D, H, W, O), channels last


def cross_conv3d_forward(x, wz, wy, wx, b=None):
    """Kernel constrained to three orthogonal length-k lines through the center.

    Equivalent to a dense conv with :func:`materialize_cross_kernel` of the
    same filters, at 3k parameters per channel pair instead of k**3.
    Returns ``(y, xp_cache)`` where the cache is the raw input reference.
    """
    if x.ndim != 5:
        raise ShapeError(f"input must be 5D (B,C,D,H,W), got shape {x.shape}")
    if wz.shape[1] != x.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1]} != filter input channels {wz.shape[1]}"
        )
    acc = _axis_line_forward(x, wz, 0)
    acc += _axis_line_forward(x, wy, 1)
    acc += _axis_line_forward(x, wx, 2)
    y = np.ascontiguousarray(np.moveaxis(acc, -1, 1))
    if b is not None:
        y += b.reshape(1, -1, 1, 1, 1)
    return y, x


def _axis_line_weight_grad(x: np.ndarray, g: np.ndarray, axis: int, k: int):
    """gw1[o,i,j] = sum over batch+space of g[b,o,t] * x_padded[b,i,t+j]."""
    lo = (k - 1) // 2
    pads = [(0, 0)] * 3
    pads[axis] = (lo, k - 1 - lo)
    xp = _pad_input(x, pads)
    size = x.shape[2 + axis]
    gw = np.empty((g.shape[1], x.shape[1], k), dtype=np.result_type(x, g))
    for j in range(k):
        sl = [slice(None)] * 3
        sl[axis] = slice(j, j + size)
        xs = xp[(slice(None), slice(None)) + tuple(sl)]
        gw[:, :, j] = np.tensordot(g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def _axis_line_input_grad(g: np.ndarray, w1: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of the same-padded line correlation: conv g with the reversed,
    channel-transposed filter using the mirrored padding split."""
    k = w1.shape[2]
    lo = (k - 1) // 2
    hi = k - 1 - lo
    pads = [(0, 0)] * 3
    pads[axis] = (hi, lo)
    gp = _pad_input(g, pads)
    size = g.shape[2 + axis]
    wr = w1[:, :, ::-1]
    out = None
    for j in range(k):
        sl = [slice(None)] * 3
        sl[axis] = slice(j, j + size)
        gs = gp[(slice(None), slice(None)) + tuple(sl)]
        t = np.tensordot(gs, wr[:, :, j], axes=([1], [0]))
        out = t if out is None else out + t
    return out  # (B, D, H, W, I)


def cross_conv3d_backward(x_cache, wz, wy, wx, grad_out, need_input_grad=True):
    """Gradients for :func:`cross_conv3d_forward`.

    Returns ``(gx, gwz, gwy, gwx, gb)``.
    """
    x = x_cache
    gwz = _axis_line_weight_grad(x, grad_out, 0, wz.shape[2])
    gwy = _axis_line_weight_grad(x, grad_out, 1, wy.shape[2])
    gwx = _axis_line_weight_grad(x, grad_out, 2, wx.shape[2])
    gx = None
    if need_input_grad:
        acc = _axis_line_input_grad(grad_out, wz, 0)
        acc += _axis_line_input_grad(grad_out, wy, 1)
        acc += _axis_line_input_grad(grad_out, wx, 2)
        gx = np.ascontiguousarray(np.moveaxis(acc, -1, 1))
    gb = grad_out.sum(axis=(0, 2, 3, 4))
    return gx, gwz, gwy, gwx, gb


def materialize_cross_kernel(wz, wy, wx) -> np.ndarray:
    """Dense (O,I,k,k,k) kernel equal to the constrained one.

    The three filter lines overlap in the single center voxel, whose dense
    value is the sum of the three center taps; at most ``3k - 2`` positions
    per channel pair are nonzero.
    """
    o, i, k = wz.shape
    if wy.shape != (o, i, k) or wx.shape != (o, i, k):
        raise ShapeError("the three line filters must share one (O,I,k) shape")
    c = (k - 1) // 2
    dense = np.zeros((o, i, k, k, k), dtype=np.result_type(wz, wy, wx))
    dense[:, :, :, c, c] += wz
    dense[:, :, c, :, c] += wy
    dense[:, :, c, c, :] += wx
    return dense


# --------------------------------------------------------------------------
# transposed conv (exact adjoint of a stride-s valid conv with kernel s)

def transpose_conv3d_forward(x, w, b=None, stride=2):
    """Upsampling adjoint of a stride-``s``, kernel-``s`` valid convolution.

    ``w`` keeps the convolution's layout ``(from_ch, to_ch, s, s, s)`` where
    ``from_ch`` matches the input of this op, so the inner-product identity
    ``<conv(u, w), v> == <u, transpose_conv(v, w)>`` holds with one array.
    Output spatial dims are exactly ``s`` times the input's.
    """
    st = _triple(stride)
    ks = w.shape[2:]
    if ks != st:
        raise ShapeError(f"kernel dims {ks} must equal stride {st}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel from-channels {w.shape[0]}"
        )
    bsz = x.shape[0]
    od = tuple(x.shape[2 + a] * st[a] for a in range(3))
    out = np.empty((bsz,) + od + (w.shape[1],), dtype=np.result_type(x, w))
    for dz in range(ks[0]):
        for dy in range(ks[1]):
            for dx in range(ks[2]):
                t = np.tensordot(x, w[:, :, dz, dy, dx], axes=([1], [0]))
                out[:, dz :: st[0], dy :: st[1], dx :: st[2], :] = t
    y = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    if b is not None:
        y += b.reshape(1, -1, 1, 1, 1)
    return y, x


def transpose_conv3d(x, w, b=None, stride=2):
    y, _ = transpose_conv3d_forward(x, w, b, stride=stride)
    return y


def transpose_conv3d_backward(x_cache, w, grad_out, stride=2, need_input_grad=True):
    """Gradients for :func:`transpose_conv3d_forward`: ``(gx, gw, gb)``."""
    st = _triple(stride)
    ks = w.shape[2:]
    x = x_cache
    gw = np.empty_like(w)
    gx_acc = None
    if need_input_grad:
        gx_acc = np.zeros(
            x.shape[:1] + x.shape[2:] + (x.shape[1],), dtype=x.dtype
        )
    for dz in range(ks[0]):
        for dy in range(ks[1]):
            for dx in range(ks[2]):
                gs = grad_out[:, :, dz :: st[0], dy :: st[1], dx :: st[2]]
                gw[:, :, dz, dy, dx] = np.tensordot(
                    x, gs, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
                if need_input_grad:
                    gx_acc += np.tensordot(gs, w[:, :, dz, dy, dx], axes=([1], [1]))
    gx = None
    if need_input_grad:
        gx = np.ascontiguousarray(np.moveaxis(gx_acc, -1, 1))
    gb = grad_out.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


# --------------------------------------------------------------------------
# max pooling

def maxpool3d_forward(x: np.ndarray, k: int = 2):
    """Non-overlapping k**3 max pooling; dims must divide by k.

    Ties go to the first maximum in x-fastest scan order within the block.
    Returns ``(y, argmax)`` where argmax indexes the flattened block.
    """
    b, c, d, h, w = x.shape
    if d % k or h % k or w % k:
        raise ShapeError(f"spatial dims {(d, h, w)} not divisible by pool size {k}")
    xb = np.ascontiguousarray(x).reshape(b, c, d // k, k, h // k, k, w // k, k)
    xb = xb.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        b, c, d // k, h // k, w // k, k * k * k
    )
    idx = np.argmax(xb, axis=-1)
    y = np.take_along_axis(xb, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool3d_backward(grad_out: np.ndarray, argmax: np.ndarray,
                       input_shape, k: int = 2) -> np.ndarray:
    """Scatter the incoming gradient to each block's argmax position."""
    b, c, d, h, w = input_shape
    blocks = np.zeros(grad_out.shape + (k * k * k,), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(b, c, d // k, h // k, w // k, k, k, k)
    blocks = blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(blocks.reshape(b, c, d, h, w))
