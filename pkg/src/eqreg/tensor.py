"""Dense rank-4 tensor kernels (conv, relu) with hand-derived backward passes,
exact Frobenius accumulation, and the EQT1 binary tensor format.

Shape convention throughout the package: (B, C, H, W), C-order, float32 for
training and float64 for numeric checks.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE_TRAIN = np.float32
DTYPE_CHECK = np.float64


class EqtFormatError(Exception):
    """Malformed or truncated EQT1 stream."""


def as_tensor4(x, name="x"):
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (B, C, H, W), got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvParams:
    """Weights of one stride-1, same-padded convolution.

    weight: (C_out, C_in, p, p) with p odd; bias: (C_out,).
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w, b = self.weight, self.bias
        if w.ndim != 4:
            raise ValueError(f"weight must be rank-4, got shape {w.shape}")
        if w.shape[2] != w.shape[3]:
            raise ValueError(f"kernel must be square, got {w.shape[2]}x{w.shape[3]}")
        if w.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel_size(self):
        return self.weight.shape[2]


def _im2col(x, p):
    """Zero-pad to same size and unfold p x p patches.

    Returns (B*H*W, C*p*p); rows ordered by (b, i, j), columns by (c, u, v).
    """
    b, c, h, w = x.shape
    r = (p - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    win = sliding_window_view(xp, (p, p), axis=(2, 3))  # (B, C, H, W, p, p)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * p * p)


def conv2d_forward(x, params):
    """Stride-1 'same' convolution: out[b,o] = sum_c x[b,c] * W[o,c] + bias[o]."""
    x = as_tensor4(x)
    w = params.weight
    b, c, h, wd = x.shape
    if c != params.in_channels:
        raise ValueError(f"input has {c} channels, weights expect {params.in_channels}")
    o, p = params.out_channels, params.kernel_size
    cols = _im2col(x, p)
    out = cols @ w.reshape(o, -1).T + params.bias
    return np.ascontiguousarray(out.reshape(b, h, wd, o).transpose(0, 3, 1, 2))


def conv2d_backward(x, params, grad_out):
    """Gradients of conv2d_forward w.r.t. input, weight and bias.

    grad_x is a correlation of grad_out with the spatially flipped,
    channel-transposed kernel; grad_w re-derives the unfolded input.
    Returns (grad_x, grad_w, grad_b).
    """
    x = as_tensor4(x)
    g = as_tensor4(grad_out, "grad_out")
    w = params.weight
    o, c, p, _ = w.shape
    if g.shape != (x.shape[0], o, x.shape[2], x.shape[3]):
        raise ValueError(f"grad_out shape {g.shape} does not match forward output")

    grad_b = g.sum(axis=(0, 2, 3))

    cols = _im2col(x, p)  # (B*H*W, C*p*p)
    g_flat = g.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (g_flat.T @ cols).reshape(o, c, p, p)

    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d_forward(g, ConvParams(w_flip, np.zeros(c, dtype=w.dtype)))
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Pass gradient where the forward input was strictly positive."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def frobenius_sq(x):
    """Squared Frobenius norm, summed with exact rounding.

    fsum makes the result independent of element order, so permuting entries
    (e.g. by a group action) preserves the value bit-for-bit.
    """
    arr = np.asarray(x, dtype=np.float64)
    return math.fsum(np.square(arr).ravel().tolist())


# --- EQT1 tensor serialization ------------------------------------------------
#
# magic "EQT1" | u8 dtype (0 = f32, 1 = f64) | u8 ndim | ndim x u32 LE dims |
# row-major little-endian scalars.

_EQT1_MAGIC = b"EQT1"
_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(fp, arr):
    """Append one EQT1 record to a binary stream."""
    arr = np.asarray(arr)
    tag = _DTYPE_TO_TAG.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise ValueError(f"EQT1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("EQT1 rank limit is 255")
    for d in arr.shape:
        if d > 0xFFFFFFFF:
            raise ValueError(f"dimension {d} exceeds u32")
    fp.write(_EQT1_MAGIC)
    fp.write(struct.pack("<BB", tag, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes())


def read_tensor(fp):
    """Read one EQT1 record; raises EqtFormatError on any malformation."""
    head = fp.read(6)
    if len(head) < 6:
        raise EqtFormatError("truncated EQT1 header")
    if head[:4] != _EQT1_MAGIC:
        raise EqtFormatError(f"bad magic {head[:4]!r}, expected {_EQT1_MAGIC!r}")
    tag, ndim = head[4], head[5]
    dtype = _TAG_TO_DTYPE.get(tag)
    if dtype is None:
        raise EqtFormatError(f"unknown dtype tag {tag}")
    raw_dims = fp.read(4 * ndim)
    if len(raw_dims) < 4 * ndim:
        raise EqtFormatError("truncated EQT1 dims")
    shape = struct.unpack(f"<{ndim}I", raw_dims)
    count = 1
    for d in shape:
        count *= d
    payload = fp.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise EqtFormatError(f"truncated EQT1 payload, expected {count} scalars")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, arr):
    with open(path, "wb") as fp:
        write_tensor(fp, arr)


def load_tensor(path):
    with open(path, "rb") as fp:
        return read_tensor(fp)
