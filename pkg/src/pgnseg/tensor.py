"""Dense tensor helpers: convolution, patch extraction and NPY v1.0 I/O.

Tensors are plain C-ordered numpy arrays, channels-first (C x H x W for
feature maps, C_out x C_in x k x k for filter banks).
"""

from __future__ import annotations

import ast
import os
import struct

import numpy as np

NPY_MAGIC = b"\x93NUMPY"
NPY_ALIGN = 64

# little-endian (or byte-order free) dtypes accepted on read
_READ_DTYPES = {
    "<f4": np.float32,
    "<f8": np.float64,
    "|i1": np.int8,
    "<i2": np.int16,
    "<i4": np.int32,
    "<i8": np.int64,
    "|u1": np.uint8,
    "<u2": np.uint16,
    "<u4": np.uint32,
    "<u8": np.uint64,
    "|b1": np.bool_,
}


class DimensionError(ValueError):
    """Raised when tensor shapes do not agree."""


class NpyFormatError(ValueError):
    """Malformed or unsupported NPY file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _check_odd_kernel(k: int) -> int:
    if k < 1 or k % 2 == 0:
        raise DimensionError(f"kernel size must be odd and positive, got {k}")
    return (k - 1) // 2


def unfold(x: np.ndarray, k: int, padding: int | None = None) -> np.ndarray:
    """Extract zero-padded k x k patches around every pixel.

    Returns a (C*k*k) x H x W array where channel ``c*k*k + i*k + j`` holds
    ``x[c, a + i - s, b + j - s]`` with ``s = (k - 1) // 2``.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"unfold expects C x H x W, got shape {x.shape}")
    s = _check_odd_kernel(k)
    if padding is None:
        padding = s
    if padding != s:
        raise DimensionError(f"padding must be {s} for k={k}, got {padding}")
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (s, s), (s, s)))
    out = np.empty((c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i, j] = padded[:, i : i + h, j : j + w]
    return out.reshape(c * k * k, h, w)


def conv2d(
    x: np.ndarray,
    filters: np.ndarray,
    bias: np.ndarray,
    padding: int | None = None,
) -> np.ndarray:
    """Same-size 2-D convolution (cross-correlation) with zero padding.

    ``out[d, a, b] = sum_j sum_{p,q} filters[d, j, p+s, q+s] * x[j, a+p, b+q] + bias[d]``.
    Accumulation is always done in float64; the result is cast back to the
    common float type of the inputs.
    """
    x = np.asarray(x)
    filters = np.asarray(filters)
    bias = np.asarray(bias)
    if x.ndim != 3 or filters.ndim != 4:
        raise DimensionError(f"conv2d expects 3-D input and 4-D filters, got {x.shape} and {filters.shape}")
    c_out, c_in, kh, kw = filters.shape
    if kh != kw:
        raise DimensionError(f"filters must be square, got {kh}x{kw}")
    if c_in != x.shape[0]:
        raise DimensionError(f"input has {x.shape[0]} channels but filters expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match {c_out} output channels")
    patches = unfold(x.astype(np.float64, copy=False), kh, padding)
    flat = filters.reshape(c_out, -1).astype(np.float64, copy=False)
    out = np.tensordot(flat, patches, axes=(1, 0)) + bias.astype(np.float64)[:, None, None]
    out_dtype = np.result_type(x.dtype, filters.dtype, bias.dtype, np.float32)
    return out.astype(out_dtype, copy=False)


def _npy_header(arr: np.ndarray) -> bytes:
    descr = np.lib.format.dtype_to_descr(arr.dtype)
    header = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, tuple(arr.shape))
    # magic (6) + version (2) + length field (2) + header + newline, padded to NPY_ALIGN
    pad = -(10 + len(header) + 1) % NPY_ALIGN
    header = header + " " * pad + "\n"
    if len(header) > 0xFFFF:
        raise NpyFormatError("header too long for NPY v1.0", 8)
    return NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header.encode("latin1")


def write_npy(arr: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``arr`` as an NPY v1.0 file (C order, little-endian)."""
    arr = np.asarray(arr)
    descr = np.lib.format.dtype_to_descr(arr.dtype)
    if descr not in _READ_DTYPES:
        raise NpyFormatError(f"unsupported dtype {arr.dtype}", 0)
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(_npy_header(arr))
        fh.write(arr.tobytes(order="C"))


def read_npy(path: str | os.PathLike) -> np.ndarray:
    """Read an NPY v1.0 file written in C order with a supported little-endian dtype."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_npy(raw)


def parse_npy(raw: bytes) -> np.ndarray:
    if len(raw) < 10:
        raise NpyFormatError("file too short for NPY preamble", len(raw))
    if raw[:6] != NPY_MAGIC:
        raise NpyFormatError("bad magic string", 0)
    if raw[6:8] != b"\x01\x00":
        raise NpyFormatError(f"unsupported NPY version {raw[6]}.{raw[7]}", 6)
    (hlen,) = struct.unpack("<H", raw[8:10])
    if len(raw) < 10 + hlen:
        raise NpyFormatError("truncated header", len(raw))
    try:
        text = raw[10 : 10 + hlen].decode("latin1")
        header = ast.literal_eval(text)
    except (SyntaxError, ValueError) as exc:
        raise NpyFormatError(f"unparseable header dict: {exc}", 10) from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError("header must be a dict with descr, fortran_order, shape", 10)
    if header["fortran_order"] is not False:
        raise NpyFormatError("Fortran-ordered arrays are not supported", 10)
    descr = header["descr"]
    if not isinstance(descr, str) or descr not in _READ_DTYPES:
        raise NpyFormatError(f"unsupported dtype {descr!r}", 10)
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise NpyFormatError(f"invalid shape {shape!r}", 10)
    dtype = np.dtype(_READ_DTYPES[descr])
    count = int(np.prod(shape, dtype=np.int64))
    start = 10 + hlen
    need = count * dtype.itemsize
    have = len(raw) - start
    if have < need:
        raise NpyFormatError(f"truncated payload: need {need} bytes, found {have}", len(raw))
    if have > need:
        raise NpyFormatError(f"trailing data: expected {need} payload bytes, found {have}", start + need)
    return np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(shape).copy()
