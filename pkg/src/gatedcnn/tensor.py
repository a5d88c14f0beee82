"""Dense NCHW array helpers built on numpy.

Feature maps are float32/float64 ndarrays in N x C x H x W layout (row major).
This module provides the channel gather/scatter used by sparse group
execution, shape-checked linear algebra, and a flat binary dump format shared
by checkpoints and the CLI dump flags.

All functions are pure: inputs are never mutated, and repeated calls on
identical inputs produce bitwise-identical results.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

# Test hook for the CLI's --inject-fault flag: when enabled, gather_channels
# corrupts one element so the verification pipeline can prove it catches a
# broken gather.
_INJECT_FAULT = False


def set_fault_injection(enabled: bool) -> None:
    global _INJECT_FAULT
    _INJECT_FAULT = bool(enabled)


def _check_indices(idx: Sequence[int], channels: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("index list must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= channels:
        raise ValueError(
            f"channel index out of bounds: indices {idx.tolist()} for {channels} channels"
        )
    if np.unique(idx).size != idx.size:
        raise ValueError(f"duplicate indices: {idx.tolist()}")
    if not np.all(np.diff(idx) > 0):
        raise ValueError(f"indices must be strictly increasing: {idx.tolist()}")
    return idx


def gather_channels(x: np.ndarray, idx: Sequence[int]) -> np.ndarray:
    """Copy channels ``idx`` of ``x`` (N,C,H,W) into a new N x len(idx) x H x W array.

    ``idx`` must be strictly increasing and within range; output channel j is
    input channel idx[j].
    """
    if x.ndim != 4:
        raise ValueError(f"expected a 4-D NCHW array, got shape {x.shape}")
    idx = _check_indices(idx, x.shape[1])
    out = x[:, idx].copy()
    if _INJECT_FAULT and out.size:
        out.flat[0] += 1.0
    return out


def gather_channels_per_sample(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Batched channel gather where each sample selects its own channel list.

    ``x`` is (N, C, ...) and ``idx`` is (N, K) with each row strictly
    increasing; output row n holds x[n, idx[n]].
    """
    rows = np.arange(x.shape[0])[:, None]
    out = x[rows, idx]
    if _INJECT_FAULT and out.size:
        out.flat[0] += 1.0
    return out


def scatter_channels(src: np.ndarray, idx: Sequence[int], base: np.ndarray) -> np.ndarray:
    """Inverse of :func:`gather_channels`: place ``src`` channels at ``idx`` in a copy of ``base``.

    Output channel idx[j] equals src channel j; every other channel is taken
    from ``base`` unchanged.
    """
    if src.ndim != 4 or base.ndim != 4:
        raise ValueError(f"expected 4-D NCHW arrays, got {src.shape} and {base.shape}")
    idx = _check_indices(idx, base.shape[1])
    if idx.size != src.shape[1]:
        raise ValueError(f"index count {idx.size} does not match source channels {src.shape[1]}")
    if src.shape[0] != base.shape[0] or src.shape[2:] != base.shape[2:]:
        raise ValueError(f"shape mismatch: source {src.shape} vs base {base.shape} on N/H/W")
    out = base.copy()
    out[:, idx] = src
    return out


def _check_2d(name: str, a: np.ndarray) -> None:
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Checked M x K times K x N product."""
    _check_2d("a", a)
    _check_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"extent mismatch: {a.shape} x {b.shape}")
    return a @ b


def _binary_ew(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"extent mismatch in {name}: {np.shape(a)} vs {np.shape(b)}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _binary_ew("add", a, b)
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _binary_ew("sub", a, b)
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _binary_ew("mul", a, b)
    return a * b


def reduce_sum(x: np.ndarray, axes=None) -> np.ndarray:
    return np.sum(x, axis=axes if axes is None else tuple(np.atleast_1d(axes)))


def reduce_mean(x: np.ndarray, axes=None) -> np.ndarray:
    return np.mean(x, axis=axes if axes is None else tuple(np.atleast_1d(axes)))


# ---------------------------------------------------------------------------
# Flat binary dump format
#
#   8 bytes  magic "GMCTNSR1"
#   u8       dtype code (4 = float32, 8 = float64)
#   u32      rank
#   u32[r]   extents
#   raw little-endian elements, row major
# ---------------------------------------------------------------------------

MAGIC = b"GMCTNSR1"
_CODE_OF_DTYPE = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_DTYPE_OF_CODE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x)
    code = _CODE_OF_DTYPE.get(x.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {x.dtype}; expected float32 or float64")
    f.write(MAGIC)
    f.write(struct.pack("<BI", code, x.ndim))
    f.write(struct.pack(f"<{x.ndim}I", *x.shape))
    f.write(x.astype(_DTYPE_OF_CODE[code], copy=False).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(8)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}; not a tensor dump")
    code, rank = struct.unpack("<BI", f.read(5))
    if code not in _DTYPE_OF_CODE:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    dtype = _DTYPE_OF_CODE[code]
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype, count=count)
    return data.reshape(shape).copy()


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_named_tensors(path, tensors: dict) -> None:
    """Write an ordered name -> array mapping as a sequence of dump records."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, arr)


def load_named_tensors(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            out[name] = read_tensor(f)
    return out
