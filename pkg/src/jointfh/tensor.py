"""Dense float64 tensors, seeded randomness and the JTNS binary format.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
The helpers here add the shape checks, tie-break rules and serialization the
rest of the package relies on.

Randomness comes from numpy's Philox4x32 counter-based generator keyed through
``SeedSequence``; the output stream for a given seed is fixed by the algorithm,
not by the platform.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"JTNS"
FORMAT_VERSION = 1

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


class TensorFormatError(ValueError):
    """Raised when a serialized tensor cannot be decoded."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64, order="C")


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return t


def elementwise(op: str, a, b) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul`` or ``scale`` value-wise.

    ``b`` must have the same shape as ``a`` or be a scalar; no other
    broadcasting is allowed.
    """
    a = as_tensor(a)
    if op == "scale":
        if not np.isscalar(b):
            raise TypeError("scale expects a scalar factor")
        return a * float(b)
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if np.isscalar(b):
        return _OPS[op](a, float(b))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    return _OPS[op](a, b)


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    return a @ b


def reduce(op: str, t, axis: int | None = None):
    """Sum, mean or argmax, over everything or along one axis.

    argmax returns the lowest index among ties (numpy's documented behaviour).
    """
    t = as_tensor(t)
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for rank {t.ndim}")
    if op == "sum":
        r = t.sum(axis=axis)
    elif op == "mean":
        r = t.mean(axis=axis)
    elif op == "argmax":
        r = np.argmax(t, axis=axis)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return r.item() if np.ndim(r) == 0 else r


def strides_for(shape: Sequence[int]) -> tuple[int, ...]:
    out, acc = [], 1
    for n in reversed(shape):
        out.append(acc)
        acc *= n
    return tuple(reversed(out))


def flat_index(coords: Sequence[int], shape: Sequence[int]) -> int:
    if len(coords) != len(shape):
        raise ValueError("coordinate rank does not match shape")
    for c, n in zip(coords, shape):
        if not 0 <= c < n:
            raise IndexError(f"coordinate {tuple(coords)} outside shape {tuple(shape)}")
    return sum(c * s for c, s in zip(coords, strides_for(shape)))


def unravel(index: int, shape: Sequence[int]) -> tuple[int, ...]:
    coords = []
    for s in strides_for(shape):
        q, index = divmod(index, s)
        coords.append(q)
    return tuple(coords)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed``; extra integers select independent streams."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    ss = np.random.SeedSequence([seed, *stream]) if stream else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def rng_normal(rng: np.random.Generator, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    if stddev == 0:
        return np.full(shape, float(mean))
    return rng.normal(mean, stddev, size=shape)


# -- serialization -----------------------------------------------------------

def write_tensor(fh: BinaryIO, t) -> None:
    t = as_tensor(t)
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, t.ndim))
    fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    fh.write(t.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(dims)


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    buf = io.BytesIO(raw)
    t = read_tensor(buf)
    if buf.read(1):
        raise TensorFormatError("trailing bytes after tensor record")
    return t

