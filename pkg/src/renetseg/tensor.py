"""Dense array primitives and the binary tensor checkpoint container.

Tensors are plain row-major ``numpy.ndarray`` objects; the helpers here add
the shape validation the rest of the package relies on.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MAGIC = b"RNSEG1"

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _check_extents(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def create(shape: Sequence[int], fill: float = 0.0, dtype=CHECK_DTYPE) -> np.ndarray:
    """Return a contiguous array of ``shape`` with every element set to ``fill``."""
    return np.full(_check_extents(shape), fill, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def concat_channels(maps: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    """Stack ``[C_i, H, W]`` maps along the channel axis in argument order.

    ``axis=1`` handles batched ``[N, C_i, H, W]`` maps.
    """
    if not maps:
        raise ShapeError("concat_channels needs at least one map")
    ref = maps[0].shape
    for m in maps[1:]:
        if m.ndim != len(ref) or m.shape[:axis] != ref[:axis] or m.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"spatial mismatch: {ref} vs {m.shape}")
    return np.ascontiguousarray(np.concatenate(maps, axis=axis))


def permute(t: np.ndarray, order: Sequence[int]) -> np.ndarray:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(t.ndim)):
        raise ValueError(f"{order} is not a permutation of 0..{t.ndim - 1}")
    return np.ascontiguousarray(np.transpose(t, order))


def inverse_permutation(order: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return tuple(inv)


# -- checkpoint container -------------------------------------------------
#
# record := "RNSEG1" | rank:u32 | extents:u32*rank | precision:u8 | payload (LE)
# A container file is a plain concatenation of records.


def write_tensor(fh: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype == np.float32:
        tag, dt = 4, "<f4"
    elif t.dtype == np.float64:
        tag, dt = 8, "<f8"
    else:
        raise CheckpointError(f"unsupported dtype {t.dtype}")
    _check_extents(t.shape)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(struct.pack("<B", tag))
    fh.write(np.ascontiguousarray(t, dtype=dt).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    start = fh.tell() if fh.seekable() else 0
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic at byte {start}: {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag not in (4, 8):
        raise CheckpointError(f"bad precision tag {tag}")
    dt = np.dtype("<f4" if tag == 4 else "<f8")
    count = int(np.prod(shape))
    raw = _read_exact(fh, count * dt.itemsize)
    native = np.float32 if tag == 4 else np.float64
    return np.frombuffer(raw, dtype=dt).astype(native).reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    pos = fh.tell() if fh.seekable() else -1
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated tensor record near byte {pos}")
    return data


def save_tensors(path: str | Path, tensors: Iterable[np.ndarray]) -> None:
    buf = io.BytesIO()
    for t in tensors:
        write_tensor(buf, t)
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    out = []
    while fh.tell() < len(data):
        out.append(read_tensor(fh))
    return out


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    save_tensors(path, [t])


def load_tensor(path: str | Path) -> np.ndarray:
    ts = load_tensors(path)
    if len(ts) != 1:
        raise CheckpointError(f"{path}: expected one tensor, found {len(ts)}")
    return ts[0]
