"""Morton (Z-order) keys for sparse voxel addressing.

Keys interleave the bits of non-negative integer coordinates (x, y, z) as
``... z2 y2 x2 z1 y1 x1 z0 y0 x0`` with x in the least significant
position, 21 bits per axis (63-bit keys).  All functions are vectorized
over numpy arrays of any shape.
"""

from __future__ import annotations

import numpy as np

from .errors import CoordOutOfRange

BITS_PER_AXIS = 21
COORD_MAX = (1 << BITS_PER_AXIS) - 1

_M0 = np.uint64(0x1FFFFF)              # 21 ones
_M1 = np.uint64(0x1F00000000FFFF)
_M2 = np.uint64(0x1F0000FF0000FF)
_M3 = np.uint64(0x100F00F00F00F00F)
_M4 = np.uint64(0x10C30C30C30C30C3)
_M5 = np.uint64(0x1249249249249249)


def _spread(v: np.ndarray) -> np.ndarray:
    # insert two zero bits between each of the 21 coordinate bits
    v = v & _M0
    v = (v | (v << np.uint64(32))) & _M1
    v = (v | (v << np.uint64(16))) & _M2
    v = (v | (v << np.uint64(8))) & _M3
    v = (v | (v << np.uint64(4))) & _M4
    v = (v | (v << np.uint64(2))) & _M5
    return v


def _compact(v: np.ndarray) -> np.ndarray:
    v = v & _M5
    v = (v | (v >> np.uint64(2))) & _M4
    v = (v | (v >> np.uint64(4))) & _M3
    v = (v | (v >> np.uint64(8))) & _M2
    v = (v | (v >> np.uint64(16))) & _M1
    v = (v | (v >> np.uint64(32))) & _M0
    return v


def encode(x, y, z) -> np.ndarray:
    """Interleave integer coordinates into Morton keys (uint64).

    Coordinates outside [0, 2**21 - 1] raise :class:`CoordOutOfRange`.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    z = np.asarray(z)
    for axis, c in zip("xyz", (x, y, z)):
        if np.any((c < 0) | (c > COORD_MAX)):
            raise CoordOutOfRange(f"{axis} coordinate outside [0, {COORD_MAX}]")
    xs = _spread(x.astype(np.uint64))
    ys = _spread(y.astype(np.uint64))
    zs = _spread(z.astype(np.uint64))
    return xs | (ys << np.uint64(1)) | (zs << np.uint64(2))


def decode(key) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`encode`; returns (x, y, z) as int64 arrays."""
    k = np.asarray(key, dtype=np.uint64)
    x = _compact(k).astype(np.int64)
    y = _compact(k >> np.uint64(1)).astype(np.int64)
    z = _compact(k >> np.uint64(2)).astype(np.int64)
    return x, y, z


def neighbor_key(key, axis: int, direction: int, grid_bits: int):
    """Key of the face neighbor along ``axis`` (0=x, 1=y, 2=z).

    ``direction`` is +1 or -1; ``grid_bits`` bounds coordinates to
    [0, 2**grid_bits).  Stepping off the grid raises
    :class:`CoordOutOfRange`.
    """
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if direction not in (1, -1):
        raise ValueError(f"direction must be +1 or -1, got {direction}")
    coords = list(decode(key))
    c = coords[axis] + direction
    if np.any((c < 0) | (c >= (1 << grid_bits))):
        raise CoordOutOfRange(
            f"neighbor step leaves the grid on axis {axis} (bits={grid_bits})"
        )
    coords[axis] = c
    return encode(*coords)
